//! Acceptance suite. Runs every criterion in order and prints one line per
//! criterion; exits non-zero if a hard criterion fails.
//!
//! `ACCEPTANCE_ONLY=1,4` restricts the run to the listed criteria. The real
//! data check runs only when `MWE_IDIOM_TEST_DATA` (official test file) and
//! `MWE_IDIOM_ONE_SHOT_DATA` (official one-shot training file) are set.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mwe_idiom::corpus::{
    generate_synthetic_corpus, load_dataset, split_by_setting, Dataset, Language, Label, Setting,
};
use mwe_idiom::encoder::{Checkpoint, Encoder, EncoderConfig, Params, RngState};
use mwe_idiom::cli::run_ablation;
use mwe_idiom::eval::{macro_f1, mean_sd};
use mwe_idiom::postprocess::{apply_overrides, argmax_label, build_override_table, DEFAULT_TIE_LABEL};
use mwe_idiom::preprocess::{build_example, BuildPolicy};
use mwe_idiom::tokenizer::{build_vocab, TokenizedInput, WordTokenizer};
use mwe_idiom::training::{
    compute_gradients, encode_dataset, ensemble_predict_members, fgm_perturb, kl_div, lr_at, rdrop_loss,
    train_with_progress, AdamW, Example, Objective, RunConfig, TrainOutcome,
};

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
    /// A diagnostic that never gates the run.
    Soft { met: bool, detail: String },
}

fn pass_if(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

// ---------------------------------------------------------------------------
// Brute-force oracles.

fn kl_oracle(p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..p.len() {
        s += p[k] * (p[k] / q[k]).ln();
    }
    s
}

fn rdrop_oracle(p1: &[f64], p2: &[f64], y: usize, alpha: f64) -> f64 {
    -p1[y].ln() - p2[y].ln() + alpha * 0.5 * (kl_oracle(p1, p2) + kl_oracle(p2, p1))
}

/// F1 per class as `2tp / (2tp + fp + fn)`.
fn macro_f1_oracle(gold: &[Label], pred: &[Label]) -> f64 {
    let mut total = 0.0;
    for c in 0..2u8 {
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for (&g, &p) in gold.iter().zip(pred) {
            match (g == c, p == c) {
                (true, true) => tp += 1.0,
                (false, true) => fp += 1.0,
                (true, false) => fn_ += 1.0,
                _ => {}
            }
        }
        let den = 2.0 * tp + fp + fn_;
        total += if den == 0.0 || tp == 0.0 { 0.0 } else { 2.0 * tp / den };
    }
    total / 2.0
}

fn lr_oracle(step: usize, total: usize, base: f64, wf: f64) -> f64 {
    let mut warm = 0usize;
    while (warm as f64) < wf * total as f64 && warm < total {
        warm += 1;
    }
    if step < warm {
        return base * step as f64 / warm as f64;
    }
    if warm == total {
        return base;
    }
    let t = (step - warm) as f64 / (total - warm) as f64;
    base * (std::f64::consts::FRAC_PI_2 * t).cos().powi(2)
}

fn fgm_oracle(g: &[f64], eps: f64) -> Vec<f64> {
    let mut sq = 0.0;
    for x in g {
        sq += x * x;
    }
    let norm = sq.sqrt();
    if norm < 1e-12 {
        return vec![0.0; g.len()];
    }
    g.iter().map(|x| eps * x / norm).collect()
}

fn random_distribution(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|x| x / s).collect()
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, p1: f64) -> Vec<Label> {
    (0..n).map(|_| rng.gen_bool(p1) as Label).collect()
}

fn criterion_1() -> Verdict {
    const CASES: usize = 2000;
    const TOL: f64 = 1e-9;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = [0.0f64; 5];
    let mut bump = |i: usize, err: f64| worst[i] = worst[i].max(if err.is_nan() { f64::INFINITY } else { err });

    for _ in 0..CASES {
        let k = rng.gen_range(2..9);
        let p = random_distribution(&mut rng, k);
        let q = if rng.gen_bool(0.05) { p.clone() } else { random_distribution(&mut rng, k) };
        bump(0, (kl_div(&p, &q).unwrap() - kl_oracle(&p, &q)).abs());

        let y = rng.gen_range(0..k);
        let alpha = rng.gen_range(0.0..5.0);
        bump(1, (rdrop_loss(&p, &q, y, alpha).unwrap().total - rdrop_oracle(&p, &q, y, alpha)).abs());

        let n = rng.gen_range(1..60);
        let skew = rng.gen_range(0.0..1.0);
        let gold = random_labels(&mut rng, n, skew);
        let pred_skew = rng.gen_range(0.0..1.0);
        let pred = if rng.gen_bool(0.1) { gold.clone() } else { random_labels(&mut rng, n, pred_skew) };
        bump(2, (macro_f1(&gold, &pred).unwrap() - macro_f1_oracle(&gold, &pred)).abs());

        let total = rng.gen_range(1..5000);
        let wf = if rng.gen_bool(0.1) { 0.0 } else { rng.gen_range(0.0..0.5) };
        let base = rng.gen_range(1e-6..1.0);
        let step = rng.gen_range(0..=total);
        bump(3, (lr_at(step, total, base, wf) - lr_oracle(step, total, base, wf)).abs());

        let len = rng.gen_range(1..300);
        let g: Vec<f64> = if rng.gen_bool(0.02) {
            vec![0.0; len]
        } else {
            (0..len).map(|_| rng.gen_range(-3.0..3.0)).collect()
        };
        let eps = rng.gen_range(0.0..5.0);
        let err = fgm_perturb(&g, eps)
            .iter()
            .zip(fgm_oracle(&g, eps))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        bump(4, err);
    }
    let elapsed = start.elapsed();
    let names = ["kl_div", "rdrop_loss", "macro_f1", "lr_at", "fgm_perturb"];
    let detail = names
        .iter()
        .zip(worst)
        .map(|(n, w)| format!("{n} {w:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    pass_if(
        worst.iter().all(|&w| w <= TOL) && elapsed < Duration::from_secs(10),
        format!("{CASES} cases each, max abs error: {detail}; {:.2}s", elapsed.as_secs_f64()),
    )
}

// ---------------------------------------------------------------------------

fn tiny_config(vocab_size: usize) -> EncoderConfig {
    EncoderConfig {
        vocab_size,
        max_position: 16,
        ..EncoderConfig::default()
    }
}

fn random_batch(rng: &mut ChaCha8Rng, b: usize, vocab: usize) -> Vec<Example> {
    (0..b)
        .map(|i| {
            let n = rng.gen_range(5..9);
            let mut ids = vec![2];
            ids.extend((1..n).map(|_| rng.gen_range(4..vocab)));
            Example {
                input: TokenizedInput {
                    attention_mask: vec![1; ids.len()],
                    ids,
                    mwe_token_range: None,
                },
                label: i % 2,
            }
        })
        .collect()
}

/// Batch-mean loss rebuilt from forward passes, drawing dropout seeds in the
/// same order as a training step.
fn forward_loss(enc: &Encoder<f64>, batch: &[Example], alpha: Option<f64>, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for ex in batch {
        let mut r1 = ChaCha8Rng::seed_from_u64(rng.next_u64());
        let c1 = enc.forward_train(&ex.input, Some(&mut r1), None).unwrap();
        total += match alpha {
            None => -c1.probs[ex.label].ln(),
            Some(a) => {
                let mut r2 = ChaCha8Rng::seed_from_u64(rng.next_u64());
                let c2 = enc.forward_train(&ex.input, Some(&mut r2), None).unwrap();
                rdrop_loss(&c1.probs, &c2.probs, ex.label, a).unwrap().total
            }
        };
    }
    total / batch.len() as f64
}

const GRAD_NORM_FLOOR: f64 = 1e-6;

/// Worst per-tensor relative error `||fd - g|| / max(||fd||, ||g||, 1e-6)`
/// over a strided sample of every tensor.
fn worst_relative_error(enc: &mut Encoder<f64>, batch: &[Example], alpha: Option<f64>) -> (f64, String) {
    let seed = 17;
    let objective = Objective {
        rdrop: alpha,
        ..Objective::default()
    };
    let mut grads = enc.params.zeros_like();
    compute_gradients(enc, batch, &objective, &mut ChaCha8Rng::seed_from_u64(seed), &mut grads).unwrap();
    let names = enc.params.names();
    let h = 1e-4;
    let mut worst = (0.0, String::new());
    for ti in 0..names.len() {
        let len = enc.params.tensors()[ti].len();
        let stride = if len <= 64 { 1 } else { len / 48 };
        let (mut diff, mut fd_sq, mut an_sq) = (0.0, 0.0, 0.0);
        for i in (0..len).step_by(stride) {
            let orig = enc.params.tensors()[ti].data[i];
            enc.params.tensors_mut()[ti].data[i] = orig + h;
            let up = forward_loss(enc, batch, alpha, seed);
            enc.params.tensors_mut()[ti].data[i] = orig - h;
            let down = forward_loss(enc, batch, alpha, seed);
            enc.params.tensors_mut()[ti].data[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grads.tensors()[ti].data[i];
            diff += (fd - an).powi(2);
            fd_sq += fd * fd;
            an_sq += an * an;
        }
        let scale = fd_sq.sqrt().max(an_sq.sqrt());
        // Key biases shift every attention score in a row equally, so their
        // true gradient is zero and only rounding noise remains.
        let rel = diff.sqrt() / scale.max(GRAD_NORM_FLOOR);
        if rel >= worst.0 {
            worst = (rel, names[ti].clone());
        }
    }
    worst
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let vocab = 16;
    let mut enc = Encoder::<f64>::new(tiny_config(vocab), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // Move away from the near-symmetric initialization so every tensor has a
    // gradient well above finite-difference noise.
    for t in enc.params.tensors_mut() {
        for x in &mut t.data {
            *x += rng.gen_range(-0.1..0.1);
        }
    }
    let batch = random_batch(&mut rng, 2, vocab);
    let tensors = enc.params.names().len();
    let (ce, ce_at) = worst_relative_error(&mut enc, &batch, None);
    let (rd, rd_at) = worst_relative_error(&mut enc, &batch, Some(2.0));
    let elapsed = start.elapsed();
    pass_if(
        ce < 1e-4 && rd < 1e-4 && elapsed < Duration::from_secs(120),
        format!(
            "{tensors} tensors; worst relative error CE {ce:.2e} ({ce_at}), R-drop alpha=2 {rd:.2e} ({rd_at}); {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------

fn criterion_3() -> Verdict {
    let mut failures = Vec::new();

    // A zero-weight R-drop step is two independent cross-entropy passes.
    let vocab = 24;
    let enc = Encoder::<f32>::new(tiny_config(vocab), 5).unwrap();
    let batch = random_batch(&mut ChaCha8Rng::seed_from_u64(6), 6, vocab);
    let objective = Objective {
        rdrop: Some(0.0),
        ..Objective::default()
    };
    let mut grads = enc.params.zeros_like();
    let loss = compute_gradients(&enc, &batch, &objective, &mut ChaCha8Rng::seed_from_u64(7), &mut grads).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut caches = Vec::new();
    for ex in &batch {
        let mut r1 = ChaCha8Rng::seed_from_u64(rng.next_u64());
        let c1 = enc.forward_train(&ex.input, Some(&mut r1), None).unwrap();
        let mut r2 = ChaCha8Rng::seed_from_u64(rng.next_u64());
        let c2 = enc.forward_train(&ex.input, Some(&mut r2), None).unwrap();
        caches.push((c1, c2));
    }
    let inv_b = 1.0f32 / batch.len() as f32;
    let mut want: Params<f32> = enc.params.zeros_like();
    let mut doubled_ce = 0.0;
    for (ex, (c1, c2)) in batch.iter().zip(&caches) {
        for c in [c1, c2] {
            doubled_ce += -(c.probs[ex.label] as f64).ln();
            let mut g = c.probs.clone();
            g[ex.label] -= 1.0;
            let g: Vec<f32> = g.iter().map(|x| x * inv_b).collect();
            enc.backward(c, &g, None, &mut want);
        }
    }
    let mut stepped = enc.params.clone();
    let mut oracle = enc.params.clone();
    AdamW::new(&stepped, 0.01).step(&mut stepped, &grads, 1e-3);
    AdamW::new(&oracle, 0.01).step(&mut oracle, &want, 1e-3);
    if grads != want || stepped != oracle {
        failures.push("R-drop alpha=0 step differs from doubled cross-entropy".to_string());
    }
    let ce_gap = (loss.ce - doubled_ce / batch.len() as f64).abs();
    if loss.total != loss.ce || loss.kl < 0.0 || ce_gap > 1e-6 {
        failures.push(format!("alpha=0 loss breakdown off: {loss:?}"));
    }

    // A single-member ensemble is direct prediction.
    let corpus = generate_synthetic_corpus(200, 1.0, 8);
    let policy = BuildPolicy::default();
    let vocab = build_vocab(&corpus.train, 1).unwrap();
    let cfg = EncoderConfig {
        vocab_size: vocab.len(),
        max_position: policy.max_tokens,
        ..EncoderConfig::default()
    };
    let ck = Checkpoint {
        encoder: Encoder::<f32>::new(cfg, 9).unwrap(),
        step: 0,
        rng: RngState::capture(&ChaCha8Rng::seed_from_u64(0)),
        vocab: vocab.clone(),
        policy: policy.clone(),
    };
    let ensemble = ensemble_predict_members(std::slice::from_ref(&ck), &corpus.dev).unwrap();
    let inputs = encode_dataset(&corpus.dev, &policy, &WordTokenizer::new(vocab)).unwrap();
    let mut mismatched = 0;
    for (pred, x) in ensemble.predictions.iter().zip(&inputs) {
        let p = ck.encoder.predict_proba(x).unwrap();
        let direct = [p[0] as f64, p[1] as f64];
        if pred.probabilities != direct || pred.label != argmax_label(&direct, DEFAULT_TIE_LABEL) {
            mismatched += 1;
        }
    }
    if mismatched > 0 || ensemble.len() != corpus.dev.len() {
        failures.push(format!("single-member ensemble differs on {mismatched} rows"));
    }

    // Overrides are idempotent.
    let table = build_override_table(&corpus.train);
    let once = apply_overrides(&ensemble, &table);
    let twice = apply_overrides(&once, &table);
    if once != twice {
        failures.push("apply_overrides is not idempotent".into());
    }

    if failures.is_empty() {
        Verdict::Pass(format!(
            "alpha=0 step bit-identical ({} tensors), ensemble of one bit-identical on {} rows, overrides idempotent ({} entries)",
            grads.tensors().len(),
            ensemble.len(),
            table.len()
        ))
    } else {
        Verdict::Fail(failures.join("; "))
    }
}

// ---------------------------------------------------------------------------

fn criterion_4() -> Verdict {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let data = load_dataset(dir.join("marking.csv"), true).unwrap();
    let golden = std::fs::read_to_string(dir.join("marking.golden")).unwrap();
    let policy = BuildPolicy::default();
    let built: String = data
        .iter()
        .map(|inst| format!("{}\t{}\n", inst.id, build_example(inst, &policy)))
        .collect();
    if built == golden {
        Verdict::Pass(format!("{} rows match the golden file", data.len()))
    } else {
        Verdict::Fail(format!("built\n{built}expected\n{golden}"))
    }
}

// ---------------------------------------------------------------------------

/// Zero-shot training followed by a one-shot warm start.
fn two_stage(corpus_seed: u64) -> (TrainOutcome<f32>, TrainOutcome<f32>, Duration) {
    let start = Instant::now();
    let corpus = generate_synthetic_corpus(2000, 1.0, corpus_seed);
    let (train_zs, _) = split_by_setting(&corpus.train);
    let (dev_zs, _) = split_by_setting(&corpus.dev);
    let mut cfg = RunConfig::default();
    cfg.train.setting = Setting::ZeroShot;
    let zs = train_with_progress::<f32>(&train_zs, &dev_zs, &cfg, None, |_| {}).unwrap();
    cfg.train.setting = Setting::OneShot;
    let os = train_with_progress::<f32>(&corpus.train, &corpus.dev, &cfg, Some(&zs.checkpoint), |_| {}).unwrap();
    (zs, os, start.elapsed())
}

fn criterion_5() -> Verdict {
    let (zs, os, t1) = two_stage(0);
    let (zs2, os2, t2) = two_stage(0);
    let reproducible = zs.history == zs2.history
        && os.history == os2.history
        && os.checkpoint == os2.checkpoint;
    let f1 = os.best_dev_macro_f1;
    let limit = Duration::from_secs(300);
    pass_if(
        f1 >= 0.95 && t1 < limit && reproducible,
        format!(
            "dev Macro F1 {f1:.4} (zero-shot stage {:.4}), {:.0}s per run ({:.0}s rerun), rerun bit-exact: {reproducible}",
            zs.best_dev_macro_f1,
            t1.as_secs_f64(),
            t2.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------

fn gold_labels(d: &Dataset) -> Vec<Label> {
    d.iter().map(|i| i.label.expect("labeled")).collect()
}

fn criterion_6() -> Verdict {
    let corpus = generate_synthetic_corpus(1000, 0.85, 11);
    let (_, dev_os) = split_by_setting(&corpus.dev);
    let table = build_override_table(&corpus.train);
    let all = corpus.all();
    let consistent = corpus.single_label_mwes.iter().all(|(mwe, label)| {
        table.get(mwe) == Some(*label) && all.iter().filter(|i| &i.mwe == mwe).all(|i| i.label == Some(*label))
    });
    if !consistent {
        return Verdict::Fail("single-label MWEs do not keep their label in dev".into());
    }

    let mut cfg = RunConfig::default();
    cfg.train.setting = Setting::OneShot;
    cfg.train.seed = 11;
    let out = train_with_progress::<f32>(&corpus.train, &dev_os, &cfg, None, |_| {}).unwrap();
    let raw = ensemble_predict_members(std::slice::from_ref(&out.checkpoint), &dev_os).unwrap();
    let post = apply_overrides(&raw, &table);
    let gold = gold_labels(&dev_os);
    let raw_f1 = macro_f1(&gold, &raw.labels()).unwrap();
    let post_f1 = macro_f1(&gold, &post.labels()).unwrap();
    let changed = post.predictions.iter().filter(|p| p.overridden).count();
    pass_if(
        post_f1 >= raw_f1,
        format!(
            "one-shot dev ({} rows): raw {raw_f1:.4}, post-processed {post_f1:.4}, {changed} rows overridden",
            dev_os.len()
        ),
    )
}

// ---------------------------------------------------------------------------

fn criterion_7() -> Verdict {
    let report = run_ablation(&RunConfig::default(), &["baseline", "+rdrop"], 1000, 0.85, 0..5u64, |_, _, _| {})
        .unwrap();
    for line in report.to_text().lines() {
        println!("    {line}");
    }
    let (base, rdrop) = (report.row("baseline").unwrap(), report.row("+rdrop").unwrap());
    let wins = base.zero_shot.iter().zip(&rdrop.zero_shot).filter(|(b, r)| r >= b).count();
    let (bm, _) = mean_sd(&base.zero_shot);
    let (rm, _) = mean_sd(&rdrop.zero_shot);
    Verdict::Soft {
        met: wins >= 3,
        detail: format!("zero-shot mean baseline {bm:.4}, +rdrop {rm:.4}; +rdrop >= baseline in {wins}/5 seeds"),
    }
}

// ---------------------------------------------------------------------------

fn criterion_8() -> Verdict {
    let (Ok(test), Ok(one_shot)) = (std::env::var("MWE_IDIOM_TEST_DATA"), std::env::var("MWE_IDIOM_ONE_SHOT_DATA")) else {
        return Verdict::Skip("set MWE_IDIOM_TEST_DATA and MWE_IDIOM_ONE_SHOT_DATA to the official files".into());
    };
    let test = load_dataset(&test, false).unwrap();
    let one_shot = load_dataset(&one_shot, true).unwrap();
    let sizes: Vec<(Language, usize)> = test.count_by_language();
    let count = |d: &[(Language, usize)], l: Language| d.iter().find(|(x, _)| *x == l).map_or(0, |x| x.1);
    let test_ok = count(&sizes, Language::EN) == 916 && count(&sizes, Language::PT) == 713 && count(&sizes, Language::GL) == 713;
    let train_sizes = one_shot.count_by_language();
    let train_ok = train_sizes.iter().filter(|(_, n)| *n > 0).all(|(_, n)| *n == 73);
    let tokenizer = WordTokenizer::new(build_vocab(&test, 1).unwrap());
    let stats = mwe_idiom::corpus::length_statistics(&test, &tokenizer).unwrap();
    let mean = stats.length.mean;
    let mean_ok = (mean - 42.6).abs() <= 0.15 * 42.6;
    pass_if(
        test_ok && train_ok && mean_ok,
        format!("test sizes {sizes:?}, one-shot train sizes {train_sizes:?}, mean target length {mean:.1}"),
    )
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(u8, &str, fn() -> Verdict); 8] = [
        (1, "numeric kernels match brute-force oracles", criterion_1),
        (2, "encoder gradients match finite differences", criterion_2),
        (3, "reduction identities", criterion_3),
        (4, "marking rule golden file", criterion_4),
        (5, "synthetic end-to-end training", criterion_5),
        (6, "post-processing never lowers one-shot Macro F1", criterion_6),
        (7, "R-drop vs baseline ablation (soft)", criterion_7),
        (8, "statistics on the official data", criterion_8),
    ];
    let only: Option<Vec<u8>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());

    let mut failed = 0;
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let verdict = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Verdict::Fail(format!("panicked: {msg}"))
        });
        let (tag, detail) = match verdict {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Verdict::Skip(d) => ("SKIP", d),
            Verdict::Soft { met, detail } => (if met { "PASS" } else { "SOFT-MISS" }, detail),
        };
        println!("criterion {id} [{tag}] {name}: {detail}");
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
