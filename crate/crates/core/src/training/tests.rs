use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::{generate_synthetic_corpus, Setting};
use crate::encoder::{EncoderConfig, Pooling};

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        vocab_size: 20,
        dim: 8,
        layers: 1,
        heads: 2,
        ffn_dim: 12,
        dropout_rate: 0.1,
        max_position: 10,
        pooling: Pooling::Mean,
        num_classes: 2,
    }
}

fn batch(seed: u64, b: usize, vocab: usize) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..b)
        .map(|i| {
            let n = rng.gen_range(3..8);
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

fn small_run() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.train.epochs = 3;
    cfg.train.batch_size = 16;
    cfg.train.lr_zero_shot = 1e-3;
    cfg.encoder.dim = 16;
    cfg.encoder.ffn_dim = 32;
    cfg.encoder.layers = 1;
    cfg.encoder.max_position = 64;
    cfg.policy.max_tokens = 64;
    cfg
}

#[test]
fn zero_weight_objective_is_plain_cross_entropy() {
    let cfg = TrainConfig::default();
    assert_eq!(Objective::from_config(&cfg), Objective::default());
    let enc = Encoder::<f32>::new(tiny_encoder(), 1).unwrap();
    let xs = batch(2, 4, 20);
    let mut grads = enc.params.zeros_like();
    let l = compute_gradients(&enc, &xs, &Objective::default(), &mut ChaCha8Rng::seed_from_u64(3), &mut grads)
        .unwrap();

    // Independent single-pass cross-entropy step.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut want = enc.params.zeros_like();
    let inv_b = 1.0f32 / 4.0;
    let mut ce = 0.0;
    for ex in &xs {
        let mut r = ChaCha8Rng::seed_from_u64(rand::RngCore::next_u64(&mut rng));
        let c = enc.forward_train(&ex.input, Some(&mut r), None).unwrap();
        ce += -(c.probs[ex.label] as f64).ln();
        let mut g = c.probs.clone();
        g[ex.label] -= 1.0;
        let g: Vec<f32> = g.iter().map(|x| x * inv_b).collect();
        enc.backward(&c, &g, None, &mut want);
    }
    assert_eq!(grads, want);
    assert!((l.ce - ce / 4.0).abs() < 1e-6);
    assert_eq!(l.total, l.ce);
    assert_eq!((l.kl, l.contrastive, l.adversarial_ce), (0.0, 0.0, 0.0));
}

#[test]
fn rdrop_kl_is_positive_with_dropout() {
    let enc = Encoder::<f32>::new(tiny_encoder(), 1).unwrap();
    let xs = batch(4, 4, 20);
    let obj = Objective {
        rdrop: Some(1.0),
        ..Objective::default()
    };
    let mut grads = enc.params.zeros_like();
    let l = compute_gradients(&enc, &xs, &obj, &mut ChaCha8Rng::seed_from_u64(0), &mut grads).unwrap();
    assert!(l.kl > 0.0);
    assert!((l.total - (l.ce + l.kl)).abs() < 1e-12);
}

#[test]
fn fgm_and_contrastive_terms_are_reported() {
    let enc = Encoder::<f32>::new(tiny_encoder(), 1).unwrap();
    let xs = batch(5, 4, 20);
    let obj = Objective {
        rdrop: None,
        fgm_epsilon: Some(0.5),
        contrastive: Some((0.3, 0.05)),
    };
    let mut grads = enc.params.zeros_like();
    let l = compute_gradients(&enc, &xs, &obj, &mut ChaCha8Rng::seed_from_u64(0), &mut grads).unwrap();
    assert!(l.adversarial_ce > 0.0 && l.contrastive > 0.0);
    assert!((l.total - (l.ce + 0.3 * l.contrastive + l.adversarial_ce)).abs() < 1e-12);
    assert!(l.is_finite());
}

/// Finite differences of the full step loss with every term switched on.
#[test]
fn combined_objective_gradient_matches_finite_differences() {
    let mut cfg = tiny_encoder();
    cfg.dropout_rate = 0.2;
    let mut enc = Encoder::<f64>::new(cfg, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for t in enc.params.tensors_mut() {
        for x in &mut t.data {
            *x += rng.gen_range(-0.3..0.3);
        }
    }
    let xs = batch(9, 3, 20);
    let obj = Objective {
        rdrop: Some(2.0),
        fgm_epsilon: None,
        contrastive: Some((0.5, 0.5)),
    };
    let loss = |enc: &Encoder<f64>| {
        let mut g = enc.params.zeros_like();
        compute_gradients(enc, &xs, &obj, &mut ChaCha8Rng::seed_from_u64(1), &mut g).unwrap().total
    };
    let mut grads = enc.params.zeros_like();
    compute_gradients(&enc, &xs, &obj, &mut ChaCha8Rng::seed_from_u64(1), &mut grads).unwrap();
    let h = 1e-5;
    let names = enc.params.names();
    for ti in 0..names.len() {
        let len = enc.params.tensors()[ti].len();
        for i in (0..len).step_by(1 + len / 12) {
            let orig = enc.params.tensors()[ti].data[i];
            enc.params.tensors_mut()[ti].data[i] = orig + h;
            let up = loss(&enc);
            enc.params.tensors_mut()[ti].data[i] = orig - h;
            let down = loss(&enc);
            enc.params.tensors_mut()[ti].data[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let ana = grads.tensors()[ti].data[i];
            assert!(
                (fd - ana).abs() <= 1e-6 + 1e-4 * fd.abs().max(ana.abs()),
                "{}[{i}]: fd {fd} vs analytic {ana}",
                names[ti]
            );
        }
    }
}

#[test]
fn training_is_deterministic_and_selects_best_epoch() {
    let corpus = generate_synthetic_corpus(160, 1.0, 3);
    let cfg = small_run();
    let a = train::<f32>(&corpus.train, &corpus.dev, &cfg, None).unwrap();
    let b = train::<f32>(&corpus.train, &corpus.dev, &cfg, None).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.checkpoint, b.checkpoint);
    assert_eq!(a.history.len(), 3);
    let max = a.history.iter().map(|r| r.dev_macro_f1).fold(f64::MIN, f64::max);
    let first = a.history.iter().position(|r| r.dev_macro_f1 == max).unwrap();
    assert_eq!(a.best_epoch, first + 1);
    assert_eq!(a.best_dev_macro_f1, max);
    assert_eq!(a.checkpoint.step, a.history[first].steps as u64);
    let lines = history_to_json_lines(&a.history).unwrap();
    assert_eq!(lines.lines().count(), 3);
}

#[test]
fn warm_start_continues_from_checkpoint() {
    let corpus = generate_synthetic_corpus(160, 1.0, 4);
    let mut cfg = small_run();
    cfg.train.epochs = 1;
    let first = train::<f32>(&corpus.train, &corpus.dev, &cfg, None).unwrap();
    cfg.train.setting = Setting::OneShot;
    let second = train::<f32>(&corpus.train, &corpus.dev, &cfg, Some(&first.checkpoint)).unwrap();
    assert_eq!(second.checkpoint.vocab, first.checkpoint.vocab);
    assert_eq!(second.checkpoint.step, first.checkpoint.step + second.history[0].steps as u64);

    cfg.encoder.dim = 32;
    cfg.encoder.ffn_dim = 64;
    assert!(matches!(
        train::<f32>(&corpus.train, &corpus.dev, &cfg, Some(&first.checkpoint)),
        Err(Error::ConfigMismatch { .. })
    ));
}

#[test]
fn aeda_doubles_steps() {
    let corpus = generate_synthetic_corpus(160, 1.0, 5);
    let mut cfg = small_run();
    cfg.train.epochs = 1;
    let plain = train::<f32>(&corpus.train, &corpus.dev, &cfg, None).unwrap();
    cfg.train.aeda_enabled = true;
    let aug = train::<f32>(&corpus.train, &corpus.dev, &cfg, None).unwrap();
    let n = corpus.train.len();
    assert_eq!(plain.history[0].steps, n.div_ceil(16));
    assert_eq!(aug.history[0].steps, (2 * n).div_ceil(16));
    for mark in crate::preprocess::AEDA_MARKS {
        assert!(aug.checkpoint.vocab.id(mark).is_some());
    }
}

#[test]
fn bad_inputs_are_rejected() {
    let corpus = generate_synthetic_corpus(80, 1.0, 6);
    let cfg = small_run();
    let unlabeled = corpus.dev.filter(|_| true);
    let mut unlabeled = unlabeled;
    unlabeled.instances[0].label = None;
    assert!(matches!(
        train::<f32>(&corpus.train, &unlabeled, &cfg, None),
        Err(Error::Validation { .. })
    ));

    let mut cfg1 = cfg.clone();
    cfg1.train.epochs = 1;
    let ok = train::<f32>(&corpus.train, &corpus.dev, &cfg1, None).unwrap();
    let mut poisoned = ok.checkpoint.clone();
    poisoned.encoder.params.classifier_bias.data[0] = f32::NAN;
    match train::<f32>(&corpus.train, &corpus.dev, &cfg1, Some(&poisoned)) {
        Err(Error::NonFiniteLoss { epoch: 1, step: 1, detail }) => assert!(detail.contains("ce=NaN")),
        other => panic!("expected a non-finite loss, got {other:?}"),
    }
}

fn constant_model(p0: f64) -> Checkpoint<f64> {
    let cfg = EncoderConfig {
        vocab_size: 6,
        dim: 4,
        layers: 1,
        heads: 1,
        ffn_dim: 4,
        dropout_rate: 0.0,
        max_position: 16,
        pooling: Pooling::Cls,
        num_classes: 2,
    };
    let mut params = crate::encoder::Params::<f64>::zeros(&cfg);
    params.classifier_bias.data = vec![p0.ln(), (1.0 - p0).ln()];
    Checkpoint {
        encoder: Encoder::from_params(cfg, params).unwrap(),
        step: 0,
        rng: RngState::capture(&ChaCha8Rng::seed_from_u64(0)),
        vocab: Vocab::from_words(["x".to_string(), "y".to_string()]),
        policy: BuildPolicy {
            max_tokens: 16,
            ..BuildPolicy::default()
        },
    }
}

#[test]
fn ensemble_means_member_probabilities() {
    let data = generate_synthetic_corpus(20, 1.0, 1).dev;
    let a = constant_model(0.8);
    let b = constant_model(0.4);
    let out = ensemble_predict_members(&[a.clone(), b.clone()], &data).unwrap();
    for p in &out.predictions {
        assert!((p.probabilities[0] - 0.6).abs() < 1e-12);
        assert_eq!(p.label, 0);
    }
    let single = ensemble_predict_members(&[a.clone()], &data).unwrap();
    let direct = predict_probabilities(&a, &data).unwrap();
    for (p, d) in single.predictions.iter().zip(&direct) {
        assert_eq!(&p.probabilities, d);
    }
    let weighted = ensemble_predict_members(&[a.clone(), a, b], &data).unwrap();
    assert!((weighted.predictions[0].probabilities[0] - 2.0 / 3.0).abs() < 1e-12);
    assert!(ensemble_predict_members::<f64>(&[], &data).is_err());
}
