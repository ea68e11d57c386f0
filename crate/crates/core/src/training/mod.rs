//! Objectives, optimizer, schedule, the training loop and ensembling.
//!
//! One optimizer step: every example in the batch is run forward once (plain
//! cross-entropy) or twice with independent dropout masks (R-drop and/or the
//! contrastive term), losses are averaged over the batch and backpropagated.
//! With FGM enabled, the pass-one gradient with respect to the embedding
//! output over the whole batch gives the perturbation for an extra
//! cross-entropy pass whose gradient is added before the update.

mod config;
mod ensemble;
mod losses;
mod optimizer;
mod schedule;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Label};
use crate::encoder::{first_difference, Checkpoint, Encoder, Params, RngState, SeqCache};
use crate::error::{Error, Result};
use crate::eval::macro_f1;
use crate::postprocess::{argmax_label, DEFAULT_TIE_LABEL};
use crate::preprocess::{aeda_augment_with_sep, build_example, BuildPolicy, AEDA_MARKS};
use crate::scalar::Scalar;
use crate::tokenizer::{build_vocab, TokenizedInput, Tokenizer, Vocab, WordTokenizer};

pub use config::{RunConfig, TrainConfig};
pub use ensemble::{ensemble_predict, ensemble_predict_members, predict_probabilities, EnsembleSpec, Fusion};
pub use losses::{
    ce_logit_grad, contrastive_auxiliary_loss, cross_entropy, fgm_perturb, kl_div, rdrop_logit_grads,
    rdrop_loss, ContrastiveOutput, LossBreakdown,
};
pub use optimizer::AdamW;
pub use schedule::{lr_at, warmup_steps};

/// Which loss terms one step optimizes.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Objective {
    /// R-drop weight. `Some(0.0)` still runs two passes and doubles the
    /// cross-entropy.
    pub rdrop: Option<f64>,
    pub fgm_epsilon: Option<f64>,
    /// `(weight, temperature)`.
    pub contrastive: Option<(f64, f64)>,
}

impl Objective {
    /// Terms with a zero weight are switched off.
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Objective {
            rdrop: (cfg.rdrop_alpha > 0.0).then_some(cfg.rdrop_alpha),
            fgm_epsilon: (cfg.fgm_epsilon > 0.0).then_some(cfg.fgm_epsilon),
            contrastive: (cfg.contrastive_weight > 0.0)
                .then_some((cfg.contrastive_weight, cfg.contrastive_temperature)),
        }
    }

    pub fn two_pass(&self) -> bool {
        self.rdrop.is_some() || self.contrastive.is_some()
    }
}

/// A tokenized training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: TokenizedInput,
    pub label: usize,
}

fn scaled<T: Scalar>(g: &[T], s: T) -> Vec<T> {
    g.iter().map(|&x| x * s).collect()
}

fn dropout_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Batch-mean loss gradients for one step, written into `grads` (which is
/// zeroed first).
///
/// Dropout streams: for each example in batch order one seed is drawn from
/// `rng` for pass one and, for two-pass objectives, one for pass two; FGM
/// then draws one seed per example for the adversarial pass.
pub fn compute_gradients<T: Scalar>(
    enc: &Encoder<T>,
    batch: &[Example],
    objective: &Objective,
    rng: &mut ChaCha8Rng,
    grads: &mut Params<T>,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    grads.tensors_mut().into_iter().for_each(|t| t.fill_zero());
    let b = batch.len();
    let inv_b = T::lit(1.0 / b as f64);
    let two = objective.two_pass();

    let mut first: Vec<SeqCache<T>> = Vec::with_capacity(b);
    let mut second: Vec<SeqCache<T>> = Vec::with_capacity(if two { b } else { 0 });
    for ex in batch {
        let s1 = rng.next_u64();
        first.push(enc.forward_train(&ex.input, Some(&mut dropout_rng(s1)), None)?);
        if two {
            let s2 = rng.next_u64();
            second.push(enc.forward_train(&ex.input, Some(&mut dropout_rng(s2)), None)?);
        }
    }

    let mut sum = LossBreakdown::default();
    let mut d_logits: Vec<(Vec<T>, Option<Vec<T>>)> = Vec::with_capacity(b);
    for (i, ex) in batch.iter().enumerate() {
        let c1 = &first[i];
        if two {
            let c2 = &second[i];
            let alpha = objective.rdrop.unwrap_or(0.0);
            let l = rdrop_loss(&c1.probs, &c2.probs, ex.label, alpha)?;
            sum.ce += l.ce;
            sum.kl += l.kl;
            let (g1, g2) = rdrop_logit_grads(&c1.logits, &c2.logits, ex.label, alpha)?;
            d_logits.push((scaled(&g1, inv_b), Some(scaled(&g2, inv_b))));
        } else {
            sum.ce += cross_entropy(&c1.probs, ex.label)?.as_f64();
            d_logits.push((scaled(&ce_logit_grad(&c1.probs, ex.label), inv_b), None));
        }
    }

    let mut extra: Option<(Vec<Vec<T>>, Vec<Vec<T>>)> = None;
    let mut contrastive = 0.0;
    if let Some((weight, temperature)) = objective.contrastive {
        if b >= 2 {
            let r1: Vec<Vec<T>> = first.iter().map(|c| c.sentence.clone()).collect();
            let r2: Vec<Vec<T>> = second.iter().map(|c| c.sentence.clone()).collect();
            let out = contrastive_auxiliary_loss(&r1, &r2, temperature)?;
            contrastive = out.loss;
            let w = T::lit(weight);
            let sc = |v: Vec<Vec<T>>| v.into_iter().map(|g| scaled(&g, w)).collect::<Vec<_>>();
            extra = Some((sc(out.grad1), sc(out.grad2)));
        }
    }

    let mut d_embed: Vec<Vec<T>> = Vec::with_capacity(b);
    for i in 0..b {
        let (g1, g2) = &d_logits[i];
        let e1 = extra.as_ref().map(|e| e.0[i].as_slice());
        d_embed.push(enc.backward(&first[i], g1, e1, grads));
        if let Some(g2) = g2 {
            let e2 = extra.as_ref().map(|e| e.1[i].as_slice());
            enc.backward(&second[i], g2, e2, grads);
        }
    }

    let mut adversarial_ce = 0.0;
    if let Some(eps) = objective.fgm_epsilon {
        let flat: Vec<T> = d_embed.iter().flatten().copied().collect();
        let delta = fgm_perturb(&flat, eps);
        let mut offset = 0;
        for ex in batch {
            let len = ex.input.ids.len() * enc.config.dim;
            let s = rng.next_u64();
            let c = enc.forward_train(&ex.input, Some(&mut dropout_rng(s)), Some(&delta[offset..offset + len]))?;
            offset += len;
            adversarial_ce += cross_entropy(&c.probs, ex.label)?.as_f64();
            let g = scaled(&ce_logit_grad(&c.probs, ex.label), inv_b);
            enc.backward(&c, &g, None, grads);
        }
    }

    let bf = b as f64;
    let alpha = objective.rdrop.unwrap_or(0.0);
    let weight = objective.contrastive.map_or(0.0, |c| c.0);
    let ce = sum.ce / bf;
    let kl = sum.kl / bf;
    let adversarial_ce = adversarial_ce / bf;
    Ok(LossBreakdown {
        ce,
        kl,
        contrastive,
        adversarial_ce,
        total: ce + alpha * kl + weight * contrastive + adversarial_ce,
    })
}

/// Per-epoch training record, written as one JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub ce: f64,
    pub kl: f64,
    pub adversarial_ce: f64,
    pub contrastive: f64,
    pub total: f64,
    pub dev_macro_f1: f64,
    /// Learning rate after the epoch's last step.
    pub lr: f64,
}

pub fn history_to_json_lines(history: &[EpochRecord]) -> Result<String> {
    let mut s = String::new();
    for r in history {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters from the best dev epoch.
    pub checkpoint: Checkpoint<T>,
    pub best_epoch: usize,
    pub best_dev_macro_f1: f64,
    pub history: Vec<EpochRecord>,
}

/// Builds and tokenizes the model input text of every instance.
pub fn encode_dataset(data: &Dataset, policy: &BuildPolicy, tokenizer: &dyn Tokenizer) -> Result<Vec<TokenizedInput>> {
    data.iter()
        .map(|inst| tokenizer.tokenize(&build_example(inst, policy), policy.max_tokens))
        .collect()
}

fn labels_of(data: &Dataset, what: &str) -> Result<Vec<Label>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    data.iter()
        .map(|inst| {
            inst.label.ok_or_else(|| Error::Validation {
                row: inst.id.clone(),
                message: format!("{what} instance has no label"),
            })
        })
        .collect()
}

fn training_vocab(train: &Dataset, cfg: &TrainConfig) -> Result<Vocab> {
    let vocab = build_vocab(train, cfg.min_freq)?;
    if !cfg.aeda_enabled {
        return Ok(vocab);
    }
    let mut words: Vec<String> = vocab.tokens()[Vocab::SPECIALS.len()..].to_vec();
    for mark in AEDA_MARKS {
        if vocab.id(mark).is_none() {
            words.push(mark.to_string());
        }
    }
    Ok(Vocab::from_words(words))
}

/// Inference-mode dev Macro F1, ties to the literal class.
pub fn dev_macro_f1<T: Scalar>(enc: &Encoder<T>, inputs: &[TokenizedInput], gold: &[Label]) -> Result<f64> {
    let mut pred = Vec::with_capacity(inputs.len());
    for x in inputs {
        let p = enc.predict_proba(x)?;
        pred.push(argmax_label(&[p[0].as_f64(), p[1].as_f64()], DEFAULT_TIE_LABEL));
    }
    macro_f1(gold, &pred)
}

/// Trains on `train`, scoring Macro F1 on `dev` after every epoch, and
/// returns the checkpoint of the best epoch (the earliest on ties).
///
/// With `init`, parameters and vocabulary come from that checkpoint and the
/// optimizer starts fresh.
pub fn train<T: Scalar>(
    train: &Dataset,
    dev: &Dataset,
    cfg: &RunConfig,
    init: Option<&Checkpoint<T>>,
) -> Result<TrainOutcome<T>> {
    train_with_progress(train, dev, cfg, init, |_| {})
}

pub fn train_with_progress<T: Scalar>(
    train: &Dataset,
    dev: &Dataset,
    cfg: &RunConfig,
    init: Option<&Checkpoint<T>>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let tc = &cfg.train;
    let policy = &cfg.policy;
    let train_labels = labels_of(train, "training")?;
    let dev_labels = labels_of(dev, "dev")?;

    let vocab = match init {
        Some(ck) => ck.vocab.clone(),
        None => training_vocab(train, tc)?,
    };
    let mut enc_cfg = cfg.encoder.clone();
    if enc_cfg.vocab_size == 0 {
        enc_cfg.vocab_size = vocab.len();
    }
    if enc_cfg.vocab_size != vocab.len() {
        return Err(Error::ConfigMismatch {
            field: "vocab_size".into(),
            expected: vocab.len().to_string(),
            found: enc_cfg.vocab_size.to_string(),
        });
    }
    let mut enc = match init {
        Some(ck) => {
            if let Some((field, expected, found)) = first_difference(&enc_cfg, &ck.encoder.config) {
                return Err(Error::ConfigMismatch { field, expected, found });
            }
            ck.encoder.clone()
        }
        None => Encoder::new(enc_cfg, tc.seed)?,
    };

    let tokenizer = WordTokenizer::with_marker(vocab.clone(), &policy.sep);
    let texts: Vec<String> = train.iter().map(|i| build_example(i, policy)).collect();
    let mut examples = Vec::with_capacity(texts.len() * 2);
    for (text, &y) in texts.iter().zip(&train_labels) {
        examples.push(Example {
            input: tokenizer.tokenize(text, policy.max_tokens)?,
            label: y as usize,
        });
    }
    if tc.aeda_enabled {
        let mut seeds = ChaCha8Rng::seed_from_u64(tc.seed);
        seeds.set_stream(1);
        for (text, &y) in texts.iter().zip(&train_labels) {
            let augmented = aeda_augment_with_sep(text, seeds.next_u64(), &policy.sep)?;
            examples.push(Example {
                input: tokenizer.tokenize(&augmented, policy.max_tokens)?,
                label: y as usize,
            });
        }
    }
    let dev_inputs = encode_dataset(dev, policy, &tokenizer)?;

    let objective = Objective::from_config(tc);
    let mut master = ChaCha8Rng::seed_from_u64(tc.seed);
    master.set_stream(2);
    let mut opt = AdamW::new(&enc.params, tc.weight_decay);
    let mut grads = enc.params.zeros_like();
    let steps_per_epoch = examples.len().div_ceil(tc.batch_size);
    let total_steps = steps_per_epoch * tc.epochs;
    let base_lr = tc.base_lr();
    let start_step = init.map_or(0, |ck| ck.step);

    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = Vec::with_capacity(tc.epochs);
    let mut best: Option<(usize, f64, Encoder<T>, u64, RngState)> = None;
    let mut step = 0usize;
    for epoch in 1..=tc.epochs {
        order.shuffle(&mut master);
        let mut acc = LossBreakdown::default();
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let mut step_rng = ChaCha8Rng::seed_from_u64(master.next_u64());
            let lr = lr_at(step, total_steps, base_lr, tc.warmup_fraction);
            let l = compute_gradients(&enc, &batch, &objective, &mut step_rng, &mut grads)?;
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: step + 1,
                    detail: format!(
                        "ce={} kl={} contrastive={} adversarial_ce={} total={} lr={lr:e}",
                        l.ce, l.kl, l.contrastive, l.adversarial_ce, l.total
                    ),
                });
            }
            opt.step(&mut enc.params, &grads, lr);
            step += 1;
            acc.ce += l.ce;
            acc.kl += l.kl;
            acc.contrastive += l.contrastive;
            acc.adversarial_ce += l.adversarial_ce;
            acc.total += l.total;
        }
        let n = steps_per_epoch as f64;
        let f1 = dev_macro_f1(&enc, &dev_inputs, &dev_labels)?;
        let record = EpochRecord {
            epoch,
            steps: step,
            ce: acc.ce / n,
            kl: acc.kl / n,
            adversarial_ce: acc.adversarial_ce / n,
            contrastive: acc.contrastive / n,
            total: acc.total / n,
            dev_macro_f1: f1,
            lr: lr_at(step, total_steps, base_lr, tc.warmup_fraction),
        };
        on_epoch(&record);
        history.push(record);
        if best.as_ref().is_none_or(|b| f1 > b.1) {
            best = Some((epoch, f1, enc.clone(), start_step + step as u64, RngState::capture(&master)));
        }
    }

    let (best_epoch, best_f1, encoder, best_step, rng) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            encoder,
            step: best_step,
            rng,
            vocab,
            policy: policy.clone(),
        },
        best_epoch,
        best_dev_macro_f1: best_f1,
        history,
    })
}

#[cfg(test)]
mod tests;
