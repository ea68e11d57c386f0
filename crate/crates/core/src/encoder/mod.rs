//! A small pre-norm transformer encoder with a pooled softmax classifier.
//!
//! Forward and backward passes are written out by hand. A forward pass over
//! one sequence produces a [`SeqCache`] holding every activation the backward
//! pass needs; [`Encoder::backward`] then accumulates parameter gradients into
//! a [`Params`] of the same layout and returns the gradient with respect to
//! the embedding output (what FGM perturbs).
//!
//! Layout per block: `x + Dropout(Attn(LN(x)))`, then `x + Dropout(FFN(LN(x)))`
//! with a GELU feed-forward. A final layer norm follows the last block.

mod checkpoint;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{
    add_assign, bias_grad_acc, gelu, gelu_grad, linear, matmul_at_acc, matmul_bt_acc, softmax,
    Tensor,
};
use crate::tokenizer::TokenizedInput;

pub use checkpoint::{Checkpoint, RngState};
pub(crate) use checkpoint::first_difference;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Final-layer vector at position 0.
    Cls,
    /// Masked mean over final-layer tokens.
    Mean,
    /// Masked element-wise max over final-layer tokens.
    Max,
    /// Masked mean over the token-wise average of embedding and final layers.
    FirstLastAvg,
    /// Mean of the final-layer vectors inside the MWE token range, `Cls` when
    /// the range is absent.
    MweToken,
}

impl std::str::FromStr for Pooling {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "cls" => Ok(Pooling::Cls),
            "mean" => Ok(Pooling::Mean),
            "max" => Ok(Pooling::Max),
            "first_last_avg" => Ok(Pooling::FirstLastAvg),
            "mwe_token" => Ok(Pooling::MweToken),
            other => Err(format!("unknown pooling `{other}`")),
        }
    }
}

impl Pooling {
    pub fn as_str(self) -> &'static str {
        match self {
            Pooling::Cls => "cls",
            Pooling::Mean => "mean",
            Pooling::Max => "max",
            Pooling::FirstLastAvg => "first_last_avg",
            Pooling::MweToken => "mwe_token",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Shared by the encoder sublayers, the embeddings and the classifier input.
    pub dropout_rate: f64,
    pub max_position: usize,
    pub pooling: Pooling,
    pub num_classes: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 0,
            dim: 64,
            layers: 2,
            heads: 4,
            ffn_dim: 128,
            dropout_rate: 0.1,
            max_position: 128,
            pooling: Pooling::Cls,
            num_classes: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| {
            Err(Error::InvalidConfig {
                key: key.into(),
                message,
            })
        };
        if self.vocab_size < 4 {
            return bad("vocab_size", format!("must hold the 4 specials, got {}", self.vocab_size));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad(
                "heads",
                format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads),
            );
        }
        if self.ffn_dim == 0 || self.max_position == 0 {
            return bad("ffn_dim", "ffn_dim and max_position must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate", format!("must lie in [0, 1), got {}", self.dropout_rate));
        }
        if self.num_classes != 2 {
            return bad("num_classes", format!("must be 2, got {}", self.num_classes));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub attn_norm_gamma: Tensor<T>,
    pub attn_norm_beta: Tensor<T>,
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ffn_norm_gamma: Tensor<T>,
    pub ffn_norm_beta: Tensor<T>,
    pub w_in: Tensor<T>,
    pub b_in: Tensor<T>,
    pub w_out: Tensor<T>,
    pub b_out: Tensor<T>,
}

/// Every trainable tensor. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub token_embedding: Tensor<T>,
    pub position_embedding: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm_gamma: Tensor<T>,
    pub final_norm_beta: Tensor<T>,
    pub classifier_weight: Tensor<T>,
    pub classifier_bias: Tensor<T>,
}

impl<T: Scalar> Params<T> {
    pub fn init<R: rand::Rng>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        Self::build(cfg, |rows, cols| Tensor::trunc_normal(&[rows, cols], INIT_STD, rng))
    }

    /// All-zero weight matrices with the layout of `cfg`.
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        Self::build(cfg, |rows, cols| Tensor::zeros(&[rows, cols]))
    }

    fn build(cfg: &EncoderConfig, mut w: impl FnMut(usize, usize) -> Tensor<T>) -> Self {
        let d = cfg.dim;
        let f = cfg.ffn_dim;
        let token_embedding = w(cfg.vocab_size, d);
        let position_embedding = w(cfg.max_position, d);
        let layers = (0..cfg.layers)
            .map(|_| LayerParams {
                attn_norm_gamma: Tensor::filled(&[d], T::one()),
                attn_norm_beta: Tensor::zeros(&[d]),
                wq: w(d, d),
                bq: Tensor::zeros(&[d]),
                wk: w(d, d),
                bk: Tensor::zeros(&[d]),
                wv: w(d, d),
                bv: Tensor::zeros(&[d]),
                wo: w(d, d),
                bo: Tensor::zeros(&[d]),
                ffn_norm_gamma: Tensor::filled(&[d], T::one()),
                ffn_norm_beta: Tensor::zeros(&[d]),
                w_in: w(d, f),
                b_in: Tensor::zeros(&[f]),
                w_out: w(f, d),
                b_out: Tensor::zeros(&[d]),
            })
            .collect();
        Params {
            token_embedding,
            position_embedding,
            layers,
            final_norm_gamma: Tensor::filled(&[d], T::one()),
            final_norm_beta: Tensor::zeros(&[d]),
            classifier_weight: w(d, cfg.num_classes),
            classifier_bias: Tensor::zeros(&[cfg.num_classes]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(Tensor::fill_zero);
        z
    }

    /// Stable parameter names, in a fixed order.
    pub fn names(&self) -> Vec<String> {
        let mut names = vec![
            "embeddings.token".to_string(),
            "embeddings.position".to_string(),
        ];
        for i in 0..self.layers.len() {
            for part in [
                "attn_norm.gamma",
                "attn_norm.beta",
                "attn.query.weight",
                "attn.query.bias",
                "attn.key.weight",
                "attn.key.bias",
                "attn.value.weight",
                "attn.value.bias",
                "attn.output.weight",
                "attn.output.bias",
                "ffn_norm.gamma",
                "ffn_norm.beta",
                "ffn.in.weight",
                "ffn.in.bias",
                "ffn.out.weight",
                "ffn.out.bias",
            ] {
                names.push(format!("layers.{i}.{part}"));
            }
        }
        names.extend(
            [
                "final_norm.gamma",
                "final_norm.beta",
                "classifier.weight",
                "classifier.bias",
            ]
            .map(String::from),
        );
        names
    }

    /// Tensors in the same order as [`Params::names`].
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.token_embedding, &self.position_embedding];
        for l in &self.layers {
            out.extend([
                &l.attn_norm_gamma,
                &l.attn_norm_beta,
                &l.wq,
                &l.bq,
                &l.wk,
                &l.bk,
                &l.wv,
                &l.bv,
                &l.wo,
                &l.bo,
                &l.ffn_norm_gamma,
                &l.ffn_norm_beta,
                &l.w_in,
                &l.b_in,
                &l.w_out,
                &l.b_out,
            ]);
        }
        out.extend([
            &self.final_norm_gamma,
            &self.final_norm_beta,
            &self.classifier_weight,
            &self.classifier_bias,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for l in &mut self.layers {
            out.extend([
                &mut l.attn_norm_gamma,
                &mut l.attn_norm_beta,
                &mut l.wq,
                &mut l.bq,
                &mut l.wk,
                &mut l.bk,
                &mut l.wv,
                &mut l.bv,
                &mut l.wo,
                &mut l.bo,
                &mut l.ffn_norm_gamma,
                &mut l.ffn_norm_beta,
                &mut l.w_in,
                &mut l.b_in,
                &mut l.w_out,
                &mut l.b_out,
            ]);
        }
        out.extend([
            &mut self.final_norm_gamma,
            &mut self.final_norm_beta,
            &mut self.classifier_weight,
            &mut self.classifier_bias,
        ]);
        out
    }

    /// Whether weight decay applies: weights and embeddings yes, biases and
    /// norm parameters no.
    pub fn decays(name: &str) -> bool {
        name.ends_with(".weight") || name.starts_with("embeddings.")
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        let mut out: Params<U> = Params {
            token_embedding: self.token_embedding.cast(),
            position_embedding: self.position_embedding.cast(),
            layers: Vec::new(),
            final_norm_gamma: self.final_norm_gamma.cast(),
            final_norm_beta: self.final_norm_beta.cast(),
            classifier_weight: self.classifier_weight.cast(),
            classifier_bias: self.classifier_bias.cast(),
        };
        for l in &self.layers {
            out.layers.push(LayerParams {
                attn_norm_gamma: l.attn_norm_gamma.cast(),
                attn_norm_beta: l.attn_norm_beta.cast(),
                wq: l.wq.cast(),
                bq: l.bq.cast(),
                wk: l.wk.cast(),
                bk: l.bk.cast(),
                wv: l.wv.cast(),
                bv: l.bv.cast(),
                wo: l.wo.cast(),
                bo: l.bo.cast(),
                ffn_norm_gamma: l.ffn_norm_gamma.cast(),
                ffn_norm_beta: l.ffn_norm_beta.cast(),
                w_in: l.w_in.cast(),
                b_in: l.b_in.cast(),
                w_out: l.w_out.cast(),
                b_out: l.b_out.cast(),
            });
        }
        out
    }
}

/// Per-sequence result of [`Encoder::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T> {
    pub seq_len: usize,
    /// `layers + 1` entries of `seq_len x dim` (row-major). Entry 0 is the
    /// embedding output, the last entry the final-norm output.
    pub hidden_states: Vec<Vec<T>>,
    /// Per layer, `heads x seq_len x seq_len` attention probabilities.
    pub attentions: Vec<Vec<T>>,
    pub sentence_vector: Vec<T>,
    pub logits: Vec<T>,
    pub probabilities: Vec<T>,
}

struct NormCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

struct LayerCache<T> {
    attn_in: Vec<T>,
    attn_norm: NormCache<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    ctx: Vec<T>,
    attn_drop: Option<Vec<T>>,
    ffn_in: Vec<T>,
    ffn_norm: NormCache<T>,
    pre_act: Vec<T>,
    act: Vec<T>,
    ffn_drop: Option<Vec<T>>,
}

/// Activations of one forward pass over one sequence.
pub struct SeqCache<T> {
    n: usize,
    ids: Vec<usize>,
    mask: Vec<u8>,
    mwe_range: Option<(usize, usize)>,
    emb_drop: Option<Vec<T>>,
    layers: Vec<LayerCache<T>>,
    /// `layers + 1` hidden states, as in [`ForwardOutput::hidden_states`].
    hidden: Vec<Vec<T>>,
    final_norm: NormCache<T>,
    max_index: Option<Vec<usize>>,
    pub sentence: Vec<T>,
    cls_drop: Option<Vec<T>>,
    sentence_dropped: Vec<T>,
    pub logits: Vec<T>,
    pub probs: Vec<T>,
}

impl<T: Scalar> SeqCache<T> {
    pub fn seq_len(&self) -> usize {
        self.n
    }

    fn into_output(self) -> ForwardOutput<T> {
        ForwardOutput {
            seq_len: self.n,
            attentions: self.layers.iter().map(|l| l.probs.clone()).collect(),
            hidden_states: self.hidden,
            sentence_vector: self.sentence,
            logits: self.logits,
            probabilities: self.probs,
        }
    }
}

fn dropout_mask<T: Scalar>(len: usize, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Option<Vec<T>> {
    use rand::Rng;
    let rng = rng?;
    if rate <= 0.0 {
        return None;
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    Some(
        (0..len)
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect(),
    )
}

fn apply_mask<T: Scalar>(x: &mut [T], mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        for (v, &k) in x.iter_mut().zip(m) {
            *v = *v * k;
        }
    }
}

fn layer_norm<T: Scalar>(x: &[T], d: usize, gamma: &[T], beta: &[T]) -> (Vec<T>, NormCache<T>) {
    let rows = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let dn = T::lit(d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let s = T::one() / (var + T::lit(LN_EPS)).sqrt();
        rstd[r] = s;
        for c in 0..d {
            let h = (row[c] - mean) * s;
            xhat[r * d + c] = h;
            y[r * d + c] = gamma[c] * h + beta[c];
        }
    }
    (y, NormCache { xhat, rstd })
}

/// Returns dx; accumulates dgamma and dbeta.
fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    cache: &NormCache<T>,
    d: usize,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Vec<T> {
    let rows = dy.len() / d;
    let mut dx = vec![T::zero(); dy.len()];
    let dn = T::lit(d as f64);
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rows {
        let dy_row = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut sum = T::zero();
        let mut dot = T::zero();
        for c in 0..d {
            dgamma[c] = dgamma[c] + dy_row[c] * xh[c];
            dbeta[c] = dbeta[c] + dy_row[c];
            dxhat[c] = dy_row[c] * gamma[c];
            sum = sum + dxhat[c];
            dot = dot + dxhat[c] * xh[c];
        }
        let s = cache.rstd[r] / dn;
        for c in 0..d {
            dx[r * d + c] = s * (dn * dxhat[c] - sum - xh[c] * dot);
        }
    }
    dx
}

/// Mean of rows `rows` of an `n x d` matrix.
fn mean_rows<T: Scalar>(h: &[T], d: usize, rows: impl Iterator<Item = usize>) -> Vec<T> {
    let mut out = vec![T::zero(); d];
    let mut count = 0usize;
    for r in rows {
        add_assign(&mut out, &h[r * d..(r + 1) * d]);
        count += 1;
    }
    let inv = T::one() / T::lit(count as f64);
    out.iter_mut().for_each(|x| *x = *x * inv);
    out
}

fn real_positions(mask: &[u8]) -> impl Iterator<Item = usize> + '_ {
    mask.iter().enumerate().filter(|(_, &m)| m == 1).map(|(i, _)| i)
}

fn pool_with_index<T: Scalar>(
    hidden: &[Vec<T>],
    d: usize,
    mask: &[u8],
    pooling: Pooling,
    mwe_range: Option<(usize, usize)>,
) -> Result<(Vec<T>, Option<Vec<usize>>)> {
    if !mask.contains(&1) {
        return Err(Error::Contract("attention mask has no real tokens".into()));
    }
    let last = hidden.last().expect("at least one hidden state");
    let out = match pooling {
        Pooling::Cls => last[..d].to_vec(),
        Pooling::Mean => mean_rows(last, d, real_positions(mask)),
        Pooling::Max => {
            let mut best = vec![T::neg_infinity(); d];
            let mut index = vec![0usize; d];
            for r in real_positions(mask) {
                for c in 0..d {
                    let v = last[r * d + c];
                    if v > best[c] {
                        best[c] = v;
                        index[c] = r;
                    }
                }
            }
            return Ok((best, Some(index)));
        }
        Pooling::FirstLastAvg => {
            let first = &hidden[0];
            let half = T::lit(0.5);
            let avg: Vec<T> = first
                .iter()
                .zip(last.iter())
                .map(|(&a, &b)| (a + b) * half)
                .collect();
            mean_rows(&avg, d, real_positions(mask))
        }
        Pooling::MweToken => match mwe_range {
            Some((a, b)) if (a..=b).any(|r| mask.get(r) == Some(&1)) => {
                mean_rows(last, d, (a..=b).filter(|&r| mask[r] == 1))
            }
            _ => last[..d].to_vec(),
        },
    };
    Ok((out, None))
}

/// Reduces per-token hidden states (`n x d` per layer) to one sentence vector.
pub fn pool<T: Scalar>(
    hidden_states: &[Vec<T>],
    dim: usize,
    mask: &[u8],
    pooling: Pooling,
    mwe_token_range: Option<(usize, usize)>,
) -> Result<Vec<T>> {
    pool_with_index(hidden_states, dim, mask, pooling, mwe_token_range).map(|(v, _)| v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub config: EncoderConfig,
    pub params: Params<T>,
}

impl<T: Scalar> Encoder<T> {
    /// Fresh model: truncated-normal weights (std 0.02), unit norm gains,
    /// zero biases.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Params::init(&config, &mut rng);
        Ok(Encoder { config, params })
    }

    pub fn from_params(config: EncoderConfig, params: Params<T>) -> Result<Self> {
        config.validate()?;
        let expected = Params::<T>::zeros(&config);
        for ((name, want), got) in expected
            .names()
            .iter()
            .zip(expected.tensors())
            .zip(params.tensors())
        {
            if want.shape != got.shape {
                return Err(Error::Shape(format!(
                    "{name}: expected {:?}, found {:?}",
                    want.shape, got.shape
                )));
            }
        }
        if expected.layers.len() != params.layers.len() {
            return Err(Error::Shape("layer count differs from config".into()));
        }
        Ok(Encoder { config, params })
    }

    pub fn cast<U: Scalar>(&self) -> Encoder<U> {
        Encoder {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    fn check_input(&self, input: &TokenizedInput) -> Result<()> {
        if input.ids.is_empty() {
            return Err(Error::Contract("empty token sequence".into()));
        }
        if input.ids.len() > self.config.max_position {
            return Err(Error::SequenceTooLong {
                len: input.ids.len(),
                max: self.config.max_position,
            });
        }
        if input.attention_mask.len() != input.ids.len() {
            return Err(Error::Shape("attention mask length differs from ids".into()));
        }
        if let Some(&id) = input.ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::UnknownTokenId {
                id,
                size: self.config.vocab_size,
            });
        }
        if !input.attention_mask.contains(&1) {
            return Err(Error::Contract("attention mask has no real tokens".into()));
        }
        Ok(())
    }

    /// Batched forward pass. Sequences must be padded to equal length. With
    /// `dropout` set, each sequence draws its own mask stream from one `u64`
    /// taken from `dropout` in batch order; without it the pass is
    /// deterministic.
    pub fn forward(
        &self,
        batch: &[TokenizedInput],
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Vec<ForwardOutput<T>>> {
        if let Some(first) = batch.first() {
            if batch.iter().any(|t| t.ids.len() != first.ids.len()) {
                return Err(Error::Shape("batch sequences must share one padded length".into()));
            }
        }
        for t in batch {
            self.check_input(t)?;
        }
        let mut out = Vec::with_capacity(batch.len());
        for t in batch {
            let mut rng = dropout
                .as_deref_mut()
                .map(|r| ChaCha8Rng::seed_from_u64(r.next_u64()));
            let cache = self.forward_seq(t, rng.as_mut(), None);
            out.push(cache.into_output());
        }
        Ok(out)
    }

    /// Inference-mode class probabilities for one sequence.
    pub fn predict_proba(&self, input: &TokenizedInput) -> Result<Vec<T>> {
        self.check_input(input)?;
        Ok(self.forward_seq(input, None, None).probs)
    }

    /// Forward pass over one validated sequence, keeping activations.
    /// `perturbation` (`n x dim`) is added to the embedding output.
    pub fn forward_train(
        &self,
        input: &TokenizedInput,
        dropout: Option<&mut ChaCha8Rng>,
        perturbation: Option<&[T]>,
    ) -> Result<SeqCache<T>> {
        self.check_input(input)?;
        Ok(self.forward_seq(input, dropout, perturbation))
    }

    fn forward_seq(
        &self,
        input: &TokenizedInput,
        mut rng: Option<&mut ChaCha8Rng>,
        perturbation: Option<&[T]>,
    ) -> SeqCache<T> {
        let cfg = &self.config;
        let p = &self.params;
        let d = cfg.dim;
        let n = input.ids.len();
        let rate = cfg.dropout_rate;

        let mut x = vec![T::zero(); n * d];
        for (t, &id) in input.ids.iter().enumerate() {
            let row = &mut x[t * d..(t + 1) * d];
            row.copy_from_slice(p.token_embedding.row(id));
            add_assign(row, p.position_embedding.row(t));
        }
        if let Some(delta) = perturbation {
            add_assign(&mut x, delta);
        }
        let emb_drop = dropout_mask(n * d, rate, rng.as_deref_mut());
        apply_mask(&mut x, &emb_drop);

        let mut hidden = Vec::with_capacity(cfg.layers + 1);
        let mut layers = Vec::with_capacity(cfg.layers);
        for lp in &p.layers {
            let (cache, out) = self.layer_forward(lp, &x, &input.attention_mask, rng.as_deref_mut());
            hidden.push(std::mem::replace(&mut x, out));
            layers.push(cache);
        }
        let (last, final_norm) = layer_norm(&x, d, &p.final_norm_gamma.data, &p.final_norm_beta.data);
        hidden.push(last);

        let (sentence, max_index) = pool_with_index(
            &hidden,
            d,
            &input.attention_mask,
            cfg.pooling,
            input.mwe_token_range,
        )
        .expect("mask validated");
        let cls_drop = dropout_mask(d, rate, rng.as_deref_mut());
        let mut sentence_dropped = sentence.clone();
        apply_mask(&mut sentence_dropped, &cls_drop);
        let logits = linear(
            &sentence_dropped,
            &p.classifier_weight.data,
            &p.classifier_bias.data,
            1,
            d,
            cfg.num_classes,
        );
        let probs = softmax(&logits);

        SeqCache {
            n,
            ids: input.ids.clone(),
            mask: input.attention_mask.clone(),
            mwe_range: input.mwe_token_range,
            emb_drop,
            layers,
            hidden,
            final_norm,
            max_index,
            sentence,
            cls_drop,
            sentence_dropped,
            logits,
            probs,
        }
    }

    fn layer_forward(
        &self,
        lp: &LayerParams<T>,
        x: &[T],
        mask: &[u8],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (LayerCache<T>, Vec<T>) {
        let cfg = &self.config;
        let d = cfg.dim;
        let f = cfg.ffn_dim;
        let n = x.len() / d;
        let heads = cfg.heads;
        let hd = cfg.head_dim();
        let scale = T::one() / T::lit(hd as f64).sqrt();

        let (a, attn_norm) = layer_norm(x, d, &lp.attn_norm_gamma.data, &lp.attn_norm_beta.data);
        let q = linear(&a, &lp.wq.data, &lp.bq.data, n, d, d);
        let k = linear(&a, &lp.wk.data, &lp.bk.data, n, d, d);
        let v = linear(&a, &lp.wv.data, &lp.bv.data, n, d, d);

        let mut probs = vec![T::zero(); heads * n * n];
        let mut ctx = vec![T::zero(); n * d];
        let mut scores = vec![T::zero(); n];
        for h in 0..heads {
            let off = h * hd;
            for i in 0..n {
                let qi = &q[i * d + off..i * d + off + hd];
                let mut max = T::neg_infinity();
                for j in 0..n {
                    if mask[j] == 0 {
                        continue;
                    }
                    let kj = &k[j * d + off..j * d + off + hd];
                    let s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                    scores[j] = s;
                    max = max.max(s);
                }
                let row = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
                let mut sum = T::zero();
                for j in 0..n {
                    if mask[j] == 1 {
                        let e = (scores[j] - max).exp();
                        row[j] = e;
                        sum = sum + e;
                    }
                }
                let inv = T::one() / sum;
                let c = &mut ctx[i * d + off..i * d + off + hd];
                for j in 0..n {
                    if mask[j] == 0 {
                        continue;
                    }
                    row[j] = row[j] * inv;
                    let pj = row[j];
                    let vj = &v[j * d + off..j * d + off + hd];
                    for (o, &vv) in c.iter_mut().zip(vj) {
                        *o = *o + pj * vv;
                    }
                }
            }
        }

        let mut attn_out = linear(&ctx, &lp.wo.data, &lp.bo.data, n, d, d);
        let attn_drop = dropout_mask(n * d, cfg.dropout_rate, rng.as_deref_mut());
        apply_mask(&mut attn_out, &attn_drop);
        let mut ffn_in = x.to_vec();
        add_assign(&mut ffn_in, &attn_out);

        let (b, ffn_norm) = layer_norm(&ffn_in, d, &lp.ffn_norm_gamma.data, &lp.ffn_norm_beta.data);
        let pre_act = linear(&b, &lp.w_in.data, &lp.b_in.data, n, d, f);
        let act: Vec<T> = pre_act.iter().map(|&z| gelu(z)).collect();
        let mut ffn_out = linear(&act, &lp.w_out.data, &lp.b_out.data, n, f, d);
        let ffn_drop = dropout_mask(n * d, cfg.dropout_rate, rng.as_deref_mut());
        apply_mask(&mut ffn_out, &ffn_drop);
        let mut out = ffn_in.clone();
        add_assign(&mut out, &ffn_out);

        let cache = LayerCache {
            attn_in: a,
            attn_norm,
            q,
            k,
            v,
            probs,
            ctx,
            attn_drop,
            ffn_in: b,
            ffn_norm,
            pre_act,
            act,
            ffn_drop,
        };
        (cache, out)
    }

    /// Backpropagates `d_logits` (and optionally an extra gradient on the
    /// pooled sentence vector) through one cached forward pass. Parameter
    /// gradients are added into `grads`; the gradient with respect to the
    /// embedding output (before embedding dropout) is returned.
    pub fn backward(
        &self,
        cache: &SeqCache<T>,
        d_logits: &[T],
        d_sentence: Option<&[T]>,
        grads: &mut Params<T>,
    ) -> Vec<T> {
        let cfg = &self.config;
        let p = &self.params;
        let d = cfg.dim;
        let n = cache.n;
        let c = cfg.num_classes;
        let nl = cfg.layers;

        matmul_at_acc(&cache.sentence_dropped, d_logits, 1, d, c, &mut grads.classifier_weight.data);
        bias_grad_acc(d_logits, c, &mut grads.classifier_bias.data);
        let mut ds = vec![T::zero(); d];
        matmul_bt_acc(d_logits, &p.classifier_weight.data, 1, c, d, &mut ds);
        apply_mask(&mut ds, &cache.cls_drop);
        if let Some(extra) = d_sentence {
            add_assign(&mut ds, extra);
        }

        let mut d_last = vec![T::zero(); n * d];
        let mut d_first: Option<Vec<T>> = None;
        let real = real_positions(&cache.mask).count();
        match cfg.pooling {
            Pooling::Cls => add_assign(&mut d_last[..d], &ds),
            Pooling::Mean => {
                let inv = T::one() / T::lit(real as f64);
                for r in real_positions(&cache.mask) {
                    for k in 0..d {
                        d_last[r * d + k] = d_last[r * d + k] + ds[k] * inv;
                    }
                }
            }
            Pooling::Max => {
                let idx = cache.max_index.as_ref().expect("max pooling index");
                for k in 0..d {
                    d_last[idx[k] * d + k] = d_last[idx[k] * d + k] + ds[k];
                }
            }
            Pooling::FirstLastAvg => {
                let w = T::lit(0.5) / T::lit(real as f64);
                let mut df = vec![T::zero(); n * d];
                for r in real_positions(&cache.mask) {
                    for k in 0..d {
                        d_last[r * d + k] = d_last[r * d + k] + ds[k] * w;
                        df[r * d + k] = df[r * d + k] + ds[k] * w;
                    }
                }
                d_first = Some(df);
            }
            Pooling::MweToken => match cache.mwe_range {
                Some((a, b)) if (a..=b).any(|r| cache.mask.get(r) == Some(&1)) => {
                    let rows: Vec<usize> = (a..=b).filter(|&r| cache.mask[r] == 1).collect();
                    let inv = T::one() / T::lit(rows.len() as f64);
                    for r in rows {
                        for k in 0..d {
                            d_last[r * d + k] = d_last[r * d + k] + ds[k] * inv;
                        }
                    }
                }
                _ => add_assign(&mut d_last[..d], &ds),
            },
        }

        let mut dx = layer_norm_backward(
            &d_last,
            &cache.final_norm,
            d,
            &p.final_norm_gamma.data,
            &mut grads.final_norm_gamma.data,
            &mut grads.final_norm_beta.data,
        );
        for l in (0..nl).rev() {
            dx = self.layer_backward(l, cache, dx, grads);
        }
        if let Some(df) = d_first {
            add_assign(&mut dx, &df);
        }
        apply_mask(&mut dx, &cache.emb_drop);
        for (t, &id) in cache.ids.iter().enumerate() {
            let g = &dx[t * d..(t + 1) * d];
            add_assign(grads.token_embedding.row_mut(id), g);
            add_assign(grads.position_embedding.row_mut(t), g);
        }
        dx
    }

    fn layer_backward(&self, l: usize, cache: &SeqCache<T>, d_out: Vec<T>, grads: &mut Params<T>) -> Vec<T> {
        let cfg = &self.config;
        let lp = &self.params.layers[l];
        let g = &mut grads.layers[l];
        let lc = &cache.layers[l];
        let d = cfg.dim;
        let f = cfg.ffn_dim;
        let n = cache.n;
        let heads = cfg.heads;
        let hd = cfg.head_dim();
        let scale = T::one() / T::lit(hd as f64).sqrt();
        let mask = &cache.mask;

        // Feed-forward sublayer.
        let mut d_ffn = d_out.clone();
        apply_mask(&mut d_ffn, &lc.ffn_drop);
        matmul_at_acc(&lc.act, &d_ffn, n, f, d, &mut g.w_out.data);
        bias_grad_acc(&d_ffn, d, &mut g.b_out.data);
        let mut d_act = vec![T::zero(); n * f];
        matmul_bt_acc(&d_ffn, &lp.w_out.data, n, d, f, &mut d_act);
        for (da, &z) in d_act.iter_mut().zip(&lc.pre_act) {
            *da = *da * gelu_grad(z);
        }
        matmul_at_acc(&lc.ffn_in, &d_act, n, d, f, &mut g.w_in.data);
        bias_grad_acc(&d_act, f, &mut g.b_in.data);
        let mut d_b = vec![T::zero(); n * d];
        matmul_bt_acc(&d_act, &lp.w_in.data, n, f, d, &mut d_b);
        let mut d_mid = layer_norm_backward(
            &d_b,
            &lc.ffn_norm,
            d,
            &lp.ffn_norm_gamma.data,
            &mut g.ffn_norm_gamma.data,
            &mut g.ffn_norm_beta.data,
        );
        add_assign(&mut d_mid, &d_out);

        // Attention sublayer.
        let mut d_attn = d_mid.clone();
        apply_mask(&mut d_attn, &lc.attn_drop);
        matmul_at_acc(&lc.ctx, &d_attn, n, d, d, &mut g.wo.data);
        bias_grad_acc(&d_attn, d, &mut g.bo.data);
        let mut d_ctx = vec![T::zero(); n * d];
        matmul_bt_acc(&d_attn, &lp.wo.data, n, d, d, &mut d_ctx);

        let mut dq = vec![T::zero(); n * d];
        let mut dk = vec![T::zero(); n * d];
        let mut dv = vec![T::zero(); n * d];
        let mut dp = vec![T::zero(); n];
        for h in 0..heads {
            let off = h * hd;
            for i in 0..n {
                let prow = &lc.probs[(h * n + i) * n..(h * n + i + 1) * n];
                let dci = &d_ctx[i * d + off..i * d + off + hd];
                let mut dot = T::zero();
                for j in 0..n {
                    if mask[j] == 0 {
                        continue;
                    }
                    let vj = &lc.v[j * d + off..j * d + off + hd];
                    dp[j] = dci.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                    dot = dot + prow[j] * dp[j];
                    let dvj = &mut dv[j * d + off..j * d + off + hd];
                    for (o, &g) in dvj.iter_mut().zip(dci) {
                        *o = *o + prow[j] * g;
                    }
                }
                for j in 0..n {
                    if mask[j] == 0 {
                        continue;
                    }
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    for k in 0..hd {
                        dq[i * d + off + k] = dq[i * d + off + k] + ds * lc.k[j * d + off + k];
                        dk[j * d + off + k] = dk[j * d + off + k] + ds * lc.q[i * d + off + k];
                    }
                }
            }
        }
        let mut d_a = vec![T::zero(); n * d];
        for (w, dz, gw, gb) in [
            (&lp.wq, &dq, &mut g.wq, &mut g.bq),
            (&lp.wk, &dk, &mut g.wk, &mut g.bk),
            (&lp.wv, &dv, &mut g.wv, &mut g.bv),
        ] {
            matmul_at_acc(&lc.attn_in, dz, n, d, d, &mut gw.data);
            bias_grad_acc(dz, d, &mut gb.data);
            matmul_bt_acc(dz, &w.data, n, d, d, &mut d_a);
        }
        let mut dx = layer_norm_backward(
            &d_a,
            &lc.attn_norm,
            d,
            &lp.attn_norm_gamma.data,
            &mut g.attn_norm_gamma.data,
            &mut g.attn_norm_beta.data,
        );
        add_assign(&mut dx, &d_mid);
        dx
    }
}
