//! Training objectives and their gradients with respect to logits or
//! sentence vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::softmax;

const PROB_FLOOR: f64 = 1e-12;
const NORM_FLOOR: f64 = 1e-12;

/// Per-component losses for one example or the mean over a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub kl: f64,
    pub contrastive: f64,
    pub adversarial_ce: f64,
    /// `ce + alpha * kl + contrastive_weight * contrastive + adversarial_ce`.
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.ce, self.kl, self.contrastive, self.adversarial_ce, self.total]
            .iter()
            .all(|x| x.is_finite())
    }
}

/// Raises `p` to the floor. NaN passes through so divergence stays visible.
fn clamp<T: Scalar>(p: T) -> T {
    let floor = T::lit(PROB_FLOOR);
    if p < floor {
        floor
    } else {
        p
    }
}

fn clamped_ln<T: Scalar>(p: T) -> T {
    clamp(p).ln()
}

fn check_label(y: usize, n: usize) -> Result<()> {
    if y >= n {
        return Err(Error::Contract(format!("label {y} out of range for {n} classes")));
    }
    Ok(())
}

/// `sum_k p_k ln(p_k / q_k)`, entries clamped to at least 1e-12 first.
pub fn kl_div<T: Scalar>(p: &[T], q: &[T]) -> Result<T> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "kl_div length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    Ok(p
        .iter()
        .zip(q)
        .map(|(&pk, &qk)| {
            let pk = clamp(pk);
            pk * (pk.ln() - clamped_ln(qk))
        })
        .sum())
}

pub fn cross_entropy<T: Scalar>(p: &[T], y: usize) -> Result<T> {
    check_label(y, p.len())?;
    Ok(-clamped_ln(p[y]))
}

/// Two-pass R-drop loss for one example: doubled cross-entropy plus
/// `alpha` times the symmetrized KL between the passes.
pub fn rdrop_loss<T: Scalar>(p1: &[T], p2: &[T], y: usize, alpha: f64) -> Result<LossBreakdown> {
    if alpha < 0.0 || alpha.is_nan() {
        return Err(Error::InvalidConfig {
            key: "rdrop_alpha".into(),
            message: format!("must be >= 0, got {alpha}"),
        });
    }
    let ce = cross_entropy(p1, y)?.as_f64() + cross_entropy(p2, y)?.as_f64();
    let kl = (kl_div(p1, p2)?.as_f64() + kl_div(p2, p1)?.as_f64()) / 2.0;
    Ok(LossBreakdown {
        ce,
        kl,
        total: ce + alpha * kl,
        ..LossBreakdown::default()
    })
}

/// Gradient of cross-entropy with respect to the logits: `p - onehot(y)`.
pub fn ce_logit_grad<T: Scalar>(p: &[T], y: usize) -> Vec<T> {
    let mut g = p.to_vec();
    g[y] = g[y] - T::one();
    g
}

/// Gradients of [`rdrop_loss`]'s total with respect to the two logit vectors.
pub fn rdrop_logit_grads<T: Scalar>(z1: &[T], z2: &[T], y: usize, alpha: f64) -> Result<(Vec<T>, Vec<T>)> {
    if z1.len() != z2.len() {
        return Err(Error::Shape("logit vectors differ in length".into()));
    }
    check_label(y, z1.len())?;
    let p = softmax(z1);
    let q = softmax(z2);
    let half = T::lit(alpha / 2.0);
    // d KL(p||q) / dz1 = p * (a - E_p[a]) with a = ln p - ln q, and
    // d KL(p||q) / dz2 = q - p; symmetric for the reverse direction.
    let a: Vec<T> = p.iter().zip(&q).map(|(&pk, &qk)| clamped_ln(pk) - clamped_ln(qk)).collect();
    let ea: T = p.iter().zip(&a).map(|(&pk, &ak)| pk * ak).sum();
    let eb: T = q.iter().zip(&a).map(|(&qk, &ak)| -(qk * ak)).sum();
    let mut g1 = ce_logit_grad(&p, y);
    let mut g2 = ce_logit_grad(&q, y);
    for k in 0..p.len() {
        let kl1 = p[k] * (a[k] - ea) + (p[k] - q[k]);
        let kl2 = q[k] * (-a[k] - eb) + (q[k] - p[k]);
        g1[k] = g1[k] + half * kl1;
        g2[k] = g2[k] + half * kl2;
    }
    Ok((g1, g2))
}

/// `epsilon * g / ||g||` over the whole tensor; zero when `||g|| < 1e-12`.
pub fn fgm_perturb<T: Scalar>(embedding_grad: &[T], epsilon: f64) -> Vec<T> {
    let norm = embedding_grad
        .iter()
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm < NORM_FLOOR {
        return vec![T::zero(); embedding_grad.len()];
    }
    let scale = T::lit(epsilon / norm);
    embedding_grad.iter().map(|&g| g * scale).collect()
}

/// Loss and gradients of the contrastive objective.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveOutput<T> {
    pub loss: f64,
    pub grad1: Vec<Vec<T>>,
    pub grad2: Vec<Vec<T>>,
}

/// Symmetric InfoNCE over cosine similarities divided by `temperature`.
/// Row `i` of `reps1` is the positive for row `i` of `reps2`; every other row
/// is a negative. The two directions are averaged.
pub fn contrastive_auxiliary_loss<T: Scalar>(
    reps1: &[Vec<T>],
    reps2: &[Vec<T>],
    temperature: f64,
) -> Result<ContrastiveOutput<T>> {
    let b = reps1.len();
    if b < 2 {
        return Err(Error::Contract("contrastive loss needs a batch of at least 2".into()));
    }
    if reps2.len() != b {
        return Err(Error::Shape("contrastive views differ in batch size".into()));
    }
    if temperature <= 0.0 || temperature.is_nan() {
        return Err(Error::InvalidConfig {
            key: "contrastive_temperature".into(),
            message: format!("must be > 0, got {temperature}"),
        });
    }
    let d = reps1[0].len();
    if reps1.iter().chain(reps2).any(|r| r.len() != d) {
        return Err(Error::Shape("contrastive representations differ in width".into()));
    }
    let normalize = |r: &Vec<T>| {
        let norm = r.iter().map(|&x| x * x).sum::<T>().sqrt().max(T::lit(NORM_FLOOR));
        (r.iter().map(|&x| x / norm).collect::<Vec<T>>(), norm)
    };
    let (u, un): (Vec<_>, Vec<_>) = reps1.iter().map(normalize).unzip();
    let (v, vn): (Vec<_>, Vec<_>) = reps2.iter().map(normalize).unzip();
    let inv_t = T::lit(1.0 / temperature);
    let dot = |a: &[T], c: &[T]| a.iter().zip(c).map(|(&x, &y)| x * y).sum::<T>();
    let s: Vec<Vec<T>> = (0..b)
        .map(|i| (0..b).map(|j| dot(&u[i], &v[j]) * inv_t).collect())
        .collect();

    let mut loss = 0.0;
    let scale = T::lit(1.0 / (2.0 * b as f64));
    let mut ds = vec![vec![T::zero(); b]; b];
    for i in 0..b {
        let row = softmax(&s[i]);
        loss -= clamped_ln(row[i]).as_f64();
        for j in 0..b {
            let target = if i == j { T::one() } else { T::zero() };
            ds[i][j] = ds[i][j] + (row[j] - target) * scale;
        }
    }
    for j in 0..b {
        let col: Vec<T> = (0..b).map(|i| s[i][j]).collect();
        let col = softmax(&col);
        loss -= clamped_ln(col[j]).as_f64();
        for i in 0..b {
            let target = if i == j { T::one() } else { T::zero() };
            ds[i][j] = ds[i][j] + (col[i] - target) * scale;
        }
    }
    loss /= 2.0 * b as f64;

    // Through the similarity matrix, then through the normalization.
    let through_norm = |unit: &[T], norm: T, du: Vec<T>| -> Vec<T> {
        let proj = dot(unit, &du);
        unit.iter().zip(&du).map(|(&x, &g)| (g - x * proj) / norm).collect()
    };
    let mut grad1 = Vec::with_capacity(b);
    let mut grad2 = Vec::with_capacity(b);
    for i in 0..b {
        let mut du = vec![T::zero(); d];
        let mut dv = vec![T::zero(); d];
        for j in 0..b {
            let a = ds[i][j] * inv_t;
            let c = ds[j][i] * inv_t;
            for k in 0..d {
                du[k] = du[k] + a * v[j][k];
                dv[k] = dv[k] + c * u[j][k];
            }
        }
        grad1.push(through_norm(&u[i], un[i], du));
        grad2.push(through_norm(&v[i], vn[i], dv));
    }
    Ok(ContrastiveOutput { loss, grad1, grad2 })
}
