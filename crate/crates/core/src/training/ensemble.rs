//! Probability-averaging ensembles.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::encoder::Checkpoint;
use crate::error::{Error, Result};
use crate::postprocess::{Prediction, PredictionSet, DEFAULT_TIE_LABEL};
use crate::scalar::Scalar;

use super::encode_dataset;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Arithmetic mean of member probabilities.
    #[default]
    MeanProb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub checkpoints: Vec<PathBuf>,
    pub fusion: Fusion,
}

impl EnsembleSpec {
    pub fn new(checkpoints: Vec<PathBuf>) -> Self {
        EnsembleSpec {
            checkpoints,
            fusion: Fusion::MeanProb,
        }
    }
}

/// Inference-mode class probabilities of one model for every instance.
pub fn predict_probabilities<T: Scalar>(ck: &Checkpoint<T>, data: &Dataset) -> Result<Vec<[f64; 2]>> {
    let inputs = encode_dataset(data, &ck.policy, &ck.tokenizer())?;
    inputs
        .iter()
        .map(|x| {
            let p = ck.encoder.predict_proba(x)?;
            Ok([p[0].as_f64(), p[1].as_f64()])
        })
        .collect()
}

/// Loads every member (`f32`) and fuses their predictions.
pub fn ensemble_predict(spec: &EnsembleSpec, data: &Dataset) -> Result<PredictionSet> {
    let members = spec
        .checkpoints
        .iter()
        .map(Checkpoint::<f32>::load)
        .collect::<Result<Vec<_>>>()?;
    ensemble_predict_members(&members, data)
}

pub fn ensemble_predict_members<T: Scalar>(members: &[Checkpoint<T>], data: &Dataset) -> Result<PredictionSet> {
    let Some(first) = members.first() else {
        return Err(Error::Contract("an ensemble needs at least one member".into()));
    };
    for m in &members[1..] {
        if m.encoder.config.num_classes != first.encoder.config.num_classes {
            return Err(Error::ConfigMismatch {
                field: "num_classes".into(),
                expected: first.encoder.config.num_classes.to_string(),
                found: m.encoder.config.num_classes.to_string(),
            });
        }
    }
    let mut sums = vec![[0.0f64; 2]; data.len()];
    for m in members {
        for (s, p) in sums.iter_mut().zip(predict_probabilities(m, data)?) {
            s[0] += p[0];
            s[1] += p[1];
        }
    }
    let k = members.len() as f64;
    let predictions = data
        .iter()
        .zip(sums)
        .map(|(inst, s)| Prediction::new(inst, [s[0] / k, s[1] / k], DEFAULT_TIE_LABEL))
        .collect();
    Ok(PredictionSet { predictions })
}
