//! Checkpoint container.
//!
//! Layout: the 8-byte magic `MWECKPT1`, a little-endian `u64` header length,
//! a JSON header (config, step, RNG state, vocab, build policy and a tensor
//! index of name / shape / offset / element count), then the raw
//! little-endian tensor data in index order.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Encoder, EncoderConfig, Params};
use crate::error::{Error, Result};
use crate::preprocess::BuildPolicy;
use crate::scalar::Scalar;
use crate::tokenizer::{Vocab, WordTokenizer};

const MAGIC: &[u8; 8] = b"MWECKPT1";

/// Serializable position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        RngState {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = |m: &str| Error::InvalidConfig {
            key: "rng".into(),
            message: m.into(),
        };
        if self.seed.len() != 64 {
            return Err(bad("seed must be 64 hex digits"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16)
                .map_err(|_| bad("seed is not hex"))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("word_pos is not an integer"))?);
        Ok(rng)
    }
}

/// A trained model plus everything needed to use it or resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub encoder: Encoder<T>,
    pub step: u64,
    pub rng: RngState,
    pub vocab: Vocab,
    pub policy: BuildPolicy,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    numel: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    config: EncoderConfig,
    step: u64,
    rng: RngState,
    policy: BuildPolicy,
    vocab: Vec<String>,
    tensors: Vec<TensorEntry>,
}

/// First field whose serialized value differs, as `(field, expected, found)`.
pub(crate) fn first_difference<S: Serialize>(expected: &S, found: &S) -> Option<(String, String, String)> {
    let a = serde_json::to_value(expected).ok()?;
    let b = serde_json::to_value(found).ok()?;
    let (a, b) = (a.as_object()?, b.as_object()?);
    a.iter().find_map(|(k, va)| {
        let vb = b.get(k)?;
        (va != vb).then(|| (k.clone(), va.to_string(), vb.to_string()))
    })
}

impl<T: Scalar> Checkpoint<T> {
    pub fn tokenizer(&self) -> WordTokenizer {
        WordTokenizer::with_marker(self.vocab.clone(), &self.policy.sep)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = &self.encoder.params;
        let mut tensors = Vec::new();
        let mut offset = 0;
        for (name, t) in params.names().into_iter().zip(params.tensors()) {
            tensors.push(TensorEntry {
                name,
                shape: t.shape.clone(),
                offset,
                numel: t.len(),
            });
            offset += t.len() * T::BYTES;
        }
        let header = Header {
            dtype: T::DTYPE.to_string(),
            config: self.encoder.config.clone(),
            step: self.step,
            rng: self.rng.clone(),
            policy: self.policy.clone(),
            vocab: self.vocab.tokens().to_vec(),
            tensors,
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in params.tensors() {
            for &x in &t.data {
                x.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing checkpoint magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..body])?;
        if header.dtype != T::DTYPE {
            return Err(Error::ConfigMismatch {
                field: "dtype".into(),
                expected: T::DTYPE.into(),
                found: header.dtype,
            });
        }
        header.config.validate()?;
        let data = &bytes[body..];

        let mut params: Params<T> = Params::zeros(&header.config);
        let names = params.names();
        if names.len() != header.tensors.len() {
            return Err(bad(format!(
                "expected {} tensors, found {}",
                names.len(),
                header.tensors.len()
            )));
        }
        for ((name, t), entry) in names.iter().zip(params.tensors_mut()).zip(&header.tensors) {
            if &entry.name != name {
                return Err(bad(format!("expected tensor `{name}`, found `{}`", entry.name)));
            }
            if entry.shape != t.shape || entry.numel != t.len() {
                return Err(Error::ConfigMismatch {
                    field: name.clone(),
                    expected: format!("{:?}", t.shape),
                    found: format!("{:?}", entry.shape),
                });
            }
            let end = entry.offset + entry.numel * T::BYTES;
            if end > data.len() {
                return Err(bad(format!("tensor `{name}` runs past end of file")));
            }
            for (x, chunk) in t
                .data
                .iter_mut()
                .zip(data[entry.offset..end].chunks_exact(T::BYTES))
            {
                *x = T::read_le(chunk);
            }
        }
        let vocab = Vocab::from_text(&(header.vocab.join("\n") + "\n"))?;
        if vocab.len() != header.config.vocab_size {
            return Err(Error::ConfigMismatch {
                field: "vocab_size".into(),
                expected: header.config.vocab_size.to_string(),
                found: vocab.len().to_string(),
            });
        }
        Ok(Checkpoint {
            encoder: Encoder {
                config: header.config,
                params,
            },
            step: header.step,
            rng: header.rng,
            vocab,
            policy: header.policy,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Loads and checks the stored config against `expected` field by field.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &EncoderConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        if let Some((field, expected, found)) = first_difference(expected, &ck.encoder.config) {
            return Err(Error::ConfigMismatch {
                field,
                expected,
                found,
            });
        }
        Ok(ck)
    }
}
