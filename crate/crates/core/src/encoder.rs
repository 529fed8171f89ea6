//! Contextual token encoders: token ids in, one hidden vector per token out.

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{flat, flat_mut, hash_unit};

pub const DEFAULT_ENCODER: &str = "allenai/scibert_scivocab_uncased";
pub const DEFAULT_HIDDEN: usize = 768;
pub const DEFAULT_MAX_TOKENS: usize = 512;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("{got} tokens exceed the encoder capacity of {max}")]
    TooLong { got: usize, max: usize },
    #[error("empty token sequence")]
    Empty,
    #[error("token id {id} outside a vocabulary of {vocab}")]
    UnknownId { id: u32, vocab: usize },
    #[error("encoder weights: {0}")]
    Weights(String),
}

/// Maps a token-id sequence of length `n` to an `n × d` matrix; row 0 is
/// the sequence-level sentinel representation. Deterministic in
/// evaluation mode.
pub trait ContextEncoder: Send + Sync {
    fn identifier(&self) -> &str;
    fn hidden_size(&self) -> usize;
    fn max_tokens(&self) -> usize;
    fn encode(&self, ids: &[u32]) -> Result<Array2<f64>, EncoderError>;
}

/// Stub encoder: every entry is a seeded hash of (token id, component)
/// plus a damped hash of (position, component). No weights, no training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HashEncoder {
    pub seed: u64,
    pub hidden_size: usize,
    pub max_tokens: usize,
    /// Scale of the positional component relative to the token component.
    pub position_weight: f64,
}

impl HashEncoder {
    pub fn new(seed: u64, hidden_size: usize) -> HashEncoder {
        HashEncoder {
            seed,
            hidden_size,
            max_tokens: DEFAULT_MAX_TOKENS,
            position_weight: 0.1,
        }
    }
}

impl ContextEncoder for HashEncoder {
    fn identifier(&self) -> &str {
        "hash"
    }

    fn hidden_size(&self) -> usize {
        self.hidden_size
    }

    fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    fn encode(&self, ids: &[u32]) -> Result<Array2<f64>, EncoderError> {
        check_len(ids.len(), self.max_tokens)?;
        let token_seed = self.seed;
        let position_seed = self.seed ^ 0x5DEE_CE66_D1CE_5EED;
        Ok(Array2::from_shape_fn((ids.len(), self.hidden_size), |(i, k)| {
            hash_unit(token_seed, u64::from(ids[i]), k as u64)
                + self.position_weight * hash_unit(position_seed, i as u64, k as u64)
        }))
    }
}

/// Trainable lookup encoder: token embedding plus learned position
/// embedding. The smallest encoder whose weights take part in training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingEncoder {
    pub tokens: Array2<f64>,
    pub positions: Array2<f64>,
}

impl EmbeddingEncoder {
    pub fn new(vocab_size: usize, hidden_size: usize, max_tokens: usize, rng: &mut impl Rng) -> EmbeddingEncoder {
        let mut draw = || rng.random_range(-1.0..=1.0);
        EmbeddingEncoder {
            tokens: Array2::from_shape_simple_fn((vocab_size, hidden_size), &mut draw),
            positions: Array2::from_shape_simple_fn((max_tokens, hidden_size), &mut draw).mapv(|v| 0.1 * v),
        }
    }
}

impl ContextEncoder for EmbeddingEncoder {
    fn identifier(&self) -> &str {
        "embedding"
    }

    fn hidden_size(&self) -> usize {
        self.tokens.ncols()
    }

    fn max_tokens(&self) -> usize {
        self.positions.nrows()
    }

    fn encode(&self, ids: &[u32]) -> Result<Array2<f64>, EncoderError> {
        check_len(ids.len(), self.max_tokens())?;
        let vocab = self.tokens.nrows();
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(EncoderError::UnknownId { id, vocab });
        }
        let mut out = Array2::zeros((ids.len(), self.hidden_size()));
        for (i, (&id, mut row)) in ids.iter().zip(out.axis_iter_mut(Axis(0))).enumerate() {
            row.assign(&(&self.tokens.row(id as usize) + &self.positions.row(i)));
        }
        Ok(out)
    }
}

fn check_len(n: usize, max: usize) -> Result<(), EncoderError> {
    if n == 0 {
        return Err(EncoderError::Empty);
    }
    if n > max {
        return Err(EncoderError::TooLong { got: n, max });
    }
    Ok(())
}

/// The encoders a model can carry, serialized with their configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Encoder {
    Hash(HashEncoder),
    Embedding(EmbeddingEncoder),
}

/// Gradients for the trainable part of an encoder, one array per parameter
/// group in `Encoder::params_mut` order.
pub type EncoderGrads = Vec<Array2<f64>>;

impl Encoder {
    pub fn hash(seed: u64, hidden_size: usize) -> Encoder {
        Encoder::Hash(HashEncoder::new(seed, hidden_size))
    }

    pub fn embedding(vocab_size: usize, hidden_size: usize, max_tokens: usize, rng: &mut impl Rng) -> Encoder {
        Encoder::Embedding(EmbeddingEncoder::new(vocab_size, hidden_size, max_tokens, rng))
    }

    fn inner(&self) -> &dyn ContextEncoder {
        match self {
            Encoder::Hash(e) => e,
            Encoder::Embedding(e) => e,
        }
    }

    pub fn is_trainable(&self) -> bool {
        !matches!(self, Encoder::Hash(_))
    }

    pub fn zero_grads(&self) -> EncoderGrads {
        match self {
            Encoder::Hash(_) => Vec::new(),
            Encoder::Embedding(e) => vec![Array2::zeros(e.tokens.raw_dim()), Array2::zeros(e.positions.raw_dim())],
        }
    }

    /// Accumulate into `grads` the gradient of a loss whose derivative with
    /// respect to `encode(ids)` is `d_hidden`.
    pub fn backward(&self, ids: &[u32], d_hidden: &Array2<f64>, grads: &mut EncoderGrads) {
        if let Encoder::Embedding(_) = self {
            for (i, (&id, row)) in ids.iter().zip(d_hidden.axis_iter(Axis(0))).enumerate() {
                let mut tok = grads[0].row_mut(id as usize);
                tok += &row;
                let mut pos = grads[1].row_mut(i);
                pos += &row;
            }
        }
    }

    pub fn params(&self) -> Vec<&[f64]> {
        match self {
            Encoder::Hash(_) => Vec::new(),
            Encoder::Embedding(e) => vec![flat(&e.tokens), flat(&e.positions)],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Encoder::Hash(_) => Vec::new(),
            Encoder::Embedding(e) => vec![flat_mut(&mut e.tokens), flat_mut(&mut e.positions)],
        }
    }
}

impl ContextEncoder for Encoder {
    fn identifier(&self) -> &str {
        self.inner().identifier()
    }

    fn hidden_size(&self) -> usize {
        self.inner().hidden_size()
    }

    fn max_tokens(&self) -> usize {
        self.inner().max_tokens()
    }

    fn encode(&self, ids: &[u32]) -> Result<Array2<f64>, EncoderError> {
        self.inner().encode(ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_encoder_shape_and_determinism() {
        let e = HashEncoder::new(1, 16);
        let h = e.encode(&[2, 10, 11, 3]).unwrap();
        assert_eq!(h.dim(), (4, 16));
        assert_eq!(h, e.encode(&[2, 10, 11, 3]).unwrap());
        // Same token at two positions differs only through the damped
        // positional part.
        let h2 = e.encode(&[10, 10]).unwrap();
        let diff = (&h2.row(0) - &h2.row(1)).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(diff > 0.0 && diff <= 0.2 + 1e-12);
    }

    #[test]
    fn rejects_bad_lengths() {
        let e = HashEncoder::new(1, 4);
        assert!(matches!(e.encode(&[]), Err(EncoderError::Empty)));
        let long = vec![1u32; 513];
        assert!(matches!(e.encode(&long), Err(EncoderError::TooLong { got: 513, max: 512 })));
    }

    #[test]
    fn encoder_enum_round_trips() {
        let e = Encoder::hash(9, 8);
        let json = serde_json::to_string(&e).unwrap();
        assert!(json.contains("\"kind\":\"hash\""));
        let back: Encoder = serde_json::from_str(&json).unwrap();
        assert_eq!(back, e);
    }

    #[test]
    fn embedding_backward_matches_finite_differences() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut enc = Encoder::embedding(6, 3, 8, &mut rng);
        let ids = [2u32, 4, 4, 1];
        let weight = Array2::from_shape_fn((4, 3), |(i, k)| (i * 3 + k) as f64 * 0.1 - 0.4);
        let loss = |e: &Encoder| (e.encode(&ids).unwrap().mapv(f64::sin) * &weight).sum();
        let h = e_hidden(&enc, &ids);
        let d_hidden = h.mapv(f64::cos) * &weight;
        let mut grads = enc.zero_grads();
        enc.backward(&ids, &d_hidden, &mut grads);
        let eps = 1e-6;
        for g in 0..2 {
            for k in 0..grads[g].len() {
                let orig = enc.params()[g][k];
                enc.params_mut()[g][k] = orig + eps;
                let up = loss(&enc);
                enc.params_mut()[g][k] = orig - eps;
                let down = loss(&enc);
                enc.params_mut()[g][k] = orig;
                let fd = (up - down) / (2.0 * eps);
                assert!((fd - flat(&grads[g])[k]).abs() < 1e-7);
            }
        }
        assert!(matches!(enc.encode(&[9]), Err(EncoderError::UnknownId { id: 9, vocab: 6 })));
    }

    fn e_hidden(e: &Encoder, ids: &[u32]) -> Array2<f64> {
        e.encode(ids).unwrap()
    }
}
