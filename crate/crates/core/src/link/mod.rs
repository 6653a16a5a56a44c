//! Trainable transmitter and receiver.
//!
//! Messages are 0-based indices in `0..2^k`. Complex samples cross into the
//! networks as interleaved `[re, im]` pairs.

mod checkpoint;
mod decoder;
mod encoder;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use decoder::DecoderModel;
pub use encoder::EncoderModel;

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{DiffError, Graph, ParamVector, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinkError {
    #[error("message {message} out of range for {cardinality} messages")]
    MessageOutOfRange { message: usize, cardinality: usize },
    #[error("exploration std must satisfy 0 <= sigma < 1, got {0}")]
    InvalidSigma(f64),
    #[error("policy density is degenerate for sigma = 0")]
    DegenerateDensity,
    #[error("expected input of length {expected}, got {found}")]
    InputLength { expected: usize, found: usize },
    #[error("empty probability vector")]
    EmptyProbabilities,
    #[error("invalid model dimensions: {0}")]
    Dimensions(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// The `2^k` messages of a `k`-bit block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MessageSpace {
    k: u32,
}

impl MessageSpace {
    pub fn new(k: u32) -> Result<Self, LinkError> {
        if k == 0 || k > 16 {
            return Err(LinkError::Dimensions(format!("k = {k} outside 1..=16")));
        }
        Ok(Self { k })
    }

    pub fn bits(&self) -> u32 {
        self.k
    }

    pub fn cardinality(&self) -> usize {
        1 << self.k
    }

    pub fn check(&self, m: usize) -> Result<(), LinkError> {
        if m >= self.cardinality() {
            return Err(LinkError::MessageOutOfRange {
                message: m,
                cardinality: self.cardinality(),
            });
        }
        Ok(())
    }

    pub fn one_hot(&self, m: usize) -> Result<Vec<f64>, LinkError> {
        self.check(m)?;
        let mut v = vec![0.0; self.cardinality()];
        v[m] = 1.0;
        Ok(v)
    }

    /// Batch of one-hot rows, `messages.len() x 2^k`.
    pub fn one_hot_batch(&self, messages: &[usize]) -> Result<Tensor, LinkError> {
        let card = self.cardinality();
        let mut data = vec![0.0; messages.len() * card];
        for (r, &m) in messages.iter().enumerate() {
            self.check(m)?;
            data[r * card + m] = 1.0;
        }
        Ok(Tensor::new(messages.len(), card, data))
    }
}

/// Index of the largest probability, lowest index on ties.
pub fn map_decision(probs: &[f64]) -> Result<usize, LinkError> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &p) in probs.iter().enumerate() {
        match best {
            Some((_, b)) if p <= b => {}
            _ => best = Some((i, p)),
        }
    }
    best.map(|(i, _)| i).ok_or(LinkError::EmptyProbabilities)
}

/// Per-row `-log p[m]` from logits, through the fused softmax cross-entropy.
pub fn cross_entropy(graph: &mut Graph, logits: Var, messages: &[usize]) -> Result<Var, LinkError> {
    let card = graph.shape(logits).1;
    if graph.shape(logits).0 != messages.len() {
        return Err(LinkError::InputLength {
            expected: graph.shape(logits).0,
            found: messages.len(),
        });
    }
    for &m in messages {
        if m >= card {
            return Err(LinkError::MessageOutOfRange {
                message: m,
                cardinality: card,
            });
        }
    }
    Ok(graph.softmax_xent(logits, messages))
}

/// `x W^T + b` for a row batch `x`, with `W` stored `out x in`.
pub(crate) fn dense(graph: &mut Graph, x: Var, w: Var, b: Var) -> Var {
    let h = graph.matmul_t(x, w, false, true);
    graph.add_bias(h, b)
}

/// Scales each row of `x` to unit norm, with `floor` bounding the squared norm from below.
pub(crate) fn normalize_rows(graph: &mut Graph, x: Var, floor_sq: f64) -> Var {
    let cols = graph.shape(x).1;
    let sq = graph.mul(x, x);
    let ss = graph.row_sum(sq);
    let ss = graph.clamp_min(ss, floor_sq);
    let norm = graph.sqrt(ss);
    let inv = graph.recip(norm);
    let inv = graph.broadcast_cols(inv, cols);
    graph.mul(x, inv)
}

/// Fills segment `name` with Glorot-uniform values for the given fans.
pub(crate) fn glorot<R: Rng + ?Sized>(
    p: &mut ParamVector,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let vals = p.segment_mut(name).expect("segment exists");
    for v in vals.iter_mut() {
        *v = rng.random_range(-limit..limit);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_decision_examples() {
        assert_eq!(map_decision(&[0.1, 0.7, 0.2]).unwrap(), 1);
        assert_eq!(map_decision(&[0.25; 4]).unwrap(), 0);
        assert_eq!(map_decision(&[0.0, 0.0, 1.0]).unwrap(), 2);
        assert_eq!(map_decision(&[]), Err(LinkError::EmptyProbabilities));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let confident = g.constant(Tensor::row(vec![-40.0, 40.0, -40.0]));
        let l = cross_entropy(&mut g, confident, &[1]).unwrap();
        assert!(g.value(l).item() < 1e-30);

        let uniform8 = g.constant(Tensor::zeros(1, 256));
        let l = cross_entropy(&mut g, uniform8, &[17]).unwrap();
        assert!((g.value(l).item() - 8.0 * 2f64.ln()).abs() < 1e-12);
        assert!((g.value(l).item() - 5.545).abs() < 1e-3);

        let uniform1 = g.constant(Tensor::zeros(1, 2));
        let l = cross_entropy(&mut g, uniform1, &[0]).unwrap();
        assert!((g.value(l).item() - 0.693).abs() < 1e-3);

        assert!(matches!(
            cross_entropy(&mut g, uniform1, &[2]),
            Err(LinkError::MessageOutOfRange { message: 2, cardinality: 2 })
        ));
    }

    #[test]
    fn one_hot_is_binary() {
        let space = MessageSpace::new(3).unwrap();
        for m in 0..8 {
            let v = space.one_hot(m).unwrap();
            assert_eq!(v.iter().filter(|&&x| x == 1.0).count(), 1);
            assert!(v.iter().all(|&x| x == 0.0 || x == 1.0));
            assert_eq!(v[m], 1.0);
        }
        assert!(space.one_hot(8).is_err());
    }
}
