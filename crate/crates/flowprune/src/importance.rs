//! Calibrated visual-token importance.
//!
//! Received attention is summed per column of the token-to-token attention
//! matrix; columns above a threshold form the key-token set, and the
//! importance of each token is the attention it receives from that set plus
//! a softmax-normalized patch-entropy term. The uncalibrated mean-attention
//! score is kept as an ablation variant.

use crate::error::{Error, Result};
use crate::imgproc::EntropyMap;

/// Token-to-token attention weights, row-major. Entry `(i, j)` is the
/// attention from token `i` to token `j`.
///
/// Model-exported maps are post-softmax, so each row sums to 1 within 1e-6;
/// the constructor does not force that, since threshold arithmetic is also
/// defined for unnormalized maps.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    n: usize,
    weights: Vec<f32>,
}

impl AttentionMap {
    pub fn new(n: usize, weights: Vec<f32>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument(
                "attention map needs at least one token".into(),
            ));
        }
        if weights.len() != n * n {
            return Err(Error::Shape(format!(
                "attention map expects {n}x{n} = {} weights, got {}",
                n * n,
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument(
                "attention weights must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { n, weights })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.weights[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.weights[i * self.n..(i + 1) * self.n]
    }

    /// Sum of all entries.
    pub fn total_mass(&self) -> f64 {
        self.weights.iter().map(|&w| w as f64).sum()
    }

    /// Attention received by token `j` from all tokens (column sum).
    pub fn received(&self, j: usize) -> f64 {
        (0..self.n).map(|i| self.at(i, j) as f64).sum()
    }

    /// Check the post-softmax row-sum invariant.
    pub fn assert_row_stochastic(&self, tol: f64) -> Result<()> {
        for i in 0..self.n {
            let sum: f64 = self.row(i).iter().map(|&w| w as f64).sum();
            if (sum - 1.0).abs() > tol {
                return Err(Error::InvalidArgument(format!(
                    "attention row {i} sums to {sum}, expected 1 within {tol}"
                )));
            }
        }
        Ok(())
    }

    /// Raw little-endian f32 wire form, row-major.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.weights.iter().flat_map(|w| w.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(n: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != n * n * 4 {
            return Err(Error::Shape(format!(
                "attention blob holds {} bytes, expected {} for n = {n}",
                bytes.len(),
                n * n * 4
            )));
        }
        let weights = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(n, weights)
    }
}

/// Threshold sensitivity and entropy weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImportanceParams {
    pub t: f64,
    pub alpha: f64,
}

/// Indices of tokens whose received attention exceeds the threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyTokenSet {
    /// Sorted token indices.
    pub indices: Vec<usize>,
    /// The threshold that selected them.
    pub tau: f64,
}

/// Per-token importance scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMap {
    pub scores: Vec<f64>,
}

impl ImportanceMap {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Index of the highest score, ties broken by the smaller index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &s) in self.scores.iter().enumerate() {
            if s > self.scores[best] {
                best = i;
            }
        }
        best
    }
}

/// Threshold over received attention: `t` times the mean row mass.
///
/// For a row-stochastic map the total mass is `n`, so the threshold is
/// exactly `t`.
pub fn attention_threshold(attention: &AttentionMap, t: f64) -> f64 {
    t * attention.total_mass() / attention.n() as f64
}

/// Tokens whose received attention strictly exceeds `tau`.
///
/// If no column clears the threshold the single highest-received token is
/// returned instead (ties to the smaller index), so downstream scoring
/// always has a nonempty key set.
pub fn select_key_tokens(attention: &AttentionMap, tau: f64) -> KeyTokenSet {
    let received: Vec<f64> = (0..attention.n()).map(|j| attention.received(j)).collect();
    let indices: Vec<usize> = received
        .iter()
        .enumerate()
        .filter(|&(_, &sum)| sum > tau)
        .map(|(j, _)| j)
        .collect();
    if !indices.is_empty() {
        return KeyTokenSet { indices, tau };
    }
    let mut best = 0;
    for (j, &sum) in received.iter().enumerate() {
        if sum > received[best] {
            best = j;
        }
    }
    KeyTokenSet {
        indices: vec![best],
        tau,
    }
}

/// Importance of each token: attention received from the key set plus
/// `alpha` times the softmax of the patch entropies over all tokens.
pub fn calibrated_importance(
    attention: &AttentionMap,
    key_tokens: &KeyTokenSet,
    entropy: &EntropyMap,
    params: ImportanceParams,
) -> Result<ImportanceMap> {
    let n = attention.n();
    if entropy.len() != n {
        return Err(Error::Shape(format!(
            "entropy map has {} tokens, attention map has {n}",
            entropy.len()
        )));
    }
    let softmax = softmax_stable(&entropy.values);
    let scores = (0..n)
        .map(|i| {
            let from_keys: f64 = key_tokens
                .indices
                .iter()
                .map(|&k| attention.at(k, i) as f64)
                .sum();
            from_keys + params.alpha * softmax[i]
        })
        .collect();
    Ok(ImportanceMap { scores })
}

/// Ablation variant: mean attention received from all tokens.
pub fn plain_importance(attention: &AttentionMap) -> ImportanceMap {
    let n = attention.n();
    let scores = (0..n).map(|j| attention.received(j) / n as f64).collect();
    ImportanceMap { scores }
}

/// Softmax with max subtraction.
fn softmax_stable(values: &[f64]) -> Vec<f64> {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
