//! Staged pruning layout and retention-budget arithmetic.
//!
//! A model is split into three contiguous layer stages. Stage retention
//! ratios compound: stage 1 keeps `r1` of the visual tokens, stage 2 keeps
//! `r2` of those, stage 3 keeps `r3` of those. The layer-weighted average
//! retention is the computation budget; given a budget and the first two
//! ratios, the third is solved for exactly or the pair is rejected.

use crate::error::{Error, Result};

/// Layer counts of the three pruning stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageLayout {
    pub l1: usize,
    pub l2: usize,
    pub l3: usize,
}

impl StageLayout {
    pub fn new(l1: usize, l2: usize, l3: usize) -> Result<Self> {
        if l1 == 0 || l2 == 0 || l3 == 0 {
            return Err(Error::InvalidArgument(
                "all three stages need at least one layer".into(),
            ));
        }
        Ok(Self { l1, l2, l3 })
    }

    pub fn total(&self) -> usize {
        self.l1 + self.l2 + self.l3
    }

    /// Stage index (0, 1, 2) owning LM layer `layer`.
    pub fn stage_of_layer(&self, layer: usize) -> usize {
        if layer < self.l1 {
            0
        } else if layer < self.l1 + self.l2 {
            1
        } else {
            2
        }
    }
}

/// Target average visual-token retention rate, in `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Budget {
    pub r_bar: f64,
}

impl Budget {
    pub fn new(r_bar: f64) -> Result<Self> {
        if !(r_bar > 0.0 && r_bar <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "budget must lie in (0, 1], got {r_bar}"
            )));
        }
        Ok(Self { r_bar })
    }
}

/// The searched pruning strategy: stage retention ratios, threshold
/// sensitivity, entropy weight, and recycling grid size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruningStrategy {
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    pub t: f64,
    pub alpha: f64,
    pub a: usize,
}

impl PruningStrategy {
    /// A strategy that retains every token at every stage.
    pub fn identity() -> Self {
        Self {
            r1: 1.0,
            r2: 1.0,
            r3: 1.0,
            t: 1.0,
            alpha: 0.0,
            a: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("r1", self.r1), ("r2", self.r2), ("r3", self.r3)] {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must lie in (0, 1], got {r}"
                )));
            }
        }
        if !(self.t > 0.0 && self.t.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "t must be positive, got {}",
                self.t
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be nonnegative, got {}",
                self.alpha
            )));
        }
        if self.a == 0 {
            return Err(Error::InvalidArgument(
                "grid size a must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn is_identity_schedule(&self) -> bool {
        self.r1 == 1.0 && self.r2 == 1.0 && self.r3 == 1.0
    }
}

/// Layer-weighted average retention:
/// `(r1*l1 + r1*r2*l2 + r1*r2*r3*l3) / total`.
pub fn average_retention(s: &PruningStrategy, layout: &StageLayout) -> f64 {
    let l1 = layout.l1 as f64;
    let l2 = layout.l2 as f64;
    let l3 = layout.l3 as f64;
    (s.r1 * l1 + s.r1 * s.r2 * l2 + s.r1 * s.r2 * s.r3 * l3) / layout.total() as f64
}

/// Solve the budget constraint for the third-stage ratio.
///
/// Returns `None` when the solution falls outside `(0, 1]`; nothing is
/// clamped, so every accepted strategy meets the budget exactly.
pub fn solve_r3(r1: f64, r2: f64, layout: &StageLayout, budget: &Budget) -> Option<f64> {
    debug_assert!(r1 > 0.0 && r1 <= 1.0 && r2 > 0.0 && r2 <= 1.0);
    let total = layout.total() as f64;
    let numerator = budget.r_bar * total - r1 * layout.l1 as f64 - r1 * r2 * layout.l2 as f64;
    let denominator = r1 * r2 * layout.l3 as f64;
    let r3 = numerator / denominator;
    (r3 > 0.0 && r3 <= 1.0).then_some(r3)
}

/// Per-stage retained token counts for `n_visual` input tokens.
///
/// Counts chain multiplicatively with round-half-up and never drop below
/// one token.
pub fn stage_token_counts(n_visual: usize, s: &PruningStrategy) -> [usize; 3] {
    let k1 = retained_count(n_visual, s.r1);
    let k2 = retained_count(k1, s.r2);
    let k3 = retained_count(k2, s.r3);
    [k1, k2, k3]
}

fn retained_count(n: usize, ratio: f64) -> usize {
    let rounded = (n as f64 * ratio + 0.5).floor() as usize;
    rounded.max(1)
}
