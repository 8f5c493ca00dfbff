//! Analytic FLOPs and KV-cache accounting for a staged pruning schedule.
//!
//! Prefill-only decoder costs: per layer, attention projections plus the
//! quadratic score/value matmuls plus the FFN. KV bytes scale linearly
//! with each layer's sequence length. Decode-phase costs and wall-clock
//! latency are out of scope.

use crate::error::{Error, Result};
use crate::schedule::{stage_token_counts, PruningStrategy, StageLayout};

/// Decoder dimensions behind the cost formulas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub lm_layers: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub heads: usize,
    /// KV element size: 2 for half precision, 4 for single.
    pub bytes_per_value: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.lm_layers == 0 || self.hidden == 0 || self.ffn == 0 || self.heads == 0 {
            return Err(Error::InvalidArgument(
                "model dimensions must be positive".into(),
            ));
        }
        if self.bytes_per_value != 2 && self.bytes_per_value != 4 {
            return Err(Error::InvalidArgument(format!(
                "bytes_per_value must be 2 or 4, got {}",
                self.bytes_per_value
            )));
        }
        Ok(())
    }
}

/// Totals and reductions against the unpruned baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostReport {
    pub flops_total: f64,
    pub flops_baseline: f64,
    pub kv_bytes_total: u64,
    pub kv_bytes_baseline: u64,
    /// `1 - pruned / baseline`.
    pub flops_reduction: f64,
    pub kv_reduction: f64,
}

/// Prefill FLOPs of one decoder layer at sequence length `n`:
/// `4*n*d^2 + 2*n^2*d + 2*n*d*m`.
pub fn layer_flops(n: usize, dims: &ModelDims) -> f64 {
    let n = n as f64;
    let d = dims.hidden as f64;
    let m = dims.ffn as f64;
    4.0 * n * d * d + 2.0 * n * n * d + 2.0 * n * d * m
}

/// KV bytes one layer stores at sequence length `n` (keys plus values).
fn layer_kv_bytes(n: usize, dims: &ModelDims) -> u64 {
    2 * n as u64 * dims.hidden as u64 * dims.bytes_per_value as u64
}

/// Per-layer sequence lengths under a schedule: text plus that stage's
/// retained visual count, including any recycled tokens.
pub fn per_layer_lengths(
    n_visual: usize,
    n_text: usize,
    strategy: &PruningStrategy,
    layout: &StageLayout,
    merged_counts: &[usize; 3],
) -> Vec<usize> {
    let counts = stage_token_counts(n_visual, strategy);
    (0..layout.total())
        .map(|layer| {
            let stage = layout.stage_of_layer(layer);
            n_text + counts[stage] + merged_counts[stage]
        })
        .collect()
}

/// Cost the whole forward: every layer of stage `i` runs at the stage-`i`
/// retained length; the baseline keeps all tokens everywhere.
pub fn pipeline_costs(
    n_visual: usize,
    n_text: usize,
    strategy: &PruningStrategy,
    layout: &StageLayout,
    dims: &ModelDims,
    merged_counts: &[usize; 3],
) -> Result<CostReport> {
    dims.validate()?;
    strategy.validate()?;
    if dims.lm_layers != layout.total() {
        return Err(Error::Shape(format!(
            "layout spans {} layers but dims declare {}",
            layout.total(),
            dims.lm_layers
        )));
    }
    if n_visual == 0 {
        return Err(Error::InvalidArgument(
            "need at least one visual token".into(),
        ));
    }
    let lengths = per_layer_lengths(n_visual, n_text, strategy, layout, merged_counts);
    let baseline_len = n_visual + n_text;

    let flops_total: f64 = lengths.iter().map(|&n| layer_flops(n, dims)).sum();
    let flops_baseline = layer_flops(baseline_len, dims) * layout.total() as f64;
    let kv_bytes_total: u64 = lengths.iter().map(|&n| layer_kv_bytes(n, dims)).sum();
    let kv_bytes_baseline = layer_kv_bytes(baseline_len, dims) * layout.total() as u64;

    Ok(CostReport {
        flops_total,
        flops_baseline,
        kv_bytes_total,
        kv_bytes_baseline,
        flops_reduction: 1.0 - flops_total / flops_baseline,
        kv_reduction: 1.0 - kv_bytes_total as f64 / kv_bytes_baseline as f64,
    })
}

/// One report per `(budget, strategy)` row, in input order; no merging.
pub fn table_sweep(
    entries: &[(f64, PruningStrategy)],
    n_visual: usize,
    n_text: usize,
    layout: &StageLayout,
    dims: &ModelDims,
) -> Result<Vec<CostReport>> {
    entries
        .iter()
        .map(|(_, strategy)| pipeline_costs(n_visual, n_text, strategy, layout, dims, &[0, 0, 0]))
        .collect()
}
