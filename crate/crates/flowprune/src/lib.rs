//! Visual-token pruning toolkit.
//!
//! The pipeline scores visual tokens by calibrated received attention plus
//! patch entropy, prunes them progressively across three layer stages with
//! grid-based recycling at the first stage, and searches the strategy
//! hyperparameters with a Gaussian-process surrogate so that the pruned
//! run's final-token representation stays close to the unpruned run's.
//! A deterministic seeded toy vision-encoder + causal LM stands in for the
//! host model; recorded trace bundles can replay the reference run from
//! disk. An analytic cost model reports FLOPs and KV-cache savings.

pub mod bayesopt;
pub mod costmodel;
pub mod error;
pub mod gp;
pub mod imgproc;
pub mod importance;
pub mod pruner;
pub mod schedule;
pub mod toylmm;
pub mod trace;

pub use bayesopt::{
    brute_force_search, lattice_search, ledger, optimize, optimize_objective, propose_next,
    random_search, Observation, OptimizationRun, SearchSpace, DEFAULT_XI,
};
pub use costmodel::{layer_flops, pipeline_costs, table_sweep, CostReport, ModelDims};
pub use error::{Error, Result};
pub use gp::{expected_improvement, gp_fit, GpState};
pub use imgproc::{
    decode_image, entropy_map, gray_levels, EntropyMap, ImageBuffer, PatchGrid, GRAY_LEVELS,
};
pub use importance::{
    attention_threshold, calibrated_importance, plain_importance, select_key_tokens, AttentionMap,
    ImportanceMap, ImportanceParams, KeyTokenSet,
};
pub use pruner::{
    apply_stage_prune, assign_grid_cells, merge_recycle, topk_retain, PruneOutcome, Token, TokenSet,
};
pub use schedule::{
    average_retention, solve_r3, stage_token_counts, Budget, PruningStrategy, StageLayout,
};
pub use toylmm::{
    cosine, default_workload, evaluate_objective, flow_divergence, flow_divergence_with,
    forward_full, forward_pruned, forward_pruned_with, importance_from_parts, sample_importance,
    synthetic_workload, FlowEvaluator, FlowTrace, LayerStates, Model, ObjectiveReport,
    PipelineOptions, ToyModelConfig, VisionEncoding, WorkloadSample,
};
pub use trace::{atomic_write, evaluate_against_trace, load_trace, record_trace, TraceBundle};
