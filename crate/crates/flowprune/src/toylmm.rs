//! A deterministic, seeded toy vision-encoder + causal-LM pipeline.
//!
//! The encoder embeds gray image patches, runs a few bidirectional
//! self-attention layers, and exports the last layer's head-averaged
//! attention map. The LM consumes `[visual tokens || seeded text tokens]`
//! through causal layers, pruning the visual tokens at the start of each
//! stage while position IDs stay fixed. The objective compares the final
//! token of the last layer between the full and the pruned run.
//!
//! All weights come from a ChaCha8 counter-based stream seeded by the model
//! seed (one stream per tensor, drawn in a documented order), so identical
//! configurations give bit-identical forwards.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imgproc::{entropy_map, gray_levels, EntropyMap, ImageBuffer, PatchGrid};
use crate::importance::{
    attention_threshold, calibrated_importance, plain_importance, select_key_tokens, AttentionMap,
    ImportanceMap, ImportanceParams,
};
use crate::pruner::{apply_stage_prune, select_topk_indices, Token, TokenSet};
use crate::schedule::{stage_token_counts, PruningStrategy, StageLayout};

/// Dimensions and seed of the toy model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyModelConfig {
    pub hidden_dim: usize,
    pub vit_layers: usize,
    pub lm_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub text_len: usize,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            vit_layers: 2,
            lm_layers: 12,
            heads: 4,
            ffn_dim: 128,
            text_len: 8,
            seed: 11,
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0
            || self.vit_layers == 0
            || self.lm_layers == 0
            || self.heads == 0
            || self.ffn_dim == 0
        {
            return Err(Error::InvalidConfig(
                "all model dimensions must be positive".into(),
            ));
        }
        if !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "hidden_dim {} not divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if self.text_len == 0 {
            return Err(Error::InvalidConfig(
                "text_len must be at least 1 (the objective reads the final text token)".into(),
            ));
        }
        Ok(())
    }
}

/// One evaluation input: an image plus the seed of its text tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSample {
    pub image: ImageBuffer,
    pub patch_size: usize,
    pub text_seed: u64,
}

impl WorkloadSample {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0
            || !self.image.width.is_multiple_of(self.patch_size)
            || !self.image.height.is_multiple_of(self.patch_size)
        {
            return Err(Error::Shape(format!(
                "image {}x{} not divisible by patch size {}",
                self.image.width, self.image.height, self.patch_size
            )));
        }
        Ok(())
    }

    /// Number of visual tokens the image produces.
    pub fn token_count(&self) -> usize {
        (self.image.width / self.patch_size) * (self.image.height / self.patch_size)
    }

    /// A seeded synthetic sample. Each patch draws one of a few pattern
    /// styles (constant, two-level checker, stripes, noise) so that patch
    /// entropies spread over the whole range.
    pub fn synthetic(seed: u64, width: usize, height: usize, patch_size: usize) -> Self {
        assert!(
            patch_size > 0 && width.is_multiple_of(patch_size) && height.is_multiple_of(patch_size)
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text_seed: u64 = rng.random();
        let mut data = vec![0u8; width * height];
        for py in (0..height).step_by(patch_size) {
            for px in (0..width).step_by(patch_size) {
                let style = rng.random_range(0..4u8);
                let base: u8 = rng.random();
                let alt: u8 = rng.random();
                for y in 0..patch_size {
                    for x in 0..patch_size {
                        let value = match style {
                            0 => base,
                            1 => {
                                if (x + y) % 2 == 0 {
                                    base
                                } else {
                                    alt
                                }
                            }
                            2 => base.wrapping_add((x % 4) as u8 * 37),
                            _ => rng.random(),
                        };
                        data[(py + y) * width + px + x] = value;
                    }
                }
            }
        }
        let image = ImageBuffer::new(width, height, 1, data).expect("dimensions checked");
        Self {
            image,
            patch_size,
            text_seed,
        }
    }
}

/// Seeded synthetic workload of `count` samples.
pub fn synthetic_workload(
    count: usize,
    seed: u64,
    width: usize,
    height: usize,
    patch_size: usize,
) -> Vec<WorkloadSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| WorkloadSample::synthetic(rng.random(), width, height, patch_size))
        .collect()
}

/// The default desk-scale workload: 64x64 images with 8-pixel patches,
/// i.e. 64 visual tokens per sample.
pub fn default_workload(count: usize, seed: u64) -> Vec<WorkloadSample> {
    synthetic_workload(count, seed, 64, 64, 8)
}

// Per-tensor ChaCha streams.
const STREAM_VIT_POS: u64 = 1;
const STREAM_LM_POS: u64 = 2;
const STREAM_PATCH_EMBED: u64 = 3;
const STREAM_TEXT_EMBED: u64 = 4;
const STREAM_VIT_LAYER_BASE: u64 = 1 << 16;
const STREAM_LM_LAYER_BASE: u64 = 1 << 20;

struct LayerWeights {
    wq: Vec<f32>,
    wk: Vec<f32>,
    wv: Vec<f32>,
    wo: Vec<f32>,
    w1: Vec<f32>,
    w2: Vec<f32>,
}

/// The built toy model; immutable after construction.
pub struct Model {
    cfg: ToyModelConfig,
    vit: Vec<LayerWeights>,
    lm: Vec<LayerWeights>,
}

/// Vision-encoder outputs for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionEncoding {
    /// Per-token representations, ascending token index.
    pub tokens: Vec<Vec<f32>>,
    /// Last ViT layer, head-averaged.
    pub attention: AttentionMap,
    pub grid_cols: usize,
    pub grid_rows: usize,
}

/// Hidden states of every sequence position after one LM layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStates {
    pub position_ids: Vec<usize>,
    pub states: Vec<Vec<f32>>,
}

/// Captured run of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTrace {
    pub attention: AttentionMap,
    pub per_layer_hidden: Vec<LayerStates>,
    /// Last position of the last layer.
    pub final_token: Vec<f32>,
    pub text_len: usize,
}

/// Toggles for the ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipelineOptions {
    /// When false, token importance is the plain mean received attention.
    pub calibration: bool,
    /// When false, pruned tokens at the initial stage are not recycled.
    pub recycle: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            calibration: true,
            recycle: true,
        }
    }
}

/// Per-sample cosine similarities between the full and pruned final token,
/// plus their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveReport {
    pub per_sample_sim: Vec<f64>,
    pub total: f64,
}

pub(crate) struct LmVisualToken {
    pub pos_id: usize,
    pub importance: f64,
    pub rep: Vec<f32>,
}

struct StagePlan {
    /// `(layer, count)`: prune the visual tokens down to `count` right
    /// before this layer runs.
    prune_at: [(usize, usize); 2],
}

impl Model {
    /// Build all weights from the config seed.
    pub fn build(cfg: ToyModelConfig) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden_dim;
        let build_layer = |stream: u64| {
            let mut rng = Self::stream_rng(cfg.seed, stream);
            let bound = 1.0 / (h as f32).sqrt();
            LayerWeights {
                wq: gen_uniform(&mut rng, h * h, bound),
                wk: gen_uniform(&mut rng, h * h, bound),
                wv: gen_uniform(&mut rng, h * h, bound),
                wo: gen_uniform(&mut rng, h * h, bound),
                w1: gen_uniform(&mut rng, cfg.ffn_dim * h, bound),
                w2: gen_uniform(&mut rng, h * cfg.ffn_dim, bound),
            }
        };
        let vit = (0..cfg.vit_layers)
            .map(|l| build_layer(STREAM_VIT_LAYER_BASE + l as u64))
            .collect();
        let lm = (0..cfg.lm_layers)
            .map(|l| build_layer(STREAM_LM_LAYER_BASE + l as u64))
            .collect();
        Ok(Self { cfg, vit, lm })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.cfg
    }

    fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        rng
    }

    fn init_bound(&self) -> f32 {
        1.0 / (self.cfg.hidden_dim as f32).sqrt()
    }

    fn positional_embeddings(&self, stream: u64, count: usize) -> Vec<Vec<f32>> {
        let mut rng = Self::stream_rng(self.cfg.seed, stream);
        let bound = self.init_bound();
        (0..count)
            .map(|_| gen_uniform(&mut rng, self.cfg.hidden_dim, bound))
            .collect()
    }

    /// Text-token embeddings for one sample, from the sample's text seed.
    pub fn text_embeddings(&self, text_seed: u64) -> Vec<Vec<f32>> {
        let mut rng = Self::stream_rng(text_seed, STREAM_TEXT_EMBED);
        let bound = self.init_bound();
        (0..self.cfg.text_len)
            .map(|_| gen_uniform(&mut rng, self.cfg.hidden_dim, bound))
            .collect()
    }

    /// Run the vision encoder: patch embedding, bidirectional layers, and
    /// the exported last-layer attention map.
    pub fn encode(&self, sample: &WorkloadSample) -> Result<VisionEncoding> {
        sample.validate()?;
        let gray = gray_levels(&sample.image);
        let grid = PatchGrid::from_image(&gray, sample.patch_size)?;
        let n = grid.token_count();
        let h = self.cfg.hidden_dim;
        let patch_dim = sample.patch_size * sample.patch_size;

        let mut rng = Self::stream_rng(self.cfg.seed, STREAM_PATCH_EMBED);
        let w_pe = gen_uniform(&mut rng, h * patch_dim, self.init_bound());
        let vit_pos = self.positional_embeddings(STREAM_VIT_POS, n);

        let mut states: Vec<Vec<f32>> = grid
            .patches
            .iter()
            .zip(&vit_pos)
            .map(|(patch, pos)| {
                let pixels: Vec<f32> = patch.iter().map(|&p| p as f32 / 255.0 - 0.5).collect();
                let mut rep = mat_vec(&w_pe, h, patch_dim, &pixels);
                for (r, p) in rep.iter_mut().zip(pos) {
                    *r += p;
                }
                rep
            })
            .collect();

        let mut captured = vec![0.0f32; n * n];
        for (l, weights) in self.vit.iter().enumerate() {
            let capture = (l + 1 == self.vit.len()).then_some(&mut captured);
            self.layer_forward(weights, &mut states, false, capture);
        }
        Ok(VisionEncoding {
            tokens: states,
            attention: AttentionMap::new(n, captured)?,
            grid_cols: grid.cols,
            grid_rows: grid.rows,
        })
    }

    /// One pre-norm transformer layer, applied in place.
    fn layer_forward(
        &self,
        w: &LayerWeights,
        states: &mut [Vec<f32>],
        causal: bool,
        mut capture: Option<&mut Vec<f32>>,
    ) {
        let n = states.len();
        let h = self.cfg.hidden_dim;
        let nh = self.cfg.heads;
        let hd = h / nh;
        let scale = 1.0 / (hd as f32).sqrt();

        let normed: Vec<Vec<f32>> = states.iter().map(|s| rms_norm(s)).collect();
        let q: Vec<Vec<f32>> = normed.iter().map(|v| mat_vec(&w.wq, h, h, v)).collect();
        let k: Vec<Vec<f32>> = normed.iter().map(|v| mat_vec(&w.wk, h, h, v)).collect();
        let v: Vec<Vec<f32>> = normed.iter().map(|v| mat_vec(&w.wv, h, h, v)).collect();

        let mut attn_out = vec![vec![0.0f32; h]; n];
        for i in 0..n {
            let limit = if causal { i + 1 } else { n };
            for head in 0..nh {
                let span = head * hd..(head + 1) * hd;
                let qs = &q[i][span.clone()];
                let mut probs: Vec<f32> = (0..limit)
                    .map(|j| dot(qs, &k[j][span.clone()]) * scale)
                    .collect();
                softmax_in_place(&mut probs);
                let out = &mut attn_out[i][span.clone()];
                for (j, &p) in probs.iter().enumerate() {
                    for (o, &vv) in out.iter_mut().zip(&v[j][span.clone()]) {
                        *o += p * vv;
                    }
                }
                if let Some(cap) = capture.as_deref_mut() {
                    for (j, &p) in probs.iter().enumerate() {
                        cap[i * n + j] += p / nh as f32;
                    }
                }
            }
        }
        for (state, out) in states.iter_mut().zip(&attn_out) {
            let delta = mat_vec(&w.wo, h, h, out);
            for (s, d) in state.iter_mut().zip(&delta) {
                *s += d;
            }
        }
        for state in states.iter_mut() {
            let normed = rms_norm(state);
            let mut hidden = mat_vec(&w.w1, self.cfg.ffn_dim, h, &normed);
            for x in &mut hidden {
                *x = x.max(0.0);
            }
            let delta = mat_vec(&w.w2, h, self.cfg.ffn_dim, &hidden);
            for (s, d) in state.iter_mut().zip(&delta) {
                *s += d;
            }
        }
    }

    /// Run the causal LM over `[visual || text]`, pruning at stage
    /// boundaries when a plan is given.
    fn run_lm(
        &self,
        visual: Vec<LmVisualToken>,
        text: &[Vec<f32>],
        n_visual_total: usize,
        plan: Option<&StagePlan>,
        record_layers: bool,
    ) -> (Vec<LayerStates>, Vec<f32>) {
        let lm_pos = self.positional_embeddings(STREAM_LM_POS, n_visual_total + self.cfg.text_len);

        struct Meta {
            pos_id: usize,
            visual: bool,
            importance: f64,
        }
        let mut meta: Vec<Meta> = Vec::with_capacity(visual.len() + text.len());
        let mut states: Vec<Vec<f32>> = Vec::with_capacity(visual.len() + text.len());
        for token in visual {
            let mut state = token.rep;
            for (s, p) in state.iter_mut().zip(&lm_pos[token.pos_id]) {
                *s += p;
            }
            meta.push(Meta {
                pos_id: token.pos_id,
                visual: true,
                importance: token.importance,
            });
            states.push(state);
        }
        for (j, embed) in text.iter().enumerate() {
            let pos_id = n_visual_total + j;
            let mut state = embed.clone();
            for (s, p) in state.iter_mut().zip(&lm_pos[pos_id]) {
                *s += p;
            }
            meta.push(Meta {
                pos_id,
                visual: false,
                importance: 0.0,
            });
            states.push(state);
        }

        let mut layers = Vec::with_capacity(if record_layers { self.cfg.lm_layers } else { 0 });
        for l in 0..self.cfg.lm_layers {
            if let Some(plan) = plan {
                for &(at_layer, count) in &plan.prune_at {
                    if at_layer != l {
                        continue;
                    }
                    let visual_slots: Vec<usize> =
                        (0..meta.len()).filter(|&i| meta[i].visual).collect();
                    if count >= visual_slots.len() {
                        continue;
                    }
                    let ranked: Vec<(usize, f64)> = visual_slots
                        .iter()
                        .map(|&i| (meta[i].pos_id, meta[i].importance))
                        .collect();
                    let chosen = select_topk_indices(&ranked, count);
                    let mut keep = vec![false; meta.len()];
                    for (i, m) in meta.iter().enumerate() {
                        if !m.visual {
                            keep[i] = true;
                        }
                    }
                    for idx in chosen {
                        keep[visual_slots[idx]] = true;
                    }
                    let mut keep_iter = keep.iter();
                    meta.retain(|_| *keep_iter.next().unwrap());
                    let mut keep_iter = keep.iter();
                    states.retain(|_| *keep_iter.next().unwrap());
                }
            }
            self.layer_forward(&self.lm[l], &mut states, true, None);
            if record_layers {
                layers.push(LayerStates {
                    position_ids: meta.iter().map(|m| m.pos_id).collect(),
                    states: states.clone(),
                });
            }
        }
        let final_token = states.last().expect("text tokens are never pruned").clone();
        (layers, final_token)
    }
}

fn gen_uniform(rng: &mut ChaCha8Rng, len: usize, bound: f32) -> Vec<f32> {
    (0..len).map(|_| rng.random_range(-bound..bound)).collect()
}

fn rms_norm(x: &[f32]) -> Vec<f32> {
    let ms = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let scale = 1.0 / (ms + 1e-6).sqrt();
    x.iter().map(|v| v * scale).collect()
}

fn mat_vec(w: &[f32], out_dim: usize, in_dim: usize, x: &[f32]) -> Vec<f32> {
    (0..out_dim)
        .map(|r| dot(&w[r * in_dim..(r + 1) * in_dim], x))
        .collect()
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax_in_place(scores: &mut [f32]) {
    let max = scores.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

/// Cosine similarity in f64; errors on a zero-norm input.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine inputs differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("zero-norm final token".into()));
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Token importance from already-computed parts. With calibration off this
/// is the plain mean received attention (the ablation variant), and the
/// entropy map and parameters are ignored.
pub fn importance_from_parts(
    attention: &AttentionMap,
    entropy: &EntropyMap,
    t: f64,
    alpha: f64,
    calibration: bool,
) -> Result<ImportanceMap> {
    if !calibration {
        return Ok(plain_importance(attention));
    }
    let tau = attention_threshold(attention, t);
    let keys = select_key_tokens(attention, tau);
    calibrated_importance(attention, &keys, entropy, ImportanceParams { t, alpha })
}

/// Convenience wrapper computing the importance map of one sample.
pub fn sample_importance(
    model: &Model,
    sample: &WorkloadSample,
    t: f64,
    alpha: f64,
) -> Result<ImportanceMap> {
    let encoding = model.encode(sample)?;
    let entropy = entropy_map(&gray_levels(&sample.image), sample.patch_size)?;
    importance_from_parts(&encoding.attention, &entropy, t, alpha, true)
}

/// Full (unpruned) run of one sample.
pub fn forward_full(model: &Model, sample: &WorkloadSample) -> Result<FlowTrace> {
    let encoding = model.encode(sample)?;
    let text = model.text_embeddings(sample.text_seed);
    let n = encoding.tokens.len();
    let visual = encoding
        .tokens
        .iter()
        .enumerate()
        .map(|(i, rep)| LmVisualToken {
            pos_id: i,
            importance: 0.0,
            rep: rep.clone(),
        })
        .collect();
    let (layers, final_token) = model.run_lm(visual, &text, n, None, true);
    Ok(FlowTrace {
        attention: encoding.attention,
        per_layer_hidden: layers,
        final_token,
        text_len: model.cfg.text_len,
    })
}

/// Staged pruned run with the default options (calibrated importance
/// supplied by the caller, recycling at the initial stage).
pub fn forward_pruned(
    model: &Model,
    sample: &WorkloadSample,
    strategy: &PruningStrategy,
    layout: &StageLayout,
    importance: &ImportanceMap,
) -> Result<FlowTrace> {
    forward_pruned_with(
        model,
        sample,
        strategy,
        layout,
        importance,
        PipelineOptions::default(),
    )
}

/// Staged pruned run: stage-0 prune with recycling before the LM, plain
/// prunes at the two stage boundaries, position IDs preserved throughout.
pub fn forward_pruned_with(
    model: &Model,
    sample: &WorkloadSample,
    strategy: &PruningStrategy,
    layout: &StageLayout,
    importance: &ImportanceMap,
    opts: PipelineOptions,
) -> Result<FlowTrace> {
    let encoding = model.encode(sample)?;
    let text = model.text_embeddings(sample.text_seed);
    let (layers, final_token) = pruned_lm_run(
        model, &encoding, &text, strategy, layout, importance, opts, true,
    )?;
    Ok(FlowTrace {
        attention: encoding.attention,
        per_layer_hidden: layers,
        final_token,
        text_len: model.cfg.text_len,
    })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn pruned_lm_run(
    model: &Model,
    encoding: &VisionEncoding,
    text: &[Vec<f32>],
    strategy: &PruningStrategy,
    layout: &StageLayout,
    importance: &ImportanceMap,
    opts: PipelineOptions,
    record_layers: bool,
) -> Result<(Vec<LayerStates>, Vec<f32>)> {
    strategy.validate()?;
    if layout.total() != model.cfg.lm_layers {
        return Err(Error::InvalidConfig(format!(
            "layout spans {} layers but the model has {}",
            layout.total(),
            model.cfg.lm_layers
        )));
    }
    let n = encoding.tokens.len();
    if importance.len() != n {
        return Err(Error::Shape(format!(
            "importance map has {} entries for {n} visual tokens",
            importance.len()
        )));
    }
    let counts = stage_token_counts(n, strategy);
    let tokens: Vec<Token> = encoding
        .tokens
        .iter()
        .enumerate()
        .map(|(i, rep)| Token {
            position_id: i,
            coord: (i % encoding.grid_cols, i / encoding.grid_cols),
            rep: rep.clone(),
            importance: importance.scores[i],
        })
        .collect();
    let ts = TokenSet::new(tokens, encoding.grid_cols, encoding.grid_rows)?;
    let stage0 = apply_stage_prune(&ts, counts[0], opts.recycle, strategy.a)?;
    let visual = stage0
        .retained
        .tokens
        .into_iter()
        .map(|t| LmVisualToken {
            pos_id: t.position_id,
            importance: t.importance,
            rep: t.rep,
        })
        .collect();
    let plan = StagePlan {
        prune_at: [(layout.l1, counts[1]), (layout.l1 + layout.l2, counts[2])],
    };
    Ok(model.run_lm(visual, text, n, Some(&plan), record_layers))
}

/// Evaluator with per-sample preparation (encoder outputs, entropy, text
/// embeddings, and the full-run trace) cached once, so repeated strategy
/// evaluations only pay for the pruned runs.
pub struct FlowEvaluator<'m> {
    model: &'m Model,
    layout: StageLayout,
    opts: PipelineOptions,
    preps: Vec<PreparedSample>,
}

struct PreparedSample {
    encoding: VisionEncoding,
    entropy: EntropyMap,
    text: Vec<Vec<f32>>,
    full: FlowTrace,
}

impl<'m> FlowEvaluator<'m> {
    pub fn new(
        model: &'m Model,
        samples: &[WorkloadSample],
        layout: StageLayout,
        opts: PipelineOptions,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("workload must be non-empty".into()));
        }
        if layout.total() != model.cfg.lm_layers {
            return Err(Error::InvalidConfig(format!(
                "layout spans {} layers but the model has {}",
                layout.total(),
                model.cfg.lm_layers
            )));
        }
        let preps = samples
            .iter()
            .map(|sample| {
                let encoding = model.encode(sample)?;
                let entropy = entropy_map(&gray_levels(&sample.image), sample.patch_size)?;
                let full = forward_full(model, sample)?;
                Ok(PreparedSample {
                    encoding,
                    entropy,
                    text: model.text_embeddings(sample.text_seed),
                    full,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model,
            layout,
            opts,
            preps,
        })
    }

    pub fn sample_count(&self) -> usize {
        self.preps.len()
    }

    pub fn full_trace(&self, index: usize) -> &FlowTrace {
        &self.preps[index].full
    }

    pub fn options(&self) -> PipelineOptions {
        self.opts
    }

    /// Sum over samples of the cosine similarity between the full and the
    /// pruned final token (deterministic in-order reduction).
    pub fn evaluate(&self, strategy: &PruningStrategy) -> Result<ObjectiveReport> {
        let mut per_sample_sim = Vec::with_capacity(self.preps.len());
        for prep in &self.preps {
            let importance = importance_from_parts(
                &prep.encoding.attention,
                &prep.entropy,
                strategy.t,
                strategy.alpha,
                self.opts.calibration,
            )?;
            let (_, pruned_final) = pruned_lm_run(
                self.model,
                &prep.encoding,
                &prep.text,
                strategy,
                &self.layout,
                &importance,
                self.opts,
                false,
            )?;
            per_sample_sim.push(cosine(&prep.full.final_token, &pruned_final)?);
        }
        let total = per_sample_sim.iter().sum();
        Ok(ObjectiveReport {
            per_sample_sim,
            total,
        })
    }
}

/// The flow objective over a workload, built fresh from the samples.
pub fn evaluate_objective(
    model: &Model,
    samples: &[WorkloadSample],
    strategy: &PruningStrategy,
    layout: &StageLayout,
) -> Result<ObjectiveReport> {
    FlowEvaluator::new(model, samples, *layout, PipelineOptions::default())?.evaluate(strategy)
}

/// Per-LM-layer mean cosine similarity between the full and the pruned run
/// at the text positions (which survive both runs).
pub fn flow_divergence(
    model: &Model,
    sample: &WorkloadSample,
    strategy: &PruningStrategy,
    layout: &StageLayout,
) -> Result<Vec<f64>> {
    flow_divergence_with(model, sample, strategy, layout, PipelineOptions::default())
}

pub fn flow_divergence_with(
    model: &Model,
    sample: &WorkloadSample,
    strategy: &PruningStrategy,
    layout: &StageLayout,
    opts: PipelineOptions,
) -> Result<Vec<f64>> {
    let full = forward_full(model, sample)?;
    let encoding = model.encode(sample)?;
    let entropy = entropy_map(&gray_levels(&sample.image), sample.patch_size)?;
    let importance = importance_from_parts(
        &encoding.attention,
        &entropy,
        strategy.t,
        strategy.alpha,
        opts.calibration,
    )?;
    let pruned = forward_pruned_with(model, sample, strategy, layout, &importance, opts)?;
    let text_len = model.cfg.text_len;
    full.per_layer_hidden
        .iter()
        .zip(&pruned.per_layer_hidden)
        .map(|(full_layer, pruned_layer)| {
            let f = &full_layer.states;
            let p = &pruned_layer.states;
            let mut acc = 0.0;
            for k in 0..text_len {
                let a = &f[f.len() - text_len + k];
                let b = &p[p.len() - text_len + k];
                acc += cosine(a, b)?;
            }
            Ok(acc / text_len as f64)
        })
        .collect()
}
