//! The six subcommands. Every command is deterministic given its inputs
//! and seed; reports go to stdout or, with `--out`, to a file written
//! atomically. The optimizer's ledger streams straight to disk so an
//! aborted run keeps its partial history.

use std::cell::RefCell;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use flowprune::{
    apply_stage_prune, atomic_write, entropy_map, evaluate_against_trace, flow_divergence_with,
    gray_levels, importance_from_parts, ledger, load_trace, optimize_objective, pipeline_costs,
    stage_token_counts, topk_retain, AttentionMap, FlowEvaluator, Model, ModelDims,
    PipelineOptions, PruneOutcome, PruningStrategy, Token, TokenSet, VisionEncoding,
    WorkloadSample,
};

use crate::config::RunConfig;
use crate::strategy_file::StrategyFile;
use crate::{AblationFlags, CostArgs, EvalArgs, FlowArgs, OptimizeArgs, PruneArgs};

fn emit(out: Option<&Path>, content: &str) -> Result<()> {
    match out {
        Some(path) => {
            atomic_write(path, content.as_bytes())
                .with_context(|| format!("writing {}", path.display()))?;
        }
        None => print!("{content}"),
    }
    Ok(())
}

impl AblationFlags {
    fn pipeline(&self) -> PipelineOptions {
        PipelineOptions {
            calibration: !self.no_calibration,
            recycle: !self.no_merge,
        }
    }

    /// The uniform-stages ablation replaces the staged schedule with one
    /// pre-LM prune to the budget, keeping counts flat across layers.
    fn apply_schedule(&self, strategy: PruningStrategy, budget: f64) -> PruningStrategy {
        if self.uniform_stages {
            PruningStrategy {
                r1: budget,
                r2: 1.0,
                r3: 1.0,
                ..strategy
            }
        } else {
            strategy
        }
    }
}

pub fn cmd_optimize(args: &OptimizeArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.common.config.as_deref())?;
    if let Some(seed) = args.common.seed {
        cfg.seed = seed;
    }
    if let Some(budget) = args.budget {
        cfg.budget = budget;
    }
    if let Some(iterations) = args.iterations {
        cfg.iterations = iterations;
    }
    if let Some(init) = args.init {
        cfg.init_count = init;
    }
    if let Some(samples) = args.common.samples {
        cfg.samples = samples;
    }
    cfg.validate()?;

    let model = cfg.build_model()?;
    let samples = cfg.workload()?;
    let space = cfg.search_space(args.ablations.uniform_stages);
    let evaluator = FlowEvaluator::new(&model, &samples, cfg.layout, args.ablations.pipeline())?;

    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating output directory {}", args.out.display()))?;
    let ledger_path = args.out.join("ledger.txt");
    let ledger_file = RefCell::new(
        fs::File::create(&ledger_path)
            .with_context(|| format!("creating {}", ledger_path.display()))?,
    );
    let ledger_error: RefCell<Option<std::io::Error>> = RefCell::new(None);

    let run = optimize_objective(
        &space,
        cfg.iterations,
        cfg.init_count,
        cfg.seed,
        cfg.xi,
        |strategy, _| Ok(evaluator.evaluate(strategy)?.total),
        |index, obs| {
            let mut file = ledger_file.borrow_mut();
            let result =
                writeln!(file, "{}", ledger::to_line(index, obs)).and_then(|_| file.flush());
            if let Err(e) = result {
                ledger_error.borrow_mut().get_or_insert(e);
            }
        },
    )?;
    if let Some(e) = ledger_error.into_inner() {
        return Err(e).with_context(|| format!("writing {}", ledger_path.display()));
    }

    let incumbent = run.incumbent_obs();
    let strategy_file = StrategyFile {
        strategy: incumbent.strategy,
        layout: cfg.layout,
        budget: cfg.budget,
        objective: incumbent.y,
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let strategy_path = args.out.join("strategy.txt");
    strategy_file.save(&strategy_path)?;

    let report = evaluator.evaluate(&incumbent.strategy)?;
    let mut summary = String::new();
    summary.push_str(&format!("budget,{}\n", cfg.budget));
    summary.push_str(&format!("iterations,{}\n", cfg.iterations));
    summary.push_str(&format!("init,{}\n", cfg.init_count));
    summary.push_str(&format!("seed,{}\n", cfg.seed));
    summary.push_str(&format!("incumbent_index,{}\n", run.incumbent));
    let s = &incumbent.strategy;
    summary.push_str(&format!(
        "strategy,r1={},r2={},r3={},t={},alpha={},a={}\n",
        s.r1, s.r2, s.r3, s.t, s.alpha, s.a
    ));
    summary.push_str(&format!("objective,{}\n", incumbent.y));
    for (i, sim) in report.per_sample_sim.iter().enumerate() {
        summary.push_str(&format!("sample,{i},{sim}\n"));
    }
    summary.push_str(&format!("strategy_file,{}\n", strategy_path.display()));
    summary.push_str(&format!("ledger_file,{}\n", ledger_path.display()));
    print!("{summary}");
    Ok(())
}

/// Bundle directories under `dir`: the directory itself when it holds a
/// manifest, otherwise its manifest-bearing subdirectories sorted by name.
fn bundle_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join(flowprune::trace::MANIFEST_NAME).is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading trace directory {}", dir.display()))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join(flowprune::trace::MANIFEST_NAME).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!(
            "no trace bundles (directories with a manifest) under {}",
            dir.display()
        );
    }
    Ok(dirs)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let file = StrategyFile::load(&args.strategy)?;
    let strategy = args.ablations.apply_schedule(file.strategy, file.budget);
    let opts = args.ablations.pipeline();

    let mut lines = String::new();
    let mut total = 0.0;
    if let Some(traces) = &args.traces {
        let mut cached: Option<(flowprune::ToyModelConfig, Model)> = None;
        for (index, dir) in bundle_dirs(traces)?.iter().enumerate() {
            let bundle =
                load_trace(dir).with_context(|| format!("loading bundle {}", dir.display()))?;
            if bundle.cfg.lm_layers != file.layout.total() {
                bail!(
                    "bundle {} records {} LM layers, strategy layout spans {}",
                    dir.display(),
                    bundle.cfg.lm_layers,
                    file.layout.total()
                );
            }
            if cached
                .as_ref()
                .map(|(cfg, _)| *cfg != bundle.cfg)
                .unwrap_or(true)
            {
                cached = Some((bundle.cfg, Model::build(bundle.cfg)?));
            }
            let (_, model) = cached.as_ref().expect("cache populated above");
            let sim = evaluate_against_trace(model, &bundle, &strategy, &file.layout, opts)?;
            total += sim;
            lines.push_str(&format!("sample,{index},{sim}\n"));
        }
    } else {
        let mut cfg = RunConfig::load(args.common.config.as_deref())?;
        if let Some(seed) = args.common.seed {
            cfg.workload_seed = seed;
        }
        if let Some(samples) = args.common.samples {
            cfg.samples = samples;
        }
        cfg.validate()?;
        if cfg.model.lm_layers != file.layout.total() {
            bail!(
                "config model has {} LM layers, strategy layout spans {}",
                cfg.model.lm_layers,
                file.layout.total()
            );
        }
        let model = cfg.build_model()?;
        let samples = cfg.workload()?;
        let evaluator = FlowEvaluator::new(&model, &samples, file.layout, opts)?;
        let report = evaluator.evaluate(&strategy)?;
        for (i, sim) in report.per_sample_sim.iter().enumerate() {
            lines.push_str(&format!("sample,{i},{sim}\n"));
        }
        total = report.total;
    }
    lines.push_str(&format!("total,{total}\n"));
    emit(args.out.as_deref(), &lines)
}

struct PruneInputs {
    model: Model,
    sample: WorkloadSample,
    /// Attention behind the importance scores: recorded for bundles,
    /// freshly encoded for images.
    attention: AttentionMap,
}

fn prune_inputs(args: &PruneArgs) -> Result<(PruneInputs, VisionEncoding)> {
    let inputs = match (&args.image, &args.traces) {
        (Some(_), Some(_)) | (None, None) => {
            bail!("pass exactly one of --image or --traces")
        }
        (Some(image_path), None) => {
            let cfg = RunConfig::load(args.common.config.as_deref())?;
            let bytes = fs::read(image_path)
                .with_context(|| format!("reading image {}", image_path.display()))?;
            let image = flowprune::decode_image(&bytes)
                .with_context(|| format!("decoding {}", image_path.display()))?;
            let sample = WorkloadSample {
                image,
                patch_size: cfg.patch_size,
                text_seed: 0,
            };
            sample.validate()?;
            let model = cfg.build_model()?;
            let attention = model.encode(&sample)?.attention;
            PruneInputs {
                model,
                sample,
                attention,
            }
        }
        (None, Some(traces)) => {
            let bundle = load_trace(traces)
                .with_context(|| format!("loading bundle {}", traces.display()))?;
            let model = Model::build(bundle.cfg)?;
            PruneInputs {
                model,
                sample: bundle.sample,
                attention: bundle.trace.attention,
            }
        }
    };
    let encoding = inputs.model.encode(&inputs.sample)?;
    Ok((inputs, encoding))
}

fn id_list(mut ids: Vec<usize>) -> String {
    ids.sort_unstable();
    ids.iter()
        .map(|id| id.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn cmd_prune(args: &PruneArgs) -> Result<()> {
    let file = StrategyFile::load(&args.strategy)?;
    let strategy = args.ablations.apply_schedule(file.strategy, file.budget);
    let opts = args.ablations.pipeline();
    let (inputs, encoding) = prune_inputs(args)?;

    let entropy = entropy_map(&gray_levels(&inputs.sample.image), inputs.sample.patch_size)?;
    let importance = importance_from_parts(
        &inputs.attention,
        &entropy,
        strategy.t,
        strategy.alpha,
        opts.calibration,
    )?;
    let n = encoding.tokens.len();
    let counts = stage_token_counts(n, &strategy);
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

    let mut output = String::new();
    for (i, score) in importance.scores.iter().enumerate() {
        output.push_str(&format!("importance,{i},{score}\n"));
    }
    let mut stage_line = |stage: usize, outcome: &PruneOutcome| {
        output.push_str(&format!(
            "stage,{stage},retained,{}\n",
            id_list(outcome.retained.position_ids())
        ));
        output.push_str(&format!(
            "stage,{stage},pruned,{}\n",
            id_list(outcome.pruned.position_ids())
        ));
        let merged_ids: Vec<usize> = outcome.merged.iter().map(|t| t.position_id).collect();
        output.push_str(&format!("stage,{stage},merged,{}\n", id_list(merged_ids)));
    };
    let stage0 = apply_stage_prune(&ts, counts[0], opts.recycle, strategy.a)?;
    stage_line(0, &stage0);
    let stage1 = topk_retain(&stage0.retained, counts[1])?;
    stage_line(1, &stage1);
    let stage2 = topk_retain(&stage1.retained, counts[2])?;
    stage_line(2, &stage2);

    emit(args.out.as_deref(), &output)
}

pub fn cmd_cost(args: &CostArgs) -> Result<()> {
    let file = StrategyFile::load(&args.strategy)?;
    let dims = ModelDims {
        lm_layers: file.layout.total(),
        hidden: args.hidden,
        ffn: args.ffn,
        heads: args.heads,
        bytes_per_value: args.bytes,
    };
    let report = pipeline_costs(
        args.n_visual,
        args.n_text,
        &file.strategy,
        &file.layout,
        &dims,
        &[0, 0, 0],
    )?;
    let mb = |bytes: u64| bytes as f64 / (1024.0 * 1024.0);
    let mut output = String::from(
        "budget,n_visual,n_text,flops,flops_baseline,flops_reduction,kv_mb,kv_mb_baseline,kv_reduction\n",
    );
    output.push_str(&format!(
        "{},{},{},{},{},{},{},{},{}\n",
        file.budget,
        args.n_visual,
        args.n_text,
        report.flops_total,
        report.flops_baseline,
        report.flops_reduction,
        mb(report.kv_bytes_total),
        mb(report.kv_bytes_baseline),
        report.kv_reduction
    ));
    emit(args.out.as_deref(), &output)
}

pub fn cmd_flow(args: &FlowArgs) -> Result<()> {
    let file = StrategyFile::load(&args.strategy)?;
    let strategy = args.ablations.apply_schedule(file.strategy, file.budget);
    let mut cfg = RunConfig::load(args.common.config.as_deref())?;
    if let Some(seed) = args.common.seed {
        cfg.workload_seed = seed;
    }
    if let Some(samples) = args.common.samples {
        cfg.samples = samples;
    }
    cfg.validate()?;
    if cfg.model.lm_layers != file.layout.total() {
        bail!(
            "config model has {} LM layers, strategy layout spans {}",
            cfg.model.lm_layers,
            file.layout.total()
        );
    }
    let model = cfg.build_model()?;
    let samples = cfg.workload()?;
    let sample = samples.get(args.sample).ok_or_else(|| {
        anyhow::anyhow!(
            "sample index {} outside workload of {}",
            args.sample,
            samples.len()
        )
    })?;
    let series = flow_divergence_with(
        &model,
        sample,
        &strategy,
        &file.layout,
        args.ablations.pipeline(),
    )?;
    let mut output = String::from("layer,similarity\n");
    for (layer, sim) in series.iter().enumerate() {
        output.push_str(&format!("{layer},{sim}\n"));
    }
    emit(args.out.as_deref(), &output)
}

pub fn cmd_entropy(image: &Path, patch_size: usize, out: Option<&Path>) -> Result<()> {
    let bytes = fs::read(image).with_context(|| format!("reading image {}", image.display()))?;
    let decoded =
        flowprune::decode_image(&bytes).with_context(|| format!("decoding {}", image.display()))?;
    let gray = gray_levels(&decoded);
    let map = entropy_map(&gray, patch_size)?;
    let cols = gray.width / patch_size;
    let mut output = String::from("token,x,y,entropy\n");
    for (i, h) in map.values.iter().enumerate() {
        output.push_str(&format!("{i},{},{},{h}\n", i % cols, i / cols));
    }
    emit(out, &output)
}
