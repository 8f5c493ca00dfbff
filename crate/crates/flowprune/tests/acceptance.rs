//! Acceptance suite. One test per criterion; each prints a `[PASS]` line
//! with its measured runtime (visible with `--nocapture`).
//!
//! Criteria timings cover each test's own body; fixtures shared between
//! tests (the default model, workload, and the seed-7 reference search)
//! are built once and not charged to any single criterion.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use flowprune::*;

const STUDY_SEEDS: u64 = 20;
const EVALS: usize = 50;
const INIT: usize = 10;

struct Fixture {
    model: Model,
    samples: Vec<WorkloadSample>,
    layout: StageLayout,
    space: SearchSpace,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let model = Model::build(ToyModelConfig::default()).expect("default config is valid");
        let samples = default_workload(30, 101);
        let layout = StageLayout::new(4, 4, 4).unwrap();
        let space = SearchSpace::default_box(layout, Budget::new(0.25).unwrap());
        Fixture {
            model,
            samples,
            layout,
            space,
        }
    })
}

/// The seed-7 reference search at budget 0.25, shared by criteria 6 and 9.
fn reference_run() -> &'static OptimizationRun {
    static RUN: OnceLock<OptimizationRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let fx = fixture();
        optimize(&fx.model, &fx.samples, &fx.space, EVALS, INIT, 7).expect("reference search")
    })
}

fn pass(name: &str, elapsed: Duration, detail: &str) {
    println!("[PASS] {name}: {detail} ({elapsed:.2?})");
}

#[test]
fn criterion_01_retention_round_trip() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..1000 {
        let layout = StageLayout::new(
            rng.random_range(1..16),
            rng.random_range(1..16),
            rng.random_range(1..16),
        )
        .unwrap();
        let draw = |rng: &mut ChaCha8Rng| -> f64 { rng.random_range(0.01f64..=1.0) };
        let (r1, r2, r3) = (draw(&mut rng), draw(&mut rng), draw(&mut rng));
        let reference = PruningStrategy {
            r1,
            r2,
            r3,
            t: 1.0,
            alpha: 0.0,
            a: 1,
        };
        let r_bar = average_retention(&reference, &layout);
        let budget = Budget::new(r_bar).unwrap();
        let solved = solve_r3(r1, r2, &layout, &budget)
            .unwrap_or_else(|| panic!("case {case}: constructed budget must be feasible"));
        let solved_strategy = PruningStrategy {
            r3: solved,
            ..reference
        };
        let round_trip = average_retention(&solved_strategy, &layout);
        assert!(
            (round_trip - r_bar).abs() < 1e-12,
            "case {case}: round trip {round_trip} vs budget {r_bar}"
        );
    }
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(1));
    pass(
        "criterion 1",
        elapsed,
        "1000 solve/retention round trips within 1e-12",
    );
}

#[test]
fn criterion_02_entropy_goldens() {
    let started = Instant::now();

    let constant = ImageBuffer::new(16, 16, 1, vec![128; 256]).unwrap();
    let map = entropy_map(&constant, 16).unwrap();
    assert_eq!(map.values, vec![0.0]);

    let mut two_level = vec![10u8; 128];
    two_level.extend(vec![200u8; 128]);
    let img = ImageBuffer::new(16, 16, 1, two_level).unwrap();
    let map = entropy_map(&img, 16).unwrap();
    assert!((map.values[0] - 2.0f64.ln()).abs() < 1e-9);

    let uniform: Vec<u8> = (0..=255).collect();
    let img = ImageBuffer::new(16, 16, 1, uniform).unwrap();
    let map = entropy_map(&img, 16).unwrap();
    assert!((map.values[0] - 256.0f64.ln()).abs() < 1e-9);

    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(1));
    pass(
        "criterion 2",
        elapsed,
        "entropy goldens 0 / ln 2 / ln 256 within 1e-9",
    );
}

#[test]
fn criterion_03_importance_calibration_case_study() {
    let started = Instant::now();
    // Six tokens: a redundant hub (0) fed 0.9 attention by tokens 1-3, and
    // two salient tokens (4, 5) receiving attention from everyone.
    #[rustfmt::skip]
    let rows: Vec<f32> = vec![
        0.0,   0.3,   0.3,   0.3,   0.05, 0.05,
        0.9,   0.0,   0.0,   0.0,   0.05, 0.05,
        0.9,   0.0,   0.0,   0.0,   0.05, 0.05,
        0.9,   0.0,   0.0,   0.0,   0.05, 0.05,
        0.025, 0.025, 0.025, 0.025, 0.45, 0.45,
        0.025, 0.025, 0.025, 0.025, 0.45, 0.45,
    ];
    let attention = AttentionMap::new(6, rows.clone()).unwrap();
    attention.assert_row_stochastic(1e-6).unwrap();
    let redundant = [0usize, 1, 2, 3];
    let salient = [4usize, 5];

    // Brute force, straight off the row data.
    let col_sum = |j: usize| -> f64 { (0..6).map(|i| rows[i * 6 + j] as f64).sum() };
    let brute_plain_argmax = (0..6)
        .max_by(|&p, &q| col_sum(p).total_cmp(&col_sum(q)).then(q.cmp(&p)))
        .unwrap();
    let tau: f64 = (0..6).map(col_sum).sum::<f64>() / 6.0;
    let brute_keys: Vec<usize> = (0..6).filter(|&j| col_sum(j) > tau).collect();
    let brute_calibrated =
        |i: usize| -> f64 { brute_keys.iter().map(|&k| rows[k * 6 + i] as f64).sum() };
    let brute_calibrated_argmax = (0..6)
        .max_by(|&p, &q| {
            brute_calibrated(p)
                .total_cmp(&brute_calibrated(q))
                .then(q.cmp(&p))
        })
        .unwrap();
    assert!(redundant.contains(&brute_plain_argmax));
    assert!(salient.contains(&brute_calibrated_argmax));

    // Library path agrees with the brute force.
    let plain = plain_importance(&attention);
    assert_eq!(plain.argmax(), brute_plain_argmax);
    let keys = select_key_tokens(&attention, attention_threshold(&attention, 1.0));
    assert_eq!(keys.indices, brute_keys);
    let entropy = EntropyMap {
        values: vec![0.0; 6],
        gray_levels: GRAY_LEVELS,
    };
    let calibrated = calibrated_importance(
        &attention,
        &keys,
        &entropy,
        ImportanceParams { t: 1.0, alpha: 0.0 },
    )
    .unwrap();
    assert_eq!(calibrated.argmax(), brute_calibrated_argmax);
    assert!(redundant.contains(&plain.argmax()));
    assert!(salient.contains(&calibrated.argmax()));

    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(1));
    pass(
        "criterion 3",
        elapsed,
        "calibrated argmax is salient while plain-mean argmax is redundant",
    );
}

#[test]
fn criterion_04_recycling_correctness() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let dim = 6;
    for case in 0..1000 {
        let members = rng.random_range(1..=8usize);
        let tokens: Vec<Token> = (0..members)
            .map(|i| Token {
                position_id: i,
                coord: (i % 4, i / 4),
                rep: (0..dim).map(|_| rng.random_range(-4.0f32..4.0)).collect(),
                importance: rng.random_range(0.0f64..1.0),
            })
            .collect();
        let ts = TokenSet::new(tokens.clone(), 4, 2).unwrap();
        let cells = assign_grid_cells(&ts, 4);
        assert_eq!(cells.len(), 1, "all coordinates fall in one cell at a = 4");
        let (fused, _) = merge_recycle(&cells);
        assert_eq!(fused.len(), 1);
        let fused = &fused[0];

        // Convex hull, componentwise.
        for d in 0..dim {
            let lo = tokens
                .iter()
                .map(|t| t.rep[d])
                .fold(f32::INFINITY, f32::min);
            let hi = tokens
                .iter()
                .map(|t| t.rep[d])
                .fold(f32::NEG_INFINITY, f32::max);
            assert!(
                fused.rep[d] >= lo - 1e-5 && fused.rep[d] <= hi + 1e-5,
                "case {case}: component {d} = {} outside [{lo}, {hi}]",
                fused.rep[d]
            );
        }

        // Importance-scale invariance.
        let c = rng.random_range(0.1f64..10.0);
        let scaled = TokenSet::new(
            tokens
                .iter()
                .map(|t| Token {
                    importance: t.importance * c,
                    ..t.clone()
                })
                .collect(),
            4,
            2,
        )
        .unwrap();
        let (fused_scaled, _) = merge_recycle(&assign_grid_cells(&scaled, 4));
        assert_eq!(fused.position_id, fused_scaled[0].position_id);
        for d in 0..dim {
            assert!(
                (fused.rep[d] - fused_scaled[0].rep[d]).abs() < 1e-5,
                "case {case}: scale invariance broke at component {d}"
            );
        }

        // Single-token cells (unit grid) reproduce their token exactly.
        let single = TokenSet::new(vec![tokens[0].clone()], 4, 2).unwrap();
        let (alone, _) = merge_recycle(&assign_grid_cells(&single, 1));
        assert_eq!(alone, vec![tokens[0].clone()]);
    }
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(5));
    pass(
        "criterion 4",
        elapsed,
        "1000 random cells: convex hull, scale invariance, exact singletons",
    );
}

#[test]
fn criterion_05_identity_equivalence() {
    let started = Instant::now();
    let fx = fixture();
    let identity = PruningStrategy::identity();
    for (index, sample) in fx.samples.iter().enumerate() {
        let full = forward_full(&fx.model, sample).unwrap();
        let importance = sample_importance(&fx.model, sample, 1.0, 0.5).unwrap();
        let pruned = forward_pruned(&fx.model, sample, &identity, &fx.layout, &importance).unwrap();
        assert_eq!(
            full, pruned,
            "sample {index}: identity run must be bit-equal"
        );
    }
    let report = evaluate_objective(&fx.model, &fx.samples, &identity, &fx.layout).unwrap();
    assert!(
        (report.total - 30.0).abs() < 1e-5,
        "identity objective total {}",
        report.total
    );
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(10));
    pass(
        "criterion 5",
        elapsed,
        "30 bit-equal identity runs, objective 30 within 1e-5",
    );
}

#[test]
fn criterion_06_optimizer_effectiveness() {
    let started = Instant::now();
    let fx = fixture();
    let evaluator = FlowEvaluator::new(
        &fx.model,
        &fx.samples,
        fx.layout,
        PipelineOptions::default(),
    )
    .unwrap();
    let objective = |s: &PruningStrategy, _: &[f64; 5]| evaluator.evaluate(s).map(|r| r.total);

    // Coarse-lattice brute-force oracle.
    let lattice = lattice_search(&fx.space, &[4, 4, 4, 3, 3], objective)
        .unwrap()
        .expect("the coarse lattice has feasible points at budget 0.25");
    let bar = 0.95 * lattice.y;

    let mut beat_median = 0;
    let mut reached_bar = 0;
    for seed in 0..STUDY_SEEDS {
        let bo = optimize_objective(
            &fx.space,
            EVALS,
            INIT,
            seed,
            DEFAULT_XI,
            objective,
            |_, _| {},
        )
        .unwrap();
        let random = random_search(&fx.space, EVALS, seed + 1000, objective).unwrap();
        let mut random_ys: Vec<f64> = random.history.iter().map(|o| o.y).collect();
        random_ys.sort_by(f64::total_cmp);
        let median = 0.5 * (random_ys[EVALS / 2 - 1] + random_ys[EVALS / 2]);
        let incumbent = bo.incumbent_obs().y;
        println!(
            "  seed {seed}: incumbent {incumbent:.4}, random median {median:.4}, lattice {:.4}",
            lattice.y
        );
        if incumbent > median {
            beat_median += 1;
        }
        if incumbent >= bar {
            reached_bar += 1;
        }
    }
    assert!(
        beat_median >= 18,
        "incumbent beat the random median in only {beat_median}/{STUDY_SEEDS} seeds"
    );
    assert!(
        reached_bar == STUDY_SEEDS,
        "incumbent reached 0.95x the lattice optimum in only {reached_bar}/{STUDY_SEEDS} seeds"
    );
    // The shipped-default search clears the same bar.
    assert!(reference_run().incumbent_obs().y >= bar);

    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(600));
    pass(
        "criterion 6",
        elapsed,
        &format!(
            "beat random median {beat_median}/{STUDY_SEEDS}, reached 0.95x lattice {reached_bar}/{STUDY_SEEDS}"
        ),
    );
}

#[test]
fn criterion_07_bo_quadratic_benchmark() {
    let started = Instant::now();
    let fx = fixture();
    let target = [0.32, 0.9, 0.5, 0.5, 0.5];
    assert!(
        fx.space.realize(&target).is_some(),
        "the peak must be feasible"
    );
    let weights = [4.0, 4.0, 1.0, 1.0, 1.0];
    let objective = |_: &PruningStrategy, x: &[f64; 5]| -> Result<f64> {
        Ok(5.0
            - x.iter()
                .zip(&target)
                .zip(&weights)
                .map(|((v, t), w)| w * (v - t) * (v - t))
                .sum::<f64>())
    };
    let distance = |x: &[f64; 5]| -> f64 {
        x.iter()
            .zip(&target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };

    let mut bo_hits = 0;
    let mut random_hits = 0;
    for seed in 0..STUDY_SEEDS {
        let bo = optimize_objective(
            &fx.space,
            EVALS,
            INIT,
            seed,
            DEFAULT_XI,
            objective,
            |_, _| {},
        )
        .unwrap();
        let random = random_search(&fx.space, EVALS, seed + 500, objective).unwrap();
        if distance(&bo.incumbent_obs().x) < 0.15 {
            bo_hits += 1;
        }
        if distance(&random.incumbent_obs().x) < 0.15 {
            random_hits += 1;
        }
    }
    assert!(
        bo_hits >= 15,
        "BO localized the peak in only {bo_hits}/{STUDY_SEEDS} seeds"
    );
    assert!(
        random_hits <= 8,
        "random search localized the peak in {random_hits}/{STUDY_SEEDS} seeds"
    );
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(60));
    pass(
        "criterion 7",
        elapsed,
        &format!("BO within 0.15 of the peak {bo_hits}/{STUDY_SEEDS}, random {random_hits}/{STUDY_SEEDS}"),
    );
}

#[test]
fn criterion_08_cost_model_concordance() {
    let started = Instant::now();
    // Visual tokens dominate (120:1) and the linear decoder terms dominate
    // the quadratic attention term at this scale.
    let layout = StageLayout::new(9, 9, 10).unwrap();
    let dims = ModelDims {
        lm_layers: 28,
        hidden: 3584,
        ffn: 18944,
        heads: 28,
        bytes_per_value: 2,
    };
    let n_visual = 360;
    let n_text = 3;

    let pairs = [(0.5, (0.5, 1.0)), (0.25, (0.4, 0.5)), (0.1, (0.2, 0.5))];
    let entries: Vec<(f64, PruningStrategy)> = pairs
        .iter()
        .map(|&(budget, (r1, r2))| {
            let r3 = solve_r3(r1, r2, &layout, &Budget::new(budget).unwrap()).unwrap();
            (
                budget,
                PruningStrategy {
                    r1,
                    r2,
                    r3,
                    t: 1.0,
                    alpha: 0.0,
                    a: 1,
                },
            )
        })
        .collect();
    let reports = table_sweep(&entries, n_visual, n_text, &layout, &dims).unwrap();

    let expected_kv = [0.495, 0.742, 0.890];
    for ((report, expected), (budget, _)) in reports.iter().zip(expected_kv).zip(&pairs) {
        assert!(
            (report.kv_reduction - expected).abs() <= 0.02,
            "budget {budget}: KV reduction {:.4} vs expected {expected} +- 2pp",
            report.kv_reduction
        );
    }
    let flops_half = reports[0].flops_reduction;
    assert!(
        (0.45..=0.50).contains(&flops_half),
        "FLOPs reduction at half budget was {flops_half:.4}"
    );

    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(1));
    pass(
        "criterion 8",
        elapsed,
        &format!(
            "KV reductions {:.4}/{:.4}/{:.4} within 2pp, FLOPs at half budget {flops_half:.4}",
            reports[0].kv_reduction, reports[1].kv_reduction, reports[2].kv_reduction
        ),
    );
}

#[test]
fn criterion_09_flow_divergence_qualitative() {
    let fx = fixture();
    let run = reference_run();
    let started = Instant::now();
    let worst_initial = run.history[..run.init_count]
        .iter()
        .min_by(|a, b| a.y.total_cmp(&b.y))
        .unwrap();
    let incumbent = run.incumbent_obs();
    let mut worst_margin = f64::INFINITY;
    for (index, sample) in fx.samples.iter().enumerate() {
        let optimized =
            flow_divergence(&fx.model, sample, &incumbent.strategy, &fx.layout).unwrap();
        let unoptimized =
            flow_divergence(&fx.model, sample, &worst_initial.strategy, &fx.layout).unwrap();
        assert_eq!(optimized.len(), fx.layout.total());
        let last_optimized = *optimized.last().unwrap();
        let last_unoptimized = *unoptimized.last().unwrap();
        assert!(
            last_optimized >= last_unoptimized,
            "sample {index}: optimized {last_optimized:.5} < unoptimized {last_unoptimized:.5}"
        );
        worst_margin = worst_margin.min(last_optimized - last_unoptimized);
    }
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(60));
    pass(
        "criterion 9",
        elapsed,
        &format!("optimized >= worst-initial on all 30 samples (min margin {worst_margin:.4})"),
    );
}
