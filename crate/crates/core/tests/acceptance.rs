//! The eight release gates, one test per criterion. Each prints a
//! `criterion N (...): PASS` line; a panic in any of them is the
//! corresponding FAIL.

use layerfuse::encoder::{default_dual_split, EncoderConfig, LayerStack, Stream};
use layerfuse::fusion::{self, FusionKind, FusionParams};
use layerfuse::grounding::{iou, iou05_accuracy, Box2D};
use layerfuse::model::ModelConfig;
use layerfuse::optim::AdamConfig;
use layerfuse::parallel::ExecMode;
use layerfuse::params::{init_params, ParamStore};
use layerfuse::persistence::{
    load_checkpoint, save_checkpoint, CheckpointMeta, RunConfig,
};
use layerfuse::rng::Rng64;
use layerfuse::sample::GroundingSample;
use layerfuse::synthgen::{self, SceneSpec};
use layerfuse::tensor::Tensor;
use layerfuse::train::{self, GradCheckConfig};
use std::time::Instant;

// ---------------------------------------------------------------------------
// criterion 1: parameter-count oracle

#[test]
fn criterion_1_param_count_oracle() {
    let started = Instant::now();
    let (d, layers) = (768, 12);

    // Published per-kind extra-parameter counts at the reference size.
    let expected: [(FusionKind, usize); 6] = [
        (FusionKind::TopLayer, 0),
        (FusionKind::Rsd, 769),
        (FusionKind::SampleSpecific, 769),
        (FusionKind::CoarseGrained, 13),
        (FusionKind::FineGrained, 9984),
        (FusionKind::DynamicRouting, 7_667_712),
    ];
    for (kind, count) in expected {
        assert_eq!(fusion::param_count(kind, d, layers), count, "{kind} at d=768, L=12");
    }

    // The counting formula agrees with actually materialized stores.
    for kind in FusionKind::ALL {
        // The combination chain is quadratic in d; check it at desk scale.
        let (cd, cl) =
            if kind == FusionKind::DynamicCombination { (64, 4) } else { (d, layers) };
        let store = init_params(&fusion::param_specs(kind, cd, cl), 7).unwrap();
        assert_eq!(
            store.total_params_with_prefix("fusion."),
            fusion::param_count(kind, cd, cl),
            "store/count mismatch for {kind}"
        );
    }

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}, budget 1s");
    println!("criterion 1 (param-count oracle): PASS in {elapsed:?}");
}

// ---------------------------------------------------------------------------
// criterion 2: gradient suite

#[test]
fn criterion_2_gradient_suite() {
    let started = Instant::now();
    let gc = GradCheckConfig::default(); // d=16, L=2, heads=2, n=3, m=5
    assert_eq!((gc.d, gc.layers, gc.heads, gc.n_regions, gc.n_tokens), (16, 2, 2, 3, 5));

    let rows = train::gradcheck_suite(&gc).unwrap();
    for kind in FusionKind::ALL {
        let hits = rows.iter().filter(|r| r.component == format!("model/{kind}")).count();
        assert_eq!(hits, 1, "{kind} must be audited exactly once");
    }
    for row in &rows {
        assert!(
            row.max_err < 1e-4,
            "{}: max relative error {} over threshold",
            row.component,
            row.max_err
        );
    }

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 30.0, "took {elapsed:?}, budget 30s");
    println!("criterion 2 (gradient suite): PASS, {} components in {elapsed:?}", rows.len());
}

// ---------------------------------------------------------------------------
// criterion 3: fusion invariants over 1000 seeds

fn random_stack(rng: &mut Rng64, n: usize, d: usize, layers: usize) -> LayerStack {
    let mk = |rng: &mut Rng64| {
        Tensor::new(vec![n, d], (0..n * d).map(|_| rng.normal()).collect()).unwrap()
    };
    LayerStack {
        regions: (0..=layers).map(|_| mk(rng)).collect(),
        tokens: (0..=layers).map(|_| Tensor::zeros(&[1, d])).collect(),
    }
}

fn fusion_params(kind: FusionKind, d: usize, layers: usize, seed: u64) -> FusionParams {
    let store = init_params(&fusion::param_specs(kind, d, layers), seed).unwrap();
    FusionParams::from_store(kind, &store, d, layers).unwrap()
}

/// Every row of a weight matrix is a probability vector.
fn assert_stochastic(w: &Tensor, what: &str) {
    let (n, _) = w.dims2().unwrap();
    for i in 0..n {
        let row = w.row(i);
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9, "{what}: row {i} sums to {sum}");
        assert!(row.iter().all(|&v| v >= -1e-12), "{what}: negative weight in row {i}");
    }
}

fn assert_in_hull(fused: &Tensor, layers: &[Tensor], tol: f64, what: &str) {
    let (n, d) = fused.dims2().unwrap();
    for i in 0..n {
        for k in 0..d {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for layer in layers {
                lo = lo.min(layer.at2(i, k));
                hi = hi.max(layer.at2(i, k));
            }
            let v = fused.at2(i, k);
            assert!(
                v >= lo - tol && v <= hi + tol,
                "{what}: fused[{i}][{k}] = {v} outside [{lo}, {hi}]"
            );
        }
    }
}

#[test]
fn criterion_3_fusion_invariants() {
    let started = Instant::now();
    for seed in 0..1000u64 {
        let mut rng = Rng64::seed_from_u64(seed ^ 0x5eed);
        let d = 2 + (seed % 5) as usize;
        let layers = 1 + (seed % 3) as usize;
        let n = 1 + (seed % 4) as usize;
        let stack = random_stack(&mut rng, n, d, layers);

        // Weight rows are stochastic for every kind that produces them.
        let rsd = fusion_params(FusionKind::Rsd, d, layers, seed);
        let w = fusion::rsd_weights(&stack, &rsd).unwrap();
        assert_stochastic(&w.weights, "RSD");

        let ss = fusion_params(FusionKind::SampleSpecific, d, layers, seed);
        let w = fusion::sample_specific_weights(&stack, &ss).unwrap();
        assert_stochastic(&w.weights, "SampleSpecific");
        // ... and identical across the sample's regions, bitwise.
        let first: Vec<u64> = w.weights.row(0).iter().map(|v| v.to_bits()).collect();
        for i in 1..n {
            let row: Vec<u64> = w.weights.row(i).iter().map(|v| v.to_bits()).collect();
            assert_eq!(first, row, "SampleSpecific row {i} differs (seed {seed})");
        }

        for kind in [
            FusionKind::CoarseGrained,
            FusionKind::FineGrained,
            FusionKind::DynamicRouting,
        ] {
            let fp = fusion_params(kind, d, layers, seed);
            let w = fusion::analysis_weights(&stack, &fp, 3).unwrap();
            assert_stochastic(&w, kind.name());
        }

        // Static kinds never look at the representations.
        let other = random_stack(&mut rng, n, d, layers);
        for kind in [FusionKind::CoarseGrained, FusionKind::FineGrained] {
            let fp = fusion_params(kind, d, layers, seed);
            let a = fusion::analysis_weights(&stack, &fp, 3).unwrap();
            let b = fusion::analysis_weights(&other, &fp, 3).unwrap();
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a), bits(&b), "{kind} weights depend on input (seed {seed})");
        }

        // Saturated RSD scores collapse onto the top layer.
        let dir: Vec<f64> = {
            let raw: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
            raw.iter().map(|v| v / norm).collect()
        };
        // Each layer sits 1000 units further along `dir` than the last, so
        // the random component (a few units) cannot reorder the scores.
        let graded = LayerStack {
            regions: stack
                .regions
                .iter()
                .enumerate()
                .map(|(l, t)| {
                    let mut t = t.clone();
                    for i in 0..n {
                        for (k, &dk) in dir.iter().enumerate() {
                            t.set2(i, k, t.at2(i, k) + l as f64 * 1000.0 * dk);
                        }
                    }
                    t
                })
                .collect(),
            tokens: stack.tokens.clone(),
        };
        let mut store = ParamStore::empty(0);
        let w_sat = Tensor::new(vec![d, 1], dir.clone()).unwrap();
        store.insert("fusion.alpha.w", w_sat).unwrap();
        store.insert("fusion.alpha.b", Tensor::zeros(&[1, 1])).unwrap();
        let sat = FusionParams::from_store(FusionKind::Rsd, &store, d, layers).unwrap();
        let fused = fusion::fuse(&graded, FusionKind::Rsd, &sat, 3).unwrap();
        let top = fusion::fuse(
            &graded,
            FusionKind::TopLayer,
            &fusion_params(FusionKind::TopLayer, d, layers, seed),
            3,
        )
        .unwrap();
        assert!(
            fused.approx_eq(&top, 1e-9),
            "saturated RSD != TopLayer at seed {seed}"
        );

        // Convex-combination kinds stay inside the per-coordinate hull.
        for kind in [
            FusionKind::TopLayer,
            FusionKind::Rsd,
            FusionKind::SampleSpecific,
            FusionKind::CoarseGrained,
            FusionKind::FineGrained,
        ] {
            let fp = fusion_params(kind, d, layers, seed);
            let fused = fusion::fuse(&stack, kind, &fp, 3).unwrap();
            assert_in_hull(&fused, &stack.regions, 1e-12, kind.name());
        }
        // Routing mixes projected layers; the hull is over those.
        let fp = fusion_params(FusionKind::DynamicRouting, d, layers, seed);
        let (fused, _) = fusion::dynamic_routing_fuse(&stack, &fp, 3).unwrap();
        let projected: Vec<Tensor> = (0..=layers)
            .map(|l| {
                let p = fp.store().get(&format!("fusion.route.p{l:02}")).unwrap();
                stack.regions[l].matmul(p).unwrap()
            })
            .collect();
        assert_in_hull(&fused, &projected, 1e-9, "DynamicRouting");
    }

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}, budget 1min");
    println!("criterion 3 (fusion invariants, 1000 seeds): PASS in {elapsed:?}");
}

// ---------------------------------------------------------------------------
// criterion 4: geometry and metric, exact

#[test]
fn criterion_4_geometry_metric() {
    // Dyadic coordinates make the 1/7 case exact in binary floating point.
    let a = Box2D::new(0.0, 0.0, 0.5, 0.5).unwrap();
    let b = Box2D::new(0.25, 0.25, 0.75, 0.75).unwrap();
    assert_eq!(iou(&a, &b).unwrap(), 1.0 / 7.0);
    assert_eq!(iou(&b, &a).unwrap(), 1.0 / 7.0, "iou must be symmetric");

    assert_eq!(iou(&a, &a).unwrap(), 1.0, "identical boxes");
    let far = Box2D::new(0.6, 0.6, 0.9, 0.9).unwrap();
    assert_eq!(iou(&a, &far).unwrap(), 0.0, "disjoint boxes");
    let touching = Box2D::new(0.5, 0.0, 1.0, 0.5).unwrap();
    assert_eq!(iou(&a, &touching).unwrap(), 0.0, "edge contact has zero area");
    let inner = Box2D::new(0.125, 0.125, 0.375, 0.375).unwrap();
    assert_eq!(iou(&a, &inner).unwrap(), 0.25, "containment is area ratio");

    for (x, y) in [(&a, &b), (&a, &far), (&a, &inner)] {
        let v = iou(x, y).unwrap();
        assert!((0.0..=1.0).contains(&v));
    }

    // Strictly-greater threshold: a pair at exactly 0.5 does not count.
    // Containment pairs give exact ratios: 0.6, 0.5, and 0.0.
    let preds = [
        Box2D::new(0.0, 0.0, 0.5, 0.5).unwrap(),
        Box2D::new(0.0, 0.0, 0.5, 0.25).unwrap(),
        Box2D::new(0.0, 0.0, 0.25, 0.25).unwrap(),
    ];
    let truths = [
        Box2D::new(0.0, 0.0, 0.5, 0.3).unwrap(),
        Box2D::new(0.0, 0.0, 0.25, 0.25).unwrap(),
        Box2D::new(0.5, 0.5, 0.75, 0.75).unwrap(),
    ];
    assert_eq!(iou(&preds[0], &truths[0]).unwrap(), 0.6);
    assert_eq!(iou(&preds[1], &truths[1]).unwrap(), 0.5);
    assert_eq!(iou(&preds[2], &truths[2]).unwrap(), 0.0);
    assert_eq!(iou05_accuracy(&preds, &truths).unwrap(), 1.0 / 3.0);

    // Nudging the 0.5 pair strictly over the line flips it to 2/3.
    let over = [
        preds[0],
        Box2D::new(0.0, 0.0, 0.2578125, 0.25).unwrap(),
        preds[2],
    ];
    let truths2 = [truths[0], Box2D::new(0.0, 0.0, 0.5, 0.25).unwrap(), truths[2]];
    assert!(iou(&over[1], &truths2[1]).unwrap() > 0.5);
    assert_eq!(iou05_accuracy(&over, &truths2).unwrap(), 2.0 / 3.0);

    println!("criterion 4 (geometry/metric suite): PASS");
}

// ---------------------------------------------------------------------------
// criteria 5 and 6 share the desk-scale setup

const C5_TRAIN_SEED: u64 = 1001;
const C5_VAL_SEED: u64 = 1002;
const C5_MODEL_SEED: u64 = 5;
/// Fixture: the value criterion 5 reached when it was first tuned. Training
/// is bit-deterministic, so any drift here is a behavior change.
const C5_FROZEN_VAL_IOU05: f64 = 0.914;

fn c5_dataset(count: usize, seed: u64) -> Vec<GroundingSample> {
    let spec = SceneSpec::default(); // n in [6,12], distractors 2, sigma 0.1
    (0..count)
        .map(|i| synthgen::generate_sample(&spec, i as u64, seed).unwrap())
        .collect()
}

fn c5_config() -> RunConfig {
    let spec = SceneSpec::default();
    RunConfig {
        model: ModelConfig::new(
            EncoderConfig {
                d: 64,
                layers: 4,
                heads: 4,
                ffn_mult: 2,
                vocab_size: synthgen::vocab().len(),
                max_tokens: synthgen::MAX_COMMAND_TOKENS,
                region_feature_dim: spec.feature_dim(),
                stream: Stream::Single,
                dual_split: default_dual_split(4),
            },
            FusionKind::Rsd,
        ),
        optim: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
        epochs: 20,
        batch_size: 16,
        feature_noise: 0.3,
        seed: C5_MODEL_SEED,
        ..RunConfig::default()
    }
}

#[test]
fn criterion_5_desk_scale_learnability() {
    let started = Instant::now();
    let train_set = c5_dataset(2000, C5_TRAIN_SEED);
    let val_set = c5_dataset(500, C5_VAL_SEED);
    let cfg = c5_config();

    let outcome = train::train(&cfg, &train_set, &val_set).unwrap();
    let last = outcome.metrics.last().unwrap();
    let init_loss = outcome.metrics[0].train_loss;
    let epoch1_loss = outcome.metrics[1].train_loss;

    assert!(
        last.val_iou05 >= 0.90,
        "validation IoU@0.5 = {} after {} epochs",
        last.val_iou05,
        cfg.epochs
    );
    assert!(
        epoch1_loss < init_loss,
        "first epoch did not improve on init: {epoch1_loss} vs {init_loss}"
    );
    assert_eq!(
        last.val_iou05.to_bits(),
        C5_FROZEN_VAL_IOU05.to_bits(),
        "deterministic run drifted from the frozen fixture {} (got {})",
        C5_FROZEN_VAL_IOU05,
        last.val_iou05
    );

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() <= 300.0, "took {elapsed:?}, budget 5 CPU-minutes");
    println!(
        "criterion 5 (desk-scale learnability): PASS, val_iou05={} in {elapsed:?}",
        last.val_iou05
    );
}

#[test]
fn criterion_6_directional_comparison() {
    let started = Instant::now();
    let train_set = c5_dataset(2000, C5_TRAIN_SEED);
    let val_set = c5_dataset(500, C5_VAL_SEED);
    let base = c5_config();

    let kinds = [FusionKind::Rsd, FusionKind::TopLayer, FusionKind::SampleSpecific];
    let seeds = [5u64, 6, 7, 8, 9];
    let outcome =
        train::compare(&base, &kinds, &seeds, &train_set, &val_set, None, ExecMode::default())
            .unwrap();

    // Full table to stdout; the gate below is a non-inferiority bound only.
    print!("{}", train::compare_csv(&outcome));

    let mean_of = |kind: FusionKind| {
        outcome
            .summaries
            .iter()
            .find(|s| s.kind == kind)
            .unwrap_or_else(|| panic!("missing summary for {kind}"))
            .mean_val
    };
    let (rsd, top, ss) = (
        mean_of(FusionKind::Rsd),
        mean_of(FusionKind::TopLayer),
        mean_of(FusionKind::SampleSpecific),
    );
    assert!(rsd >= top - 0.01, "RSD mean {rsd} not within 0.01 of TopLayer mean {top}");
    assert!(rsd >= ss - 0.01, "RSD mean {rsd} not within 0.01 of SampleSpecific mean {ss}");

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() <= 1800.0, "took {elapsed:?}, budget 30 CPU-minutes");
    println!(
        "criterion 6 (directional comparison): PASS, means RSD={rsd:.4} \
         TopLayer={top:.4} SampleSpecific={ss:.4} in {elapsed:?}"
    );
}

// ---------------------------------------------------------------------------
// criterion 7: analysis outputs

#[test]
fn criterion_7_analysis_outputs() {
    use layerfuse::analysis;

    let spec = SceneSpec::default();
    let cfg = ModelConfig::new(
        EncoderConfig {
            d: 32,
            layers: 3,
            heads: 2,
            ffn_mult: 2,
            vocab_size: synthgen::vocab().len(),
            max_tokens: synthgen::MAX_COMMAND_TOKENS,
            region_feature_dim: spec.feature_dim(),
            stream: Stream::Single,
            dual_split: default_dual_split(3),
        },
        FusionKind::Rsd,
    );
    let params = cfg.init(13).unwrap();
    let data: Vec<GroundingSample> =
        (0..24).map(|i| synthgen::generate_sample(&spec, i, 901).unwrap()).collect();

    // Group profiles are probability rows.
    let (over, dis) =
        analysis::attention_group_profile(&cfg, &params, &data, ExecMode::Sequential).unwrap();
    for p in [&over, &dis] {
        assert!(p.region_count > 0, "both groups occur in this dataset");
        let sum: f64 = p.mean_weight_per_layer.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6, "{} profile sums to {sum}", p.group.label());
    }

    // The layer-mass trend is reported, never gated on.
    let note = analysis::profile_observation(&over, &dis);
    assert!(note.contains("not a gate"));
    println!("{note}");

    // PCA: 2-D distances never exceed the originals.
    let sample = &data[0];
    let proj = analysis::pca_project_regions(
        &cfg,
        &params,
        sample,
        analysis::ProjectionSource::Fused,
    )
    .unwrap();
    let reps = analysis::region_reps(
        &cfg,
        &params,
        sample,
        analysis::ProjectionSource::Fused,
    )
    .unwrap();
    let n = sample.n_regions();
    for i in 0..n {
        for j in i + 1..n {
            let d2 = {
                let (xi, yi, _) = proj.points[i];
                let (xj, yj, _) = proj.points[j];
                ((xi - xj).powi(2) + (yi - yj).powi(2)).sqrt()
            };
            let dd: f64 = (0..32)
                .map(|k| (reps.at2(i, k) - reps.at2(j, k)).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(d2 <= dd + 1e-9, "projection stretched {i}-{j}: {d2} > {dd}");
        }
    }
    let (e1, e2) = proj.explained_variance;
    assert!(e1 >= e2 && e2 >= 0.0 && e1 + e2 <= 1.0 + 1e-12);

    // Rank-1 input: first component explains everything.
    let line = Tensor::new(
        vec![4, 3],
        vec![0.0, 0.0, 0.0, 1.0, -2.0, 0.5, 2.0, -4.0, 1.0, 3.0, -6.0, 1.5],
    )
    .unwrap();
    let (line_proj, (l1, l2)) = analysis::pca_top2(&line).unwrap();
    assert!(l1 > 0.999, "collinear data: first component explains {l1}");
    assert!(l2 < 1e-9, "collinear data: second component explains {l2}");
    for i in 0..4 {
        assert!(line_proj.at2(i, 1).abs() < 1e-9);
    }

    println!("criterion 7 (analysis outputs): PASS");
}

// ---------------------------------------------------------------------------
// criterion 8: reproducibility

#[test]
fn criterion_8_reproducibility() {
    let dir = std::env::temp_dir().join("layerfuse-acceptance-repro");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();

    // Dataset regeneration is byte-identical.
    let spec = SceneSpec::default();
    let (p1, p2) = (dir.join("a.jsonl"), dir.join("b.jsonl"));
    synthgen::generate_dataset(&spec, 50, 31, &p1).unwrap();
    synthgen::generate_dataset(&spec, 50, 31, &p2).unwrap();
    let bytes = std::fs::read(&p1).unwrap();
    assert_eq!(bytes, std::fs::read(&p2).unwrap(), "dataset regeneration drifted");

    // Same config + seed: bit-identical metrics and checkpoint bytes.
    let train_set: Vec<GroundingSample> = {
        let s = SceneSpec { n_regions_min: 4, n_regions_max: 6, ..SceneSpec::default() };
        (0..24).map(|i| synthgen::generate_sample(&s, i, 41).unwrap()).collect()
    };
    let val_set: Vec<GroundingSample> = {
        let s = SceneSpec { n_regions_min: 4, n_regions_max: 6, ..SceneSpec::default() };
        (0..8).map(|i| synthgen::generate_sample(&s, i, 42).unwrap()).collect()
    };
    let cfg = RunConfig {
        model: ModelConfig::new(
            EncoderConfig {
                d: 16,
                layers: 1,
                heads: 2,
                ffn_mult: 2,
                vocab_size: synthgen::vocab().len(),
                max_tokens: synthgen::MAX_COMMAND_TOKENS,
                region_feature_dim: SceneSpec::default().feature_dim(),
                stream: Stream::Single,
                dual_split: default_dual_split(1),
            },
            FusionKind::Rsd,
        ),
        epochs: 2,
        batch_size: 8,
        seed: 77,
        ..RunConfig::default()
    };

    let mut checkpoints = Vec::new();
    let mut csvs = Vec::new();
    for run in ["r1", "r2"] {
        let outcome = train::train(&cfg, &train_set, &val_set).unwrap();
        csvs.push(train::metrics_csv(&outcome.metrics));
        let path = dir.join(run).join("model.ckpt");
        let meta =
            CheckpointMeta { model: cfg.model.clone(), seed: cfg.seed, step: outcome.steps };
        save_checkpoint(&outcome.params, &meta, &path).unwrap();
        checkpoints.push(std::fs::read(&path).unwrap());
    }
    assert_eq!(csvs[0], csvs[1], "metrics CSV differs between identical runs");
    assert_eq!(checkpoints[0], checkpoints[1], "checkpoint bytes differ");

    // Round trip: load, re-save, compare bytes.
    let (params, meta) = load_checkpoint(&dir.join("r1").join("model.ckpt")).unwrap();
    let resaved = dir.join("resaved.ckpt");
    save_checkpoint(&params, &meta, &resaved).unwrap();
    assert_eq!(
        checkpoints[0],
        std::fs::read(&resaved).unwrap(),
        "checkpoint round trip is not bitwise"
    );

    println!("criterion 8 (reproducibility): PASS");
}
