//! Training, evaluation, comparison, and the gradient-check report.
//!
//! Training is single-threaded and fully determined by the run config's
//! seed. Evaluation forward-passes packed fixed-size chunks, so its results
//! are identical whether chunks are processed sequentially or in parallel.

use crate::encoder::Stream;
use crate::error::{Error, Result};
use crate::fusion::FusionKind;
use crate::gradcheck::grad_check;
use crate::graph::Graph;
use crate::grounding::{iou, iou05_accuracy, Box2D};
use crate::model::{build_loss, ModelConfig};
use crate::optim::{adam_step, AdamState};
use crate::parallel::{map_slice, ExecMode};
use crate::params::ParamStore;
use crate::persistence::RunConfig;
use crate::rng::Rng64;
use crate::sample::GroundingSample;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_iou05: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    /// Row 0 is the untrained model (initial loss + initial validation).
    pub metrics: Vec<EpochMetrics>,
    pub steps: u64,
}

/// Mean loss over a dataset under fixed parameters (no updates).
pub fn dataset_loss(
    cfg: &ModelConfig,
    params: &ParamStore,
    samples: &[GroundingSample],
    chunk: usize,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidSample("empty dataset".into()));
    }
    let mut total = 0.0;
    for batch in samples.chunks(chunk.max(1)) {
        let refs: Vec<&GroundingSample> = batch.iter().collect();
        let mut g = Graph::new();
        let fwd = build_loss(&mut g, cfg, params, &refs)?;
        total += g.value(fwd.loss).data()[0] * batch.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Trains per the config on the given splits. Deterministic for a fixed
/// config: batch order is a seeded shuffle, updates are sequential.
pub fn train(
    cfg: &RunConfig,
    train_set: &[GroundingSample],
    val_set: &[GroundingSample],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidSample("empty training set".into()));
    }
    let model = &cfg.model;
    let mut params = model.init(cfg.seed)?;
    let mut state = AdamState::new(&params);
    let mut metrics = Vec::with_capacity(cfg.epochs + 1);
    metrics.push(EpochMetrics {
        epoch: 0,
        train_loss: dataset_loss(model, &params, train_set, cfg.batch_size)?,
        val_iou05: evaluate(model, &params, val_set, ExecMode::Sequential)?.iou05,
    });

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut steps = 0;
    for epoch in 1..=cfg.epochs {
        let mut rng = Rng64::derived(cfg.seed, (1 << 32) | epoch as u64);
        rng.shuffle(&mut order);
        // Fresh feature noise every epoch, drawn in (shuffled) batch order.
        let mut aug_rng = Rng64::derived(cfg.seed, (2 << 32) | epoch as u64);
        let mut epoch_loss = 0.0;
        for batch_ids in order.chunks(cfg.batch_size) {
            let mut refs: Vec<&GroundingSample> =
                batch_ids.iter().map(|&i| &train_set[i]).collect();
            let augmented: Vec<GroundingSample>;
            if cfg.feature_noise > 0.0 {
                augmented = refs
                    .iter()
                    .map(|s| {
                        let mut s = (*s).clone();
                        for r in &mut s.regions {
                            for f in &mut r.features {
                                *f += cfg.feature_noise * aug_rng.normal();
                            }
                        }
                        s
                    })
                    .collect();
                refs = augmented.iter().collect();
            }
            let mut g = Graph::new();
            let fwd = build_loss(&mut g, model, &params, &refs)?;
            epoch_loss += g.value(fwd.loss).data()[0] * refs.len() as f64;
            let grads = g.backward(fwd.loss)?;
            adam_step(&mut params, &grads, &mut state, &cfg.optim)?;
            steps += 1;
        }
        metrics.push(EpochMetrics {
            epoch,
            train_loss: epoch_loss / train_set.len() as f64,
            val_iou05: evaluate(model, &params, val_set, ExecMode::Sequential)?.iou05,
        });
    }
    Ok(TrainOutcome { params, metrics, steps })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub sample_id: u64,
    pub predicted_index: usize,
    pub predicted_box: Box2D,
    pub iou: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub iou05: f64,
    pub rows: Vec<EvalRow>,
}

/// Samples per forward chunk during evaluation; fixed so results never
/// depend on the training batch size or execution mode.
const EVAL_CHUNK: usize = 64;

/// Scores every sample and applies the strict IoU@0.5 metric.
pub fn evaluate(
    cfg: &ModelConfig,
    params: &ParamStore,
    samples: &[GroundingSample],
    mode: ExecMode,
) -> Result<EvalOutcome> {
    if samples.is_empty() {
        return Err(Error::InvalidSample("empty evaluation dataset".into()));
    }
    let chunks: Vec<&[GroundingSample]> = samples.chunks(EVAL_CHUNK).collect();
    let per_chunk: Vec<Result<Vec<EvalRow>>> = map_slice(mode, &chunks, |chunk| {
        let refs: Vec<&GroundingSample> = chunk.iter().collect();
        let mut g = Graph::new();
        let fwd = build_loss(&mut g, cfg, params, &refs)?;
        let logits = g.value(fwd.logits);
        let mut rows = Vec::with_capacity(chunk.len());
        let mut off = 0;
        for s in *chunk {
            let n = s.n_regions();
            let slice = &logits.data()[off..off + n];
            off += n;
            let mut best = 0;
            for (i, &v) in slice.iter().enumerate() {
                if v > slice[best] {
                    best = i;
                }
            }
            let predicted_box = s.regions[best].bbox;
            let v = iou(&predicted_box, s.target_box())?;
            rows.push(EvalRow {
                sample_id: s.id,
                predicted_index: best,
                predicted_box,
                iou: v,
                correct: v > 0.5,
            });
        }
        Ok(rows)
    });

    let mut rows: Vec<EvalRow> = Vec::with_capacity(samples.len());
    for r in per_chunk {
        rows.extend(r?);
    }
    rows.sort_by_key(|r| r.sample_id);
    let predicted: Vec<Box2D> = rows.iter().map(|r| r.predicted_box).collect();
    let truth: Vec<Box2D> = samples
        .iter()
        .map(|s| (s.id, *s.target_box()))
        .collect::<std::collections::BTreeMap<_, _>>()
        .into_values()
        .collect();
    let iou05 = iou05_accuracy(&predicted, &truth)?;
    Ok(EvalOutcome { iou05, rows })
}

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,train_loss,val_iou05\n");
    for m in metrics {
        out.push_str(&format!("{},{},{}\n", m.epoch, m.train_loss, m.val_iou05));
    }
    out
}

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut out =
        String::from("id,predicted_index,pred_x1,pred_y1,pred_x2,pred_y2,iou,correct\n");
    for r in rows {
        let b = r.predicted_box;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.sample_id, r.predicted_index, b.x1, b.y1, b.x2, b.y2, r.iou, r.correct
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareCell {
    pub kind: FusionKind,
    pub seed: u64,
    pub val_iou05: f64,
    pub test_iou05: Option<f64>,
    pub extra_params: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareSummary {
    pub kind: FusionKind,
    pub mean_val: f64,
    pub std_val: f64,
    pub mean_test: Option<f64>,
    pub std_test: Option<f64>,
    pub extra_params: usize,
}

#[derive(Debug)]
pub struct CompareOutcome {
    pub cells: Vec<CompareCell>,
    pub summaries: Vec<CompareSummary>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains every (kind, seed) pair on the shared base config. Sub-runs are
/// independent, so the matrix may fan out in parallel; result order is the
/// input order either way.
pub fn compare(
    base: &RunConfig,
    kinds: &[FusionKind],
    seeds: &[u64],
    train_set: &[GroundingSample],
    val_set: &[GroundingSample],
    test_set: Option<&[GroundingSample]>,
    mode: ExecMode,
) -> Result<CompareOutcome> {
    if kinds.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidConfig("compare needs at least one kind and seed".into()));
    }
    let matrix: Vec<(FusionKind, u64)> = kinds
        .iter()
        .flat_map(|&k| seeds.iter().map(move |&s| (k, s)))
        .collect();
    let cells: Vec<Result<CompareCell>> = map_slice(mode, &matrix, |&(kind, seed)| {
        let mut cfg = base.clone();
        cfg.model.fusion = kind;
        cfg.seed = seed;
        let run = || -> Result<CompareCell> {
            let outcome = train(&cfg, train_set, val_set)?;
            let test_iou05 = match test_set {
                Some(t) => Some(
                    evaluate(&cfg.model, &outcome.params, t, ExecMode::Sequential)?.iou05,
                ),
                None => None,
            };
            Ok(CompareCell {
                kind,
                seed,
                val_iou05: outcome.metrics.last().unwrap().val_iou05,
                test_iou05,
                extra_params: cfg.model.extra_fusion_params(),
            })
        };
        run().map_err(|e| {
            Error::InvalidConfig(format!("compare sub-run {kind} (seed {seed}) failed: {e}"))
        })
    });
    let cells: Vec<CompareCell> = cells.into_iter().collect::<Result<_>>()?;

    let summaries = kinds
        .iter()
        .map(|&kind| {
            let vals: Vec<f64> = cells
                .iter()
                .filter(|c| c.kind == kind)
                .map(|c| c.val_iou05)
                .collect();
            let (mean_val, std_val) = mean_std(&vals);
            let tests: Vec<f64> = cells
                .iter()
                .filter(|c| c.kind == kind)
                .filter_map(|c| c.test_iou05)
                .collect();
            let (mean_test, std_test) = if tests.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_std(&tests);
                (Some(m), Some(s))
            };
            CompareSummary {
                kind,
                mean_val,
                std_val,
                mean_test,
                std_test,
                extra_params: crate::fusion::param_count(
                    kind,
                    base.model.encoder.d,
                    base.model.encoder.layers,
                ),
            }
        })
        .collect();
    Ok(CompareOutcome { cells, summaries })
}

pub fn compare_csv(outcome: &CompareOutcome) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("kind,seed,val_iou05,test_iou05,extra_params\n");
    for c in &outcome.cells {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            c.kind,
            c.seed,
            c.val_iou05,
            opt(c.test_iou05),
            c.extra_params
        ));
    }
    for s in &outcome.summaries {
        out.push_str(&format!(
            "{},mean,{},{},{}\n",
            s.kind,
            s.mean_val,
            opt(s.mean_test),
            s.extra_params
        ));
        out.push_str(&format!(
            "{},std,{},{},{}\n",
            s.kind,
            s.std_val,
            opt(s.std_test),
            s.extra_params
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckRow {
    pub component: String,
    pub max_err: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub n_regions: usize,
    pub n_tokens: usize,
    pub epsilon: f64,
    pub max_coords: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            d: 16,
            layers: 2,
            heads: 2,
            n_regions: 3,
            n_tokens: 5,
            epsilon: 1e-5,
            max_coords: 4,
        }
    }
}

impl GradCheckConfig {
    fn validate(&self) -> Result<()> {
        if self.d > 32 || self.layers > 3 || self.n_regions > 4 {
            return Err(Error::InvalidConfig(format!(
                "gradient check limited to d <= 32, layers <= 3, regions <= 4 \
                 (got d={}, layers={}, regions={})",
                self.d, self.layers, self.n_regions
            )));
        }
        Ok(())
    }
}

fn gradcheck_sample(gc: &GradCheckConfig, seed: u64) -> GroundingSample {
    use crate::sample::{CommandTokens, RegionProposal};
    let mut rng = Rng64::seed_from_u64(seed);
    let n = gc.n_regions;
    let regions = (0..n)
        .map(|i| {
            let x = 0.05 + 0.85 * i as f64 / n as f64;
            RegionProposal {
                bbox: Box2D::new(x, 0.25, x + 0.1, 0.45).unwrap(),
                features: (0..5).map(|_| rng.normal()).collect(),
            }
        })
        .collect();
    GroundingSample {
        id: seed,
        regions,
        command: CommandTokens { ids: (0..gc.n_tokens).map(|i| (i * 2) % 11).collect() },
        target_index: rng.below(n),
        seed,
    }
}

fn model_component_err(
    gc: &GradCheckConfig,
    kind: FusionKind,
    stream: Stream,
    seed: u64,
) -> Result<f64> {
    let encoder = crate::encoder::EncoderConfig {
        d: gc.d,
        layers: gc.layers,
        heads: gc.heads,
        ffn_mult: 2,
        vocab_size: 11,
        max_tokens: gc.n_tokens + 1,
        region_feature_dim: 5,
        stream,
        dual_split: crate::encoder::default_dual_split(gc.layers),
    };
    let cfg = ModelConfig::new(encoder, kind);
    let params = cfg.init(seed)?;
    let sample = gradcheck_sample(gc, seed ^ 0xA5A5);
    let mut g = Graph::new();
    let fwd = build_loss(&mut g, &cfg, &params, &[&sample])?;
    let analytic = g.backward(fwd.loss)?;
    grad_check(&params, &analytic, &[], gc.epsilon, Some(gc.max_coords), |p| {
        let mut g = Graph::new();
        let fwd = build_loss(&mut g, &cfg, p, &[&sample])?;
        Ok(g.value(fwd.loss).data()[0])
    })
}

fn numeric_core_err(gc: &GradCheckConfig) -> Result<f64> {
    // A small chain touching the core op set outside any model context.
    let mut store = ParamStore::empty(3);
    let mut rng = Rng64::seed_from_u64(3);
    let rand = |rng: &mut Rng64, shape: &[usize]| {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
    };
    store.insert("w1", rand(&mut rng, &[4, 6]))?;
    store.insert("b1", rand(&mut rng, &[1, 6]))?;
    store.insert("w2", rand(&mut rng, &[6, 2]))?;
    let x = rand(&mut rng, &[3, 4]);
    let forward = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let w1 = g.param("w1", p.get("w1")?);
        let b1 = g.param("b1", p.get("b1")?);
        let w2 = g.param("w2", p.get("w2")?);
        let h = g.matmul(xn, w1)?;
        let h = g.add_bias(h, b1)?;
        let h = g.gelu(h);
        let h = g.softmax_rows(h)?;
        let h = g.matmul(h, w2)?;
        let loss = g.mean_all(h);
        Ok(g.value(loss).data()[0])
    };
    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let w1 = g.param("w1", store.get("w1")?);
    let b1 = g.param("b1", store.get("b1")?);
    let w2 = g.param("w2", store.get("w2")?);
    let h = g.matmul(xn, w1)?;
    let h = g.add_bias(h, b1)?;
    let h = g.gelu(h);
    let h = g.softmax_rows(h)?;
    let h = g.matmul(h, w2)?;
    let loss = g.mean_all(h);
    let analytic = g.backward(loss)?;
    grad_check(&store, &analytic, &[], gc.epsilon, None, forward)
}

fn head_err(gc: &GradCheckConfig) -> Result<f64> {
    let mut store = ParamStore::empty(4);
    let mut rng = Rng64::seed_from_u64(4);
    let fused = Tensor::new(
        vec![gc.n_regions, gc.d],
        (0..gc.n_regions * gc.d).map(|_| rng.normal()).collect(),
    )?;
    let w = Tensor::new(vec![gc.d, 1], (0..gc.d).map(|_| rng.normal() * 0.3).collect())?;
    store.insert("head.w", w)?;
    store.insert("head.b", Tensor::zeros(&[1, 1]))?;
    let targets = Tensor::new(
        vec![gc.n_regions, 1],
        (0..gc.n_regions).map(|i| 1.0 / (i + 1) as f64).collect(),
    )?;
    let forward = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(fused.clone());
        let w = g.param("head.w", p.get("head.w")?);
        let b = g.param("head.b", p.get("head.b")?);
        let logits = g.matmul(x, w)?;
        let logits = g.add_bias(logits, b)?;
        let loss = g.bce_with_logits_mean(logits, targets.clone())?;
        Ok(g.value(loss).data()[0])
    };
    let mut g = Graph::new();
    let x = g.constant(fused.clone());
    let w = g.param("head.w", store.get("head.w")?);
    let b = g.param("head.b", store.get("head.b")?);
    let logits = g.matmul(x, w)?;
    let logits = g.add_bias(logits, b)?;
    let loss = g.bce_with_logits_mean(logits, targets.clone())?;
    let analytic = g.backward(loss)?;
    grad_check(&store, &analytic, &[], gc.epsilon, None, forward)
}

/// Gradient-check report: one row per component, every fusion kind checked
/// on both stream types (the row keeps the worse of the two).
pub fn gradcheck_suite(gc: &GradCheckConfig) -> Result<Vec<GradCheckRow>> {
    gc.validate()?;
    let mut rows = vec![
        GradCheckRow { component: "numeric-core".into(), max_err: numeric_core_err(gc)? },
        GradCheckRow { component: "grounding-head".into(), max_err: head_err(gc)? },
    ];
    for kind in FusionKind::ALL {
        let single = model_component_err(gc, kind, Stream::Single, 101)?;
        let dual = model_component_err(gc, kind, Stream::Dual, 102)?;
        rows.push(GradCheckRow {
            component: format!("model/{kind}"),
            max_err: single.max(dual),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_sample, SceneSpec};

    fn tiny_dataset(count: usize, seed: u64) -> Vec<GroundingSample> {
        let spec = SceneSpec {
            n_regions_min: 3,
            n_regions_max: 5,
            distractor_policy: 1,
            ..SceneSpec::default()
        };
        (0..count).map(|i| generate_sample(&spec, i as u64, seed).unwrap()).collect()
    }

    fn tiny_run_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.encoder.d = 16;
        cfg.model.encoder.layers = 2;
        cfg.model.encoder.heads = 2;
        cfg.epochs = 1;
        cfg.batch_size = 4;
        cfg.seed = 5;
        cfg
    }

    #[test]
    fn train_is_deterministic_and_logs_epoch_zero() {
        let train_set = tiny_dataset(12, 40);
        let val_set = tiny_dataset(6, 41);
        let cfg = tiny_run_config();
        let a = train(&cfg, &train_set, &val_set).unwrap();
        let b = train(&cfg, &train_set, &val_set).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
        assert_eq!(a.metrics.len(), 2);
        assert_eq!(a.metrics[0].epoch, 0);
        assert_eq!(a.steps, 3);
        for (name, t) in a.params.iter() {
            let bits_a: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> =
                b.params.get(name).unwrap().data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "{name}");
        }
    }

    #[test]
    fn zero_epochs_yields_initial_row_only() {
        let train_set = tiny_dataset(8, 50);
        let val_set = tiny_dataset(4, 51);
        let mut cfg = tiny_run_config();
        cfg.epochs = 0;
        let out = train(&cfg, &train_set, &val_set).unwrap();
        assert_eq!(out.metrics.len(), 1);
        assert_eq!(out.steps, 0);
        // Params untouched relative to init.
        let init = cfg.model.init(cfg.seed).unwrap();
        for (name, t) in init.iter() {
            assert_eq!(t, out.params.get(name).unwrap(), "{name}");
        }
    }

    #[test]
    fn feature_noise_augmentation_is_seeded() {
        let train_set = tiny_dataset(8, 45);
        let val_set = tiny_dataset(4, 46);
        let mut cfg = tiny_run_config();
        cfg.feature_noise = 0.1;
        let a = train(&cfg, &train_set, &val_set).unwrap();
        let b = train(&cfg, &train_set, &val_set).unwrap();
        assert_eq!(a.metrics, b.metrics, "augmented runs must stay deterministic");

        cfg.feature_noise = 0.0;
        let clean = train(&cfg, &train_set, &val_set).unwrap();
        assert_ne!(
            a.metrics.last().unwrap().train_loss,
            clean.metrics.last().unwrap().train_loss,
            "noise should perturb training"
        );
        // The inputs themselves are never mutated.
        assert_eq!(train_set, tiny_dataset(8, 45));
    }

    #[test]
    fn training_reduces_loss_on_tiny_problem() {
        let train_set = tiny_dataset(16, 60);
        let val_set = tiny_dataset(4, 61);
        let mut cfg = tiny_run_config();
        cfg.epochs = 3;
        let out = train(&cfg, &train_set, &val_set).unwrap();
        let first = out.metrics[0].train_loss;
        let last = out.metrics.last().unwrap().train_loss;
        assert!(last < first, "loss {first} -> {last}");
    }

    #[test]
    fn evaluate_modes_agree_and_reject_empty() {
        let val_set = tiny_dataset(9, 70);
        let cfg = tiny_run_config();
        let params = cfg.model.init(3).unwrap();
        let seq = evaluate(&cfg.model, &params, &val_set, ExecMode::Sequential).unwrap();
        let par = evaluate(&cfg.model, &params, &val_set, ExecMode::Parallel).unwrap();
        assert_eq!(seq, par);
        assert_eq!(seq.rows.len(), 9);
        assert!(evaluate(&cfg.model, &params, &[], ExecMode::Sequential).is_err());
        // Accuracy consistent with rows.
        let frac =
            seq.rows.iter().filter(|r| r.correct).count() as f64 / seq.rows.len() as f64;
        assert!((seq.iou05 - frac).abs() < 1e-12);
        assert_eq!(eval_csv(&seq.rows), eval_csv(&par.rows));
    }

    #[test]
    fn evaluate_agrees_with_per_sample_prediction() {
        let val_set = tiny_dataset(7, 75);
        let cfg = tiny_run_config();
        let params = cfg.model.init(8).unwrap();
        let out = evaluate(&cfg.model, &params, &val_set, ExecMode::Sequential).unwrap();
        for (row, s) in out.rows.iter().zip(&val_set) {
            let direct = crate::model::predict_sample(&cfg.model, &params, s).unwrap();
            assert_eq!(row.predicted_index, direct, "sample {}", s.id);
        }
    }

    #[test]
    fn compare_single_kind_reduces_to_train_plus_eval() {
        let train_set = tiny_dataset(10, 80);
        let val_set = tiny_dataset(5, 81);
        let cfg = tiny_run_config();
        let out = compare(
            &cfg,
            &[FusionKind::Rsd],
            &[9],
            &train_set,
            &val_set,
            None,
            ExecMode::Sequential,
        )
        .unwrap();
        assert_eq!(out.cells.len(), 1);
        let mut direct_cfg = cfg.clone();
        direct_cfg.seed = 9;
        let direct = train(&direct_cfg, &train_set, &val_set).unwrap();
        assert_eq!(out.cells[0].val_iou05, direct.metrics.last().unwrap().val_iou05);
        // Single seed: mean equals the value, std 0.
        assert_eq!(out.summaries[0].mean_val, out.cells[0].val_iou05);
        assert_eq!(out.summaries[0].std_val, 0.0);
        let csv = compare_csv(&out);
        assert!(csv.starts_with("kind,seed,val_iou05,test_iou05,extra_params\n"));
        assert!(csv.contains("RSD,mean,"));
    }

    #[test]
    fn compare_names_failing_kind() {
        let train_set = tiny_dataset(6, 90);
        let val_set = tiny_dataset(3, 91);
        let mut cfg = tiny_run_config();
        cfg.model.routing_iters = 0; // invalid for DynamicRouting only
        let err = compare(
            &cfg,
            &[FusionKind::DynamicRouting],
            &[1],
            &train_set,
            &val_set,
            None,
            ExecMode::Sequential,
        )
        .unwrap_err();
        assert!(err.to_string().contains("DynamicRouting"), "{err}");
    }

    #[test]
    fn gradcheck_suite_small_and_bounded() {
        let gc = GradCheckConfig { max_coords: 2, ..GradCheckConfig::default() };
        let rows = gradcheck_suite(&gc).unwrap();
        assert_eq!(rows.len(), 2 + FusionKind::ALL.len());
        for kind in FusionKind::ALL {
            assert_eq!(
                rows.iter().filter(|r| r.component == format!("model/{kind}")).count(),
                1
            );
        }
        for r in &rows {
            assert!(r.max_err < 1e-4, "{}: {}", r.component, r.max_err);
        }
        // Size limits enforced.
        let big = GradCheckConfig { d: 64, ..GradCheckConfig::default() };
        assert!(gradcheck_suite(&big).is_err());
    }
}
