//! Diagnostics over trained models: layer-attention profiles grouped by
//! IoU band, 2-D PCA of region representations, and nearest-neighbor
//! margins for top-layer vs fused vectors.

use crate::error::{Error, Result};
use crate::fusion;
use crate::grounding::iou;
use crate::model::{encode_sample, ModelConfig};
use crate::parallel::{map_slice, ExecMode};
use crate::params::ParamStore;
use crate::sample::GroundingSample;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightGroup {
    /// Regions with IoU > 0 against the sample's ground-truth box.
    Overlapping,
    /// Regions with IoU = 0.
    Disjoint,
}

impl WeightGroup {
    pub fn label(&self) -> &'static str {
        match self {
            WeightGroup::Overlapping => "IoU>0",
            WeightGroup::Disjoint => "IoU=0",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionProfile {
    pub group: WeightGroup,
    /// Mean fusion weight per layer over all regions in the group; zeros
    /// when the group is empty.
    pub mean_weight_per_layer: Vec<f64>,
    pub region_count: usize,
}

/// Averages per-region layer-attention rows over the dataset, split into
/// IoU>0 and IoU=0 groups. Per-sample work may fan out; the reduction runs
/// in dataset order so output is identical across modes.
pub fn attention_group_profile(
    cfg: &ModelConfig,
    params: &ParamStore,
    samples: &[GroundingSample],
    mode: ExecMode,
) -> Result<(AttentionProfile, AttentionProfile)> {
    // Per-sample partial sums: (over, dis, n_over, n_dis).
    type GroupSums = (Vec<f64>, Vec<f64>, usize, usize);
    let fp = cfg.fusion_params(params)?;
    let layers = cfg.encoder.layers + 1;
    let per_sample: Vec<Result<GroupSums>> =
        map_slice(mode, samples, |s| {
            let stack = encode_sample(cfg, params, s)?;
            let w = fusion::analysis_weights(&stack, &fp, cfg.routing_iters)?;
            let mut over = vec![0.0; layers];
            let mut dis = vec![0.0; layers];
            let (mut n_over, mut n_dis) = (0usize, 0usize);
            for (i, r) in s.regions.iter().enumerate() {
                let v = iou(&r.bbox, s.target_box())?;
                let (acc, n) = if v > 0.0 {
                    (&mut over, &mut n_over)
                } else {
                    (&mut dis, &mut n_dis)
                };
                for (a, &wv) in acc.iter_mut().zip(w.row(i)) {
                    *a += wv;
                }
                *n += 1;
            }
            Ok((over, dis, n_over, n_dis))
        });

    let mut over_sum = vec![0.0; layers];
    let mut dis_sum = vec![0.0; layers];
    let (mut n_over, mut n_dis) = (0usize, 0usize);
    for r in per_sample {
        let (o, d, no, nd) = r?;
        for (a, v) in over_sum.iter_mut().zip(o) {
            *a += v;
        }
        for (a, v) in dis_sum.iter_mut().zip(d) {
            *a += v;
        }
        n_over += no;
        n_dis += nd;
    }
    let mean = |sum: Vec<f64>, n: usize| {
        if n == 0 {
            vec![0.0; layers]
        } else {
            sum.into_iter().map(|v| v / n as f64).collect()
        }
    };
    Ok((
        AttentionProfile {
            group: WeightGroup::Overlapping,
            mean_weight_per_layer: mean(over_sum, n_over),
            region_count: n_over,
        },
        AttentionProfile {
            group: WeightGroup::Disjoint,
            mean_weight_per_layer: mean(dis_sum, n_dis),
            region_count: n_dis,
        },
    ))
}

pub fn attention_profile_csv(profiles: &[&AttentionProfile]) -> String {
    let mut out = String::from("group,layer,mean_weight,count\n");
    for p in profiles {
        for (l, w) in p.mean_weight_per_layer.iter().enumerate() {
            out.push_str(&format!("{},{},{},{}\n", p.group.label(), l, w, p.region_count));
        }
    }
    out
}

/// Qualitative layer-mass trend, phrased as a report line, never a gate.
pub fn profile_observation(over: &AttentionProfile, dis: &AttentionProfile) -> String {
    let upper_mass = |p: &AttentionProfile| -> f64 {
        let l = p.mean_weight_per_layer.len();
        p.mean_weight_per_layer[l.div_ceil(2)..].iter().sum()
    };
    let (mo, md) = (upper_mass(over), upper_mass(dis));
    let trend = if mo > md {
        "overlapping regions concentrate more mass on higher layers"
    } else if mo < md {
        "disjoint regions concentrate more mass on higher layers"
    } else {
        "both groups spread mass equally across layer halves"
    };
    format!(
        "observation (not a gate): upper-half layer mass {:.4} for IoU>0 ({} regions) vs \
         {:.4} for IoU=0 ({} regions); {trend}.",
        mo, over.region_count, md, dis.region_count
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IouBand {
    /// The ground-truth region itself.
    Gt,
    /// 0 < IoU <= 0.5 with the ground truth.
    Overlap,
    /// IoU > 0.5 but not the ground-truth region.
    High,
    /// IoU = 0.
    Disjoint,
}

impl IouBand {
    pub fn label(&self) -> &'static str {
        match self {
            IouBand::Gt => "gt",
            IouBand::Overlap => "overlap",
            IouBand::High => "high",
            IouBand::Disjoint => "disjoint",
        }
    }

    pub fn of(sample: &GroundingSample, region: usize) -> Result<IouBand> {
        if region == sample.target_index {
            return Ok(IouBand::Gt);
        }
        let v = iou(&sample.regions[region].bbox, sample.target_box())?;
        Ok(if v == 0.0 {
            IouBand::Disjoint
        } else if v <= 0.5 {
            IouBand::Overlap
        } else {
            IouBand::High
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection2D {
    /// (x, y, band) per region, in region order.
    pub points: Vec<(f64, f64, IouBand)>,
    /// Fractions of total variance captured by the two components.
    pub explained_variance: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionSource {
    /// Stack index 0..=L (0 is the embedding layer).
    Layer(usize),
    Fused,
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvalues, eigenvectors as columns), unsorted.
fn jacobi_eigen(a: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let (n, m) = a.dims2()?;
    if n != m {
        return Err(Error::InvalidShape(format!("jacobi needs square input, got {n}x{m}")));
    }
    let mut a = a.data().to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let off = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for p in 0..n {
            for q in 0..n {
                if p != q {
                    s += a[p * n + q] * a[p * n + q];
                }
            }
        }
        s
    };
    for _sweep in 0..100 {
        if off(&a) < 1e-22 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eigvals: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    Ok((eigvals, Tensor::new(vec![n, n], v)?))
}

/// Centers rows, takes the top-2 principal directions of the covariance
/// (Jacobi), and projects. Sign convention: each component's first nonzero
/// loading is positive.
pub fn pca_top2(reps: &Tensor) -> Result<(Tensor, (f64, f64))> {
    let (n, d) = reps.dims2()?;
    if n < 3 {
        return Err(Error::InvalidSample(format!("PCA needs at least 3 regions, got {n}")));
    }
    let mut centered = reps.clone();
    for j in 0..d {
        let mean: f64 = (0..n).map(|i| reps.at2(i, j)).sum::<f64>() / n as f64;
        for i in 0..n {
            centered.set2(i, j, reps.at2(i, j) - mean);
        }
    }
    let cov = centered.matmul_transa(&centered)?.scale(1.0 / (n as f64 - 1.0));
    let (eigvals, eigvecs) = jacobi_eigen(&cov)?;
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eigvals[j].partial_cmp(&eigvals[i]).unwrap().then(i.cmp(&j)));
    let total: f64 = eigvals.iter().map(|&l| l.max(0.0)).sum();
    let frac = |l: f64| if total > 0.0 { (l.max(0.0) / total).min(1.0) } else { 0.0 };
    let explained = (frac(eigvals[order[0]]), frac(eigvals[order[1]]));

    let mut basis = Tensor::zeros(&[d, 2]);
    for (c, &idx) in order.iter().take(2).enumerate() {
        let mut col: Vec<f64> = (0..d).map(|r| eigvecs.at2(r, idx)).collect();
        if let Some(first) = col.iter().find(|v| v.abs() > 1e-12) {
            if *first < 0.0 {
                col.iter_mut().for_each(|v| *v = -*v);
            }
        }
        for (r, &v) in col.iter().enumerate() {
            basis.set2(r, c, v);
        }
    }
    Ok((centered.matmul(&basis)?, explained))
}

/// 2-D PCA view of one sample's region representations.
pub fn pca_project_regions(
    cfg: &ModelConfig,
    params: &ParamStore,
    sample: &GroundingSample,
    source: ProjectionSource,
) -> Result<Projection2D> {
    let reps = region_reps(cfg, params, sample, source)?;
    let (proj, explained_variance) = pca_top2(&reps)?;
    let points = (0..sample.n_regions())
        .map(|i| Ok((proj.at2(i, 0), proj.at2(i, 1), IouBand::of(sample, i)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Projection2D { points, explained_variance })
}

/// Region representations from the requested source: one encoder layer or
/// the fused output.
pub fn region_reps(
    cfg: &ModelConfig,
    params: &ParamStore,
    sample: &GroundingSample,
    source: ProjectionSource,
) -> Result<Tensor> {
    let stack = encode_sample(cfg, params, sample)?;
    match source {
        ProjectionSource::Layer(l) => stack.regions.get(l).cloned().ok_or_else(|| {
            Error::InvalidConfig(format!(
                "layer {l} outside stack of {} entries",
                stack.regions.len()
            ))
        }),
        ProjectionSource::Fused => {
            let fp = cfg.fusion_params(params)?;
            fusion::fuse(&stack, cfg.fusion, &fp, cfg.routing_iters)
        }
    }
}

pub fn projection_csv(p: &Projection2D) -> String {
    let mut out = String::from("region_id,x,y,iou_band\n");
    for (i, (x, y, band)) in p.points.iter().enumerate() {
        out.push_str(&format!("{i},{x},{y},{}\n", band.label()));
    }
    out
}

/// Euclidean distance from the ground-truth row to its nearest other row.
pub fn nearest_neighbor_margin(reps: &Tensor, gt_index: usize) -> Result<f64> {
    let (n, d) = reps.dims2()?;
    if n < 2 {
        return Err(Error::InvalidSample(format!(
            "margin needs at least 2 regions, got {n}"
        )));
    }
    if gt_index >= n {
        return Err(Error::InvalidSample(format!("gt index {gt_index} outside {n} regions")));
    }
    let mut best = f64::INFINITY;
    for j in 0..n {
        if j == gt_index {
            continue;
        }
        let mut dist2 = 0.0;
        for k in 0..d {
            let diff = reps.at2(gt_index, k) - reps.at2(j, k);
            dist2 += diff * diff;
        }
        best = best.min(dist2.sqrt());
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginRow {
    pub sample_id: u64,
    pub margin_top: f64,
    pub margin_fused: f64,
}

/// Side-by-side margins on top-layer vs fused representations. Reported,
/// never ordered-asserted.
pub fn margins(
    cfg: &ModelConfig,
    params: &ParamStore,
    samples: &[GroundingSample],
    mode: ExecMode,
) -> Result<Vec<MarginRow>> {
    let layers = cfg.encoder.layers;
    let rows: Vec<Result<MarginRow>> = map_slice(mode, samples, |s| {
        let top = region_reps(cfg, params, s, ProjectionSource::Layer(layers))?;
        let fused = region_reps(cfg, params, s, ProjectionSource::Fused)?;
        Ok(MarginRow {
            sample_id: s.id,
            margin_top: nearest_neighbor_margin(&top, s.target_index)?,
            margin_fused: nearest_neighbor_margin(&fused, s.target_index)?,
        })
    });
    rows.into_iter().collect()
}

pub fn margins_csv(rows: &[MarginRow]) -> String {
    let mut out = String::from("sample_id,margin_top,margin_fused\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.sample_id, r.margin_top, r.margin_fused));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{default_dual_split, EncoderConfig, Stream};
    use crate::fusion::FusionKind;
    use crate::grounding::Box2D;
    use crate::rng::Rng64;
    use crate::synthgen::{generate_sample, SceneSpec};

    fn tiny_model(kind: FusionKind) -> ModelConfig {
        ModelConfig::new(
            EncoderConfig {
                d: 16,
                layers: 2,
                heads: 2,
                ffn_mult: 2,
                vocab_size: crate::synthgen::vocab().len(),
                max_tokens: crate::synthgen::MAX_COMMAND_TOKENS,
                region_feature_dim: SceneSpec::default().feature_dim(),
                stream: Stream::Single,
                dual_split: default_dual_split(2),
            },
            kind,
        )
    }

    fn dataset(count: usize, seed: u64) -> Vec<GroundingSample> {
        let spec = SceneSpec {
            n_regions_min: 4,
            n_regions_max: 6,
            distractor_policy: 1,
            ..SceneSpec::default()
        };
        (0..count).map(|i| generate_sample(&spec, i as u64, seed).unwrap()).collect()
    }

    #[test]
    fn profiles_are_stochastic_and_partition_regions() {
        let cfg = tiny_model(FusionKind::Rsd);
        let params = cfg.init(1).unwrap();
        let data = dataset(6, 11);
        let (over, dis) =
            attention_group_profile(&cfg, &params, &data, ExecMode::Sequential).unwrap();
        let total_regions: usize = data.iter().map(|s| s.n_regions()).sum();
        assert_eq!(over.region_count + dis.region_count, total_regions);
        for p in [&over, &dis] {
            if p.region_count > 0 {
                let sum: f64 = p.mean_weight_per_layer.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6, "{}: {sum}", p.group.label());
                assert!(p.mean_weight_per_layer.iter().all(|&w| w >= 0.0));
            }
        }
        // Parallel accumulation matches sequential exactly.
        let (o2, d2) =
            attention_group_profile(&cfg, &params, &data, ExecMode::Parallel).unwrap();
        assert_eq!(over, o2);
        assert_eq!(dis, d2);
        let csv = attention_profile_csv(&[&over, &dis]);
        assert!(csv.starts_with("group,layer,mean_weight,count\n"));
        assert!(csv.contains("IoU>0,0,"));
    }

    #[test]
    fn uniform_weight_model_gives_uniform_profiles() {
        let cfg = tiny_model(FusionKind::Rsd);
        let mut params = cfg.init(2).unwrap();
        *params.get_mut("fusion.alpha.w").unwrap() = Tensor::zeros(&[16, 1]);
        *params.get_mut("fusion.alpha.b").unwrap() = Tensor::zeros(&[1, 1]);
        let data = dataset(4, 21);
        let (over, dis) =
            attention_group_profile(&cfg, &params, &data, ExecMode::Sequential).unwrap();
        for p in [over, dis] {
            if p.region_count > 0 {
                for w in p.mean_weight_per_layer {
                    assert!((w - 1.0 / 3.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn unsupported_kinds_error_in_profiles() {
        for kind in [FusionKind::TopLayer, FusionKind::DynamicCombination] {
            let cfg = tiny_model(kind);
            let params = cfg.init(3).unwrap();
            let data = dataset(2, 31);
            assert!(matches!(
                attention_group_profile(&cfg, &params, &data, ExecMode::Sequential),
                Err(Error::UnsupportedAnalysis(_))
            ));
        }
    }

    #[test]
    fn all_gt_dataset_leaves_disjoint_group_empty() {
        // Single-region samples: the only region IS the ground truth.
        let spec = SceneSpec {
            n_regions_min: 1,
            n_regions_max: 1,
            distractor_policy: 0,
            ..SceneSpec::default()
        };
        let data: Vec<GroundingSample> =
            (0..3).map(|i| generate_sample(&spec, i, 77).unwrap()).collect();
        let cfg = tiny_model(FusionKind::Rsd);
        let params = cfg.init(4).unwrap();
        let (over, dis) =
            attention_group_profile(&cfg, &params, &data, ExecMode::Sequential).unwrap();
        assert_eq!(dis.region_count, 0);
        assert_eq!(over.region_count, 3);
        assert!(dis.mean_weight_per_layer.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn jacobi_recovers_hand_eigensystem() {
        // [[2,1],[1,2]] -> eigenvalues 3 and 1.
        let a = Tensor::new(vec![2, 2], vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let (vals, vecs) = jacobi_eigen(&a).unwrap();
        let mut sorted = vals.clone();
        sorted.sort_by(|x, y| y.partial_cmp(x).unwrap());
        assert!((sorted[0] - 3.0).abs() < 1e-12);
        assert!((sorted[1] - 1.0).abs() < 1e-12);
        // Eigenvector columns are orthonormal.
        let vtv = vecs.matmul_transa(&vecs).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((vtv.at2(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pca_collinear_data_is_rank_one() {
        // Points on a line in 5-D.
        let dir: Vec<f64> = vec![0.5, -1.0, 2.0, 0.0, 0.25];
        let mut data = Vec::new();
        for t in 0..6 {
            for v in &dir {
                data.push(v * t as f64);
            }
        }
        let reps = Tensor::new(vec![6, 5], data).unwrap();
        let (proj, (e1, e2)) = pca_top2(&reps).unwrap();
        assert!(e1 > 0.999, "{e1}");
        assert!(e2 < 1e-9, "{e2}");
        for i in 0..6 {
            assert!(proj.at2(i, 1).abs() < 1e-9, "second coordinate not ~0");
        }
    }

    #[test]
    fn pca_distances_contract_and_survive_rotation() {
        let mut rng = Rng64::seed_from_u64(5);
        let n = 8;
        let d = 6;
        let reps =
            Tensor::new(vec![n, d], (0..n * d).map(|_| rng.normal()).collect()).unwrap();
        let (proj, (e1, e2)) = pca_top2(&reps).unwrap();
        assert!(e1 >= e2 && e2 >= 0.0 && e1 <= 1.0);
        assert!(e1 + e2 <= 1.0 + 1e-12);
        for i in 0..n {
            for j in i + 1..n {
                let d2: f64 = (0..2)
                    .map(|k| (proj.at2(i, k) - proj.at2(j, k)).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let dd: f64 = (0..d)
                    .map(|k| (reps.at2(i, k) - reps.at2(j, k)).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(d2 <= dd + 1e-9, "projection expanded a distance");
            }
        }

        // Rotate inputs by a fixed orthogonal map (Givens in coords 1,4):
        // pairwise projected distances must be preserved.
        let (c, s) = (0.6, 0.8);
        let mut rot = reps.clone();
        for i in 0..n {
            let a = reps.at2(i, 1);
            let b = reps.at2(i, 4);
            rot.set2(i, 1, c * a - s * b);
            rot.set2(i, 4, s * a + c * b);
        }
        let (proj_r, _) = pca_top2(&rot).unwrap();
        for i in 0..n {
            for j in i + 1..n {
                let da: f64 = (0..2)
                    .map(|k| (proj.at2(i, k) - proj.at2(j, k)).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let db: f64 = (0..2)
                    .map(|k| (proj_r.at2(i, k) - proj_r.at2(j, k)).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!((da - db).abs() < 1e-8, "{da} vs {db}");
            }
        }
    }

    #[test]
    fn pca_needs_three_regions() {
        let reps = Tensor::new(vec![2, 4], vec![0.0; 8]).unwrap();
        assert!(pca_top2(&reps).is_err());
    }

    #[test]
    fn projection_bands_and_csv() {
        let mut s = generate_sample(
            &SceneSpec { n_regions_min: 5, n_regions_max: 5, ..SceneSpec::default() },
            0,
            91,
        )
        .unwrap();
        // Force region 1 to heavily overlap the target (but not equal it).
        let t = *s.target_box();
        let other = (0..s.n_regions()).find(|&i| i != s.target_index).unwrap();
        let w = t.x2 - t.x1;
        s.regions[other].bbox =
            Box2D::new(t.x1 + 0.05 * w, t.y1, t.x2, t.y2).unwrap();
        let cfg = tiny_model(FusionKind::Rsd);
        let params = cfg.init(6).unwrap();
        let p = pca_project_regions(&cfg, &params, &s, ProjectionSource::Fused).unwrap();
        assert_eq!(p.points.len(), 5);
        assert_eq!(p.points[s.target_index].2, IouBand::Gt);
        assert_eq!(p.points[other].2, IouBand::High);
        let csv = projection_csv(&p);
        assert!(csv.starts_with("region_id,x,y,iou_band\n"));
        assert!(csv.contains(",gt\n"));
        assert!(csv.contains(",high\n"));
    }

    #[test]
    fn margin_hand_cases() {
        // Duplicate of gt present -> margin 0.
        let reps = Tensor::new(vec![3, 2], vec![1.0, 1.0, 5.0, 5.0, 1.0, 1.0]).unwrap();
        assert_eq!(nearest_neighbor_margin(&reps, 0).unwrap(), 0.0);

        // Equilateral triangle: margin equals the side length.
        let side = 2.0;
        let reps = Tensor::new(
            vec![3, 2],
            vec![0.0, 0.0, side, 0.0, side / 2.0, side * 3.0f64.sqrt() / 2.0],
        )
        .unwrap();
        for i in 0..3 {
            assert!((nearest_neighbor_margin(&reps, i).unwrap() - side).abs() < 1e-12);
        }

        let one = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert!(nearest_neighbor_margin(&one, 0).is_err());
    }

    #[test]
    fn margin_rows_cover_dataset_and_modes_agree() {
        let cfg = tiny_model(FusionKind::Rsd);
        let params = cfg.init(7).unwrap();
        let data = dataset(5, 101);
        let seq = margins(&cfg, &params, &data, ExecMode::Sequential).unwrap();
        let par = margins(&cfg, &params, &data, ExecMode::Parallel).unwrap();
        assert_eq!(seq, par);
        assert_eq!(seq.len(), 5);
        assert!(seq.iter().all(|r| r.margin_top >= 0.0 && r.margin_fused >= 0.0));
        let csv = margins_csv(&seq);
        assert!(csv.starts_with("sample_id,margin_top,margin_fused\n"));
        assert_eq!(csv.lines().count(), 6);
    }

    #[test]
    fn observation_mentions_both_groups() {
        let over = AttentionProfile {
            group: WeightGroup::Overlapping,
            mean_weight_per_layer: vec![0.1, 0.2, 0.3, 0.4],
            region_count: 10,
        };
        let dis = AttentionProfile {
            group: WeightGroup::Disjoint,
            mean_weight_per_layer: vec![0.4, 0.3, 0.2, 0.1],
            region_count: 20,
        };
        let text = profile_observation(&over, &dis);
        assert!(text.contains("IoU>0"));
        assert!(text.contains("IoU=0"));
        assert!(text.contains("not a gate"));
        assert!(text.contains("higher layers"));
    }

    #[test]
    fn sample_specific_profiles_uniform_within_sample() {
        let cfg = tiny_model(FusionKind::SampleSpecific);
        let params = cfg.init(8).unwrap();
        let s = dataset(1, 111).remove(0);
        let stack = encode_sample(&cfg, &params, &s).unwrap();
        let fp = cfg.fusion_params(&params).unwrap();
        let w = fusion::analysis_weights(&stack, &fp, cfg.routing_iters).unwrap();
        let first: Vec<u64> = w.row(0).iter().map(|v| v.to_bits()).collect();
        for i in 1..s.n_regions() {
            let row: Vec<u64> = w.row(i).iter().map(|v| v.to_bits()).collect();
            assert_eq!(first, row);
        }
        // So group means can differ only through sample composition; with a
        // single sample both groups (when nonempty) share the same profile.
        let (over, dis) =
            attention_group_profile(&cfg, &params, &[s], ExecMode::Sequential).unwrap();
        if over.region_count > 0 && dis.region_count > 0 {
            for (a, b) in over.mean_weight_per_layer.iter().zip(&dis.mean_weight_per_layer) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
