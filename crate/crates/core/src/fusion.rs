//! Encoder-layer fusion: turning a region's stack of per-layer
//! representations into one vector.
//!
//! Seven strategies. The region-specific dynamic (RSD) head scores every
//! layer per region with a shared linear form and softmax-normalizes across
//! layers; the sample-specific variant does the same on mean-pooled regions;
//! the rest are the static and dynamic baselines it is compared against.
//!
//! Everything is built on the autodiff graph. The tensor-level entry points
//! wrap the same builders over a batch of one, so train-time and
//! analysis-time arithmetic cannot drift apart.

use crate::encoder::LayerStack;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{InitScheme, ParamSpec, ParamStore};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

pub const DEFAULT_ROUTING_ITERS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionKind {
    TopLayer,
    CoarseGrained,
    FineGrained,
    DynamicCombination,
    DynamicRouting,
    SampleSpecific,
    #[serde(rename = "RSD")]
    Rsd,
}

impl FusionKind {
    pub const ALL: [FusionKind; 7] = [
        FusionKind::TopLayer,
        FusionKind::CoarseGrained,
        FusionKind::FineGrained,
        FusionKind::DynamicCombination,
        FusionKind::DynamicRouting,
        FusionKind::SampleSpecific,
        FusionKind::Rsd,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FusionKind::TopLayer => "TopLayer",
            FusionKind::CoarseGrained => "CoarseGrained",
            FusionKind::FineGrained => "FineGrained",
            FusionKind::DynamicCombination => "DynamicCombination",
            FusionKind::DynamicRouting => "DynamicRouting",
            FusionKind::SampleSpecific => "SampleSpecific",
            FusionKind::Rsd => "RSD",
        }
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown fusion kind {s:?}")))
    }
}

/// Extra trainable parameters each kind introduces on top of the encoder.
pub fn param_count(kind: FusionKind, d: usize, layers: usize) -> usize {
    let l1 = layers + 1;
    match kind {
        FusionKind::TopLayer => 0,
        FusionKind::Rsd | FusionKind::SampleSpecific => d + 1,
        FusionKind::CoarseGrained => l1,
        FusionKind::FineGrained => d * l1,
        FusionKind::DynamicRouting => l1 * d * d,
        // L FFNs of 2d -> 4d -> d with biases.
        FusionKind::DynamicCombination => layers * (12 * d * d + 5 * d),
    }
}

/// Parameter specs under the `fusion.` prefix.
pub fn param_specs(kind: FusionKind, d: usize, layers: usize) -> Vec<ParamSpec> {
    use InitScheme::{GlorotUniform, Zeros};
    match kind {
        FusionKind::TopLayer => vec![],
        FusionKind::Rsd | FusionKind::SampleSpecific => vec![
            ParamSpec::new("fusion.alpha.w", &[d, 1], GlorotUniform),
            ParamSpec::new("fusion.alpha.b", &[1, 1], Zeros),
        ],
        FusionKind::CoarseGrained => {
            vec![ParamSpec::new("fusion.coarse", &[1, layers + 1], Zeros)]
        }
        FusionKind::FineGrained => {
            vec![ParamSpec::new("fusion.fine", &[layers + 1, d], Zeros)]
        }
        FusionKind::DynamicRouting => (0..=layers)
            .map(|l| ParamSpec::new(format!("fusion.route.p{l:02}"), &[d, d], GlorotUniform))
            .collect(),
        FusionKind::DynamicCombination => {
            let mut specs = Vec::new();
            for l in 1..=layers {
                specs.push(ParamSpec::new(format!("fusion.comb{l:02}.w1"), &[2 * d, 4 * d], GlorotUniform));
                specs.push(ParamSpec::new(format!("fusion.comb{l:02}.b1"), &[1, 4 * d], Zeros));
                specs.push(ParamSpec::new(format!("fusion.comb{l:02}.w2"), &[4 * d, d], GlorotUniform));
                specs.push(ParamSpec::new(format!("fusion.comb{l:02}.b2"), &[1, d], Zeros));
            }
            specs
        }
    }
}

/// Per-region layer scores before and after softmax normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    /// [n, L+1] pre-softmax scores.
    pub relevance: Tensor,
    /// [n, L+1] rows summing to 1.
    pub weights: Tensor,
}

/// The fusion head's own parameters, validated against `param_count`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub kind: FusionKind,
    store: ParamStore,
}

impl FusionParams {
    /// Pulls the `fusion.`-prefixed entries out of a full model store.
    pub fn from_store(kind: FusionKind, source: &ParamStore, d: usize, layers: usize) -> Result<Self> {
        let mut store = ParamStore::empty(source.rng_seed());
        for spec in param_specs(kind, d, layers) {
            store.insert(&spec.name, source.get(&spec.name)?.clone())?;
        }
        let fp = FusionParams { kind, store };
        let actual = fp.store.total_params();
        let expect = param_count(kind, d, layers);
        if actual != expect {
            return Err(Error::Incompatible(format!(
                "{kind} fusion head has {actual} parameters, expected {expect}"
            )));
        }
        Ok(fp)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }
}

fn get_param(g: &mut Graph, params: &ParamStore, name: &str) -> Result<NodeId> {
    Ok(g.param(name, params.get(name)?))
}

fn check_stack(layers: &[NodeId], g: &Graph) -> Result<(usize, usize)> {
    if layers.len() < 2 {
        return Err(Error::InvalidShape(format!(
            "layer stack needs at least 2 entries (embeddings + 1 layer), got {}",
            layers.len()
        )));
    }
    g.value(layers[0]).dims2()
}

/// RSD relevance/weights over packed regions: relevance[:, l] = stack_l @ W_a + b_a.
pub fn build_rsd_weights(
    g: &mut Graph,
    params: &ParamStore,
    region_layers: &[NodeId],
) -> Result<(NodeId, NodeId)> {
    check_stack(region_layers, g)?;
    let w = get_param(g, params, "fusion.alpha.w")?;
    let b = get_param(g, params, "fusion.alpha.b")?;
    let mut cols = Vec::with_capacity(region_layers.len());
    for &layer in region_layers {
        let raw = g.matmul(layer, w)?;
        cols.push(g.add_bias(raw, b)?);
    }
    let relevance = g.concat_cols(&cols)?;
    let weights = g.softmax_rows(relevance)?;
    Ok((relevance, weights))
}

/// Sample-specific weights: the RSD linear form on mean-pooled regions,
/// broadcast to every region of the sample. `region_counts` gives each
/// sample's region count within the packed rows.
pub fn build_sample_specific_weights(
    g: &mut Graph,
    params: &ParamStore,
    region_layers: &[NodeId],
    region_counts: &[usize],
) -> Result<(NodeId, NodeId)> {
    let (total, _) = check_stack(region_layers, g)?;
    if region_counts.iter().sum::<usize>() != total {
        return Err(Error::InvalidShape(format!(
            "region counts {region_counts:?} do not cover {total} packed rows"
        )));
    }
    let w = get_param(g, params, "fusion.alpha.w")?;
    let b = get_param(g, params, "fusion.alpha.b")?;
    let mut rel_rows = Vec::with_capacity(region_counts.len());
    let mut weight_rows = Vec::with_capacity(region_counts.len());
    let mut off = 0;
    for &n in region_counts {
        let mut cols = Vec::with_capacity(region_layers.len());
        for &layer in region_layers {
            let rows = g.slice_rows(layer, off, n)?;
            let pooled = g.mean_pool_rows(rows)?;
            let raw = g.matmul(pooled, w)?;
            cols.push(g.add_bias(raw, b)?);
        }
        let rel = g.concat_cols(&cols)?; // [1, L+1]
        let wts = g.softmax_rows(rel)?;
        rel_rows.push(g.repeat_rows(rel, n)?);
        weight_rows.push(g.repeat_rows(wts, n)?);
        off += n;
    }
    let relevance = if rel_rows.len() == 1 { rel_rows[0] } else { g.concat_rows(&rel_rows)? };
    let weights = if weight_rows.len() == 1 { weight_rows[0] } else { g.concat_rows(&weight_rows)? };
    Ok((relevance, weights))
}

/// Static per-layer weights shared by every region and sample.
pub fn build_coarse_weights(
    g: &mut Graph,
    params: &ParamStore,
    region_layers: &[NodeId],
) -> Result<(NodeId, NodeId)> {
    let (total, _) = check_stack(region_layers, g)?;
    let scores = get_param(g, params, "fusion.coarse")?;
    let wts = g.softmax_rows(scores)?;
    let relevance = g.repeat_rows(scores, total)?;
    let weights = g.repeat_rows(wts, total)?;
    Ok((relevance, weights))
}

/// Weighted sum of the packed stack under per-region weights.
pub fn build_weighted_sum(
    g: &mut Graph,
    region_layers: &[NodeId],
    weights: NodeId,
) -> Result<NodeId> {
    g.weighted_sum_layers(region_layers, weights)
}

/// Static per-element weights: softmax across layers for every dimension.
pub fn build_fine_grained(
    g: &mut Graph,
    params: &ParamStore,
    region_layers: &[NodeId],
) -> Result<NodeId> {
    check_stack(region_layers, g)?;
    let scores = get_param(g, params, "fusion.fine")?; // [L+1, d]
    let scores_t = g.transpose2(scores)?; // [d, L+1]
    let wts_t = g.softmax_rows(scores_t)?;
    let wts = g.transpose2(wts_t)?; // [L+1, d], columns sum to 1
    g.elem_weighted_sum(region_layers, wts)
}

/// Routing-by-agreement over per-layer projections. Returns
/// (fused [R, d], final coupling [R, L+1]).
pub fn build_dynamic_routing(
    g: &mut Graph,
    params: &ParamStore,
    region_layers: &[NodeId],
    iterations: usize,
) -> Result<(NodeId, NodeId)> {
    let (total, _) = check_stack(region_layers, g)?;
    if iterations == 0 {
        return Err(Error::InvalidConfig("routing needs at least one iteration".into()));
    }
    let mut u = Vec::with_capacity(region_layers.len());
    for (l, &layer) in region_layers.iter().enumerate() {
        let p = get_param(g, params, &format!("fusion.route.p{l:02}"))?;
        u.push(g.matmul(layer, p)?);
    }
    let mut logits = g.constant(Tensor::zeros(&[total, region_layers.len()]));
    let mut fused = None;
    let mut coupling = None;
    for it in 0..iterations {
        let c = g.softmax_rows(logits)?;
        let s = g.weighted_sum_layers(&u, c)?;
        coupling = Some(c);
        fused = Some(s);
        if it + 1 < iterations {
            let mut dots = Vec::with_capacity(u.len());
            for &ul in &u {
                dots.push(g.rows_dot(ul, s)?);
            }
            let agree = g.concat_cols(&dots)?;
            logits = g.add(logits, agree)?;
        }
    }
    Ok((fused.unwrap(), coupling.unwrap()))
}

/// Residual chain of per-layer FFNs: g_l = g_{l-1} + FFN_l([stack_l; g_{l-1}]).
pub fn build_dynamic_combination(
    g: &mut Graph,
    params: &ParamStore,
    region_layers: &[NodeId],
) -> Result<NodeId> {
    check_stack(region_layers, g)?;
    let mut agg = region_layers[0];
    for (l, &layer) in region_layers.iter().enumerate().skip(1) {
        let w1 = get_param(g, params, &format!("fusion.comb{l:02}.w1"))?;
        let b1 = get_param(g, params, &format!("fusion.comb{l:02}.b1"))?;
        let w2 = get_param(g, params, &format!("fusion.comb{l:02}.w2"))?;
        let b2 = get_param(g, params, &format!("fusion.comb{l:02}.b2"))?;
        let joined = g.concat_cols(&[layer, agg])?;
        let h = g.matmul(joined, w1)?;
        let h = g.add_bias(h, b1)?;
        let h = g.gelu(h);
        let h = g.matmul(h, w2)?;
        let h = g.add_bias(h, b2)?;
        agg = g.add(agg, h)?;
    }
    Ok(agg)
}

/// Dispatcher: fused packed regions for any kind.
pub fn build_fused(
    g: &mut Graph,
    kind: FusionKind,
    params: &ParamStore,
    region_layers: &[NodeId],
    region_counts: &[usize],
    routing_iters: usize,
) -> Result<NodeId> {
    match kind {
        FusionKind::TopLayer => {
            check_stack(region_layers, g)?;
            Ok(*region_layers.last().unwrap())
        }
        FusionKind::Rsd => {
            let (_, w) = build_rsd_weights(g, params, region_layers)?;
            build_weighted_sum(g, region_layers, w)
        }
        FusionKind::SampleSpecific => {
            let (_, w) = build_sample_specific_weights(g, params, region_layers, region_counts)?;
            build_weighted_sum(g, region_layers, w)
        }
        FusionKind::CoarseGrained => {
            let (_, w) = build_coarse_weights(g, params, region_layers)?;
            build_weighted_sum(g, region_layers, w)
        }
        FusionKind::FineGrained => build_fine_grained(g, params, region_layers),
        FusionKind::DynamicRouting => {
            Ok(build_dynamic_routing(g, params, region_layers, routing_iters)?.0)
        }
        FusionKind::DynamicCombination => build_dynamic_combination(g, params, region_layers),
    }
}

fn stack_constants(g: &mut Graph, stack: &LayerStack) -> Vec<NodeId> {
    stack.regions.iter().map(|t| g.constant(t.clone())).collect()
}

fn weights_from_nodes(g: &Graph, rel: NodeId, wts: NodeId) -> FusionWeights {
    FusionWeights {
        relevance: g.value(rel).clone(),
        weights: g.value(wts).clone(),
    }
}

/// Eq.-style per-region layer attention from a single sample's stack.
pub fn rsd_weights(stack: &LayerStack, fp: &FusionParams) -> Result<FusionWeights> {
    expect_kind(fp, &[FusionKind::Rsd, FusionKind::SampleSpecific])?;
    let mut g = Graph::new();
    let layers = stack_constants(&mut g, stack);
    let (rel, wts) = build_rsd_weights(&mut g, fp.store(), &layers)?;
    Ok(weights_from_nodes(&g, rel, wts))
}

/// Mean-pooled variant: one weight row per sample, broadcast to regions.
pub fn sample_specific_weights(stack: &LayerStack, fp: &FusionParams) -> Result<FusionWeights> {
    expect_kind(fp, &[FusionKind::SampleSpecific, FusionKind::Rsd])?;
    let mut g = Graph::new();
    let layers = stack_constants(&mut g, stack);
    let counts = [stack.n_regions()];
    let (rel, wts) = build_sample_specific_weights(&mut g, fp.store(), &layers, &counts)?;
    Ok(weights_from_nodes(&g, rel, wts))
}

/// Weighted sum of a sample's stack under explicit weights.
pub fn fuse_weighted_sum(stack: &LayerStack, w: &FusionWeights) -> Result<Tensor> {
    let mut g = Graph::new();
    let layers = stack_constants(&mut g, stack);
    let wts = g.constant(w.weights.clone());
    let fused = build_weighted_sum(&mut g, &layers, wts)?;
    Ok(g.value(fused).clone())
}

pub fn coarse_grained_fuse(stack: &LayerStack, fp: &FusionParams) -> Result<Tensor> {
    expect_kind(fp, &[FusionKind::CoarseGrained])?;
    fuse(stack, FusionKind::CoarseGrained, fp, DEFAULT_ROUTING_ITERS)
}

pub fn fine_grained_fuse(stack: &LayerStack, fp: &FusionParams) -> Result<Tensor> {
    expect_kind(fp, &[FusionKind::FineGrained])?;
    fuse(stack, FusionKind::FineGrained, fp, DEFAULT_ROUTING_ITERS)
}

/// Routing fusion; also exposes the final coupling coefficients.
pub fn dynamic_routing_fuse(
    stack: &LayerStack,
    fp: &FusionParams,
    iterations: usize,
) -> Result<(Tensor, Tensor)> {
    expect_kind(fp, &[FusionKind::DynamicRouting])?;
    let mut g = Graph::new();
    let layers = stack_constants(&mut g, stack);
    let (fused, coupling) = build_dynamic_routing(&mut g, fp.store(), &layers, iterations)?;
    Ok((g.value(fused).clone(), g.value(coupling).clone()))
}

pub fn dynamic_combination_fuse(stack: &LayerStack, fp: &FusionParams) -> Result<Tensor> {
    expect_kind(fp, &[FusionKind::DynamicCombination])?;
    fuse(stack, FusionKind::DynamicCombination, fp, DEFAULT_ROUTING_ITERS)
}

fn expect_kind(fp: &FusionParams, allowed: &[FusionKind]) -> Result<()> {
    if allowed.contains(&fp.kind) {
        Ok(())
    } else {
        Err(Error::Incompatible(format!(
            "fusion params of kind {} where {:?} expected",
            fp.kind, allowed
        )))
    }
}

/// Fused representations of one sample's regions, any kind.
pub fn fuse(
    stack: &LayerStack,
    kind: FusionKind,
    fp: &FusionParams,
    routing_iters: usize,
) -> Result<Tensor> {
    if fp.kind != kind {
        return Err(Error::Incompatible(format!(
            "fusion params of kind {} used as {kind}",
            fp.kind
        )));
    }
    let mut g = Graph::new();
    let layers = stack_constants(&mut g, stack);
    let counts = [stack.n_regions()];
    let fused = build_fused(&mut g, kind, fp.store(), &layers, &counts, routing_iters)?;
    Ok(g.value(fused).clone())
}

/// Per-region layer-weight rows for the analysis module. Kinds that fuse
/// without layer weights are rejected.
pub fn analysis_weights(
    stack: &LayerStack,
    fp: &FusionParams,
    routing_iters: usize,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let layers = stack_constants(&mut g, stack);
    let counts = [stack.n_regions()];
    let wts = match fp.kind {
        FusionKind::Rsd => build_rsd_weights(&mut g, fp.store(), &layers)?.1,
        FusionKind::SampleSpecific => {
            build_sample_specific_weights(&mut g, fp.store(), &layers, &counts)?.1
        }
        FusionKind::CoarseGrained => build_coarse_weights(&mut g, fp.store(), &layers)?.1,
        FusionKind::FineGrained => {
            // Element-level weights averaged per layer, equal for every region.
            let scores = fp.store().get("fusion.fine")?;
            let scores_t = g.constant(scores.transpose2()?);
            let wts_t = g.softmax_rows(scores_t)?; // [d, L+1]
            let mean = g.mean_pool_rows(wts_t)?; // [1, L+1]
            g.repeat_rows(mean, stack.n_regions())?
        }
        FusionKind::DynamicRouting => {
            build_dynamic_routing(&mut g, fp.store(), &layers, routing_iters)?.1
        }
        FusionKind::TopLayer | FusionKind::DynamicCombination => {
            return Err(Error::UnsupportedAnalysis(format!(
                "{} produces no layer attention weights",
                fp.kind
            )))
        }
    };
    Ok(g.value(wts).clone())
}
