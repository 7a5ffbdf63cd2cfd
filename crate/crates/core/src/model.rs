//! The full grounding model: encoder -> layer fusion -> scoring head,
//! wired into one differentiable graph per batch.

use crate::encoder::{encode, encode_batch, EncoderConfig, LayerStack};
use crate::error::{Error, Result};
use crate::fusion::{self, FusionKind, FusionParams, DEFAULT_ROUTING_ITERS};
use crate::graph::{Graph, NodeId};
use crate::grounding::{MatchScores, ScoreHead};
use crate::params::{InitScheme, ParamSpec, ParamStore};
use crate::sample::GroundingSample;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub fusion: FusionKind,
    #[serde(default = "default_routing_iters")]
    pub routing_iters: usize,
}

fn default_routing_iters() -> usize {
    DEFAULT_ROUTING_ITERS
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig, fusion: FusionKind) -> Self {
        ModelConfig { encoder, fusion, routing_iters: DEFAULT_ROUTING_ITERS }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.fusion == FusionKind::DynamicRouting && self.routing_iters == 0 {
            return Err(Error::InvalidConfig("routing_iters must be >= 1".into()));
        }
        Ok(())
    }

    /// Encoder, fusion-head and score-head parameters, in one flat list.
    pub fn param_specs(&self) -> Result<Vec<ParamSpec>> {
        self.validate()?;
        let d = self.encoder.d;
        let mut specs = self.encoder.param_specs();
        specs.extend(fusion::param_specs(self.fusion, d, self.encoder.layers));
        specs.push(ParamSpec::new("head.w", &[d, 1], InitScheme::GlorotUniform));
        specs.push(ParamSpec::new("head.b", &[1, 1], InitScheme::Zeros));
        Ok(specs)
    }

    pub fn init(&self, seed: u64) -> Result<ParamStore> {
        crate::params::init_params(&self.param_specs()?, seed)
    }

    /// Trainable parameters the fusion strategy adds on top of the shared
    /// encoder + head.
    pub fn extra_fusion_params(&self) -> usize {
        fusion::param_count(self.fusion, self.encoder.d, self.encoder.layers)
    }

    pub fn fusion_params(&self, store: &ParamStore) -> Result<FusionParams> {
        FusionParams::from_store(self.fusion, store, self.encoder.d, self.encoder.layers)
    }
}

/// Handles into a recorded training graph for one packed batch.
pub struct BatchForward {
    /// Scalar training loss.
    pub loss: NodeId,
    /// [total_regions, 1] packed logits.
    pub logits: NodeId,
    /// [total_regions, d] fused region representations.
    pub fused: NodeId,
    pub region_counts: Vec<usize>,
}

/// Records encoder + fusion + head + loss for `samples` into `g`.
///
/// The loss is the batch mean of per-sample BCE means: each element is
/// weighted 1/(B * n_b) so samples contribute equally regardless of their
/// region counts.
pub fn build_loss(
    g: &mut Graph,
    cfg: &ModelConfig,
    params: &ParamStore,
    samples: &[&GroundingSample],
) -> Result<BatchForward> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidSample("empty batch".into()));
    }
    let encoded = encode_batch(g, &cfg.encoder, params, samples)?;
    let counts = encoded.layout.region_counts.clone();
    let fused = fusion::build_fused(
        g,
        cfg.fusion,
        params,
        &encoded.region_layers,
        &counts,
        cfg.routing_iters,
    )?;
    let logits = score_node(g, params, fused)?;

    let total = encoded.layout.total_regions();
    let b = samples.len() as f64;
    let mut targets = Vec::with_capacity(total);
    let mut weights = Vec::with_capacity(total);
    for s in samples {
        let t = s.iou_targets()?;
        let w = 1.0 / (b * t.len() as f64);
        weights.extend(std::iter::repeat_n(w, t.len()));
        targets.extend(t);
    }
    let targets = Tensor::new(vec![total, 1], targets)?;
    let loss = g.bce_with_logits_weighted(logits, targets, weights)?;
    Ok(BatchForward { loss, logits, fused, region_counts: counts })
}

fn score_node(g: &mut Graph, params: &ParamStore, fused: NodeId) -> Result<NodeId> {
    let w = g.param("head.w", params.get("head.w")?);
    let b = g.param("head.b", params.get("head.b")?);
    let raw = g.matmul(fused, w)?;
    g.add_bias(raw, b)
}

/// Forward-only scoring of one sample.
pub fn score_sample(
    cfg: &ModelConfig,
    params: &ParamStore,
    sample: &GroundingSample,
) -> Result<MatchScores> {
    let mut g = Graph::new();
    let fwd = build_loss(&mut g, cfg, params, &[sample])?;
    let logits = g.value(fwd.logits);
    Ok(MatchScores::from_logits(logits.data().to_vec()))
}

/// Argmax inference for one sample.
pub fn predict_sample(
    cfg: &ModelConfig,
    params: &ParamStore,
    sample: &GroundingSample,
) -> Result<usize> {
    crate::grounding::predict_region(&score_sample(cfg, params, sample)?)
}

/// The score head as a standalone value type (used by analysis paths).
pub fn score_head(params: &ParamStore) -> Result<ScoreHead> {
    ScoreHead::new(params.get("head.w")?.clone(), params.get("head.b")?.clone())
}

/// Encoder stack for one sample (analysis entry point).
pub fn encode_sample(
    cfg: &ModelConfig,
    params: &ParamStore,
    sample: &GroundingSample,
) -> Result<LayerStack> {
    encode(sample, &cfg.encoder, params)
}
