//! Transformer encoder over (command tokens, region proposals).
//!
//! Two wiring modes: single-stream (tokens and regions share one sequence,
//! every layer mixes modalities) and dual-stream (text-only layers, then
//! vision-only layers, then cross layers where each modality attends to the
//! concatenation of both with its own parameters).
//!
//! Training builds one packed graph per batch: all samples' rows flow through
//! shared linear/FFN GEMMs, while attention stays exact per sample via row
//! slices. The per-sample `embed`/`encode` entry points reuse the same
//! builder with a batch of one.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{InitScheme, ParamSpec, ParamStore};
use crate::sample::GroundingSample;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const GEOMETRY_FEATURES: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Single,
    Dual,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub region_feature_dim: usize,
    pub stream: Stream,
    /// (text_layers, vision_layers, cross_layers); must sum to `layers`.
    pub dual_split: (usize, usize, usize),
}

/// Splits L into (text, vision, cross) with roughly a third cross and the
/// remainder shared text-first.
pub fn default_dual_split(layers: usize) -> (usize, usize, usize) {
    let cross = layers.div_ceil(3);
    let rest = layers - cross;
    let text = rest.div_ceil(2);
    (text, rest - text, cross)
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.ffn_mult == 0 {
            return Err(Error::InvalidConfig("zero-sized encoder dimension".into()));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "hidden size {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::InvalidConfig("encoder needs at least one layer".into()));
        }
        if self.vocab_size == 0 || self.max_tokens == 0 || self.region_feature_dim == 0 {
            return Err(Error::InvalidConfig("empty vocab/tokens/features".into()));
        }
        if self.stream == Stream::Dual {
            let (t, v, c) = self.dual_split;
            if t + v + c != self.layers {
                return Err(Error::InvalidConfig(format!(
                    "dual split {:?} does not sum to {} layers",
                    self.dual_split, self.layers
                )));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Width of the region input: appearance features plus box geometry.
    pub fn region_input_dim(&self) -> usize {
        self.region_feature_dim + GEOMETRY_FEATURES
    }

    /// All encoder parameters, under the `encoder.` prefix.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        use InitScheme::{GlorotUniform, Ones, Zeros};
        let d = self.d;
        let mut specs = vec![
            ParamSpec::new("encoder.embed.tok", &[self.vocab_size, d], GlorotUniform),
            ParamSpec::new("encoder.embed.pos", &[self.max_tokens, d], GlorotUniform),
            ParamSpec::new("encoder.embed.reg.w", &[self.region_input_dim(), d], GlorotUniform),
            ParamSpec::new("encoder.embed.reg.b", &[1, d], Zeros),
            ParamSpec::new("encoder.embed.ln_tok.g", &[1, d], Ones),
            ParamSpec::new("encoder.embed.ln_tok.b", &[1, d], Zeros),
            ParamSpec::new("encoder.embed.ln_reg.g", &[1, d], Ones),
            ParamSpec::new("encoder.embed.ln_reg.b", &[1, d], Zeros),
        ];
        for prefix in self.block_prefixes() {
            specs.extend(block_specs(&prefix, d, self.ffn_mult));
        }
        specs
    }

    /// Parameter prefixes of every transformer block, in stack order.
    fn block_prefixes(&self) -> Vec<String> {
        match self.stream {
            Stream::Single => (1..=self.layers)
                .map(|l| format!("encoder.layer{l:02}"))
                .collect(),
            Stream::Dual => {
                let (t, v, _) = self.dual_split;
                let mut out = Vec::new();
                for l in 1..=self.layers {
                    if l <= t {
                        out.push(format!("encoder.text{l:02}"));
                    } else if l <= t + v {
                        out.push(format!("encoder.vision{l:02}"));
                    } else {
                        out.push(format!("encoder.cross{l:02}.txt"));
                        out.push(format!("encoder.cross{l:02}.vis"));
                    }
                }
                out
            }
        }
    }
}

fn block_specs(prefix: &str, d: usize, ffn_mult: usize) -> Vec<ParamSpec> {
    use InitScheme::{GlorotUniform, Ones, Zeros};
    let f = ffn_mult * d;
    vec![
        ParamSpec::new(format!("{prefix}.ln1.g"), &[1, d], Ones),
        ParamSpec::new(format!("{prefix}.ln1.b"), &[1, d], Zeros),
        ParamSpec::new(format!("{prefix}.attn.wq"), &[d, d], GlorotUniform),
        ParamSpec::new(format!("{prefix}.attn.bq"), &[1, d], Zeros),
        ParamSpec::new(format!("{prefix}.attn.wk"), &[d, d], GlorotUniform),
        ParamSpec::new(format!("{prefix}.attn.bk"), &[1, d], Zeros),
        ParamSpec::new(format!("{prefix}.attn.wv"), &[d, d], GlorotUniform),
        ParamSpec::new(format!("{prefix}.attn.bv"), &[1, d], Zeros),
        ParamSpec::new(format!("{prefix}.attn.wo"), &[d, d], GlorotUniform),
        ParamSpec::new(format!("{prefix}.attn.bo"), &[1, d], Zeros),
        ParamSpec::new(format!("{prefix}.ln2.g"), &[1, d], Ones),
        ParamSpec::new(format!("{prefix}.ln2.b"), &[1, d], Zeros),
        ParamSpec::new(format!("{prefix}.ffn.w1"), &[d, f], GlorotUniform),
        ParamSpec::new(format!("{prefix}.ffn.b1"), &[1, f], Zeros),
        ParamSpec::new(format!("{prefix}.ffn.w2"), &[f, d], GlorotUniform),
        ParamSpec::new(format!("{prefix}.ffn.b2"), &[1, d], Zeros),
    ]
}

/// Row bookkeeping for a packed batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLayout {
    pub token_counts: Vec<usize>,
    pub region_counts: Vec<usize>,
}

impl BatchLayout {
    pub fn of(samples: &[&GroundingSample]) -> Self {
        BatchLayout {
            token_counts: samples.iter().map(|s| s.n_tokens()).collect(),
            region_counts: samples.iter().map(|s| s.n_regions()).collect(),
        }
    }

    pub fn sample_count(&self) -> usize {
        self.token_counts.len()
    }

    pub fn total_tokens(&self) -> usize {
        self.token_counts.iter().sum()
    }

    pub fn total_regions(&self) -> usize {
        self.region_counts.iter().sum()
    }

    /// Offset of sample `b` in the packed token matrix.
    pub fn token_offset(&self, b: usize) -> usize {
        self.token_counts[..b].iter().sum()
    }

    /// Offset of sample `b` in the packed region matrix.
    pub fn region_offset(&self, b: usize) -> usize {
        self.region_counts[..b].iter().sum()
    }

    /// Offset of sample `b` in the packed mixed sequence (tokens then
    /// regions per sample).
    pub fn seq_offset(&self, b: usize) -> usize {
        self.token_offset(b) + self.region_offset(b)
    }

    pub fn seq_len(&self, b: usize) -> usize {
        self.token_counts[b] + self.region_counts[b]
    }
}

/// Per-layer packed outputs of a batch. Index 0 is the embedding layer.
#[derive(Debug)]
pub struct EncodedBatch {
    pub layout: BatchLayout,
    /// L+1 nodes of shape [total_regions, d].
    pub region_layers: Vec<NodeId>,
    /// L+1 nodes of shape [total_tokens, d].
    pub token_layers: Vec<NodeId>,
}

/// One attention segment: query rows plus the (possibly multi-part) rows
/// they may attend to, all referencing packed projection nodes.
struct AttnSeg {
    q_off: usize,
    q_len: usize,
    /// (k node, v node, row offset, row len)
    kv: Vec<(NodeId, NodeId, usize, usize)>,
}

struct BlockParams {
    ln1_g: NodeId,
    ln1_b: NodeId,
    wq: NodeId,
    bq: NodeId,
    wk: NodeId,
    bk: NodeId,
    wv: NodeId,
    bv: NodeId,
    wo: NodeId,
    bo: NodeId,
    ln2_g: NodeId,
    ln2_b: NodeId,
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
}

fn load_block(g: &mut Graph, params: &ParamStore, prefix: &str) -> Result<BlockParams> {
    let mut get = |suffix: &str| -> Result<NodeId> {
        let name = format!("{prefix}.{suffix}");
        Ok(g.param(&name, params.get(&name)?))
    };
    Ok(BlockParams {
        ln1_g: get("ln1.g")?,
        ln1_b: get("ln1.b")?,
        wq: get("attn.wq")?,
        bq: get("attn.bq")?,
        wk: get("attn.wk")?,
        bk: get("attn.bk")?,
        wv: get("attn.wv")?,
        bv: get("attn.bv")?,
        wo: get("attn.wo")?,
        bo: get("attn.bo")?,
        ln2_g: get("ln2.g")?,
        ln2_b: get("ln2.b")?,
        w1: get("ffn.w1")?,
        b1: get("ffn.b1")?,
        w2: get("ffn.w2")?,
        b2: get("ffn.b2")?,
    })
}

fn linear(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let h = g.matmul(x, w)?;
    g.add_bias(h, b)
}

/// Scaled dot-product attention per segment and head over packed Q/K/V.
/// Returns the packed context, [Nq, d], head outputs re-concatenated.
fn multihead_attend(
    g: &mut Graph,
    q: NodeId,
    segs: &[AttnSeg],
    heads: usize,
    head_dim: usize,
) -> Result<NodeId> {
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut seg_ctx = Vec::with_capacity(segs.len());
    for seg in segs {
        let q_rows = g.slice_rows(q, seg.q_off, seg.q_len)?;
        let mut k_parts = Vec::with_capacity(seg.kv.len());
        let mut v_parts = Vec::with_capacity(seg.kv.len());
        for &(k, v, off, len) in &seg.kv {
            k_parts.push(g.slice_rows(k, off, len)?);
            v_parts.push(g.slice_rows(v, off, len)?);
        }
        let k_rows = if k_parts.len() == 1 { k_parts[0] } else { g.concat_rows(&k_parts)? };
        let v_rows = if v_parts.len() == 1 { v_parts[0] } else { g.concat_rows(&v_parts)? };
        let mut head_ctx = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q_rows, h * head_dim, head_dim)?;
            let kh = g.slice_cols(k_rows, h * head_dim, head_dim)?;
            let vh = g.slice_cols(v_rows, h * head_dim, head_dim)?;
            let scores = g.matmul_transb(qh, kh)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores)?;
            head_ctx.push(g.matmul(attn, vh)?);
        }
        seg_ctx.push(g.concat_cols(&head_ctx)?);
    }
    if seg_ctx.len() == 1 {
        Ok(seg_ctx[0])
    } else {
        g.concat_rows(&seg_ctx)
    }
}

/// Pre-norm self-attention + FFN block over a packed matrix whose segments
/// self-attend independently.
fn self_block(
    g: &mut Graph,
    bp: &BlockParams,
    x: NodeId,
    segments: &[(usize, usize)],
    heads: usize,
    head_dim: usize,
) -> Result<NodeId> {
    let xln = g.layer_norm(x, bp.ln1_g, bp.ln1_b)?;
    let q = linear(g, xln, bp.wq, bp.bq)?;
    let k = linear(g, xln, bp.wk, bp.bk)?;
    let v = linear(g, xln, bp.wv, bp.bv)?;
    let segs: Vec<AttnSeg> = segments
        .iter()
        .map(|&(off, len)| AttnSeg { q_off: off, q_len: len, kv: vec![(k, v, off, len)] })
        .collect();
    let ctx = multihead_attend(g, q, &segs, heads, head_dim)?;
    let proj = linear(g, ctx, bp.wo, bp.bo)?;
    let x = g.add(x, proj)?;
    ffn_sublayer(g, bp, x)
}

fn ffn_sublayer(g: &mut Graph, bp: &BlockParams, x: NodeId) -> Result<NodeId> {
    let xln = g.layer_norm(x, bp.ln2_g, bp.ln2_b)?;
    let h = linear(g, xln, bp.w1, bp.b1)?;
    let h = g.gelu(h);
    let h = linear(g, h, bp.w2, bp.b2)?;
    g.add(x, h)
}

/// One side of a cross layer: queries from `own`, keys/values over the
/// per-sample concatenation of both modalities, all through this side's
/// parameters. `own_segs`/`other_segs` give (offset, len) per sample in the
/// respective packed matrices.
#[allow(clippy::too_many_arguments)]
fn cross_block_side(
    g: &mut Graph,
    bp: &BlockParams,
    own: NodeId,
    own_ln: NodeId,
    other_ln: NodeId,
    own_segs: &[(usize, usize)],
    other_segs: &[(usize, usize)],
    heads: usize,
    head_dim: usize,
) -> Result<NodeId> {
    let q = linear(g, own_ln, bp.wq, bp.bq)?;
    let k_own = linear(g, own_ln, bp.wk, bp.bk)?;
    let v_own = linear(g, own_ln, bp.wv, bp.bv)?;
    let k_other = linear(g, other_ln, bp.wk, bp.bk)?;
    let v_other = linear(g, other_ln, bp.wv, bp.bv)?;
    let segs: Vec<AttnSeg> = own_segs
        .iter()
        .zip(other_segs)
        .map(|(&(o_off, o_len), &(x_off, x_len))| AttnSeg {
            q_off: o_off,
            q_len: o_len,
            kv: vec![(k_own, v_own, o_off, o_len), (k_other, v_other, x_off, x_len)],
        })
        .collect();
    let ctx = multihead_attend(g, q, &segs, heads, head_dim)?;
    let proj = linear(g, ctx, bp.wo, bp.bo)?;
    let x = g.add(own, proj)?;
    ffn_sublayer(g, bp, x)
}

fn region_input_rows(cfg: &EncoderConfig, samples: &[&GroundingSample]) -> Result<Tensor> {
    let width = cfg.region_input_dim();
    let mut rows = Vec::new();
    for s in samples {
        for r in &s.regions {
            let mut row = Vec::with_capacity(width);
            row.extend_from_slice(&r.features);
            let b = &r.bbox;
            row.extend_from_slice(&[
                b.x1,
                b.y1,
                b.x2,
                b.y2,
                b.x2 - b.x1,
                b.y2 - b.y1,
                b.area(),
            ]);
            rows.push(row);
        }
    }
    Tensor::from_rows(&rows)
}

/// Layer-0 embeddings for a packed batch: ([total_tokens, d], [total_regions, d]).
fn embed_batch(
    g: &mut Graph,
    cfg: &EncoderConfig,
    params: &ParamStore,
    samples: &[&GroundingSample],
) -> Result<(NodeId, NodeId)> {
    let mut token_ids = Vec::new();
    let mut pos_ids = Vec::new();
    for s in samples {
        s.validate(cfg.vocab_size, cfg.max_tokens, cfg.region_feature_dim)?;
        token_ids.extend_from_slice(&s.command.ids);
        pos_ids.extend(0..s.n_tokens());
    }

    let tok_table = g.param("encoder.embed.tok", params.get("encoder.embed.tok")?);
    let pos_table = g.param("encoder.embed.pos", params.get("encoder.embed.pos")?);
    let tok = g.gather_rows(tok_table, &token_ids)?;
    let pos = g.gather_rows(pos_table, &pos_ids)?;
    let tok = g.add(tok, pos)?;
    let ln_tok_g = g.param("encoder.embed.ln_tok.g", params.get("encoder.embed.ln_tok.g")?);
    let ln_tok_b = g.param("encoder.embed.ln_tok.b", params.get("encoder.embed.ln_tok.b")?);
    let tok = g.layer_norm(tok, ln_tok_g, ln_tok_b)?;

    let reg_in = g.constant(region_input_rows(cfg, samples)?);
    let reg_w = g.param("encoder.embed.reg.w", params.get("encoder.embed.reg.w")?);
    let reg_b = g.param("encoder.embed.reg.b", params.get("encoder.embed.reg.b")?);
    let reg = linear(g, reg_in, reg_w, reg_b)?;
    let ln_reg_g = g.param("encoder.embed.ln_reg.g", params.get("encoder.embed.ln_reg.g")?);
    let ln_reg_b = g.param("encoder.embed.ln_reg.b", params.get("encoder.embed.ln_reg.b")?);
    let reg = g.layer_norm(reg, ln_reg_g, ln_reg_b)?;

    Ok((tok, reg))
}

/// Builds the full per-layer stack for a batch inside `g`.
pub fn encode_batch(
    g: &mut Graph,
    cfg: &EncoderConfig,
    params: &ParamStore,
    samples: &[&GroundingSample],
) -> Result<EncodedBatch> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidSample("empty batch".into()));
    }
    let layout = BatchLayout::of(samples);
    let (tok0, reg0) = embed_batch(g, cfg, params, samples)?;
    match cfg.stream {
        Stream::Single => encode_single(g, cfg, params, layout, tok0, reg0),
        Stream::Dual => encode_dual(g, cfg, params, layout, tok0, reg0),
    }
}

fn encode_single(
    g: &mut Graph,
    cfg: &EncoderConfig,
    params: &ParamStore,
    layout: BatchLayout,
    tok0: NodeId,
    reg0: NodeId,
) -> Result<EncodedBatch> {
    let bcount = layout.sample_count();
    // Interleave per sample: [tokens_b; regions_b] for each b.
    let mut parts = Vec::with_capacity(2 * bcount);
    for b in 0..bcount {
        parts.push(g.slice_rows(tok0, layout.token_offset(b), layout.token_counts[b])?);
        parts.push(g.slice_rows(reg0, layout.region_offset(b), layout.region_counts[b])?);
    }
    let mut seq = g.concat_rows(&parts)?;

    let segments: Vec<(usize, usize)> =
        (0..bcount).map(|b| (layout.seq_offset(b), layout.seq_len(b))).collect();

    let mut token_layers = vec![tok0];
    let mut region_layers = vec![reg0];
    for l in 1..=cfg.layers {
        let bp = load_block(g, params, &format!("encoder.layer{l:02}"))?;
        seq = self_block(g, &bp, seq, &segments, cfg.heads, cfg.head_dim())?;
        let (tok_l, reg_l) = split_sequence(g, &layout, seq)?;
        token_layers.push(tok_l);
        region_layers.push(reg_l);
    }
    Ok(EncodedBatch { layout, region_layers, token_layers })
}

/// Re-packs a mixed [tokens_b; regions_b]* sequence into separate packed
/// token and region matrices.
fn split_sequence(g: &mut Graph, layout: &BatchLayout, seq: NodeId) -> Result<(NodeId, NodeId)> {
    let bcount = layout.sample_count();
    let mut tok_parts = Vec::with_capacity(bcount);
    let mut reg_parts = Vec::with_capacity(bcount);
    for b in 0..bcount {
        let off = layout.seq_offset(b);
        tok_parts.push(g.slice_rows(seq, off, layout.token_counts[b])?);
        reg_parts.push(g.slice_rows(seq, off + layout.token_counts[b], layout.region_counts[b])?);
    }
    let tok = if tok_parts.len() == 1 { tok_parts[0] } else { g.concat_rows(&tok_parts)? };
    let reg = if reg_parts.len() == 1 { reg_parts[0] } else { g.concat_rows(&reg_parts)? };
    Ok((tok, reg))
}

fn encode_dual(
    g: &mut Graph,
    cfg: &EncoderConfig,
    params: &ParamStore,
    layout: BatchLayout,
    tok0: NodeId,
    reg0: NodeId,
) -> Result<EncodedBatch> {
    let bcount = layout.sample_count();
    let (t_layers, v_layers, _) = cfg.dual_split;
    let tok_segs: Vec<(usize, usize)> =
        (0..bcount).map(|b| (layout.token_offset(b), layout.token_counts[b])).collect();
    let reg_segs: Vec<(usize, usize)> =
        (0..bcount).map(|b| (layout.region_offset(b), layout.region_counts[b])).collect();

    let mut tok = tok0;
    let mut reg = reg0;
    let mut token_layers = vec![tok0];
    let mut region_layers = vec![reg0];
    for l in 1..=cfg.layers {
        if l <= t_layers {
            let bp = load_block(g, params, &format!("encoder.text{l:02}"))?;
            tok = self_block(g, &bp, tok, &tok_segs, cfg.heads, cfg.head_dim())?;
        } else if l <= t_layers + v_layers {
            let bp = load_block(g, params, &format!("encoder.vision{l:02}"))?;
            reg = self_block(g, &bp, reg, &reg_segs, cfg.heads, cfg.head_dim())?;
        } else {
            let bt = load_block(g, params, &format!("encoder.cross{l:02}.txt"))?;
            let bv = load_block(g, params, &format!("encoder.cross{l:02}.vis"))?;
            let tok_ln = g.layer_norm(tok, bt.ln1_g, bt.ln1_b)?;
            let reg_ln = g.layer_norm(reg, bv.ln1_g, bv.ln1_b)?;
            let new_tok = cross_block_side(
                g, &bt, tok, tok_ln, reg_ln, &tok_segs, &reg_segs, cfg.heads, cfg.head_dim(),
            )?;
            let new_reg = cross_block_side(
                g, &bv, reg, reg_ln, tok_ln, &reg_segs, &tok_segs, cfg.heads, cfg.head_dim(),
            )?;
            tok = new_tok;
            reg = new_reg;
        }
        token_layers.push(tok);
        region_layers.push(reg);
    }
    Ok(EncodedBatch { layout, region_layers, token_layers })
}

/// Per-layer representations of a single sample, index 0 = embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    /// L+1 tensors of shape [n, d].
    pub regions: Vec<Tensor>,
    /// L+1 tensors of shape [m, d].
    pub tokens: Vec<Tensor>,
}

impl LayerStack {
    pub fn layer_count(&self) -> usize {
        self.regions.len()
    }

    pub fn n_regions(&self) -> usize {
        self.regions[0].shape()[0]
    }

    pub fn d(&self) -> usize {
        self.regions[0].shape()[1]
    }

    pub fn is_finite(&self) -> bool {
        self.regions.iter().chain(&self.tokens).all(Tensor::is_finite)
    }
}

/// Layer-0 embeddings of one sample: ([n, d] regions, [m, d] tokens).
pub fn embed(
    sample: &GroundingSample,
    cfg: &EncoderConfig,
    params: &ParamStore,
) -> Result<(Tensor, Tensor)> {
    cfg.validate()?;
    let mut g = Graph::new();
    let (tok, reg) = embed_batch(&mut g, cfg, params, &[sample])?;
    Ok((g.value(reg).clone(), g.value(tok).clone()))
}

/// Full per-layer stack of one sample.
pub fn encode(
    sample: &GroundingSample,
    cfg: &EncoderConfig,
    params: &ParamStore,
) -> Result<LayerStack> {
    let mut g = Graph::new();
    let enc = encode_batch(&mut g, cfg, params, &[sample])?;
    let regions = enc.region_layers.iter().map(|&id| g.value(id).clone()).collect();
    let tokens = enc.token_layers.iter().map(|&id| g.value(id).clone()).collect();
    Ok(LayerStack { regions, tokens })
}
