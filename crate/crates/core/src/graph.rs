//! Tape-based reverse-mode autodiff over [`Tensor`] values.
//!
//! Ops evaluate eagerly: every builder method computes the forward value
//! immediately and records provenance on the tape. `backward` walks the tape
//! in reverse, accumulating gradients for named parameter leaves only.
//!
//! The op set is exactly what the models in this crate need; anything else
//! must enter the graph as an [`Graph::opaque`] value, which fails with
//! `Error::UnsupportedOp` if a gradient ever reaches it.

use crate::error::{Error, Result};
use crate::params::Gradients;
use crate::tensor::{dgelu, gelu, sigmoid, softmax_rows, Tensor};
use std::collections::BTreeMap;

pub type NodeId = usize;

#[derive(Debug)]
enum Source {
    /// Gradient sink, keyed by parameter name.
    Param(String),
    /// Input data; gradients are discarded here.
    Constant,
    Op(Op),
}

#[derive(Debug)]
enum Op {
    MatMul { a: NodeId, b: NodeId },
    /// `a @ b^T` without materializing the transpose.
    MatMulTransB { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    /// Broadcast `bias` ([1, c]) over the rows of `x` ([r, c]).
    AddBias { x: NodeId, bias: NodeId },
    Scale { x: NodeId, k: f64 },
    SoftmaxRows { x: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Tensor, inv_std: Vec<f64> },
    Gelu { x: NodeId },
    Sigmoid { x: NodeId },
    /// [r, c] -> [1, c] column means.
    MeanPoolRows { x: NodeId },
    /// [1, c] -> [times, c].
    RepeatRows { x: NodeId, times: usize },
    ConcatRows { parts: Vec<NodeId> },
    ConcatCols { parts: Vec<NodeId> },
    SliceRows { x: NodeId, start: usize, len: usize },
    SliceCols { x: NodeId, start: usize, len: usize },
    Transpose2 { x: NodeId },
    Reshape { x: NodeId },
    /// Row lookup into an embedding table; backward scatter-adds.
    GatherRows { x: NodeId, indices: Vec<usize> },
    /// Row-wise dot product of two [r, c] tensors -> [r, 1].
    RowsDot { a: NodeId, b: NodeId },
    /// out[i, :] = sum_l weights[i, l] * layers[l][i, :].
    WeightedSumLayers { layers: Vec<NodeId>, weights: NodeId },
    /// out[i, j] = sum_l weights[l, j] * layers[l][i, j].
    ElemWeightedSum { layers: Vec<NodeId>, weights: NodeId },
    /// Scalar sum_e w_e * (max(x,0) - x*t + ln(1 + exp(-|x|))).
    BceWithLogitsMean { logits: NodeId, targets: Tensor, weights: Vec<f64> },
    MeanAll { x: NodeId },
    Opaque { name: String },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    source: Source,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_ids: BTreeMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor, source: Source) -> NodeId {
        self.nodes.push(Node { value, source });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Source::Constant)
    }

    /// Registers a parameter leaf. Re-registering the same name returns the
    /// existing node so a parameter used in several places accumulates into
    /// one gradient.
    pub fn param(&mut self, name: &str, value: &Tensor) -> NodeId {
        if let Some(&id) = self.param_ids.get(name) {
            return id;
        }
        let id = self.push(value.clone(), Source::Param(name.to_string()));
        self.param_ids.insert(name.to_string(), id);
        id
    }

    /// A value with no recorded provenance. Backward through it is an error.
    pub fn opaque(&mut self, value: Tensor, name: &str) -> NodeId {
        self.push(value, Source::Op(Op::Opaque { name: name.to_string() }))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.nodes[a].value.matmul(&self.nodes[b].value)?;
        Ok(self.push(value, Source::Op(Op::MatMul { a, b })))
    }

    pub fn matmul_transb(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.nodes[a].value.matmul_transb(&self.nodes[b].value)?;
        Ok(self.push(value, Source::Op(Op::MatMulTransB { a, b })))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.nodes[a].value.add(&self.nodes[b].value)?;
        Ok(self.push(value, Source::Op(Op::Add { a, b })))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = self.nodes[x].value.dims2()?;
        let (br, bc) = self.nodes[bias].value.dims2()?;
        if br != 1 || bc != c {
            return Err(Error::InvalidShape(format!(
                "bias shape [{br}, {bc}] does not broadcast over [{r}, {c}]"
            )));
        }
        let mut value = self.nodes[x].value.clone();
        let b = self.nodes[bias].value.data().to_vec();
        for row in value.data_mut().chunks_mut(c) {
            for (v, &bj) in row.iter_mut().zip(&b) {
                *v += bj;
            }
        }
        Ok(self.push(value, Source::Op(Op::AddBias { x, bias })))
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let value = self.nodes[x].value.scale(k);
        self.push(value, Source::Op(Op::Scale { x, k }))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let value = softmax_rows(&self.nodes[x].value)?;
        Ok(self.push(value, Source::Op(Op::SoftmaxRows { x })))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        const EPS: f64 = 1e-5;
        let (r, c) = self.nodes[x].value.dims2()?;
        for (role, id) in [("gain", gain), ("bias", bias)] {
            let (gr, gc) = self.nodes[id].value.dims2()?;
            if gr != 1 || gc != c {
                return Err(Error::InvalidShape(format!(
                    "layer norm {role} shape [{gr}, {gc}], want [1, {c}]"
                )));
            }
        }
        let xs = &self.nodes[x].value;
        let g = self.nodes[gain].value.data().to_vec();
        let b = self.nodes[bias].value.data().to_vec();
        let mut xhat = Tensor::zeros(&[r, c]);
        let mut inv_std = vec![0.0; r];
        let mut out = Tensor::zeros(&[r, c]);
        for (i, slot) in inv_std.iter_mut().enumerate() {
            let row = xs.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            *slot = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat.data_mut()[i * c + j] = h;
                out.data_mut()[i * c + j] = g[j] * h + b[j];
            }
        }
        Ok(self.push(out, Source::Op(Op::LayerNorm { x, gain, bias, xhat, inv_std })))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.map(gelu);
        self.push(value, Source::Op(Op::Gelu { x }))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.map(sigmoid);
        self.push(value, Source::Op(Op::Sigmoid { x }))
    }

    pub fn mean_pool_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.nodes[x].value.dims2()?;
        let mut out = Tensor::zeros(&[1, c]);
        for i in 0..r {
            for (j, &v) in self.nodes[x].value.row(i).iter().enumerate() {
                out.data_mut()[j] += v;
            }
        }
        for v in out.data_mut() {
            *v /= r as f64;
        }
        Ok(self.push(out, Source::Op(Op::MeanPoolRows { x })))
    }

    pub fn repeat_rows(&mut self, x: NodeId, times: usize) -> Result<NodeId> {
        let (r, c) = self.nodes[x].value.dims2()?;
        if r != 1 {
            return Err(Error::InvalidShape(format!(
                "repeat_rows expects a single row, got [{r}, {c}]"
            )));
        }
        if times == 0 {
            return Err(Error::InvalidShape("repeat_rows times = 0".into()));
        }
        let row = self.nodes[x].value.data().to_vec();
        let mut data = Vec::with_capacity(times * c);
        for _ in 0..times {
            data.extend_from_slice(&row);
        }
        let value = Tensor::new(vec![times, c], data)?;
        Ok(self.push(value, Source::Op(Op::RepeatRows { x, times })))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidShape("concat_rows of nothing".into()));
        }
        let (_, c) = self.nodes[parts[0]].value.dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pr, pc) = self.nodes[p].value.dims2()?;
            if pc != c {
                return Err(Error::InvalidShape(format!(
                    "concat_rows column mismatch: {pc} vs {c}"
                )));
            }
            rows += pr;
            data.extend_from_slice(self.nodes[p].value.data());
        }
        let value = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(value, Source::Op(Op::ConcatRows { parts: parts.to_vec() })))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidShape("concat_cols of nothing".into()));
        }
        let (r, _) = self.nodes[parts[0]].value.dims2()?;
        let mut cols = 0;
        for &p in parts {
            let (pr, pc) = self.nodes[p].value.dims2()?;
            if pr != r {
                return Err(Error::InvalidShape(format!(
                    "concat_cols row mismatch: {pr} vs {r}"
                )));
            }
            cols += pc;
        }
        let mut data = Vec::with_capacity(r * cols);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.nodes[p].value.row(i));
            }
        }
        let value = Tensor::new(vec![r, cols], data)?;
        Ok(self.push(value, Source::Op(Op::ConcatCols { parts: parts.to_vec() })))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.nodes[x].value.dims2()?;
        if len == 0 || start + len > r {
            return Err(Error::InvalidShape(format!(
                "slice_rows {start}..{} of [{r}, {c}]",
                start + len
            )));
        }
        let data = self.nodes[x].value.data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::new(vec![len, c], data)?;
        Ok(self.push(value, Source::Op(Op::SliceRows { x, start, len })))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.nodes[x].value.dims2()?;
        if len == 0 || start + len > c {
            return Err(Error::InvalidShape(format!(
                "slice_cols {start}..{} of [{r}, {c}]",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&self.nodes[x].value.row(i)[start..start + len]);
        }
        let value = Tensor::new(vec![r, len], data)?;
        Ok(self.push(value, Source::Op(Op::SliceCols { x, start, len })))
    }

    pub fn transpose2(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.nodes[x].value.transpose2()?;
        Ok(self.push(value, Source::Op(Op::Transpose2 { x })))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x].value.numel() {
            return Err(Error::InvalidShape(format!(
                "reshape {:?} -> {shape:?}",
                self.nodes[x].value.shape()
            )));
        }
        let value = Tensor::new(shape.to_vec(), self.nodes[x].value.data().to_vec())?;
        Ok(self.push(value, Source::Op(Op::Reshape { x })))
    }

    pub fn gather_rows(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (r, c) = self.nodes[x].value.dims2()?;
        if indices.is_empty() {
            return Err(Error::InvalidShape("gather_rows with no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::InvalidShape(format!(
                "gather_rows index {bad} out of range for {r} rows"
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(self.nodes[x].value.row(i));
        }
        let value = Tensor::new(vec![indices.len(), c], data)?;
        Ok(self.push(value, Source::Op(Op::GatherRows { x, indices: indices.to_vec() })))
    }

    pub fn rows_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.nodes[a].value.dims2()?;
        let (r2, c2) = self.nodes[b].value.dims2()?;
        if (r, c) != (r2, c2) {
            return Err(Error::InvalidShape(format!(
                "rows_dot shape mismatch: [{r}, {c}] vs [{r2}, {c2}]"
            )));
        }
        let mut data = Vec::with_capacity(r);
        for i in 0..r {
            let dot = self.nodes[a]
                .value
                .row(i)
                .iter()
                .zip(self.nodes[b].value.row(i))
                .map(|(x, y)| x * y)
                .sum();
            data.push(dot);
        }
        let value = Tensor::new(vec![r, 1], data)?;
        Ok(self.push(value, Source::Op(Op::RowsDot { a, b })))
    }

    /// Per-row convex (or arbitrary) combination over a stack of layers.
    /// `layers` are [n, d] each, `weights` is [n, layers.len()].
    pub fn weighted_sum_layers(&mut self, layers: &[NodeId], weights: NodeId) -> Result<NodeId> {
        if layers.is_empty() {
            return Err(Error::InvalidShape("weighted_sum_layers of nothing".into()));
        }
        let (n, d) = self.nodes[layers[0]].value.dims2()?;
        for &l in layers {
            if self.nodes[l].value.dims2()? != (n, d) {
                return Err(Error::InvalidShape(format!(
                    "layer stack shape mismatch: {:?} vs [{n}, {d}]",
                    self.nodes[l].value.shape()
                )));
            }
        }
        let (wn, wl) = self.nodes[weights].value.dims2()?;
        if wn != n || wl != layers.len() {
            return Err(Error::InvalidShape(format!(
                "weights [{wn}, {wl}] for {} layers of {n} rows",
                layers.len()
            )));
        }
        let mut out = Tensor::zeros(&[n, d]);
        for (l, &lid) in layers.iter().enumerate() {
            let lv = &self.nodes[lid].value;
            let wv = &self.nodes[weights].value;
            for i in 0..n {
                let w = wv.at2(i, l);
                let dst = &mut out.data_mut()[i * d..(i + 1) * d];
                for (o, &v) in dst.iter_mut().zip(lv.row(i)) {
                    *o += w * v;
                }
            }
        }
        Ok(self.push(
            out,
            Source::Op(Op::WeightedSumLayers { layers: layers.to_vec(), weights }),
        ))
    }

    /// Per-element combination: `weights` is [layers.len(), d], shared
    /// across rows. out[i, j] = sum_l weights[l, j] * layers[l][i, j].
    pub fn elem_weighted_sum(&mut self, layers: &[NodeId], weights: NodeId) -> Result<NodeId> {
        if layers.is_empty() {
            return Err(Error::InvalidShape("elem_weighted_sum of nothing".into()));
        }
        let (n, d) = self.nodes[layers[0]].value.dims2()?;
        for &l in layers {
            if self.nodes[l].value.dims2()? != (n, d) {
                return Err(Error::InvalidShape(format!(
                    "layer stack shape mismatch: {:?} vs [{n}, {d}]",
                    self.nodes[l].value.shape()
                )));
            }
        }
        let (wl, wd) = self.nodes[weights].value.dims2()?;
        if wl != layers.len() || wd != d {
            return Err(Error::InvalidShape(format!(
                "weights [{wl}, {wd}] for {} layers of width {d}",
                layers.len()
            )));
        }
        let mut out = Tensor::zeros(&[n, d]);
        for (l, &lid) in layers.iter().enumerate() {
            let lv = &self.nodes[lid].value;
            let wrow: Vec<f64> = self.nodes[weights].value.row(l).to_vec();
            for i in 0..n {
                let dst = &mut out.data_mut()[i * d..(i + 1) * d];
                for ((o, &v), &w) in dst.iter_mut().zip(lv.row(i)).zip(&wrow) {
                    *o += w * v;
                }
            }
        }
        Ok(self.push(
            out,
            Source::Op(Op::ElemWeightedSum { layers: layers.to_vec(), weights }),
        ))
    }

    /// Mean binary cross-entropy on logits, in the overflow-safe form
    /// `max(x, 0) - x t + ln(1 + e^{-|x|})`.
    pub fn bce_with_logits_mean(&mut self, logits: NodeId, targets: Tensor) -> Result<NodeId> {
        let n = self.nodes[logits].value.numel();
        let weights = vec![1.0 / n as f64; n];
        self.bce_with_logits_weighted(logits, targets, weights)
    }

    /// Weighted form: the scalar output is `sum_e w_e * bce(x_e, t_e)`.
    /// Packed batches use per-sample weights `1 / (B * n_b)`.
    pub fn bce_with_logits_weighted(
        &mut self,
        logits: NodeId,
        targets: Tensor,
        weights: Vec<f64>,
    ) -> Result<NodeId> {
        let n = self.nodes[logits].value.numel();
        if targets.numel() != n {
            return Err(Error::InvalidShape(format!(
                "targets have {} elements for {n} logits",
                targets.numel()
            )));
        }
        if weights.len() != n {
            return Err(Error::InvalidShape(format!(
                "weights have {} elements for {n} logits",
                weights.len()
            )));
        }
        if let Some(t) = targets.data().iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::InvalidShape(format!("target {t} outside [0, 1]")));
        }
        let mut loss = 0.0;
        for ((&x, &t), &w) in self.nodes[logits]
            .value
            .data()
            .iter()
            .zip(targets.data())
            .zip(&weights)
        {
            loss += w * (x.max(0.0) - x * t + (-x.abs()).exp().ln_1p());
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Source::Op(Op::BceWithLogitsMean { logits, targets, weights }),
        ))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x].value;
        let mean = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(mean), Source::Op(Op::MeanAll { x }))
    }

    /// Reverse sweep from a scalar loss node. Returns gradients keyed by
    /// parameter name; constants absorb and drop their gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.nodes[loss].value.numel() != 1 {
            return Err(Error::InvalidShape(format!(
                "backward from non-scalar node of shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::new(
            self.nodes[loss].value.shape().to_vec(),
            vec![1.0],
        )?);
        let mut out = Gradients::new();
        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].source {
                Source::Constant => {}
                Source::Param(name) => out.accumulate(name, g)?,
                Source::Op(op) => self.backprop_op(id, op, &g, &mut grads)?,
            }
        }
        Ok(out)
    }

    fn backprop_op(
        &self,
        id: NodeId,
        op: &Op,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        match op {
            Op::MatMul { a, b } => {
                // c = a @ b: da = g @ b^T, db = a^T @ g.
                acc(grads, *a, g.matmul_transb(&self.nodes[*b].value)?)?;
                acc(grads, *b, self.nodes[*a].value.matmul_transa(g)?)?;
            }
            Op::MatMulTransB { a, b } => {
                // c = a @ b^T: da = g @ b, db = g^T @ a.
                acc(grads, *a, g.matmul(&self.nodes[*b].value)?)?;
                acc(grads, *b, g.matmul_transa(&self.nodes[*a].value)?)?;
            }
            Op::Add { a, b } => {
                acc(grads, *a, g.clone())?;
                acc(grads, *b, g.clone())?;
            }
            Op::AddBias { x, bias } => {
                let (r, c) = g.dims2()?;
                let mut db = Tensor::zeros(&[1, c]);
                for i in 0..r {
                    for (s, &v) in db.data_mut().iter_mut().zip(g.row(i)) {
                        *s += v;
                    }
                }
                acc(grads, *x, g.clone())?;
                acc(grads, *bias, db)?;
            }
            Op::Scale { x, k } => acc(grads, *x, g.scale(*k))?,
            Op::SoftmaxRows { x } => {
                let y = &self.nodes[id].value;
                let (r, c) = y.dims2()?;
                let mut dx = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let dst = &mut dx.data_mut()[i * c..(i + 1) * c];
                    for ((d, &yv), &gv) in dst.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                acc(grads, *x, dx)?;
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (r, c) = g.dims2()?;
                let gv = self.nodes[*gain].value.data();
                let mut dgain = Tensor::zeros(&[1, c]);
                let mut dbias = Tensor::zeros(&[1, c]);
                let mut dx = Tensor::zeros(&[r, c]);
                for (i, &inv) in inv_std.iter().enumerate() {
                    let gr = g.row(i);
                    let hr = xhat.row(i);
                    for j in 0..c {
                        dgain.data_mut()[j] += gr[j] * hr[j];
                        dbias.data_mut()[j] += gr[j];
                    }
                    // dxhat = g * gain; dx via the standard two-reduction form.
                    let dh: Vec<f64> = (0..c).map(|j| gr[j] * gv[j]).collect();
                    let sum_dh: f64 = dh.iter().sum();
                    let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                    let dst = &mut dx.data_mut()[i * c..(i + 1) * c];
                    for j in 0..c {
                        dst[j] =
                            inv * (dh[j] - sum_dh / c as f64 - hr[j] * sum_dh_h / c as f64);
                    }
                }
                acc(grads, *x, dx)?;
                acc(grads, *gain, dgain)?;
                acc(grads, *bias, dbias)?;
            }
            Op::Gelu { x } => {
                let xv = &self.nodes[*x].value;
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gd)| gd * dgelu(v))
                    .collect();
                acc(grads, *x, Tensor::new(xv.shape().to_vec(), data)?)?;
            }
            Op::Sigmoid { x } => {
                let y = &self.nodes[id].value;
                let data = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&yv, &gd)| gd * yv * (1.0 - yv))
                    .collect();
                acc(grads, *x, Tensor::new(y.shape().to_vec(), data)?)?;
            }
            Op::MeanPoolRows { x } => {
                let (r, c) = self.nodes[*x].value.dims2()?;
                let mut dx = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    let dst = &mut dx.data_mut()[i * c..(i + 1) * c];
                    for (d, &gv) in dst.iter_mut().zip(g.data()) {
                        *d = gv / r as f64;
                    }
                }
                acc(grads, *x, dx)?;
            }
            Op::RepeatRows { x, times } => {
                let (_, c) = g.dims2()?;
                let mut dx = Tensor::zeros(&[1, c]);
                for i in 0..*times {
                    for (d, &gv) in dx.data_mut().iter_mut().zip(g.row(i)) {
                        *d += gv;
                    }
                }
                acc(grads, *x, dx)?;
            }
            Op::ConcatRows { parts } => {
                let mut start = 0;
                for &p in parts {
                    let (pr, pc) = self.nodes[p].value.dims2()?;
                    let data = g.data()[start * pc..(start + pr) * pc].to_vec();
                    acc(grads, p, Tensor::new(vec![pr, pc], data)?)?;
                    start += pr;
                }
            }
            Op::ConcatCols { parts } => {
                let (r, _) = g.dims2()?;
                let mut start = 0;
                for &p in parts {
                    let (_, pc) = self.nodes[p].value.dims2()?;
                    let mut data = Vec::with_capacity(r * pc);
                    for i in 0..r {
                        data.extend_from_slice(&g.row(i)[start..start + pc]);
                    }
                    acc(grads, p, Tensor::new(vec![r, pc], data)?)?;
                    start += pc;
                }
            }
            Op::SliceRows { x, start, len } => {
                let (r, c) = self.nodes[*x].value.dims2()?;
                let mut dx = Tensor::zeros(&[r, c]);
                dx.data_mut()[start * c..(start + len) * c].copy_from_slice(g.data());
                acc(grads, *x, dx)?;
            }
            Op::SliceCols { x, start, len } => {
                let (r, c) = self.nodes[*x].value.dims2()?;
                let mut dx = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    let dst = &mut dx.data_mut()[i * c + start..i * c + start + len];
                    dst.copy_from_slice(g.row(i));
                }
                acc(grads, *x, dx)?;
            }
            Op::Transpose2 { x } => acc(grads, *x, g.transpose2()?)?,
            Op::Reshape { x } => {
                let shape = self.nodes[*x].value.shape().to_vec();
                acc(grads, *x, Tensor::new(shape, g.data().to_vec())?)?;
            }
            Op::GatherRows { x, indices } => {
                let (r, c) = self.nodes[*x].value.dims2()?;
                let mut dx = Tensor::zeros(&[r, c]);
                for (pos, &i) in indices.iter().enumerate() {
                    let dst = &mut dx.data_mut()[i * c..(i + 1) * c];
                    for (d, &gv) in dst.iter_mut().zip(g.row(pos)) {
                        *d += gv;
                    }
                }
                acc(grads, *x, dx)?;
            }
            Op::RowsDot { a, b } => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let (r, c) = av.dims2()?;
                let mut da = Tensor::zeros(&[r, c]);
                let mut db = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    let gv = g.data()[i];
                    for j in 0..c {
                        da.data_mut()[i * c + j] = gv * bv.at2(i, j);
                        db.data_mut()[i * c + j] = gv * av.at2(i, j);
                    }
                }
                acc(grads, *a, da)?;
                acc(grads, *b, db)?;
            }
            Op::WeightedSumLayers { layers, weights } => {
                let (n, d) = g.dims2()?;
                let wv = &self.nodes[*weights].value;
                let mut dw = Tensor::zeros(&[n, layers.len()]);
                for (l, &lid) in layers.iter().enumerate() {
                    let lv = &self.nodes[lid].value;
                    let mut dl = Tensor::zeros(&[n, d]);
                    for i in 0..n {
                        let w = wv.at2(i, l);
                        let gr = g.row(i);
                        let dst = &mut dl.data_mut()[i * d..(i + 1) * d];
                        let mut dot = 0.0;
                        for ((ds, &gv), &xv) in dst.iter_mut().zip(gr).zip(lv.row(i)) {
                            *ds = w * gv;
                            dot += gv * xv;
                        }
                        dw.data_mut()[i * layers.len() + l] = dot;
                    }
                    acc(grads, lid, dl)?;
                }
                acc(grads, *weights, dw)?;
            }
            Op::ElemWeightedSum { layers, weights } => {
                let (n, d) = g.dims2()?;
                let wv = &self.nodes[*weights].value;
                let mut dw = Tensor::zeros(&[layers.len(), d]);
                for (l, &lid) in layers.iter().enumerate() {
                    let lv = &self.nodes[lid].value;
                    let mut dl = Tensor::zeros(&[n, d]);
                    for i in 0..n {
                        let gr = g.row(i);
                        let dst = &mut dl.data_mut()[i * d..(i + 1) * d];
                        for j in 0..d {
                            dst[j] = wv.at2(l, j) * gr[j];
                            dw.data_mut()[l * d + j] += gr[j] * lv.at2(i, j);
                        }
                    }
                    acc(grads, lid, dl)?;
                }
                acc(grads, *weights, dw)?;
            }
            Op::BceWithLogitsMean { logits, targets, weights } => {
                let gv = g.data()[0];
                let xv = &self.nodes[*logits].value;
                let data = xv
                    .data()
                    .iter()
                    .zip(targets.data())
                    .zip(weights)
                    .map(|((&x, &t), &w)| gv * w * (sigmoid(x) - t))
                    .collect();
                acc(grads, *logits, Tensor::new(xv.shape().to_vec(), data)?)?;
            }
            Op::MeanAll { x } => {
                let xv = &self.nodes[*x].value;
                let k = g.data()[0] / xv.numel() as f64;
                acc(grads, *x, Tensor::new(xv.shape().to_vec(), vec![k; xv.numel()])?)?;
            }
            Op::Opaque { name } => {
                return Err(Error::UnsupportedOp(name.clone()));
            }
        }
        Ok(())
    }
}

fn acc(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
    match &mut grads[id] {
        Some(t) => t.add_assign(&g),
        slot => {
            *slot = Some(g);
            Ok(())
        }
    }
}
