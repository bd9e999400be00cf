use std::collections::HashMap;

use super::tensor::{BoolMask, Tensor};
use super::{invalid, NumError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddRow,
    MulRow,
    Relu,
    MatMul,
    Transpose,
    Reshape,
    ConcatCols { widths: Vec<usize> },
    ConcatRows { heights: Vec<usize> },
    WindowConcat { window: usize },
    MaskedSoftmax { mask: BoolMask },
    CrossEntropy { targets: Vec<usize>, ignore_id: usize },
    GroupNorm { groups: usize, eps: f64 },
    LayerNorm { eps: f64 },
    Conv3d { stride: usize },
    Embed { ids: Vec<usize> },
    Sum,
}

struct Node {
    value: Tensor,
    op: Op,
    inputs: Vec<usize>,
    needs_grad: bool,
}

/// Gradients of a scalar root with respect to `requires_grad` leaves,
/// keyed by node id.
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id.0)
    }
}

/// Wengert list: operations are recorded in topological order during the
/// forward pass and replayed in reverse by [`Tape::backward`]. A tape is
/// single-owner; recording and backward must be serialized.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Records an input; participates in gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf, vec![], needs)
    }

    /// Records an input that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, vec![], false)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: Vec<usize>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, inputs, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        let needs = inputs.iter().any(|&i| self.nodes[i.0].needs_grad);
        Ok(self.push(value, op, inputs.iter().map(|i| i.0).collect(), needs))
    }

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(NumError::ShapeMismatch {
                op: op_name,
                detail: format!("{:?} vs {:?}", va.shape(), vb.shape()),
            });
        }
        let data: Vec<f64> =
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        out.check_finite(op_name)?;
        self.record(out, op, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        if !c.is_finite() {
            return Err(NumError::NonFinite { op: "scale", index: 0 });
        }
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| x * c).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        out.check_finite("scale")?;
        self.record(out, Op::Scale(c), &[a])
    }

    /// Broadcast add of a vector over the last axis: `x[.., c] + b[c]`.
    pub fn add_row(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        self.row_broadcast("add_row", x, b, |v, w| v + w, Op::AddRow)
    }

    /// Broadcast multiply of a vector over the last axis: `x[.., c] * b[c]`.
    pub fn mul_row(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        self.row_broadcast("mul_row", x, b, |v, w| v * w, Op::MulRow)
    }

    fn row_broadcast(
        &mut self,
        op_name: &'static str,
        x: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (vx, vb) = (self.value(x), self.value(b));
        let c = *vx.shape().last().unwrap();
        if vb.shape() != [c] {
            return Err(NumError::ShapeMismatch {
                op: op_name,
                detail: format!("vector {:?} vs last axis {c}", vb.shape()),
            });
        }
        let bd = vb.data();
        let data: Vec<f64> =
            vx.data().iter().enumerate().map(|(i, &v)| f(v, bd[i % c])).collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        out.check_finite(op_name)?;
        self.record(out, op, &[x, b])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let data: Vec<f64> = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.record(out, Op::Relu, &[x])
    }

    /// `a[m x k] . b[k x n] -> [m x n]`
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = matmul_val(self.value(a), self.value(b))?;
        out.check_finite("matmul")?;
        self.record(out, Op::MatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).transposed()?;
        self.record(out, Op::Transpose, &[a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(NumError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.value(a).shape(), shape),
            });
        }
        let out = Tensor::new(shape, self.value(a).data().to_vec())?;
        self.record(out, Op::Reshape, &[a])
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let widths: Vec<usize> = tensors
            .iter()
            .map(|t| t.dims2().map(|(_, c)| c))
            .collect::<Result<_>>()?;
        let out = Tensor::concat_cols(&tensors)?;
        self.record(out, Op::ConcatCols { widths }, parts)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let heights: Vec<usize> = tensors
            .iter()
            .map(|t| t.dims2().map(|(r, _)| r))
            .collect::<Result<_>>()?;
        let out = Tensor::concat_rows(&tensors)?;
        self.record(out, Op::ConcatRows { heights }, parts)
    }

    /// Sliding-window concatenation: row t of the output is
    /// `concat(x[t], x[t+1], .., x[t+w-1])`.
    pub fn window_concat(&mut self, x: NodeId, window: usize) -> Result<NodeId> {
        let (n, d) = self.value(x).dims2()?;
        if window == 0 || window > n {
            return invalid(format!("window_concat: window {window} invalid for {n} rows"));
        }
        let rows = n - window + 1;
        let mut data = Vec::with_capacity(rows * window * d);
        for t in 0..rows {
            for q in 0..window {
                data.extend_from_slice(self.value(x).row(t + q));
            }
        }
        let out = Tensor::new(vec![rows, window * d], data)?;
        self.record(out, Op::WindowConcat { window }, &[x])
    }

    /// Row-wise softmax over the last axis restricted to unmasked entries.
    /// Masked entries are exactly 0 in the output; a fully masked row is an
    /// error. Stabilized by subtracting the row max over unmasked entries.
    pub fn masked_softmax(&mut self, logits: NodeId, mask: &BoolMask) -> Result<NodeId> {
        let out = masked_softmax_val(self.value(logits), mask)?;
        self.record(out, Op::MaskedSoftmax { mask: mask.clone() }, &[logits])
    }

    /// Mean over non-ignored positions of `-log softmax(logits)[target]`.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        ignore_id: usize,
    ) -> Result<NodeId> {
        let (t, v) = self.value(logits).dims2()?;
        if targets.len() != t {
            return Err(NumError::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("{} targets for {t} rows", targets.len()),
            });
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, &tgt) in targets.iter().enumerate() {
            if tgt == ignore_id {
                continue;
            }
            if tgt >= v {
                return invalid(format!("cross_entropy: target {tgt} out of vocabulary {v}"));
            }
            let row = self.value(logits).row(i);
            total += log_sum_exp(row) - row[tgt];
            count += 1;
        }
        if count == 0 {
            return invalid("cross_entropy: every target is ignored");
        }
        let out = Tensor::scalar(total / count as f64)?;
        out.check_finite("cross_entropy")?;
        self.record(
            out,
            Op::CrossEntropy { targets: targets.to_vec(), ignore_id },
            &[logits],
        )
    }

    /// Group normalization over the last (channel) axis, no learned affine:
    /// channels split into `groups`, each group normalized to mean 0 /
    /// variance ~1 over all its elements.
    pub fn group_norm(&mut self, x: NodeId, groups: usize, eps: f64) -> Result<NodeId> {
        let out = group_norm_val(self.value(x), groups, eps)?;
        self.record(out, Op::GroupNorm { groups, eps }, &[x])
    }

    /// Per-row normalization over the last axis with learned gamma/beta.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (n, d) = self.value(x).dims2()?;
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(NumError::ShapeMismatch {
                op: "layer_norm",
                detail: format!("affine vectors must have length {d}"),
            });
        }
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            let row = self.value(x).row(i);
            let (mu, sigma) = mean_sigma(row, eps);
            for j in 0..d {
                let xh = (row[j] - mu) / sigma;
                data[i * d + j] = self.value(gamma).data()[j] * xh + self.value(beta).data()[j];
            }
        }
        let out = Tensor::new(vec![n, d], data)?;
        out.check_finite("layer_norm")?;
        self.record(out, Op::LayerNorm { eps }, &[x, gamma, beta])
    }

    /// Valid (no padding) 3-D cross-correlation.
    /// `x[w,h,d,c_in] * kernel[kw,kh,kd,c_in,c_out] -> [w',h',d',c_out]`.
    pub fn conv3d(&mut self, x: NodeId, kernel: NodeId, stride: usize) -> Result<NodeId> {
        let out = conv3d_val(self.value(x), self.value(kernel), stride)?;
        out.check_finite("conv3d")?;
        self.record(out, Op::Conv3d { stride }, &[x, kernel])
    }

    /// Row gather: `table[v x d]` indexed by `ids` -> `[len(ids) x d]`.
    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, _) = self.value(table).dims2()?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return invalid(format!("embed: id {bad} out of range {v}"));
        }
        if ids.is_empty() {
            return invalid("embed: empty id list");
        }
        let out = self.value(table).gather_rows(ids)?;
        self.record(out, Op::Embed { ids: ids.to_vec() }, &[table])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total: f64 = self.value(x).data().iter().sum();
        let out = Tensor::scalar(total)?;
        out.check_finite("sum")?;
        self.record(out, Op::Sum, &[x])
    }

    /// Reverse accumulation from a scalar root. Returns gradients for every
    /// `requires_grad` leaf reachable from the root.
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients> {
        if !self.value(root).is_scalar() {
            return Err(NumError::ShapeMismatch {
                op: "backward",
                detail: format!("root must be scalar, got {:?}", self.value(root).shape()),
            });
        }
        let mut adjoint: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adjoint[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = adjoint[i].take() else { continue };
            self.accumulate(i, &g, &mut adjoint)?;
            // restore the node's own adjoint for leaf readout
            adjoint[i] = Some(g);
        }

        let mut grads = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                let g = adjoint[i]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                grads.insert(i, Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(
        &self,
        i: usize,
        g: &[f64],
        adjoint: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let node = &self.nodes[i];
        let inputs = &node.inputs;
        let mut add_to = |idx: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[idx].needs_grad {
                return;
            }
            let buf = adjoint[idx]
                .get_or_insert_with(|| vec![0.0; self.nodes[idx].value.numel()]);
            f(buf);
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                add_to(inputs[0], &mut |b| accumulate_into(b, g, 1.0));
                add_to(inputs[1], &mut |b| accumulate_into(b, g, 1.0));
            }
            Op::Sub => {
                add_to(inputs[0], &mut |b| accumulate_into(b, g, 1.0));
                add_to(inputs[1], &mut |b| accumulate_into(b, g, -1.0));
            }
            Op::Mul => {
                let (a, b) = (&self.nodes[inputs[0]].value, &self.nodes[inputs[1]].value);
                add_to(inputs[0], &mut |buf| {
                    for (k, slot) in buf.iter_mut().enumerate() {
                        *slot += g[k] * b.data()[k];
                    }
                });
                add_to(inputs[1], &mut |buf| {
                    for (k, slot) in buf.iter_mut().enumerate() {
                        *slot += g[k] * a.data()[k];
                    }
                });
            }
            Op::Scale(c) => {
                let c = *c;
                add_to(inputs[0], &mut |buf| accumulate_into(buf, g, c));
            }
            Op::AddRow => {
                let c = *self.nodes[inputs[0]].value.shape().last().unwrap();
                add_to(inputs[0], &mut |buf| accumulate_into(buf, g, 1.0));
                add_to(inputs[1], &mut |buf| {
                    for (k, &gv) in g.iter().enumerate() {
                        buf[k % c] += gv;
                    }
                });
            }
            Op::MulRow => {
                let x = &self.nodes[inputs[0]].value;
                let b = &self.nodes[inputs[1]].value;
                let c = *x.shape().last().unwrap();
                add_to(inputs[0], &mut |buf| {
                    for (k, slot) in buf.iter_mut().enumerate() {
                        *slot += g[k] * b.data()[k % c];
                    }
                });
                add_to(inputs[1], &mut |buf| {
                    for (k, &gv) in g.iter().enumerate() {
                        buf[k % c] += gv * x.data()[k];
                    }
                });
            }
            Op::Relu => {
                let x = &self.nodes[inputs[0]].value;
                add_to(inputs[0], &mut |buf| {
                    for (k, slot) in buf.iter_mut().enumerate() {
                        if x.data()[k] > 0.0 {
                            *slot += g[k];
                        }
                    }
                });
            }
            Op::MatMul => {
                let a = &self.nodes[inputs[0]].value;
                let b = &self.nodes[inputs[1]].value;
                let (m, k) = a.dims2().unwrap();
                let n = b.dims2().unwrap().1;
                add_to(inputs[0], &mut |buf| {
                    // dA = G . B^T
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * b.data()[p * n + j];
                            }
                            buf[i * k + p] += s;
                        }
                    }
                });
                add_to(inputs[1], &mut |buf| {
                    // dB = A^T . G
                    for p in 0..k {
                        for i in 0..m {
                            let av = a.data()[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                buf[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Transpose => {
                let (n, m) = self.nodes[inputs[0]].value.dims2().unwrap();
                add_to(inputs[0], &mut |buf| {
                    for i in 0..n {
                        for j in 0..m {
                            buf[i * m + j] += g[j * n + i];
                        }
                    }
                });
            }
            Op::Reshape => {
                add_to(inputs[0], &mut |buf| accumulate_into(buf, g, 1.0));
            }
            Op::ConcatCols { widths } => {
                let rows = self.nodes[i].value.dims2().unwrap().0;
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (p, &wd) in widths.iter().enumerate() {
                    let off = offset;
                    add_to(inputs[p], &mut |buf| {
                        for r in 0..rows {
                            for c in 0..wd {
                                buf[r * wd + c] += g[r * total + off + c];
                            }
                        }
                    });
                    offset += wd;
                }
            }
            Op::ConcatRows { heights } => {
                let cols = self.nodes[i].value.dims2().unwrap().1;
                let mut offset = 0;
                for (p, &ht) in heights.iter().enumerate() {
                    let off = offset;
                    add_to(inputs[p], &mut |buf| {
                        for k in 0..ht * cols {
                            buf[k] += g[off * cols + k];
                        }
                    });
                    offset += ht;
                }
            }
            Op::WindowConcat { window } => {
                let (_, d) = self.nodes[inputs[0]].value.dims2().unwrap();
                let rows = self.nodes[i].value.dims2().unwrap().0;
                add_to(inputs[0], &mut |buf| {
                    for t in 0..rows {
                        for q in 0..*window {
                            for j in 0..d {
                                buf[(t + q) * d + j] += g[t * (window * d) + q * d + j];
                            }
                        }
                    }
                });
            }
            Op::MaskedSoftmax { mask } => {
                let out = &self.nodes[i].value;
                let cols = *out.shape().last().unwrap();
                let rows = out.numel() / cols;
                add_to(inputs[0], &mut |buf| {
                    for r in 0..rows {
                        let base = r * cols;
                        let mut dot = 0.0;
                        for j in 0..cols {
                            if mask.data()[base + j] {
                                dot += out.data()[base + j] * g[base + j];
                            }
                        }
                        for j in 0..cols {
                            if mask.data()[base + j] {
                                buf[base + j] += out.data()[base + j] * (g[base + j] - dot);
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { targets, ignore_id } => {
                let x = &self.nodes[inputs[0]].value;
                let (_, v) = x.dims2().unwrap();
                let count = targets.iter().filter(|&&t| t != *ignore_id).count() as f64;
                let gscale = g[0] / count;
                add_to(inputs[0], &mut |buf| {
                    for (r, &tgt) in targets.iter().enumerate() {
                        if tgt == *ignore_id {
                            continue;
                        }
                        let row = x.row(r);
                        let lse = log_sum_exp(row);
                        for j in 0..v {
                            let p = (row[j] - lse).exp();
                            let delta = if j == tgt { 1.0 } else { 0.0 };
                            buf[r * v + j] += gscale * (p - delta);
                        }
                    }
                });
            }
            Op::GroupNorm { groups, eps } => {
                let x = &self.nodes[inputs[0]].value;
                let y = &self.nodes[i].value;
                let c = *x.shape().last().unwrap();
                let lead = x.numel() / c;
                let per = c / groups;
                add_to(inputs[0], &mut |buf| {
                    for grp in 0..*groups {
                        let idx = || {
                            (0..lead).flat_map(move |r| {
                                (grp * per..(grp + 1) * per).map(move |ch| r * c + ch)
                            })
                        };
                        let m = (lead * per) as f64;
                        let mut mu = 0.0;
                        for k in idx() {
                            mu += x.data()[k];
                        }
                        mu /= m;
                        let mut var = 0.0;
                        for k in idx() {
                            var += (x.data()[k] - mu).powi(2);
                        }
                        var /= m;
                        let sigma = (var + eps).sqrt();
                        let mut g_mean = 0.0;
                        let mut gy_mean = 0.0;
                        for k in idx() {
                            g_mean += g[k];
                            gy_mean += g[k] * y.data()[k];
                        }
                        g_mean /= m;
                        gy_mean /= m;
                        for k in idx() {
                            buf[k] += (g[k] - g_mean - y.data()[k] * gy_mean) / sigma;
                        }
                    }
                });
            }
            Op::LayerNorm { eps } => {
                let x = &self.nodes[inputs[0]].value;
                let gamma = &self.nodes[inputs[1]].value;
                let (n, d) = x.dims2().unwrap();
                let stats: Vec<(f64, f64)> =
                    (0..n).map(|r| mean_sigma(x.row(r), *eps)).collect();
                add_to(inputs[0], &mut |buf| {
                    for r in 0..n {
                        let (mu, sigma) = stats[r];
                        let row = x.row(r);
                        let mut dxh = vec![0.0; d];
                        let mut dxh_mean = 0.0;
                        let mut dxh_xh_mean = 0.0;
                        for j in 0..d {
                            let xh = (row[j] - mu) / sigma;
                            dxh[j] = g[r * d + j] * gamma.data()[j];
                            dxh_mean += dxh[j];
                            dxh_xh_mean += dxh[j] * xh;
                        }
                        dxh_mean /= d as f64;
                        dxh_xh_mean /= d as f64;
                        for j in 0..d {
                            let xh = (row[j] - mu) / sigma;
                            buf[r * d + j] += (dxh[j] - dxh_mean - xh * dxh_xh_mean) / sigma;
                        }
                    }
                });
                add_to(inputs[1], &mut |buf| {
                    for r in 0..n {
                        let (mu, sigma) = stats[r];
                        for j in 0..d {
                            let xh = (x.row(r)[j] - mu) / sigma;
                            buf[j] += g[r * d + j] * xh;
                        }
                    }
                });
                add_to(inputs[2], &mut |buf| {
                    for r in 0..n {
                        for j in 0..d {
                            buf[j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::Conv3d { stride } => {
                let x = &self.nodes[inputs[0]].value;
                let k = &self.nodes[inputs[1]].value;
                let geom = ConvGeom::new(x.shape(), k.shape(), *stride);
                add_to(inputs[0], &mut |buf| geom.backward_input(x, k, g, buf));
                add_to(inputs[1], &mut |buf| geom.backward_kernel(x, g, buf));
            }
            Op::Embed { ids } => {
                let d = self.nodes[inputs[0]].value.dims2().unwrap().1;
                add_to(inputs[0], &mut |buf| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            buf[id * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::Sum => {
                add_to(inputs[0], &mut |buf| {
                    for slot in buf.iter_mut() {
                        *slot += g[0];
                    }
                });
            }
        }
        Ok(())
    }
}

fn accumulate_into(buf: &mut [f64], g: &[f64], scale: f64) {
    for (slot, &gv) in buf.iter_mut().zip(g) {
        *slot += gv * scale;
    }
}

fn mean_sigma(row: &[f64], eps: f64) -> (f64, f64) {
    let m = row.len() as f64;
    let mu = row.iter().sum::<f64>() / m;
    let var = row.iter().map(|&v| (v - mu).powi(2)).sum::<f64>() / m;
    (mu, (var + eps).sqrt())
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn matmul_val(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(NumError::ShapeMismatch {
            op: "matmul",
            detail: format!("inner extents {k} vs {k2}"),
        });
    }
    let mut data = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.data()[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data()[p * n..(p + 1) * n];
            let crow = &mut data[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], data)
}

pub(crate) fn masked_softmax_val(logits: &Tensor, mask: &BoolMask) -> Result<Tensor> {
    if logits.shape() != mask.shape() {
        return Err(NumError::ShapeMismatch {
            op: "masked_softmax",
            detail: format!("logits {:?} vs mask {:?}", logits.shape(), mask.shape()),
        });
    }
    let cols = *logits.shape().last().unwrap();
    let rows = logits.numel() / cols;
    let mut data = vec![0.0; logits.numel()];
    for r in 0..rows {
        let base = r * cols;
        let mut max = f64::NEG_INFINITY;
        for j in 0..cols {
            if mask.data()[base + j] {
                max = max.max(logits.data()[base + j]);
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(NumError::FullyMaskedRow { op: "masked_softmax", row: r });
        }
        let mut sum = 0.0;
        for j in 0..cols {
            if mask.data()[base + j] {
                let e = (logits.data()[base + j] - max).exp();
                data[base + j] = e;
                sum += e;
            }
        }
        for j in 0..cols {
            data[base + j] /= sum;
        }
    }
    Tensor::new(logits.shape().to_vec(), data)
}

pub(crate) fn group_norm_val(x: &Tensor, groups: usize, eps: f64) -> Result<Tensor> {
    let c = *x.shape().last().unwrap();
    if groups == 0 || c % groups != 0 {
        return invalid(format!("group_norm: {c} channels not divisible by {groups} groups"));
    }
    if eps <= 0.0 {
        return invalid("group_norm: eps must be positive");
    }
    let lead = x.numel() / c;
    let per = c / groups;
    let mut data = vec![0.0; x.numel()];
    for grp in 0..groups {
        let indices: Vec<usize> = (0..lead)
            .flat_map(|r| (grp * per..(grp + 1) * per).map(move |ch| r * c + ch))
            .collect();
        let m = indices.len() as f64;
        let mu = indices.iter().map(|&k| x.data()[k]).sum::<f64>() / m;
        let var = indices.iter().map(|&k| (x.data()[k] - mu).powi(2)).sum::<f64>() / m;
        let sigma = (var + eps).sqrt();
        for &k in &indices {
            data[k] = (x.data()[k] - mu) / sigma;
        }
    }
    Tensor::new(x.shape().to_vec(), data)
}

struct ConvGeom {
    xd: [usize; 3],
    kd: [usize; 3],
    od: [usize; 3],
    ci: usize,
    co: usize,
    stride: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ks: &[usize], stride: usize) -> Self {
        let od = [
            (xs[0] - ks[0]) / stride + 1,
            (xs[1] - ks[1]) / stride + 1,
            (xs[2] - ks[2]) / stride + 1,
        ];
        ConvGeom {
            xd: [xs[0], xs[1], xs[2]],
            kd: [ks[0], ks[1], ks[2]],
            od,
            ci: ks[3],
            co: ks[4],
            stride,
        }
    }

    fn x_index(&self, ix: usize, iy: usize, iz: usize, c: usize) -> usize {
        ((ix * self.xd[1] + iy) * self.xd[2] + iz) * self.ci + c
    }

    fn k_index(&self, kx: usize, ky: usize, kz: usize, ci: usize, co: usize) -> usize {
        (((kx * self.kd[1] + ky) * self.kd[2] + kz) * self.ci + ci) * self.co + co
    }

    fn o_index(&self, ox: usize, oy: usize, oz: usize, c: usize) -> usize {
        ((ox * self.od[1] + oy) * self.od[2] + oz) * self.co + c
    }

    fn forward(&self, x: &Tensor, k: &Tensor) -> Vec<f64> {
        let mut out = vec![0.0; self.od[0] * self.od[1] * self.od[2] * self.co];
        for ox in 0..self.od[0] {
            for oy in 0..self.od[1] {
                for oz in 0..self.od[2] {
                    for kx in 0..self.kd[0] {
                        for ky in 0..self.kd[1] {
                            for kz in 0..self.kd[2] {
                                for ci in 0..self.ci {
                                    let xv = x.data()[self.x_index(
                                        ox * self.stride + kx,
                                        oy * self.stride + ky,
                                        oz * self.stride + kz,
                                        ci,
                                    )];
                                    if xv == 0.0 {
                                        continue;
                                    }
                                    for co in 0..self.co {
                                        out[self.o_index(ox, oy, oz, co)] +=
                                            xv * k.data()[self.k_index(kx, ky, kz, ci, co)];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn backward_input(&self, _x: &Tensor, k: &Tensor, g: &[f64], buf: &mut [f64]) {
        for ox in 0..self.od[0] {
            for oy in 0..self.od[1] {
                for oz in 0..self.od[2] {
                    for kx in 0..self.kd[0] {
                        for ky in 0..self.kd[1] {
                            for kz in 0..self.kd[2] {
                                for ci in 0..self.ci {
                                    let xi = self.x_index(
                                        ox * self.stride + kx,
                                        oy * self.stride + ky,
                                        oz * self.stride + kz,
                                        ci,
                                    );
                                    let mut s = 0.0;
                                    for co in 0..self.co {
                                        s += g[self.o_index(ox, oy, oz, co)]
                                            * k.data()[self.k_index(kx, ky, kz, ci, co)];
                                    }
                                    buf[xi] += s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn backward_kernel(&self, x: &Tensor, g: &[f64], buf: &mut [f64]) {
        for ox in 0..self.od[0] {
            for oy in 0..self.od[1] {
                for oz in 0..self.od[2] {
                    for kx in 0..self.kd[0] {
                        for ky in 0..self.kd[1] {
                            for kz in 0..self.kd[2] {
                                for ci in 0..self.ci {
                                    let xv = x.data()[self.x_index(
                                        ox * self.stride + kx,
                                        oy * self.stride + ky,
                                        oz * self.stride + kz,
                                        ci,
                                    )];
                                    if xv == 0.0 {
                                        continue;
                                    }
                                    for co in 0..self.co {
                                        buf[self.k_index(kx, ky, kz, ci, co)] +=
                                            xv * g[self.o_index(ox, oy, oz, co)];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv3d_val(x: &Tensor, kernel: &Tensor, stride: usize) -> Result<Tensor> {
    if x.shape().len() != 4 || kernel.shape().len() != 5 {
        return Err(NumError::ShapeMismatch {
            op: "conv3d",
            detail: format!("x {:?}, kernel {:?}", x.shape(), kernel.shape()),
        });
    }
    if stride == 0 {
        return invalid("conv3d: stride must be >= 1");
    }
    if x.shape()[3] != kernel.shape()[3] {
        return Err(NumError::ShapeMismatch {
            op: "conv3d",
            detail: format!("c_in {} vs {}", x.shape()[3], kernel.shape()[3]),
        });
    }
    for a in 0..3 {
        if kernel.shape()[a] > x.shape()[a] {
            return invalid(format!(
                "conv3d: kernel extent {} exceeds input extent {} on axis {a}",
                kernel.shape()[a],
                x.shape()[a],
            ));
        }
    }
    let geom = ConvGeom::new(x.shape(), kernel.shape(), stride);
    let data = geom.forward(x, kernel);
    Tensor::new(vec![geom.od[0], geom.od[1], geom.od[2], geom.co], data)
}
