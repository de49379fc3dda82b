//! Reverse-mode autodiff over a linear tape of recorded operations.
//!
//! Operations append nodes in topological order (inputs always precede
//! outputs), so the backward pass is a single reverse sweep. A tape is
//! built, run backward once, and dropped; parameters live outside the
//! tape and are re-inserted as leaves each step.

use super::kernels;
use super::{Result, Tensor, TensorError};

/// Index of a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    AddRow { a: NodeId, v: NodeId },
    AddScalarNode { a: NodeId, s: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    Neg { a: NodeId },
    Tanh { a: NodeId },
    Relu { a: NodeId },
    Sigmoid { a: NodeId },
    Exp { a: NodeId },
    Ln { a: NodeId },
    Dropout { a: NodeId, mask: Vec<f64> },
    ConcatRows { parts: Vec<(NodeId, usize)> },
    ConcatCols { parts: Vec<(NodeId, usize)> },
    SliceRows { a: NodeId, start: usize },
    SliceCols { a: NodeId, start: usize, cols: usize },
    Transpose { a: NodeId },
    Reshape { a: NodeId },
    RepeatRows { a: NodeId, n: usize },
    EmbeddingLookup { table: NodeId, ids: Vec<usize> },
    Conv1d { x: NodeId, w: NodeId, b: NodeId },
    MaxPool1d { x: NodeId, argmax: Vec<usize> },
    CrossEntropy { logits: NodeId, target: usize },
    Softmax { a: NodeId, axis: usize },
    MaskedSoftmax { a: NodeId, mask: Vec<bool> },
    Sum { a: NodeId },
    Mean { a: NodeId },
    RowMean { a: NodeId },
    PickLog { a: NodeId, index: usize, floor: f64 },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// The computation tape: values plus the operations that produced them.
#[derive(Debug, Default)]
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

    /// Insert a tensor as a leaf node.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push_node(t, Op::Leaf)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<NodeId> {
        Ok(self.leaf(Tensor::new(data, shape, false)?))
    }

    /// Leaf registered for gradients.
    pub fn param(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<NodeId> {
        Ok(self.leaf(Tensor::new(data, shape, true)?))
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value.data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad.as_deref()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push_node(&mut self, value: Tensor, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> NodeId {
        self.push_node(
            Tensor {
                shape,
                data,
                requires_grad,
                grad: None,
            },
            op,
        )
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].value.requires_grad
    }

    fn dims2(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.rows_cols()
    }

    // ── forward operations ──────────────────────────────────────────

    /// Matrix product A[m,k] * B[k,n]. 1-D operands count as single rows.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims2(a);
        let (kb, n) = self.dims2(b);
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let data = kernels::gemm(self.data(a), self.data(b), m, ka, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(data, vec![m, n], rg, Op::Matmul { a, b }))
    }

    /// Elementwise sum of two same-shaped tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(data, shape, rg, Op::Add { a, b }))
    }

    /// Add a length-W vector to every row of an R×W matrix.
    pub fn add_row(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (r, w) = self.dims2(a);
        let (vr, vw) = self.dims2(v);
        if vr != 1 || vw != w {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: self.shape(a).to_vec(),
                right: self.shape(v).to_vec(),
            });
        }
        let vd = self.data(v);
        let mut data = Vec::with_capacity(r * w);
        for row in self.data(a).chunks(w) {
            data.extend(row.iter().zip(vd).map(|(x, y)| x + y));
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(v);
        Ok(self.push(data, shape, rg, Op::AddRow { a, v }))
    }

    /// Broadcast-add a scalar node to every element.
    pub fn add_scalar_node(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if !self.value(s).is_scalar() {
            return Err(TensorError::BadShape {
                op: "add_scalar_node",
                expected: "scalar",
                shape: self.shape(s).to_vec(),
            });
        }
        let sv = self.data(s)[0];
        let data: Vec<f64> = self.data(a).iter().map(|x| x + sv).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(data, shape, rg, Op::AddScalarNode { a, s }))
    }

    /// Hadamard product of two same-shaped tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(data, shape, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let data: Vec<f64> = self.data(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(data, shape, rg, Op::Scale { a, c }))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        let data: Vec<f64> = self.data(a).iter().map(|x| -x).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(data, shape, rg, Op::Neg { a }))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let data: Vec<f64> = self.data(a).iter().map(|x| x.tanh()).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(data, shape, rg, Op::Tanh { a }))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let data: Vec<f64> = self.data(a).iter().map(|x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(data, shape, rg, Op::Relu { a }))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(data, shape, rg, Op::Sigmoid { a }))
    }

    /// Elementwise exponential. Errors on overflow rather than storing Inf.
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let data: Vec<f64> = self.data(a).iter().map(|x| x.exp()).collect();
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "exp" });
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(data, shape, rg, Op::Exp { a }))
    }

    /// Elementwise natural log. Errors on non-positive inputs.
    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        let data: Vec<f64> = self.data(a).iter().map(|x| x.ln()).collect();
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "ln" });
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(data, shape, rg, Op::Ln { a }))
    }

    /// Inverted dropout with keep-scale 1/(1-p). The caller draws the mask
    /// from its named RNG stream; eval mode simply skips the call.
    pub fn dropout<R: rand::Rng>(&mut self, a: NodeId, p: f64, rng: &mut R) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::BadProbability { p });
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = self
            .data(a)
            .iter()
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data: Vec<f64> = self.data(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(data, shape, rg, Op::Dropout { a, mask }))
    }

    /// Stack parts vertically; every part must share the column count.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(TensorError::EmptyAxis { op: "concat_rows" });
        }
        let (_, w) = self.dims2(parts[0]);
        let mut data = Vec::new();
        let mut meta = Vec::with_capacity(parts.len());
        let mut rows = 0;
        let mut rg = false;
        for &p in parts {
            let (r, pw) = self.dims2(p);
            if pw != w {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            data.extend_from_slice(self.data(p));
            meta.push((p, r));
            rows += r;
            rg |= self.rg(p);
        }
        Ok(self.push(data, vec![rows, w], rg, Op::ConcatRows { parts: meta }))
    }

    /// Stack parts horizontally; every part must share the row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(TensorError::EmptyAxis { op: "concat_cols" });
        }
        let (r, _) = self.dims2(parts[0]);
        let mut meta = Vec::with_capacity(parts.len());
        let mut total = 0;
        let mut rg = false;
        for &p in parts {
            let (pr, pc) = self.dims2(p);
            if pr != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            meta.push((p, pc));
            total += pc;
            rg |= self.rg(p);
        }
        let mut data = Vec::with_capacity(r * total);
        for row in 0..r {
            for &(p, pc) in &meta {
                let pd = self.data(p);
                data.extend_from_slice(&pd[row * pc..(row + 1) * pc]);
            }
        }
        Ok(self.push(data, vec![r, total], rg, Op::ConcatCols { parts: meta }))
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (r, w) = self.dims2(a);
        if start >= end || end > r {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: end,
                size: r,
            });
        }
        let data = self.data(a)[start * w..end * w].to_vec();
        let rg = self.rg(a);
        Ok(self.push(data, vec![end - start, w], rg, Op::SliceRows { a, start }))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (r, w) = self.dims2(a);
        if start >= end || end > w {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: end,
                size: w,
            });
        }
        let cols = end - start;
        let ad = self.data(a);
        let mut data = Vec::with_capacity(r * cols);
        for row in 0..r {
            data.extend_from_slice(&ad[row * w + start..row * w + end]);
        }
        let rg = self.rg(a);
        Ok(self.push(data, vec![r, cols], rg, Op::SliceCols { a, start, cols }))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, w) = self.dims2(a);
        let ad = self.data(a);
        let mut data = vec![0.0; r * w];
        for i in 0..r {
            for j in 0..w {
                data[j * r + i] = ad[i * w + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(data, vec![w, r], rg, Op::Transpose { a }))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(TensorError::BadShape {
                op: "reshape",
                expected: "same element count",
                shape,
            });
        }
        let data = self.data(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(data, shape, rg, Op::Reshape { a }))
    }

    /// Broadcast a length-W vector (or 1×W matrix) to n identical rows.
    pub fn repeat_rows(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        let (r, w) = self.dims2(a);
        if r != 1 {
            return Err(TensorError::BadShape {
                op: "repeat_rows",
                expected: "a single row",
                shape: self.shape(a).to_vec(),
            });
        }
        if n == 0 {
            return Err(TensorError::EmptyAxis { op: "repeat_rows" });
        }
        let mut data = Vec::with_capacity(n * w);
        for _ in 0..n {
            data.extend_from_slice(self.data(a));
        }
        let rg = self.rg(a);
        Ok(self.push(data, vec![n, w], rg, Op::RepeatRows { a, n }))
    }

    /// Gather rows of an embedding table by token id.
    pub fn embedding_lookup(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, h) = self.dims2(table);
        if ids.is_empty() {
            return Err(TensorError::EmptyAxis {
                op: "embedding_lookup",
            });
        }
        let td = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding_lookup",
                    index: id,
                    size: v,
                });
            }
            data.extend_from_slice(&td[id * h..(id + 1) * h]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            data,
            vec![ids.len(), h],
            rg,
            Op::EmbeddingLookup {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// 1-D convolution over the length axis with zero "same" padding.
    ///
    /// `x` is C_in×L (channels × length), `w` is [C_out, C_in, K] with K odd,
    /// `b` is the per-output-channel bias. Output is C_out×L.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[2] % 2 == 0 {
            return Err(TensorError::BadShape {
                op: "conv1d",
                expected: "[c_out, c_in, odd k] weight",
                shape: ws,
            });
        }
        let (c_out, c_in, k) = (ws[0], ws[1], ws[2]);
        let (xc, len) = self.dims2(x);
        if xc != c_in {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                left: self.shape(x).to_vec(),
                right: ws,
            });
        }
        let pad = (k - 1) / 2;
        if k > len + 2 * pad {
            return Err(TensorError::KernelTooLarge {
                op: "conv1d",
                k,
                len: len + 2 * pad,
            });
        }
        if self.value(b).numel() != c_out {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                left: self.shape(b).to_vec(),
                right: vec![c_out],
            });
        }
        let xd = self.data(x);
        let wd = self.data(w);
        let bd = self.data(b);
        let mut data = vec![0.0; c_out * len];
        for o in 0..c_out {
            for l in 0..len {
                let mut s = bd[o];
                for c in 0..c_in {
                    for t in 0..k {
                        let src = l + t;
                        if src < pad || src - pad >= len {
                            continue;
                        }
                        s += wd[(o * c_in + c) * k + t] * xd[c * len + (src - pad)];
                    }
                }
                data[o * len + l] = s;
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(data, vec![c_out, len], rg, Op::Conv1d { x, w, b }))
    }

    /// Max pooling over the length axis, kernel k (odd), stride 1,
    /// "same" output length. Out-of-bounds positions are ignored rather
    /// than padded, so pooling never manufactures zeros.
    pub fn maxpool1d(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        if k == 0 || k % 2 == 0 {
            return Err(TensorError::BadShape {
                op: "maxpool1d",
                expected: "odd kernel",
                shape: vec![k],
            });
        }
        let (c, len) = self.dims2(x);
        let pad = (k - 1) / 2;
        if k > len + 2 * pad {
            return Err(TensorError::KernelTooLarge {
                op: "maxpool1d",
                k,
                len: len + 2 * pad,
            });
        }
        let xd = self.data(x);
        let mut data = vec![0.0; c * len];
        let mut argmax = vec![0usize; c * len];
        for ch in 0..c {
            for l in 0..len {
                let lo = l.saturating_sub(pad);
                let hi = (l + pad + 1).min(len);
                let mut best = f64::NEG_INFINITY;
                let mut best_i = lo;
                for j in lo..hi {
                    let v = xd[ch * len + j];
                    if v > best {
                        best = v;
                        best_i = j;
                    }
                }
                data[ch * len + l] = best;
                argmax[ch * len + l] = ch * len + best_i;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(data, vec![c, len], rg, Op::MaxPool1d { x, argmax }))
    }

    /// Numerically stable cross-entropy of a logit vector against a target
    /// index: `logsumexp(logits) - logits[target]`.
    pub fn cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let n = self.value(logits).numel();
        let (r, _) = self.dims2(logits);
        if r != 1 {
            return Err(TensorError::BadShape {
                op: "cross_entropy",
                expected: "a single logit row",
                shape: self.shape(logits).to_vec(),
            });
        }
        if target >= n {
            return Err(TensorError::IndexOutOfRange {
                op: "cross_entropy",
                index: target,
                size: n,
            });
        }
        let xd = self.data(logits);
        let m = xd.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + xd.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let loss = lse - xd[target];
        let rg = self.rg(logits);
        Ok(self.push(vec![loss], vec![1], rg, Op::CrossEntropy { logits, target }))
    }

    /// Softmax along `axis` (0 or 1 for 2-D; the only axis for 1-D),
    /// computed with max subtraction.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let ndim = shape.len().max(1);
        if axis >= ndim {
            return Err(TensorError::IndexOutOfRange {
                op: "softmax",
                index: axis,
                size: ndim,
            });
        }
        if self.value(a).numel() == 0 {
            return Err(TensorError::EmptyAxis { op: "softmax" });
        }
        let data = softmax_forward(self.data(a), &shape, axis);
        let rg = self.rg(a);
        Ok(self.push(data, shape, rg, Op::Softmax { a, axis }))
    }

    /// Row-wise softmax where masked-out entries get probability exactly 0
    /// and receive no gradient. `mask[i]` true means position i participates.
    /// For a 1-D input the whole tensor is one row.
    pub fn masked_softmax(&mut self, a: NodeId, mask: &[bool]) -> Result<NodeId> {
        let numel = self.value(a).numel();
        if mask.len() != numel {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax",
                left: self.shape(a).to_vec(),
                right: vec![mask.len()],
            });
        }
        let (r, w) = self.dims2(a);
        let xd = self.data(a);
        let mut data = vec![0.0; numel];
        for row in 0..r {
            let xs = &xd[row * w..(row + 1) * w];
            let ms = &mask[row * w..(row + 1) * w];
            let mut m = f64::NEG_INFINITY;
            for (v, &keep) in xs.iter().zip(ms) {
                if keep && *v > m {
                    m = *v;
                }
            }
            if m == f64::NEG_INFINITY {
                return Err(TensorError::EmptyAxis {
                    op: "masked_softmax",
                });
            }
            let mut denom = 0.0;
            for (v, &keep) in xs.iter().zip(ms) {
                if keep {
                    denom += (v - m).exp();
                }
            }
            for (j, (v, &keep)) in xs.iter().zip(ms).enumerate() {
                data[row * w + j] = if keep { (v - m).exp() / denom } else { 0.0 };
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(
            data,
            shape,
            rg,
            Op::MaskedSoftmax {
                a,
                mask: mask.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.data(a).iter().sum();
        let rg = self.rg(a);
        Ok(self.push(vec![s], vec![1], rg, Op::Sum { a }))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(TensorError::EmptyAxis { op: "mean" });
        }
        let s: f64 = self.data(a).iter().sum::<f64>() / n as f64;
        let rg = self.rg(a);
        Ok(self.push(vec![s], vec![1], rg, Op::Mean { a }))
    }

    /// Per-row mean of an R×C tensor, yielding R×1.
    pub fn row_mean(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2(a);
        if c == 0 {
            return Err(TensorError::EmptyAxis { op: "row_mean" });
        }
        let ad = self.data(a);
        let data: Vec<f64> = (0..r)
            .map(|i| ad[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64)
            .collect();
        let rg = self.rg(a);
        Ok(self.push(data, vec![r, 1], rg, Op::RowMean { a }))
    }

    /// `ln(max(x[index], floor))` as a scalar, used for likelihoods over
    /// probability vectors. Returns the node and whether the floor clamped.
    pub fn pick_log(&mut self, a: NodeId, index: usize, floor: f64) -> Result<(NodeId, bool)> {
        let n = self.value(a).numel();
        if index >= n {
            return Err(TensorError::IndexOutOfRange {
                op: "pick_log",
                index,
                size: n,
            });
        }
        let v = self.data(a)[index];
        let clamped = v <= floor;
        let loss = v.max(floor).ln();
        if !loss.is_finite() {
            return Err(TensorError::NonFinite { op: "pick_log" });
        }
        let rg = self.rg(a);
        let id = self.push(vec![loss], vec![1], rg, Op::PickLog { a, index, floor });
        Ok((id, clamped))
    }

    /// Layer normalization over the last axis of an R×H tensor.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (r, h) = self.dims2(x);
        if self.value(gamma).numel() != h || self.value(beta).numel() != h {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: self.shape(x).to_vec(),
                right: self.shape(gamma).to_vec(),
            });
        }
        let xd = self.data(x);
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let mut data = vec![0.0; r * h];
        for row in 0..r {
            let xs = &xd[row * h..(row + 1) * h];
            let mean = xs.iter().sum::<f64>() / h as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..h {
                data[row * h + j] = (xs[j] - mean) * inv * gd[j] + bd[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(data, shape, rg, Op::LayerNorm { x, gamma, beta, eps }))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients accumulate into every
    /// node with `requires_grad`; leaves that never influenced the loss
    /// end up with exact-zero gradients. Consumes the recorded ops, so a
    /// tape supports a single backward pass.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.is_empty() {
            return Err(TensorError::EmptyAxis { op: "backward" });
        }
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        if !self.data(loss)[0].is_finite() {
            return Err(TensorError::NonFinite { op: "backward" });
        }
        for node in self.nodes.iter_mut() {
            if node.value.requires_grad && node.value.grad.is_none() {
                node.value.grad = Some(vec![0.0; node.value.data.len()]);
            }
        }
        if let Some(g) = self.nodes[loss.0].value.grad.as_mut() {
            g[0] = 1.0;
        } else {
            // Loss does not depend on any parameter; nothing to propagate.
            return Ok(());
        }

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            let grad = match self.nodes[i].value.grad.as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.propagate(i, &op, &grad);
        }
        Ok(())
    }

    fn take_grad(&mut self, id: NodeId) -> Option<Vec<f64>> {
        self.nodes[id.0].value.grad.take()
    }

    fn put_grad(&mut self, id: NodeId, g: Option<Vec<f64>>) {
        self.nodes[id.0].value.grad = g;
    }

    fn propagate(&mut self, out: usize, op: &Op, grad: &[f64]) {
        match *op {
            Op::Leaf => {}

            Op::Matmul { a, b } => {
                let (m, k) = self.dims2(a);
                let (_, n) = self.dims2(b);
                if let Some(mut ga) = self.take_grad(a) {
                    kernels::gemm_nt_acc(grad, self.data(b), m, n, k, &mut ga);
                    self.put_grad(a, Some(ga));
                }
                if let Some(mut gb) = self.take_grad(b) {
                    kernels::gemm_tn_acc(self.data(a), grad, m, k, n, &mut gb);
                    self.put_grad(b, Some(gb));
                }
            }

            Op::Add { a, b } => {
                for id in [a, b] {
                    if let Some(mut g) = self.take_grad(id) {
                        axpy(&mut g, grad, 1.0);
                        self.put_grad(id, Some(g));
                    }
                }
            }

            Op::AddRow { a, v } => {
                if let Some(mut g) = self.take_grad(a) {
                    axpy(&mut g, grad, 1.0);
                    self.put_grad(a, Some(g));
                }
                if let Some(mut gv) = self.take_grad(v) {
                    let w = gv.len();
                    for row in grad.chunks(w) {
                        for (t, s) in gv.iter_mut().zip(row) {
                            *t += s;
                        }
                    }
                    self.put_grad(v, Some(gv));
                }
            }

            Op::AddScalarNode { a, s } => {
                if let Some(mut g) = self.take_grad(a) {
                    axpy(&mut g, grad, 1.0);
                    self.put_grad(a, Some(g));
                }
                if let Some(mut gs) = self.take_grad(s) {
                    gs[0] += grad.iter().sum::<f64>();
                    self.put_grad(s, Some(gs));
                }
            }

            Op::Mul { a, b } => {
                if let Some(mut g) = self.take_grad(a) {
                    for ((t, s), x) in g.iter_mut().zip(grad).zip(self.nodes[b.0].value.data.iter())
                    {
                        *t += s * x;
                    }
                    self.put_grad(a, Some(g));
                }
                if let Some(mut g) = self.take_grad(b) {
                    for ((t, s), x) in g.iter_mut().zip(grad).zip(self.nodes[a.0].value.data.iter())
                    {
                        *t += s * x;
                    }
                    self.put_grad(b, Some(g));
                }
            }

            Op::Scale { a, c } => {
                if let Some(mut g) = self.take_grad(a) {
                    axpy(&mut g, grad, c);
                    self.put_grad(a, Some(g));
                }
            }

            Op::Neg { a } => {
                if let Some(mut g) = self.take_grad(a) {
                    axpy(&mut g, grad, -1.0);
                    self.put_grad(a, Some(g));
                }
            }

            Op::Tanh { a } => {
                if let Some(mut g) = self.take_grad(a) {
                    let y = &self.nodes[out].value.data;
                    for ((t, s), v) in g.iter_mut().zip(grad).zip(y) {
                        *t += s * (1.0 - v * v);
                    }
                    self.put_grad(a, Some(g));
                }
            }

            Op::Relu { a } => {
                if let Some(mut g) = self.take_grad(a) {
                    let x = &self.nodes[a.0].value.data;
                    for ((t, s), v) in g.iter_mut().zip(grad).zip(x) {
                        if *v > 0.0 {
                            *t += s;
                        }
                    }
                    self.put_grad(a, Some(g));
                }
            }

            Op::Sigmoid { a } => {
                if let Some(mut g) = self.take_grad(a) {
                    let y = &self.nodes[out].value.data;
                    for ((t, s), v) in g.iter_mut().zip(grad).zip(y) {
                        *t += s * v * (1.0 - v);
                    }
                    self.put_grad(a, Some(g));
                }
            }

            Op::Exp { a } => {
                if let Some(mut g) = self.take_grad(a) {
                    let y = &self.nodes[out].value.data;
                    for ((t, s), v) in g.iter_mut().zip(grad).zip(y) {
                        *t += s * v;
                    }
                    self.put_grad(a, Some(g));
                }
            }

            Op::Ln { a } => {
                if let Some(mut g) = self.take_grad(a) {
                    let x = &self.nodes[a.0].value.data;
                    for ((t, s), v) in g.iter_mut().zip(grad).zip(x) {
                        *t += s / v;
                    }
                    self.put_grad(a, Some(g));
                }
            }

            Op::Dropout { a, ref mask } => {
                if let Some(mut g) = self.take_grad(a) {
                    for ((t, s), m) in g.iter_mut().zip(grad).zip(mask) {
                        *t += s * m;
                    }
                    self.put_grad(a, Some(g));
                }
            }

            Op::ConcatRows { ref parts } => {
                let w = self.dims2(NodeId(out)).1;
                let mut offset = 0;
                for &(p, r) in parts {
                    if let Some(mut g) = self.take_grad(p) {
                        axpy(&mut g, &grad[offset * w..(offset + r) * w], 1.0);
                        self.put_grad(p, Some(g));
                    }
                    offset += r;
                }
            }

            Op::ConcatCols { ref parts } => {
                let (rows, total) = self.dims2(NodeId(out));
                let mut offset = 0;
                for &(p, pc) in parts {
                    if let Some(mut g) = self.take_grad(p) {
                        for row in 0..rows {
                            let src = &grad[row * total + offset..row * total + offset + pc];
                            for (t, s) in g[row * pc..(row + 1) * pc].iter_mut().zip(src) {
                                *t += s;
                            }
                        }
                        self.put_grad(p, Some(g));
                    }
                    offset += pc;
                }
            }

            Op::SliceRows { a, start } => {
                if let Some(mut g) = self.take_grad(a) {
                    let w = self.dims2(a).1;
                    for (t, s) in g[start * w..start * w + grad.len()].iter_mut().zip(grad) {
                        *t += s;
                    }
                    self.put_grad(a, Some(g));
                }
            }

            Op::SliceCols { a, start, cols } => {
                if let Some(mut g) = self.take_grad(a) {
                    let (r, w) = self.dims2(a);
                    for row in 0..r {
                        for j in 0..cols {
                            g[row * w + start + j] += grad[row * cols + j];
                        }
                    }
                    self.put_grad(a, Some(g));
                }
            }

            Op::Transpose { a } => {
                if let Some(mut g) = self.take_grad(a) {
                    let (r, w) = self.dims2(a);
                    for i in 0..r {
                        for j in 0..w {
                            g[i * w + j] += grad[j * r + i];
                        }
                    }
                    self.put_grad(a, Some(g));
                }
            }

            Op::Reshape { a } => {
                if let Some(mut g) = self.take_grad(a) {
                    axpy(&mut g, grad, 1.0);
                    self.put_grad(a, Some(g));
                }
            }

            Op::RepeatRows { a, n } => {
                if let Some(mut g) = self.take_grad(a) {
                    let w = g.len();
                    for row in 0..n {
                        for (t, s) in g.iter_mut().zip(&grad[row * w..(row + 1) * w]) {
                            *t += s;
                        }
                    }
                    self.put_grad(a, Some(g));
                }
            }

            Op::EmbeddingLookup { table, ref ids } => {
                if let Some(mut g) = self.take_grad(table) {
                    let h = self.dims2(table).1;
                    for (i, &id) in ids.iter().enumerate() {
                        for (t, s) in g[id * h..(id + 1) * h]
                            .iter_mut()
                            .zip(&grad[i * h..(i + 1) * h])
                        {
                            *t += s;
                        }
                    }
                    self.put_grad(table, Some(g));
                }
            }

            Op::Conv1d { x, w, b } => {
                let ws = self.shape(w).to_vec();
                let (c_out, c_in, k) = (ws[0], ws[1], ws[2]);
                let len = self.dims2(x).1;
                let pad = (k - 1) / 2;
                if let Some(mut gx) = self.take_grad(x) {
                    let wd = &self.nodes[w.0].value.data;
                    for o in 0..c_out {
                        for l in 0..len {
                            let go = grad[o * len + l];
                            if go == 0.0 {
                                continue;
                            }
                            for c in 0..c_in {
                                for t in 0..k {
                                    let src = l + t;
                                    if src < pad || src - pad >= len {
                                        continue;
                                    }
                                    gx[c * len + (src - pad)] += go * wd[(o * c_in + c) * k + t];
                                }
                            }
                        }
                    }
                    self.put_grad(x, Some(gx));
                }
                if let Some(mut gw) = self.take_grad(w) {
                    let xd = &self.nodes[x.0].value.data;
                    for o in 0..c_out {
                        for l in 0..len {
                            let go = grad[o * len + l];
                            if go == 0.0 {
                                continue;
                            }
                            for c in 0..c_in {
                                for t in 0..k {
                                    let src = l + t;
                                    if src < pad || src - pad >= len {
                                        continue;
                                    }
                                    gw[(o * c_in + c) * k + t] += go * xd[c * len + (src - pad)];
                                }
                            }
                        }
                    }
                    self.put_grad(w, Some(gw));
                }
                if let Some(mut gb) = self.take_grad(b) {
                    for o in 0..c_out {
                        gb[o] += grad[o * len..(o + 1) * len].iter().sum::<f64>();
                    }
                    self.put_grad(b, Some(gb));
                }
            }

            Op::MaxPool1d { x, ref argmax } => {
                if let Some(mut g) = self.take_grad(x) {
                    for (i, &src) in argmax.iter().enumerate() {
                        g[src] += grad[i];
                    }
                    self.put_grad(x, Some(g));
                }
            }

            Op::CrossEntropy { logits, target } => {
                if let Some(mut g) = self.take_grad(logits) {
                    let xd = &self.nodes[logits.0].value.data;
                    let m = xd.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = xd.iter().map(|v| (v - m).exp()).sum();
                    let g0 = grad[0];
                    for (j, t) in g.iter_mut().enumerate() {
                        let p = (xd[j] - m).exp() / denom;
                        let y = if j == target { 1.0 } else { 0.0 };
                        *t += g0 * (p - y);
                    }
                    self.put_grad(logits, Some(g));
                }
            }

            Op::Softmax { a, axis } => {
                if let Some(mut g) = self.take_grad(a) {
                    let shape = self.shape(NodeId(out)).to_vec();
                    let y = &self.nodes[out].value.data;
                    softmax_backward(y, grad, &shape, axis, &mut g);
                    self.put_grad(a, Some(g));
                }
            }

            Op::MaskedSoftmax { a, ref mask } => {
                if let Some(mut g) = self.take_grad(a) {
                    let (r, w) = self.dims2(a);
                    let y = &self.nodes[out].value.data;
                    for row in 0..r {
                        let base = row * w;
                        let mut dot = 0.0;
                        for j in 0..w {
                            if mask[base + j] {
                                dot += grad[base + j] * y[base + j];
                            }
                        }
                        for j in 0..w {
                            if mask[base + j] {
                                g[base + j] += y[base + j] * (grad[base + j] - dot);
                            }
                        }
                    }
                    self.put_grad(a, Some(g));
                }
            }

            Op::Sum { a } => {
                if let Some(mut g) = self.take_grad(a) {
                    let g0 = grad[0];
                    for t in g.iter_mut() {
                        *t += g0;
                    }
                    self.put_grad(a, Some(g));
                }
            }

            Op::Mean { a } => {
                if let Some(mut g) = self.take_grad(a) {
                    let g0 = grad[0] / g.len() as f64;
                    for t in g.iter_mut() {
                        *t += g0;
                    }
                    self.put_grad(a, Some(g));
                }
            }

            Op::RowMean { a } => {
                if let Some(mut g) = self.take_grad(a) {
                    let (r, c) = self.dims2(a);
                    for row in 0..r {
                        let g0 = grad[row] / c as f64;
                        for t in g[row * c..(row + 1) * c].iter_mut() {
                            *t += g0;
                        }
                    }
                    self.put_grad(a, Some(g));
                }
            }

            Op::PickLog { a, index, floor } => {
                if let Some(mut g) = self.take_grad(a) {
                    let v = self.nodes[a.0].value.data[index];
                    if v > floor {
                        g[index] += grad[0] / v;
                    }
                    self.put_grad(a, Some(g));
                }
            }

            Op::LayerNorm { x, gamma, beta, eps } => {
                let (r, h) = self.dims2(x);
                let hf = h as f64;
                let xd = self.nodes[x.0].value.data.clone();
                let gd = self.nodes[gamma.0].value.data.clone();
                let mut gx = self.take_grad(x);
                let mut gg = self.take_grad(gamma);
                let mut gb = self.take_grad(beta);
                for row in 0..r {
                    let xs = &xd[row * h..(row + 1) * h];
                    let gout = &grad[row * h..(row + 1) * h];
                    let mean = xs.iter().sum::<f64>() / hf;
                    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hf;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xs.iter().map(|v| (v - mean) * inv).collect();
                    if let Some(g) = gb.as_mut() {
                        for (t, s) in g.iter_mut().zip(gout) {
                            *t += s;
                        }
                    }
                    if let Some(g) = gg.as_mut() {
                        for j in 0..h {
                            g[j] += gout[j] * xhat[j];
                        }
                    }
                    if let Some(g) = gx.as_mut() {
                        let dxhat: Vec<f64> = (0..h).map(|j| gout[j] * gd[j]).collect();
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        for j in 0..h {
                            g[row * h + j] += inv / hf
                                * (hf * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                }
                self.put_grad(x, gx);
                self.put_grad(gamma, gg);
                self.put_grad(beta, gb);
            }
        }
    }
}

fn axpy(target: &mut [f64], src: &[f64], c: f64) {
    for (t, s) in target.iter_mut().zip(src) {
        *t += c * s;
    }
}

fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let size = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, size, inner)
}

fn softmax_forward(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, size, inner) = axis_extents(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| o * size * inner + j * inner + i;
            let mut m = f64::NEG_INFINITY;
            for j in 0..size {
                m = m.max(x[idx(j)]);
            }
            let mut denom = 0.0;
            for j in 0..size {
                let e = (x[idx(j)] - m).exp();
                out[idx(j)] = e;
                denom += e;
            }
            for j in 0..size {
                out[idx(j)] /= denom;
            }
        }
    }
    out
}

fn softmax_backward(y: &[f64], grad: &[f64], shape: &[usize], axis: usize, gx: &mut [f64]) {
    let (outer, size, inner) = axis_extents(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| o * size * inner + j * inner + i;
            let mut dot = 0.0;
            for j in 0..size {
                dot += grad[idx(j)] * y[idx(j)];
            }
            for j in 0..size {
                gx[idx(j)] += y[idx(j)] * (grad[idx(j)] - dot);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let eye = t
            .constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2])
            .unwrap();
        let x = t
            .constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2])
            .unwrap();
        let y = t.matmul(eye, x).unwrap();
        assert_eq!(t.data(y), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_case() {
        // [[1,2]] * [[3],[4]] = [[11]]
        let mut t = Tape::new();
        let a = t.constant(vec![1.0, 2.0], vec![1, 2]).unwrap();
        let b = t.constant(vec![3.0, 4.0], vec![2, 1]).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.data(c), &[11.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let mut t = Tape::new();
        let z = t.constant(vec![0.0; 4], vec![2, 2]).unwrap();
        let x = t
            .constant(vec![5.0, -3.0, 2.0, 7.0], vec![2, 2])
            .unwrap();
        let y = t.matmul(z, x).unwrap();
        assert!(t.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(vec![0.0; 6], vec![2, 3]).unwrap();
        let b = t.constant(vec![0.0; 4], vec![2, 2]).unwrap();
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_symmetry_and_hand_value() {
        let mut t = Tape::new();
        let x = t.constant(vec![0.0, 0.0, 0.0], vec![3]).unwrap();
        let s = t.softmax(x, 0).unwrap();
        for &v in t.data(s) {
            assert!(close(v, 1.0 / 3.0, 1e-15));
        }

        let x2 = t.constant(vec![1.0, 2.0], vec![2]).unwrap();
        let s2 = t.softmax(x2, 0).unwrap();
        assert!(close(t.data(s2)[0], 0.26894, 1e-5));
        assert!(close(t.data(s2)[1], 0.73106, 1e-5));
    }

    #[test]
    fn softmax_survives_extreme_logits() {
        let mut t = Tape::new();
        let x = t.constant(vec![1000.0, 0.0], vec![2]).unwrap();
        let s = t.softmax(x, 0).unwrap();
        let d = t.data(s);
        assert!(d.iter().all(|v| v.is_finite()));
        assert!(close(d[0], 1.0, 1e-12));
        assert!(close(d[0] + d[1], 1.0, 1e-12));
    }

    #[test]
    fn tanh_is_odd_at_zero() {
        let mut t = Tape::new();
        let x = t.constant(vec![0.0], vec![1]).unwrap();
        let y = t.tanh(x).unwrap();
        assert_eq!(t.data(y), &[0.0]);
    }

    #[test]
    fn cross_entropy_uniform_two_way() {
        // logits [0,0], target 0 -> ln 2
        let mut t = Tape::new();
        let x = t.constant(vec![0.0, 0.0], vec![2]).unwrap();
        let l = t.cross_entropy(x, 0).unwrap();
        assert!(close(t.data(l)[0], std::f64::consts::LN_2, 1e-12));
    }

    #[test]
    fn conv1d_width_one_is_valid() {
        let mut t = Tape::new();
        let x = t.constant(vec![1.0, 2.0], vec![2, 1]).unwrap();
        let w = t
            .constant(vec![0.5; 2 * 2 * 3], vec![2, 2, 3])
            .unwrap();
        let b = t.constant(vec![0.1, 0.2], vec![2]).unwrap();
        let y = t.conv1d(x, w, b).unwrap();
        assert_eq!(t.shape(y), &[2, 1]);
        // Only the middle tap lands in-bounds: 0.5*(1+2) + bias.
        assert!(close(t.data(y)[0], 1.6, 1e-12));
        assert!(close(t.data(y)[1], 1.7, 1e-12));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut t = Tape::new();
        let x = t.param(vec![1.0, 2.0, 3.0], vec![3]).unwrap();
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_square_sum() {
        // loss = sum(x ⊙ x), x = [1, 2] -> dx = [2, 4]
        let mut t = Tape::new();
        let x = t.param(vec![1.0, 2.0], vec![2]).unwrap();
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn unused_parameter_gets_exact_zero_grad() {
        let mut t = Tape::new();
        let x = t.param(vec![1.0, 2.0], vec![2]).unwrap();
        let unused = t.param(vec![5.0], vec![1]).unwrap();
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(unused).unwrap(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let x = t.param(vec![1.0, 2.0], vec![2]).unwrap();
        let err = t.backward(x).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss { .. }));
    }

    #[test]
    fn dropout_probability_validated() {
        let mut t = Tape::new();
        let x = t.param(vec![1.0], vec![1]).unwrap();
        let mut rng = crate::rng::stream(0, "test");
        assert!(t.dropout(x, 1.5, &mut rng).is_err());
        assert!(t.dropout(x, 1.0, &mut rng).is_err());
        assert!(t.dropout(x, 0.0, &mut rng).is_ok());
    }

    #[test]
    fn masked_softmax_zeroes_masked_positions() {
        let mut t = Tape::new();
        let x = t
            .param(vec![5.0, 1.0, 2.0, 3.0], vec![1, 4])
            .unwrap();
        let s = t.masked_softmax(x, &[false, true, true, false]).unwrap();
        let d = t.data(s);
        assert_eq!(d[0], 0.0);
        assert_eq!(d[3], 0.0);
        assert!(close(d[1] + d[2], 1.0, 1e-12));
        let loss = t.sum(s).unwrap();
        t.backward(loss).unwrap();
        let g = t.grad(x).unwrap();
        assert_eq!(g[0], 0.0);
        assert_eq!(g[3], 0.0);
    }

    #[test]
    fn embedding_lookup_gathers_and_scatters() {
        let mut t = Tape::new();
        let table = t
            .param(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![3, 2])
            .unwrap();
        let rows = t.embedding_lookup(table, &[2, 0, 2]).unwrap();
        assert_eq!(t.data(rows), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = t.sum(rows).unwrap();
        t.backward(s).unwrap();
        // Row 2 used twice, row 0 once, row 1 never.
        assert_eq!(t.grad(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn pick_log_clamps_at_floor() {
        let mut t = Tape::new();
        let p = t.param(vec![0.0, 1.0], vec![2]).unwrap();
        let (l, clamped) = t.pick_log(p, 0, 1e-12).unwrap();
        assert!(clamped);
        assert!(close(t.data(l)[0], (1e-12f64).ln(), 1e-9));
        let (_, clamped2) = t.pick_log(p, 1, 1e-12).unwrap();
        assert!(!clamped2);
    }
}
