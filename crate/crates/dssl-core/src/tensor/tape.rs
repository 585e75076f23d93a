//! Operation tape for reverse-mode differentiation.
//!
//! The tape is eager: every builder method computes its result
//! immediately and records a node. Nodes are stored in the order they
//! were created, so every input of node `i` precedes it — the backward
//! pass is a single reverse sweep. Gradients accumulate into per-node
//! slots and persist until [`Tape::zero_grads`].

use crate::error::{Error, Result};
use crate::tensor::{numel_of, Tensor};

/// Handle to a value on a [`Tape`]. Only meaningful for the tape that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// The operation kinds exposed through [`Tape::forward_op`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Matmul,
    Add,
    Mul,
    Relu,
    SoftmaxLastAxis,
    Linear,
    Sigmoid,
    LayerNormLastAxis,
}

const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul,
    Transpose2d,
    /// x @ w + b with x [m,k], w [k,n], b [n].
    Linear,
    Add,
    Mul,
    Div,
    Scale(f64),
    AddConst,
    Relu,
    Abs,
    Sigmoid,
    Log,
    SoftmaxLast,
    LayerNormLast,
    SumAll,
    Reshape,
    SliceCols { start: usize },
    SliceRows { start: usize },
    ConcatCols,
    ConcatRows,
    RepeatRows { times: usize },
    Conv2d { stride: usize, pad: usize },
    /// Bilinear lookup into a single-level map stored as [h*w, c].
    /// Coordinates are (x, y) in pixel-center units; out-of-bounds
    /// neighbors contribute zero.
    BilinearGather { h: usize, w: usize },
    /// out[q] = sum_p weights[q, p] * samples[q*groups + p].
    WeightedSumGroups { groups: usize },
}

struct Node {
    op: Op,
    inputs: Vec<TensorId>,
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Recorded forward computation, replayable in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Broadcast validity for elementwise binary ops: shapes equal, rhs a
/// scalar, or rhs shape a suffix of lhs shape (expansion over leading
/// axes only).
fn broadcast_kind(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<usize> {
    if lhs == rhs {
        return Ok(numel_of(rhs));
    }
    if numel_of(rhs) == 1 {
        return Ok(1);
    }
    if rhs.len() < lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs {
        return Ok(numel_of(rhs));
    }
    Err(Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

/// Sum `g` over leading axes down to `chunk` elements (the broadcast
/// gradient reduction).
fn reduce_to_chunk(g: &[f64], chunk: usize) -> Vec<f64> {
    let mut out = vec![0.0; chunk];
    for block in g.chunks_exact(chunk) {
        for (o, v) in out.iter_mut().zip(block) {
            *o += v;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check_id(&self, id: TensorId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::invalid(format!(
                "tensor id {} is not on this tape (len {})",
                id.0,
                self.nodes.len()
            )));
        }
        Ok(())
    }

    /// Register a leaf value. Gradient tracking follows the tensor's
    /// `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        self.push(
            Op::Leaf,
            vec![],
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
        )
    }

    /// Register a constant (never receives gradient).
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<TensorId> {
        if numel_of(&shape) != data.len() {
            return Err(Error::invalid(format!(
                "constant shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        if !all_finite(&data) {
            return Err(Error::NonFinite("constant".into()));
        }
        Ok(self.push(Op::Leaf, vec![], shape, data, false))
    }

    pub fn scalar_const(&mut self, v: f64) -> Result<TensorId> {
        self.constant(vec![1], vec![v])
    }

    fn push(
        &mut self,
        op: Op,
        inputs: Vec<TensorId>,
        shape: Vec<usize>,
        value: Vec<f64>,
        requires_grad: bool,
    ) -> TensorId {
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            value,
            requires_grad,
            grad: None,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        op: Op,
        inputs: Vec<TensorId>,
        shape: Vec<usize>,
        value: Vec<f64>,
    ) -> Result<TensorId> {
        if !all_finite(&value) {
            return Err(Error::NonFinite(name.into()));
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        Ok(self.push(op, inputs, shape, value, requires_grad))
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Detach a value from the tape as a plain tensor.
    pub fn to_tensor(&self, id: TensorId) -> Tensor {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].value.clone())
            .expect("tape values are always finite")
    }

    pub fn scalar_value(&self, id: TensorId) -> Result<f64> {
        let n = &self.nodes[id.0];
        if n.value.len() != 1 {
            return Err(Error::invalid(format!(
                "expected scalar, got shape {:?}",
                n.shape
            )));
        }
        Ok(n.value[0])
    }

    /// Gradient accumulated at `id`, if any flowed there.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ── Forward builders ─────────────────────────────────────────────

    /// Dispatch for the registered public op set.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[TensorId]) -> Result<TensorId> {
        let need = match kind {
            OpKind::Linear => 3,
            OpKind::Matmul | OpKind::Add | OpKind::Mul => 2,
            _ => 1,
        };
        if inputs.len() != need {
            return Err(Error::invalid(format!(
                "{kind:?} takes {need} inputs, got {}",
                inputs.len()
            )));
        }
        for &id in inputs {
            self.check_id(id)?;
            if !all_finite(&self.nodes[id.0].value) {
                return Err(Error::NonFinite(format!("{kind:?} input")));
            }
        }
        match kind {
            OpKind::Matmul => self.matmul(inputs[0], inputs[1]),
            OpKind::Add => self.add(inputs[0], inputs[1]),
            OpKind::Mul => self.mul(inputs[0], inputs[1]),
            OpKind::Relu => self.relu(inputs[0]),
            OpKind::SoftmaxLastAxis => self.softmax_last(inputs[0]),
            OpKind::Linear => self.linear(inputs[0], inputs[1], inputs[2]),
            OpKind::Sigmoid => self.sigmoid(inputs[0]),
            OpKind::LayerNormLastAxis => self.layernorm_last(inputs[0]),
        }
    }

    fn dims2(&self, op: &'static str, id: TensorId) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let value = matmul_raw(self.value(a), self.value(b), m, k, n);
        self.push_checked("matmul", Op::Matmul, vec![a, b], vec![m, n], value)
    }

    pub fn transpose2d(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.dims2("transpose2d", a)?;
        let value = transpose_raw(self.value(a), r, c);
        self.push_checked("transpose2d", Op::Transpose2d, vec![a], vec![c, r], value)
    }

    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.dims2("linear", x)?;
        let (k2, n) = self.dims2("linear", w)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        if self.shape(b) != [n] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: vec![n],
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut value = matmul_raw(self.value(x), self.value(w), m, k, n);
        let bias = self.value(b);
        for row in value.chunks_exact_mut(n) {
            for (v, bb) in row.iter_mut().zip(bias) {
                *v += bb;
            }
        }
        self.push_checked("linear", Op::Linear, vec![x, w, b], vec![m, n], value)
    }

    fn binary_elementwise(
        &mut self,
        name: &'static str,
        op: Op,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<TensorId> {
        let chunk = broadcast_kind(name, self.shape(a), self.shape(b))?;
        let av = self.value(a);
        let bv = self.value(b);
        let value = if chunk == 1 {
            let s = bv[0];
            av.iter().map(|&x| f(x, s)).collect()
        } else {
            av.chunks_exact(chunk)
                .flat_map(|block| block.iter().zip(bv).map(|(&x, &y)| f(x, y)))
                .collect()
        };
        let shape = self.shape(a).to_vec();
        self.push_checked(name, op, vec![a, b], shape, value)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise("add", Op::Add, a, b, |x, y| x + y)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise("mul", Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise("div", Op::Div, a, b, |x, y| x / y)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    fn unary(
        &mut self,
        name: &'static str,
        op: Op,
        a: TensorId,
        f: impl Fn(f64) -> f64,
    ) -> Result<TensorId> {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push_checked(name, op, vec![a], shape, value)
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        self.unary("scale", Op::Scale(c), a, |x| c * x)
    }

    pub fn add_const(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        self.unary("add_const", Op::AddConst, a, |x| x + c)
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary("relu", Op::Relu, a, |x| x.max(0.0))
    }

    pub fn abs(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary("abs", Op::Abs, a, f64::abs)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary("sigmoid", Op::Sigmoid, a, |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn log(&mut self, a: TensorId) -> Result<TensorId> {
        if self.value(a).iter().any(|&x| x <= 0.0) {
            return Err(Error::NonFinite("log of non-positive value".into()));
        }
        self.unary("log", Op::Log, a, f64::ln)
    }

    pub fn softmax_last(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        let last = *shape.last().ok_or_else(|| Error::invalid("softmax of rank-0"))?;
        let mut value = self.value(a).to_vec();
        for row in value.chunks_exact_mut(last) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push_checked("softmax", Op::SoftmaxLast, vec![a], shape, value)
    }

    pub fn layernorm_last(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        let last = *shape
            .last()
            .ok_or_else(|| Error::invalid("layernorm of rank-0"))?;
        let mut value = self.value(a).to_vec();
        for row in value.chunks_exact_mut(last) {
            let mean = row.iter().sum::<f64>() / last as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / last as f64;
            let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        self.push_checked("layernorm", Op::LayerNormLast, vec![a], shape, value)
    }

    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        let value = vec![self.value(a).iter().sum()];
        self.push_checked("sum_all", Op::SumAll, vec![a], vec![1], value)
    }

    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        if numel_of(&shape) != self.value(a).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let value = self.value(a).to_vec();
        self.push_checked("reshape", Op::Reshape, vec![a], shape, value)
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (r, c) = self.dims2("slice_cols", a)?;
        if start + len > c || len == 0 {
            return Err(Error::invalid(format!(
                "slice_cols [{start}, {}) out of 0..{c}",
                start + len
            )));
        }
        let av = self.value(a);
        let mut value = Vec::with_capacity(r * len);
        for row in av.chunks_exact(c) {
            value.extend_from_slice(&row[start..start + len]);
        }
        self.push_checked(
            "slice_cols",
            Op::SliceCols { start },
            vec![a],
            vec![r, len],
            value,
        )
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (r, c) = self.dims2("slice_rows", a)?;
        if start + len > r || len == 0 {
            return Err(Error::invalid(format!(
                "slice_rows [{start}, {}) out of 0..{r}",
                start + len
            )));
        }
        let value = self.value(a)[start * c..(start + len) * c].to_vec();
        self.push_checked(
            "slice_rows",
            Op::SliceRows { start },
            vec![a],
            vec![len, c],
            value,
        )
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols of nothing"));
        }
        let (r, _) = self.dims2("concat_cols", parts[0])?;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.dims2("concat_cols", p)?;
            if pr != r {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            total += pc;
        }
        let mut value = Vec::with_capacity(r * total);
        for row in 0..r {
            for &p in parts {
                let c = self.shape(p)[1];
                value.extend_from_slice(&self.value(p)[row * c..(row + 1) * c]);
            }
        }
        self.push_checked(
            "concat_cols",
            Op::ConcatCols,
            parts.to_vec(),
            vec![r, total],
            value,
        )
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_rows of nothing"));
        }
        let (_, c) = self.dims2("concat_rows", parts[0])?;
        let mut total = 0;
        let mut value = Vec::new();
        for &p in parts {
            let (pr, pc) = self.dims2("concat_rows", p)?;
            if pc != c {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            total += pr;
            value.extend_from_slice(self.value(p));
        }
        self.push_checked(
            "concat_rows",
            Op::ConcatRows,
            parts.to_vec(),
            vec![total, c],
            value,
        )
    }

    /// Repeat each row `times` times consecutively: [n, c] -> [n*times, c].
    pub fn repeat_rows(&mut self, a: TensorId, times: usize) -> Result<TensorId> {
        let (r, c) = self.dims2("repeat_rows", a)?;
        if times == 0 {
            return Err(Error::invalid("repeat_rows with times = 0"));
        }
        let av = self.value(a);
        let mut value = Vec::with_capacity(r * times * c);
        for row in av.chunks_exact(c) {
            for _ in 0..times {
                value.extend_from_slice(row);
            }
        }
        self.push_checked(
            "repeat_rows",
            Op::RepeatRows { times },
            vec![a],
            vec![r * times, c],
            value,
        )
    }

    /// 2-D convolution: x [cin, h, w], weight [cout, cin, kh, kw],
    /// bias [cout] -> [cout, ho, wo] with zero padding.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 3 || ws.len() != 4 || xs[0] != ws[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        let (cin, h, w) = (xs[0], xs[1], xs[2]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if self.shape(bias) != [cout] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: vec![cout],
                rhs: self.shape(bias).to_vec(),
            });
        }
        if h + 2 * pad < kh || w + 2 * pad < kw || stride == 0 {
            return Err(Error::invalid(format!(
                "conv2d: {h}x{w} input too small for kernel {kh}x{kw} (pad {pad}, stride {stride})"
            )));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let xv = self.value(x);
        let wv = self.value(weight);
        let bv = self.value(bias);
        let mut value = vec![0.0; cout * ho * wo];
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bv[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += xv[(ci * h + iy as usize) * w + ix as usize]
                                    * wv[((co * cin + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    value[(co * ho + oy) * wo + ox] = acc;
                }
            }
        }
        self.push_checked(
            "conv2d",
            Op::Conv2d { stride, pad },
            vec![x, weight, bias],
            vec![cout, ho, wo],
            value,
        )
    }

    /// Bilinear lookup: map [h*w, c] (row index y*w + x), coords [s, 2]
    /// as (x, y) in pixel-center units. Out-of-bounds neighbors
    /// contribute zero; differentiable in both map and coords.
    pub fn bilinear_gather(
        &mut self,
        map: TensorId,
        h: usize,
        w: usize,
        coords: TensorId,
    ) -> Result<TensorId> {
        let (hw, c) = self.dims2("bilinear_gather", map)?;
        if hw != h * w || h == 0 || w == 0 {
            return Err(Error::ShapeMismatch {
                op: "bilinear_gather",
                lhs: vec![h * w, c],
                rhs: self.shape(map).to_vec(),
            });
        }
        let (s, two) = self.dims2("bilinear_gather", coords)?;
        if two != 2 {
            return Err(Error::ShapeMismatch {
                op: "bilinear_gather",
                lhs: vec![s, 2],
                rhs: self.shape(coords).to_vec(),
            });
        }
        if !all_finite(self.value(coords)) {
            return Err(Error::NonFinite("bilinear_gather coordinates".into()));
        }
        let mv = self.value(map);
        let cv = self.value(coords);
        let mut value = vec![0.0; s * c];
        for i in 0..s {
            let (x, y) = (cv[i * 2], cv[i * 2 + 1]);
            let x0 = x.floor();
            let y0 = y.floor();
            let dx = x - x0;
            let dy = y - y0;
            let x0 = x0 as isize;
            let y0 = y0 as isize;
            let out = &mut value[i * c..(i + 1) * c];
            let mut tap = |xx: isize, yy: isize, wgt: f64| {
                if wgt == 0.0 || xx < 0 || yy < 0 || xx >= w as isize || yy >= h as isize {
                    return;
                }
                let base = (yy as usize * w + xx as usize) * c;
                for (o, v) in out.iter_mut().zip(&mv[base..base + c]) {
                    *o += wgt * v;
                }
            };
            tap(x0, y0, (1.0 - dx) * (1.0 - dy));
            tap(x0 + 1, y0, dx * (1.0 - dy));
            tap(x0, y0 + 1, (1.0 - dx) * dy);
            tap(x0 + 1, y0 + 1, dx * dy);
        }
        self.push_checked(
            "bilinear_gather",
            Op::BilinearGather { h, w },
            vec![map, coords],
            vec![s, c],
            value,
        )
    }

    /// Grouped weighted sum: samples [n*groups, c], weights [n, groups]
    /// -> [n, c] with out[q] = sum_p weights[q, p] * samples[q*groups + p].
    pub fn weighted_sum_groups(
        &mut self,
        samples: TensorId,
        weights: TensorId,
    ) -> Result<TensorId> {
        let (rows, c) = self.dims2("weighted_sum_groups", samples)?;
        let (n, groups) = self.dims2("weighted_sum_groups", weights)?;
        if groups == 0 || n * groups != rows {
            return Err(Error::ShapeMismatch {
                op: "weighted_sum_groups",
                lhs: self.shape(samples).to_vec(),
                rhs: self.shape(weights).to_vec(),
            });
        }
        let sv = self.value(samples);
        let wv = self.value(weights);
        let mut value = vec![0.0; n * c];
        for q in 0..n {
            let out = &mut value[q * c..(q + 1) * c];
            for p in 0..groups {
                let wgt = wv[q * groups + p];
                let row = &sv[(q * groups + p) * c..(q * groups + p + 1) * c];
                for (o, v) in out.iter_mut().zip(row) {
                    *o += wgt * v;
                }
            }
        }
        self.push_checked(
            "weighted_sum_groups",
            Op::WeightedSumGroups { groups },
            vec![samples, weights],
            vec![n, c],
            value,
        )
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Each call computes a fresh
    /// total derivative and adds it into the persistent per-node grad
    /// slots, so repeated calls accumulate unless [`Tape::zero_grads`]
    /// is called in between.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        self.check_id(root)?;
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        let mut prop: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        prop[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match prop[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(i, &g, &mut prop);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], prop: &mut [Option<Vec<f64>>]) {
        fn add_into(prop: &mut [Option<Vec<f64>>], id: TensorId, g: Vec<f64>) {
            match &mut prop[id.0] {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }
        let op = self.nodes[i].op.clone();
        let inputs = self.nodes[i].inputs.clone();
        let needs: Vec<bool> = inputs
            .iter()
            .map(|&id| self.nodes[id.0].requires_grad)
            .collect();
        match op {
            Op::Leaf => {}
            Op::Matmul => {
                let (m, k) = (self.shape(inputs[0])[0], self.shape(inputs[0])[1]);
                let n = self.shape(inputs[1])[1];
                if needs[0] {
                    let bt = transpose_raw(self.value(inputs[1]), k, n);
                    let da = matmul_raw(g, &bt, m, n, k);
                    add_into(prop, inputs[0], da);
                }
                if needs[1] {
                    let at = transpose_raw(self.value(inputs[0]), m, k);
                    let db = matmul_raw(&at, g, k, m, n);
                    add_into(prop, inputs[1], db);
                }
            }
            Op::Transpose2d => {
                if needs[0] {
                    let (c, r) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    add_into(prop, inputs[0], transpose_raw(g, c, r));
                }
            }
            Op::Linear => {
                let (m, k) = (self.shape(inputs[0])[0], self.shape(inputs[0])[1]);
                let n = self.shape(inputs[1])[1];
                if needs[0] {
                    let wt = transpose_raw(self.value(inputs[1]), k, n);
                    let dx = matmul_raw(g, &wt, m, n, k);
                    add_into(prop, inputs[0], dx);
                }
                if needs[1] {
                    let xt = transpose_raw(self.value(inputs[0]), m, k);
                    let dw = matmul_raw(&xt, g, k, m, n);
                    add_into(prop, inputs[1], dw);
                }
                if needs[2] {
                    add_into(prop, inputs[2], reduce_to_chunk(g, n));
                }
            }
            Op::Add => {
                if needs[0] {
                    add_into(prop, inputs[0], g.to_vec());
                }
                if needs[1] {
                    let chunk = self.value(inputs[1]).len();
                    add_into(prop, inputs[1], reduce_to_chunk(g, chunk));
                }
            }
            Op::Mul => {
                let chunk = self.value(inputs[1]).len();
                if needs[0] {
                    let bv = self.value(inputs[1]);
                    let da = g
                        .iter()
                        .enumerate()
                        .map(|(j, &gv)| gv * bv[j % chunk])
                        .collect();
                    add_into(prop, inputs[0], da);
                }
                if needs[1] {
                    let av = self.value(inputs[0]);
                    let prod: Vec<f64> = g.iter().zip(av).map(|(&gv, &x)| gv * x).collect();
                    add_into(prop, inputs[1], reduce_to_chunk(&prod, chunk));
                }
            }
            Op::Div => {
                let chunk = self.value(inputs[1]).len();
                if needs[0] {
                    let bv = self.value(inputs[1]);
                    let da = g
                        .iter()
                        .enumerate()
                        .map(|(j, &gv)| gv / bv[j % chunk])
                        .collect();
                    add_into(prop, inputs[0], da);
                }
                if needs[1] {
                    let av = self.value(inputs[0]);
                    let bv = self.value(inputs[1]);
                    let prod: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(j, &gv)| {
                            let b = bv[j % chunk];
                            -gv * av[j] / (b * b)
                        })
                        .collect();
                    add_into(prop, inputs[1], reduce_to_chunk(&prod, chunk));
                }
            }
            Op::Scale(c) => {
                if needs[0] {
                    add_into(prop, inputs[0], g.iter().map(|&v| c * v).collect());
                }
            }
            Op::AddConst => {
                if needs[0] {
                    add_into(prop, inputs[0], g.to_vec());
                }
            }
            Op::Relu => {
                if needs[0] {
                    let xv = self.value(inputs[0]);
                    let d = g
                        .iter()
                        .zip(xv)
                        .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                        .collect();
                    add_into(prop, inputs[0], d);
                }
            }
            Op::Abs => {
                if needs[0] {
                    let xv = self.value(inputs[0]);
                    let d = g
                        .iter()
                        .zip(xv)
                        .map(|(&gv, &x)| gv * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
                        .collect();
                    add_into(prop, inputs[0], d);
                }
            }
            Op::Sigmoid => {
                if needs[0] {
                    let yv = &self.nodes[i].value;
                    let d = g.iter().zip(yv).map(|(&gv, &y)| gv * y * (1.0 - y)).collect();
                    add_into(prop, inputs[0], d);
                }
            }
            Op::Log => {
                if needs[0] {
                    let xv = self.value(inputs[0]);
                    let d = g.iter().zip(xv).map(|(&gv, &x)| gv / x).collect();
                    add_into(prop, inputs[0], d);
                }
            }
            Op::SoftmaxLast => {
                if needs[0] {
                    let last = *self.nodes[i].shape.last().unwrap();
                    let yv = &self.nodes[i].value;
                    let mut d = vec![0.0; yv.len()];
                    for (r, (grow, yrow)) in g.chunks_exact(last).zip(yv.chunks_exact(last)).enumerate()
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..last {
                            d[r * last + j] = yrow[j] * (grow[j] - dot);
                        }
                    }
                    add_into(prop, inputs[0], d);
                }
            }
            Op::LayerNormLast => {
                if needs[0] {
                    let last = *self.nodes[i].shape.last().unwrap();
                    let xv = self.value(inputs[0]).to_vec();
                    let mut d = vec![0.0; xv.len()];
                    for (r, (grow, xrow)) in g.chunks_exact(last).zip(xv.chunks_exact(last)).enumerate()
                    {
                        let nf = last as f64;
                        let mean = xrow.iter().sum::<f64>() / nf;
                        let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                        let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
                        let xhat: Vec<f64> = xrow.iter().map(|v| (v - mean) * inv).collect();
                        let gmean = grow.iter().sum::<f64>() / nf;
                        let gxhat = grow.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / nf;
                        for j in 0..last {
                            d[r * last + j] = inv * (grow[j] - gmean - xhat[j] * gxhat);
                        }
                    }
                    add_into(prop, inputs[0], d);
                }
            }
            Op::SumAll => {
                if needs[0] {
                    let n = self.value(inputs[0]).len();
                    add_into(prop, inputs[0], vec![g[0]; n]);
                }
            }
            Op::Reshape => {
                if needs[0] {
                    add_into(prop, inputs[0], g.to_vec());
                }
            }
            Op::SliceCols { start } => {
                if needs[0] {
                    let (r, c) = (self.shape(inputs[0])[0], self.shape(inputs[0])[1]);
                    let len = self.nodes[i].shape[1];
                    let mut d = vec![0.0; r * c];
                    for row in 0..r {
                        d[row * c + start..row * c + start + len]
                            .copy_from_slice(&g[row * len..(row + 1) * len]);
                    }
                    add_into(prop, inputs[0], d);
                }
            }
            Op::SliceRows { start } => {
                if needs[0] {
                    let (r, c) = (self.shape(inputs[0])[0], self.shape(inputs[0])[1]);
                    let len = self.nodes[i].shape[0];
                    let mut d = vec![0.0; r * c];
                    d[start * c..(start + len) * c].copy_from_slice(g);
                    add_into(prop, inputs[0], d);
                }
            }
            Op::ConcatCols => {
                let r = self.nodes[i].shape[0];
                let total = self.nodes[i].shape[1];
                let mut offset = 0;
                for (idx, &p) in inputs.iter().enumerate() {
                    let c = self.shape(p)[1];
                    if needs[idx] {
                        let mut d = vec![0.0; r * c];
                        for row in 0..r {
                            d[row * c..(row + 1) * c]
                                .copy_from_slice(&g[row * total + offset..row * total + offset + c]);
                        }
                        add_into(prop, p, d);
                    }
                    offset += c;
                }
            }
            Op::ConcatRows => {
                let mut offset = 0;
                for (idx, &p) in inputs.iter().enumerate() {
                    let n = self.value(p).len();
                    if needs[idx] {
                        add_into(prop, p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::RepeatRows { times } => {
                if needs[0] {
                    let (r, c) = (self.shape(inputs[0])[0], self.shape(inputs[0])[1]);
                    let mut d = vec![0.0; r * c];
                    for row in 0..r {
                        for t in 0..times {
                            let src = &g[(row * times + t) * c..(row * times + t + 1) * c];
                            for (dv, sv) in d[row * c..(row + 1) * c].iter_mut().zip(src) {
                                *dv += sv;
                            }
                        }
                    }
                    add_into(prop, inputs[0], d);
                }
            }
            Op::Conv2d { stride, pad } => {
                let xs = self.shape(inputs[0]).to_vec();
                let ws = self.shape(inputs[1]).to_vec();
                let (cin, h, w) = (xs[0], xs[1], xs[2]);
                let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
                let (ho, wo) = (self.nodes[i].shape[1], self.nodes[i].shape[2]);
                let xv = self.value(inputs[0]).to_vec();
                let wv = self.value(inputs[1]).to_vec();
                let mut dx = vec![0.0; cin * h * w];
                let mut dw = vec![0.0; cout * cin * kh * kw];
                let mut db = vec![0.0; cout];
                for co in 0..cout {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gv = g[(co * ho + oy) * wo + ox];
                            if gv == 0.0 {
                                continue;
                            }
                            db[co] += gv;
                            for ci in 0..cin {
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let xi = (ci * h + iy as usize) * w + ix as usize;
                                        let wi = ((co * cin + ci) * kh + ky) * kw + kx;
                                        dx[xi] += gv * wv[wi];
                                        dw[wi] += gv * xv[xi];
                                    }
                                }
                            }
                        }
                    }
                }
                if needs[0] {
                    add_into(prop, inputs[0], dx);
                }
                if needs[1] {
                    add_into(prop, inputs[1], dw);
                }
                if needs[2] {
                    add_into(prop, inputs[2], db);
                }
            }
            Op::BilinearGather { h, w } => {
                let c = self.shape(inputs[0])[1];
                let s = self.nodes[i].shape[0];
                let mv = self.value(inputs[0]).to_vec();
                let cv = self.value(inputs[1]).to_vec();
                let mut dmap = vec![0.0; h * w * c];
                let mut dcoords = vec![0.0; s * 2];
                for si in 0..s {
                    let grow = &g[si * c..(si + 1) * c];
                    let (x, y) = (cv[si * 2], cv[si * 2 + 1]);
                    let x0f = x.floor();
                    let y0f = y.floor();
                    let dxf = x - x0f;
                    let dyf = y - y0f;
                    let x0 = x0f as isize;
                    let y0 = y0f as isize;
                    // value of a neighbor channel vector, zero out of bounds
                    let fetch = |xx: isize, yy: isize| -> Option<&[f64]> {
                        if xx < 0 || yy < 0 || xx >= w as isize || yy >= h as isize {
                            None
                        } else {
                            let base = (yy as usize * w + xx as usize) * c;
                            Some(&mv[base..base + c])
                        }
                    };
                    let corners = [
                        (x0, y0, (1.0 - dxf) * (1.0 - dyf)),
                        (x0 + 1, y0, dxf * (1.0 - dyf)),
                        (x0, y0 + 1, (1.0 - dxf) * dyf),
                        (x0 + 1, y0 + 1, dxf * dyf),
                    ];
                    for &(xx, yy, wgt) in &corners {
                        if wgt != 0.0 && xx >= 0 && yy >= 0 && (xx as usize) < w && (yy as usize) < h
                        {
                            let base = (yy as usize * w + xx as usize) * c;
                            for (j, &gv) in grow.iter().enumerate() {
                                dmap[base + j] += wgt * gv;
                            }
                        }
                    }
                    // d/dx = (1-dy)(v10 - v00) + dy (v11 - v01), missing
                    // neighbors act as zero
                    let dot = |v: Option<&[f64]>| -> f64 {
                        v.map(|row| row.iter().zip(grow).map(|(a, b)| a * b).sum())
                            .unwrap_or(0.0)
                    };
                    let v00 = dot(fetch(x0, y0));
                    let v10 = dot(fetch(x0 + 1, y0));
                    let v01 = dot(fetch(x0, y0 + 1));
                    let v11 = dot(fetch(x0 + 1, y0 + 1));
                    dcoords[si * 2] = (1.0 - dyf) * (v10 - v00) + dyf * (v11 - v01);
                    dcoords[si * 2 + 1] = (1.0 - dxf) * (v01 - v00) + dxf * (v11 - v10);
                }
                if needs[0] {
                    add_into(prop, inputs[0], dmap);
                }
                if needs[1] {
                    add_into(prop, inputs[1], dcoords);
                }
            }
            Op::WeightedSumGroups { groups } => {
                let c = self.shape(inputs[0])[1];
                let n = self.nodes[i].shape[0];
                let sv = self.value(inputs[0]).to_vec();
                let wv = self.value(inputs[1]).to_vec();
                if needs[0] {
                    let mut ds = vec![0.0; n * groups * c];
                    for q in 0..n {
                        let grow = &g[q * c..(q + 1) * c];
                        for p in 0..groups {
                            let wgt = wv[q * groups + p];
                            let row = &mut ds[(q * groups + p) * c..(q * groups + p + 1) * c];
                            for (d, gv) in row.iter_mut().zip(grow) {
                                *d = wgt * gv;
                            }
                        }
                    }
                    add_into(prop, inputs[0], ds);
                }
                if needs[1] {
                    let mut dw = vec![0.0; n * groups];
                    for q in 0..n {
                        let grow = &g[q * c..(q + 1) * c];
                        for p in 0..groups {
                            let row = &sv[(q * groups + p) * c..(q * groups + p + 1) * c];
                            dw[q * groups + p] = row.iter().zip(grow).map(|(a, b)| a * b).sum();
                        }
                    }
                    add_into(prop, inputs[1], dw);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_case() {
        // [[1,2]] @ [[3],[4]] = [[11]]
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[1, 2], &[1.0, 2.0]));
        let b = tape.leaf(&t(&[2, 1], &[3.0, 4.0]));
        let y = tape.forward_op(OpKind::Matmul, &[a, b]).unwrap();
        assert_eq!(tape.value(y), &[11.0]);
        assert_eq!(tape.shape(y), &[1, 1]);
    }

    #[test]
    fn softmax_symmetry_and_sum() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[0.0, 0.0]));
        let y = tape.forward_op(OpKind::SoftmaxLastAxis, &[x]).unwrap();
        assert_eq!(tape.value(y), &[0.5, 0.5]);

        let x = tape.leaf(&t(&[3, 4], &[0.3, -2.0, 5.0, 1.1, 0.0, 0.0, 0.0, 0.0, 9.0, -9.0, 2.0, 0.5]));
        let y = tape.softmax_last(x).unwrap();
        for row in tape.value(y).chunks_exact(4) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn relu_identity_fixed_point() {
        let mut tape = Tape::new();
        let eye = t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let x = tape.leaf(&eye);
        let y = tape.forward_op(OpKind::Relu, &[x]).unwrap();
        assert_eq!(tape.value(y), eye.data());
    }

    #[test]
    fn backward_square_gives_derivative() {
        // root = x*x at x = 3 -> grad 6
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1], &[3.0]).with_requires_grad(true));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
        // second backward accumulates
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[12.0]);
        tape.zero_grads();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_sum_of_softmax_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[4], &[0.3, -1.0, 2.0, 0.1]).with_requires_grad(true));
        let s = tape.softmax_last(x).unwrap();
        let y = tape.sum_all(s).unwrap();
        tape.backward(y).unwrap();
        for &g in tape.grad(x).unwrap() {
            assert!(g.abs() < 1e-15, "softmax sum gradient should vanish, got {g}");
        }
    }

    #[test]
    fn backward_sum_of_leaves_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 4.0, -1.0]).with_requires_grad(true));
        let y = tape.sum_all(x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 3], &[0.0; 6]));
        let b = tape.leaf(&t(&[2, 2], &[0.0; 4]));
        let err = tape.forward_op(OpKind::Matmul, &[a, b]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn nonfinite_input_rejected() {
        let mut tape = Tape::new();
        assert!(tape.constant(vec![1], vec![f64::NAN]).is_err());
        let a = tape.leaf(&t(&[1], &[1.0]));
        let big = tape.scale(a, f64::MAX).unwrap();
        // overflow to inf must be rejected at the op that produces it
        assert!(tape.scale(big, f64::MAX).is_err());
    }

    #[test]
    fn backward_root_not_scalar_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2], &[1.0, 2.0]));
        assert!(tape.backward(a).is_err());
        assert!(tape.backward(TensorId(99)).is_err());
    }

    #[test]
    fn bilinear_hand_cases() {
        // 2x2 map [[0,1],[2,3]] stored [h*w, c] with c = 1
        let mut tape = Tape::new();
        let map = tape.leaf(&t(&[4, 1], &[0.0, 1.0, 2.0, 3.0]));
        let coords = tape.leaf(&t(&[3, 2], &[0.5, 0.5, 1.0, 0.0, -5.0, -5.0]));
        let y = tape.bilinear_gather(map, 2, 2, coords).unwrap();
        let v = tape.value(y);
        assert!((v[0] - 1.5).abs() < 1e-15); // centre of the 4 pixels
        assert!((v[1] - 1.0).abs() < 1e-15); // exact grid point (x=1, y=0)
        assert_eq!(v[2], 0.0); // fully outside, zero padding
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(&t(&[2, 2], &[0.1, -0.7, 2.4, 0.9]).with_requires_grad(true));
            let w = tape.leaf(&t(&[2, 2], &[1.5, 0.25, -3.0, 0.125]).with_requires_grad(true));
            let h = tape.matmul(x, w).unwrap();
            let h = tape.sigmoid(h).unwrap();
            let h = tape.layernorm_last(h).unwrap();
            let y = tape.sum_all(h).unwrap();
            tape.backward(y).unwrap();
            (
                tape.value(y).to_vec(),
                tape.grad(x).unwrap().to_vec(),
                tape.grad(w).unwrap().to_vec(),
            )
        };
        let (y1, gx1, gw1) = run();
        let (y2, gx2, gw2) = run();
        assert_eq!(y1, y2);
        assert_eq!(gx1, gx2);
        assert_eq!(gw1, gw2);
    }
}
