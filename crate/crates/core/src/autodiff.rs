//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] owns every intermediate value produced by a forward pass. Ops
//! are methods on the tape that take and return [`Var`] handles; each records
//! its inputs so that [`Tape::backward`] can walk the nodes once, in reverse
//! creation order, and accumulate gradients. A tape is single-use: a second
//! backward call fails with [`Error::TapeConsumed`].
//!
//! Every op checks its output for NaN/Inf and reports the op name instead of
//! letting corrupt values propagate.

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBcast(Var, Var),
    MulBcast(Var, Var),
    ExpandLast(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    SumAxis(Var, usize),
    SumAll(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Relu(Var),
    Gelu(Var),
    ClampMin(Var, f64),
    Softmax(Var, f64),
    LayerNorm(Var, Vec<f64>),
    StopGradient,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward computation.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    consumed: bool,
    frozen: std::collections::VecDeque<Tensor>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

/// `c += a · b` with `a: m×k`, `b: k×n`.
pub(crate) fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

/// `c += a · bᵀ` with `a: m×k`, `b: n×k`.
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * n + j] += s;
        }
    }
}

/// `c += aᵀ · b` with `a: r×k`, `b: r×n`, `c: k×n`.
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], r: usize, k: usize, n: usize) {
    for i in 0..r {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

fn is_suffix(full: &[usize], suffix: &[usize]) -> bool {
    suffix.len() <= full.len() && full[full.len() - suffix.len()..] == *suffix
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            consumed: false,
            frozen: Default::default(),
        }
    }

    /// A tape that records values only; every node is a constant.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
            consumed: false,
            frozen: Default::default(),
        }
    }

    /// An inference tape whose `stop_gradient` outputs are replaced, in call
    /// order, by `values`. Evaluating a loss this way gives the function whose
    /// true derivative is the gradient the tape reports, which is what a
    /// finite-difference check needs.
    pub fn frozen(values: Vec<Tensor>) -> Self {
        let mut t = Self::inference();
        t.frozen = values.into();
        t
    }

    /// Values of every `stop_gradient` output, in call order.
    pub fn stopped_values(&self) -> Vec<Tensor> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::StopGradient))
            .map(|n| n.value.clone())
            .collect()
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf (a parameter or an input we want gradients for).
    pub fn var(&mut self, value: Tensor) -> Var {
        let requires_grad = self.grad_enabled;
        self.push_raw(value, Op::Leaf, requires_grad)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push(name, t, op, &[a, b])
    }

    fn map(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push(name, t, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn bcast(&mut self, name: &'static str, a: Var, b: Var, mul: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sa, sb) {
            return Err(Error::shape(name, format!("{sb:?} is not a suffix of {sa:?}")));
        }
        let va = self.value(a);
        let vb = self.value(b).data();
        let n = vb.len().max(1);
        let data = va
            .data()
            .chunks(n)
            .flat_map(|chunk| {
                chunk
                    .iter()
                    .zip(vb)
                    .map(move |(&x, &y)| if mul { x * y } else { x + y })
            })
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let op = if mul { Op::MulBcast(a, b) } else { Op::AddBcast(a, b) };
        self.push(name, t, op, &[a, b])
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (b repeats over leading axes).
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bcast("add_bcast", a, b, false)
    }

    /// `a * b` where `b`'s shape is a suffix of `a`'s.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bcast("mul_bcast", a, b, true)
    }

    /// `[..., 1] -> [..., n]` by repetition.
    pub fn expand_last(&mut self, a: Var, n: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.last() != Some(&1) {
            return Err(Error::shape("expand_last", format!("last axis of {sa:?} must be 1")));
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let data = self
            .value(a)
            .data()
            .iter()
            .flat_map(|&x| std::iter::repeat_n(x, n))
            .collect();
        let t = Tensor::new(shape, data)?;
        self.push("expand_last", t, Op::ExpandLast(a), &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    /// `a: [..., m, k] · b: [k, n] -> [..., m, n]`; `b` is shared across leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let k = sb[0];
        let n = sb[1];
        let rows = numel(&sa) / k.max(1);
        let mut out = vec![0.0; rows * n];
        gemm(self.value(a).data(), self.value(b).data(), &mut out, rows, k, n);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let t = Tensor::new(shape, out)?;
        self.push("matmul", t, Op::MatMul(a, b), &[a, b])
    }

    /// Batched product `[B..., m, k] · [B..., k, n]` with identical batch axes.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 2] {
            return Err(Error::shape("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        let batch = numel(&sa[..r - 2]);
        let mut out = vec![0.0; batch * m * n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for bi in 0..batch {
            gemm(
                &va[bi * m * k..(bi + 1) * m * k],
                &vb[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = sa;
        shape[r - 1] = n;
        let t = Tensor::new(shape, out)?;
        self.push("bmm", t, Op::BatchMatMul(a, b), &[a, b])
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if axes.len() != sa.len() || axes.iter().any(|&x| x >= sa.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::shape("permute", format!("axes {axes:?} for {sa:?}")));
        }
        let (shape, data) = permute_data(self.value(a).data(), &sa, axes);
        let t = Tensor::new(shape, data)?;
        self.push("permute", t, Op::Permute(a, axes.to_vec()), &[a])
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::shape("transpose", "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        self.push("reshape", t, Op::Reshape(a), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let d = self.shape(p)[axis];
                let src = self.value(p).data();
                out.extend_from_slice(&src[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        self.push("concat", t, Op::Concat(parts.to_vec(), axis), parts)
    }

    /// Sub-range `[start, end)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || start > end || end > sa[axis] {
            return Err(Error::shape("slice", format!("[{start},{end}) on axis {axis} of {sa:?}")));
        }
        let (outer, d, inner) = axis_split(&sa, axis);
        let len = end - start;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * d + start) * inner..(o * d + end) * inner]);
        }
        let mut shape = sa;
        shape[axis] = len;
        let t = Tensor::new(shape, out)?;
        self.push("slice", t, Op::Slice(a, axis, start), &[a])
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(Error::shape("sum_axis", format!("axis {axis} for {sa:?}")));
        }
        let (outer, d, inner) = axis_split(&sa, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..d {
                let row = &src[(o * d + j) * inner..(o * d + j + 1) * inner];
                for (acc, x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        let mut shape = sa;
        shape.remove(axis);
        let t = Tensor::new(shape, out)?;
        self.push("sum_axis", t, Op::SumAxis(a, axis), &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let d = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::shape("mean_axis", format!("axis {axis}")))?;
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / d as f64)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map("log", a, f64::ln, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.map("sqrt", a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.map("square", a, |x| x * x, Op::Square(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map("gelu", a, gelu, Op::Gelu(a))
    }

    /// `max(a, floor)`; gradient passes only where `a > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.map("clamp_min", a, |x| x.max(floor), Op::ClampMin(a, floor))
    }

    /// Softmax of `a / temperature` over the last axis.
    pub fn softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "softmax temperature must be > 0, got {temperature}"
            )));
        }
        let va = self.value(a);
        let d = *va.shape().last().unwrap_or(&1);
        let mut out = Vec::with_capacity(va.len());
        for row in va.data().chunks(d.max(1)) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut s = 0.0;
            for &x in row {
                let e = ((x - mx) / temperature).exp();
                s += e;
                out.push(e);
            }
            for e in &mut out[start..] {
                *e /= s;
            }
        }
        let t = Tensor::new(va.shape().to_vec(), out)?;
        self.push("softmax", t, Op::Softmax(a, temperature), &[a])
    }

    /// Normalize the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let va = self.value(a);
        let d = *va.shape().last().unwrap_or(&1);
        let mut out = Vec::with_capacity(va.len());
        let mut rstds = Vec::with_capacity(va.len() / d.max(1));
        for row in va.data().chunks(d.max(1)) {
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            rstds.push(rstd);
            out.extend(row.iter().map(|x| (x - mu) * rstd));
        }
        let t = Tensor::new(va.shape().to_vec(), out)?;
        self.push("layer_norm", t, Op::LayerNorm(a, rstds), &[a])
    }

    /// Identity on values; blocks all gradient flow.
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        let t = match self.frozen.pop_front() {
            Some(t) if t.shape() == self.shape(a) => t,
            Some(_) => return Err(Error::shape("stop_gradient", "frozen value shape mismatch")),
            None => self.value(a).clone(),
        };
        Ok(self.push_raw(t, Op::StopGradient, false))
    }

    /// Rows of the last axis divided by `max(‖row‖₂, eps)`.
    pub fn l2_normalize(&mut self, a: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(a).last().unwrap_or(&1);
        let sq = self.square(a)?;
        let r = self.shape(a).len();
        let ss = self.sum_axis(sq, r - 1)?;
        let mut keep = self.shape(ss).to_vec();
        keep.push(1);
        let ss = self.reshape(ss, &keep)?;
        let norm = self.sqrt_guarded(ss, eps * eps)?;
        let norm = self.clamp_min(norm, eps)?;
        let norm = self.expand_last(norm, d)?;
        self.div(a, norm)
    }

    // sqrt(max(x, floor)) keeps the derivative finite at zero-norm rows.
    fn sqrt_guarded(&mut self, a: Var, floor: f64) -> Result<Var> {
        let c = self.clamp_min(a, floor)?;
        self.sqrt(c)
    }

    /// `softmax(q kᵀ / √d + mask) v` over `[B, n, d]` inputs; `mask` is an
    /// additive `[n_q, n_k]` constant.
    pub fn scaled_dot_product_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&Tensor>,
    ) -> Result<(Var, Var)> {
        let d = *self.shape(q).last().unwrap_or(&1);
        let kt = self.transpose(k)?;
        let scores = self.bmm(q, kt)?;
        let mut scores = self.scale(scores, 1.0 / (d as f64).sqrt())?;
        if let Some(m) = mask {
            let mv = self.constant(m.clone());
            scores = self.add_bcast(scores, mv)?;
        }
        let weights = self.softmax(scores, 1.0)?;
        let out = self.bmm(weights, v)?;
        Ok((out, weights))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let ls = self.shape(loss);
        if numel(ls) != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.and_then(|g| {
                    let n = &self.nodes[i];
                    if n.requires_grad {
                        Tensor::new(n.value.shape().to_vec(), g).ok()
                    } else {
                        None
                    }
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                acc(*a, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &|s| {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(vb) {
                        *s += g * y;
                    }
                });
                acc(*b, &|s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(va) {
                        *s += g * x;
                    }
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &|s| {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(vb) {
                        *s += g / y;
                    }
                });
                acc(*b, &|s| {
                    for (((s, g), x), y) in s.iter_mut().zip(g).zip(va).zip(vb) {
                        *s -= g * x / (y * y);
                    }
                });
            }
            Op::AddBcast(a, b) => {
                acc(*a, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                let n = nodes[b.0].value.len().max(1);
                acc(*b, &|s| {
                    for chunk in g.chunks(n) {
                        s.iter_mut().zip(chunk).for_each(|(s, g)| *s += g);
                    }
                });
            }
            Op::MulBcast(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let n = vb.len().max(1);
                acc(*a, &|s| {
                    for (sc, gc) in s.chunks_mut(n).zip(g.chunks(n)) {
                        for ((s, g), y) in sc.iter_mut().zip(gc).zip(vb) {
                            *s += g * y;
                        }
                    }
                });
                acc(*b, &|s| {
                    for (gc, xc) in g.chunks(n).zip(va.chunks(n)) {
                        for ((s, g), x) in s.iter_mut().zip(gc).zip(xc) {
                            *s += g * x;
                        }
                    }
                });
            }
            Op::ExpandLast(a) => {
                let n = *node.value.shape().last().unwrap();
                acc(*a, &|s| {
                    for (s, gc) in s.iter_mut().zip(g.chunks(n.max(1))) {
                        *s += gc.iter().sum::<f64>();
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g));
            }
            Op::AddScalar(a) => {
                acc(*a, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::MatMul(a, b) => {
                let sb = nodes[b.0].value.shape();
                let (k, n) = (sb[0], sb[1]);
                let rows = nodes[a.0].value.len() / k.max(1);
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &|s| gemm_nt(g, vb, s, rows, n, k));
                acc(*b, &|s| gemm_tn(va, g, s, rows, k, n));
            }
            Op::BatchMatMul(a, b) => {
                let sa = nodes[a.0].value.shape();
                let sb = nodes[b.0].value.shape();
                let r = sa.len();
                let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
                let batch = numel(&sa[..r - 2]);
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &|s| {
                    for bi in 0..batch {
                        gemm_nt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &vb[bi * k * n..(bi + 1) * k * n],
                            &mut s[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                acc(*b, &|s| {
                    for bi in 0..batch {
                        gemm_tn(
                            &va[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut s[bi * k * n..(bi + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                let (_, back) = permute_data(g, node.value.shape(), &inv);
                acc(*a, &|s| s.iter_mut().zip(&back).for_each(|(s, g)| *s += g));
            }
            Op::Reshape(a) => {
                acc(*a, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Concat(parts, axis) => {
                let shape = node.value.shape();
                let (outer, total, inner) = axis_split(shape, *axis);
                let mut offset = 0;
                for p in parts {
                    let d = nodes[p.0].value.shape()[*axis];
                    let off = offset;
                    acc(*p, &|s| {
                        for o in 0..outer {
                            let src = &g[(o * total + off) * inner..(o * total + off + d) * inner];
                            s[o * d * inner..(o + 1) * d * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(s, g)| *s += g);
                        }
                    });
                    offset += d;
                }
            }
            Op::Slice(a, axis, start) => {
                let sa = nodes[a.0].value.shape();
                let (outer, d, inner) = axis_split(sa, *axis);
                let len = node.value.shape()[*axis];
                acc(*a, &|s| {
                    for o in 0..outer {
                        let dst = &mut s[(o * d + start) * inner..(o * d + start + len) * inner];
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(s, g)| *s += g);
                    }
                });
            }
            Op::SumAxis(a, axis) => {
                let sa = nodes[a.0].value.shape();
                let (outer, d, inner) = axis_split(sa, *axis);
                acc(*a, &|s| {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for j in 0..d {
                            s[(o * d + j) * inner..(o * d + j + 1) * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(s, g)| *s += g);
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                let g0 = g[0];
                acc(*a, &|s| s.iter_mut().for_each(|s| *s += g0));
            }
            Op::Exp(a) => {
                let y = node.value.data();
                acc(*a, &|s| {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(y) {
                        *s += g * y;
                    }
                });
            }
            Op::Log(a) => {
                let x = val(*a);
                acc(*a, &|s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(x) {
                        *s += g / x;
                    }
                });
            }
            Op::Sqrt(a) => {
                let y = node.value.data();
                acc(*a, &|s| {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(y) {
                        *s += g * 0.5 / y;
                    }
                });
            }
            Op::Square(a) => {
                let x = val(*a);
                acc(*a, &|s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(x) {
                        *s += 2.0 * g * x;
                    }
                });
            }
            Op::Relu(a) => {
                let x = val(*a);
                acc(*a, &|s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(x) {
                        if *x > 0.0 {
                            *s += g;
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let x = val(*a);
                acc(*a, &|s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(x) {
                        *s += g * gelu_grad(*x);
                    }
                });
            }
            Op::ClampMin(a, floor) => {
                let x = val(*a);
                acc(*a, &|s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(x) {
                        if *x > *floor {
                            *s += g;
                        }
                    }
                });
            }
            Op::Softmax(a, tau) => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap_or(&1);
                acc(*a, &|s| {
                    for ((sc, gc), yc) in s.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                        let dot: f64 = gc.iter().zip(yc).map(|(g, y)| g * y).sum();
                        for ((s, g), y) in sc.iter_mut().zip(gc).zip(yc) {
                            *s += y * (g - dot) / tau;
                        }
                    }
                });
            }
            Op::LayerNorm(a, rstds) => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap_or(&1);
                acc(*a, &|s| {
                    for (((sc, gc), yc), rstd) in s
                        .chunks_mut(d)
                        .zip(g.chunks(d))
                        .zip(y.chunks(d))
                        .zip(rstds)
                    {
                        let mg = gc.iter().sum::<f64>() / d as f64;
                        let mgy = gc.iter().zip(yc).map(|(g, y)| g * y).sum::<f64>() / d as f64;
                        for ((s, g), y) in sc.iter_mut().zip(gc).zip(yc) {
                            *s += rstd * (g - mg - y * mgy);
                        }
                    }
                });
            }
        }
    }
}
