//! Reverse-mode tape.
//!
//! A [`Graph`] records every op executed on it. [`Graph::backward`] consumes
//! the tape, replays it in reverse and returns the adjoints. Adjoints add up
//! when a node feeds several consumers.

use std::collections::HashMap;

use super::kernels::{self, ConvGeometry};
use crate::error::{shape_err, Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Stride, dilation, grouping and zero padding of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvSpec {
    /// Symmetric "same" padding `⌊(k_eff − 1) / 2⌋` with `k_eff = d·(k − 1) + 1`.
    pub fn same(kh: usize, kw: usize, stride: usize, dilation: usize, groups: usize) -> Self {
        let pad = |k: usize| (dilation * (k - 1)) / 2;
        Self { stride, dilation, groups, pad_h: pad(kh), pad_w: pad(kw) }
    }

    pub fn valid(stride: usize) -> Self {
        Self { stride, dilation: 1, groups: 1, pad_h: 0, pad_w: 0 }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulChannel(Var, Var),
    MulScalarAt(Var, Var, usize),
    Gelu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    MeanAxis(Var, usize),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    Softmax(Var, usize),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry, batch: usize },
    Bilinear(Var, Var),
    Resize(Var),
    HaarDwt(Var),
    HaarIdwt(Var),
    Cosine(Var, Var),
    HeadSum(Var, Var, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub const LAYERNORM_EPS: f64 = 1e-6;
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Adjoints of every trainable parameter that took part in the forward pass.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().filter_map(|&(id, v)| self.grads[v.0].as_ref().map(|g| (id, g)))
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu(x: f64) -> (f64, f64) {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = K * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * K * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that never receives an adjoint.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose adjoint is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Places a stored parameter on the tape (once per graph).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.params.insert(id, v);
        v
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("{op}: operand shapes {:?} and {:?} differ", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        let t = self.zip_map(a, b, |x, y| x / y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Div(a, b), rg))
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let t = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(&[x]);
        self.push(t, Op::Affine(x, scale), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    fn row_check(&self, x: Var, r: Var, op: &str) -> Result<usize> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(r) != [d] {
            return shape_err(format!(
                "{op}: row vector {:?} does not match trailing extent of {:?}",
                self.shape(r),
                self.shape(x)
            ));
        }
        Ok(d)
    }

    /// Adds a `[D]` vector to every row of `x[..., D]`.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let d = self.row_check(x, r, "add_row")?;
        let rv = self.value(r).data().to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(d) {
            row.iter_mut().zip(&rv).for_each(|(a, b)| *a += b);
        }
        let rg = self.rg(&[x, r]);
        Ok(self.push(t, Op::AddRow(x, r), rg))
    }

    /// Multiplies every row of `x[..., D]` elementwise by a `[D]` vector.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let d = self.row_check(x, r, "mul_row")?;
        let rv = self.value(r).data().to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(d) {
            row.iter_mut().zip(&rv).for_each(|(a, b)| *a *= b);
        }
        let rg = self.rg(&[x, r]);
        Ok(self.push(t, Op::MulRow(x, r), rg))
    }

    /// Scales channel `c` of `x[C, ...]` by `g[c]`.
    pub fn mul_channel(&mut self, x: Var, g: Var) -> Result<Var> {
        let c = self.shape(x)[0];
        if self.shape(g) != [c] {
            return shape_err(format!("mul_channel: gate {:?} does not match {:?}", self.shape(g), self.shape(x)));
        }
        let gv = self.value(g).data().to_vec();
        let mut t = self.value(x).clone();
        let plane = t.numel() / c.max(1);
        for (ch, p) in t.data_mut().chunks_mut(plane.max(1)).enumerate() {
            p.iter_mut().for_each(|v| *v *= gv[ch]);
        }
        let rg = self.rg(&[x, g]);
        Ok(self.push(t, Op::MulChannel(x, g), rg))
    }

    /// `x · s[idx]` for a vector-valued `s`.
    pub fn mul_scalar_at(&mut self, x: Var, s: Var, idx: usize) -> Result<Var> {
        if idx >= self.value(s).numel() {
            return shape_err(format!("mul_scalar_at: index {idx} out of range for {:?}", self.shape(s)));
        }
        let k = self.value(s).data()[idx];
        let t = self.value(x).map(|v| v * k);
        let rg = self.rg(&[x, s]);
        Ok(self.push(t, Op::MulScalarAt(x, s, idx), rg))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| gelu(v).0);
        let rg = self.rg(&[x]);
        self.push(t, Op::Gelu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(t, Op::Sigmoid(x), rg)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let t = self.value(x).map(softplus);
        let rg = self.rg(&[x]);
        self.push(t, Op::Softplus(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(t, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let t = Tensor::scalar(self.value(x).sum() / n);
        let rg = self.rg(&[x]);
        self.push(t, Op::Mean(x), rg)
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return shape_err(format!("mean_axis: axis {axis} invalid for {shape:?}"));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += src[(o * n + k) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let mut new_shape = shape.clone();
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(new_shape, out)?, Op::MeanAxis(x, axis), rg))
    }

    /// `[M, K] × [K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err(format!("matmul: incompatible {sa:?} × {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `[M, K] × [N, K]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return shape_err(format!("matmul_nt: incompatible {sa:?} × {sb:?}ᵀ"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), rg))
    }

    /// Fully connected layer: `x[N, in] · w[out, in]ᵀ + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul_nt(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return shape_err(format!("transpose: expected rank 2, got {s:?}"));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return shape_err(format!("concat: axis {axis} invalid for {first:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return shape_err(format!("concat: {s:?} incompatible with {first:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis];
                let src = self.value(p).data();
                out.extend_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return shape_err(format!("slice: [{start}, {}) out of range on axis {axis} of {shape:?}", start + len));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(new_shape, out)?, Op::Slice(x, axis, start), rg))
    }

    /// Selects rows (axis 0) by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = shape[0];
        let row = shape[1..].iter().product::<usize>();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return shape_err(format!("gather_rows: index {bad} out of range for {shape:?}"));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            out.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut new_shape = shape;
        new_shape[0] = idx.len();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(new_shape, out)?, Op::GatherRows(x, idx.to_vec()), rg))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return shape_err(format!("softmax: axis {axis} invalid for {shape:?}"));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let mut t = self.value(x).clone();
        let d = t.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).map(|k| d[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for k in 0..n {
                    let e = (d[at(k)] - m).exp();
                    d[at(k)] = e;
                    s += e;
                }
                for k in 0..n {
                    d[at(k)] /= s;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax(x, axis), rg))
    }

    /// Normalizes the trailing axis to zero mean and unit population variance,
    /// then applies `gamma`, `beta`. The variance is floored at [`LAYERNORM_EPS`].
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if d == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return shape_err(format!(
                "layernorm: affine {:?}/{:?} vs input {:?}",
                self.shape(gamma),
                self.shape(beta),
                self.shape(x)
            ));
        }
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let src = self.value(x).data();
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / var.max(LAYERNORM_EPS).sqrt();
            // A negative rstd marks the floored branch, where the variance is constant.
            rstd[r] = if var > LAYERNORM_EPS { s } else { -s };
            for k in 0..d {
                let xh = (row[k] - mean) * s;
                xhat[r * d + k] = xh;
                out[r * d + k] = xh * gv[k] + bv[k];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    /// Cross-correlation of `x` (`[C, H, W]` or `[N, C, H, W]`) with
    /// `w[C_out, C_in/groups, kh, kw]` and optional bias `[C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (batch, c_in, h, wd) = match *xs.as_slice() {
            [c, h, w] => (0, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            _ => return shape_err(format!("conv2d: input must be [C,H,W] or [N,C,H,W], got {xs:?}")),
        };
        if spec.stride == 0 || spec.dilation == 0 || spec.groups == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv2d: stride {}, dilation {} and groups {} must be positive",
                spec.stride, spec.dilation, spec.groups
            )));
        }
        if ws.len() != 4 {
            return shape_err(format!("conv2d: kernel must be [C_out, C_in/groups, kh, kw], got {ws:?}"));
        }
        let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
        if c_in % spec.groups != 0 || c_out % spec.groups != 0 || ws[1] * spec.groups != c_in {
            return shape_err(format!(
                "conv2d: kernel {ws:?} with groups={} does not fit {c_in} input channels",
                spec.groups
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return shape_err(format!("conv2d: bias {:?} vs {c_out} outputs", self.shape(b)));
            }
        }
        let k_eff_h = spec.dilation * (kh - 1) + 1;
        let k_eff_w = spec.dilation * (kw - 1) + 1;
        if h + 2 * spec.pad_h < k_eff_h || wd + 2 * spec.pad_w < k_eff_w {
            return shape_err(format!(
                "conv2d: kernel {kh}x{kw} (dilation {}) larger than padded {h}x{wd}",
                spec.dilation
            ));
        }
        let geom = ConvGeometry {
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            stride: spec.stride,
            dilation: spec.dilation,
            groups: spec.groups,
            pad_h: spec.pad_h,
            pad_w: spec.pad_w,
        };
        let (ho, wo) = (geom.out_h(), geom.out_w());
        let images = batch.max(1);
        let (in_sz, out_sz) = (c_in * h * wd, c_out * ho * wo);
        let mut out = vec![0.0; images * out_sz];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            for n in 0..images {
                kernels::conv2d_forward(
                    &geom,
                    &xv[n * in_sz..(n + 1) * in_sz],
                    wv,
                    bv,
                    &mut out[n * out_sz..(n + 1) * out_sz],
                );
            }
        }
        let shape = if batch == 0 { vec![c_out, ho, wo] } else { vec![batch, c_out, ho, wo] };
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv2d { x, w, b, geom, batch }, rg))
    }

    /// Samples `grid[C, H, W]` at normalized `points[N, 2]` (`x`, `y` in `[0, 1]`).
    /// Points outside the unit square clamp to the border.
    pub fn bilinear_sample(&mut self, grid: Var, points: Var) -> Result<Var> {
        let gs = self.shape(grid).to_vec();
        let ps = self.shape(points).to_vec();
        if gs.len() != 3 || ps.len() != 2 || ps[1] != 2 {
            return shape_err(format!("bilinear_sample: grid {gs:?} / points {ps:?}"));
        }
        if !self.value(points).all_finite() {
            return Err(Error::InvalidArgument("bilinear_sample: non-finite sample point".into()));
        }
        let (c, h, w) = (gs[0], gs[1], gs[2]);
        let n = ps[0];
        let mut out = vec![0.0; n * c];
        kernels::bilinear_forward(self.value(grid).data(), c, h, w, self.value(points).data(), &mut out);
        let rg = self.rg(&[grid, points]);
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::Bilinear(grid, points), rg))
    }

    /// Bilinear resize of `[C, H, W]` with half-pixel centers.
    pub fn resize(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || oh == 0 || ow == 0 {
            return shape_err(format!("resize: input {s:?} to {oh}x{ow}"));
        }
        let mut out = vec![0.0; s[0] * oh * ow];
        kernels::resize_forward(self.value(x).data(), s[0], s[1], s[2], oh, ow, &mut out);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![s[0], oh, ow], out)?, Op::Resize(x), rg))
    }

    /// Orthonormal Haar analysis `[C, H, W] → [4C, H/2, W/2]` (bands LL, LH, HL, HH).
    pub fn haar_dwt(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) || s[1] == 0 || s[2] == 0 {
            return shape_err(format!("haar_dwt: spatial extents of {s:?} must be even"));
        }
        let mut out = vec![0.0; self.value(x).numel()];
        kernels::haar_dwt(self.value(x).data(), s[0], s[1], s[2], &mut out);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![4 * s[0], s[1] / 2, s[2] / 2], out)?, Op::HaarDwt(x), rg))
    }

    /// Haar synthesis `[4C, h, w] → [C, 2h, 2w]`.
    pub fn haar_idwt(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || !s[0].is_multiple_of(4) {
            return shape_err(format!("haar_idwt: channel count of {s:?} must be a multiple of 4"));
        }
        let mut out = vec![0.0; self.value(x).numel()];
        kernels::haar_idwt(self.value(x).data(), s[0] / 4, s[1], s[2], &mut out);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![s[0] / 4, 2 * s[1], 2 * s[2]], out)?, Op::HaarIdwt(x), rg))
    }

    /// Cosine between each query row `q[N, D]` and its `P` candidates `s[N, P, D]`.
    pub fn cosine(&mut self, q: Var, s: Var) -> Result<Var> {
        let (qs, ss) = (self.shape(q).to_vec(), self.shape(s).to_vec());
        if qs.len() != 2 || ss.len() != 3 || ss[0] != qs[0] || ss[2] != qs[1] {
            return shape_err(format!("cosine: query {qs:?} vs samples {ss:?}"));
        }
        let (n, p, d) = (ss[0], ss[1], ss[2]);
        let (qv, sv) = (self.value(q).data(), self.value(s).data());
        let mut out = vec![0.0; n * p];
        for i in 0..n {
            let qi = &qv[i * d..(i + 1) * d];
            let qn = qi.iter().map(|v| v * v).sum::<f64>().sqrt();
            for k in 0..p {
                let sk = &sv[(i * p + k) * d..(i * p + k + 1) * d];
                let sn = sk.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dot: f64 = qi.iter().zip(sk).map(|(a, b)| a * b).sum();
                out[i * p + k] = dot / (qn * sn).max(COSINE_EPS);
            }
        }
        let rg = self.rg(&[q, s]);
        Ok(self.push(Tensor::new(vec![n, p], out)?, Op::Cosine(q, s), rg))
    }

    /// Per-head weighted sum: `out[n, h·dₕ + c] = Σ_g a[n, h·G + g] · s[n, h·G + g, h·dₕ + c]`
    /// with `G = P / heads` and `dₕ = D / heads`.
    pub fn head_sum(&mut self, a: Var, s: Var, heads: usize) -> Result<Var> {
        let (as_, ss) = (self.shape(a).to_vec(), self.shape(s).to_vec());
        if as_.len() != 2
            || ss.len() != 3
            || ss[0] != as_[0]
            || ss[1] != as_[1]
            || heads == 0
            || ss[1] % heads != 0
            || ss[2] % heads != 0
        {
            return shape_err(format!("head_sum: weights {as_:?}, samples {ss:?}, heads {heads}"));
        }
        let (n, p, d) = (ss[0], ss[1], ss[2]);
        let (gsz, dh) = (p / heads, d / heads);
        let (av, sv) = (self.value(a).data(), self.value(s).data());
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for h in 0..heads {
                let o = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                for g in 0..gsz {
                    let k = h * gsz + g;
                    let wgt = av[i * p + k];
                    let src = &sv[(i * p + k) * d + h * dh..(i * p + k) * d + (h + 1) * dh];
                    o.iter_mut().zip(src).for_each(|(x, y)| *x += wgt * y);
                }
            }
        }
        let rg = self.rg(&[a, s]);
        Ok(self.push(Tensor::new(vec![n, d], out)?, Op::HeadSum(a, s, heads), rg))
    }

    /// Replays the tape from `root` (which must be a single value) and returns
    /// all adjoints. The tape is consumed.
    pub fn backward(self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return shape_err(format!("backward: root must be scalar, got {:?}", self.shape(root)));
        }
        let Graph { nodes, params } = self;
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(nodes[root.0].value.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if nodes[i].requires_grad {
                backprop(&nodes, i, &gy, &mut grads);
            }
            grads[i] = Some(gy);
        }
        let mut params: Vec<(ParamId, Var)> = params.into_iter().filter(|(_, v)| nodes[v.0].requires_grad).collect();
        params.sort_by_key(|(id, _)| *id);
        Ok(Gradients { grads, params })
    }
}

/// Adds `delta` into the adjoint slot of `v` if that node tracks gradients.
fn acc(nodes: &[Node], grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()));
    f(slot.data_mut());
}

fn backprop(nodes: &[Node], i: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
    let g = gy.data();
    let y = nodes[i].value.data();
    let val = |v: Var| nodes[v.0].value.data();
    let shape = |v: Var| nodes[v.0].value.shape();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(nodes, grads, *a, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            acc(nodes, grads, *b, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
        }
        Op::Sub(a, b) => {
            acc(nodes, grads, *a, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            acc(nodes, grads, *b, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            acc(nodes, grads, *a, |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * bv[k];
                }
            });
            acc(nodes, grads, *b, |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * av[k];
                }
            });
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            acc(nodes, grads, *a, |d| {
                for k in 0..d.len() {
                    d[k] += g[k] / bv[k];
                }
            });
            acc(nodes, grads, *b, |d| {
                for k in 0..d.len() {
                    d[k] -= g[k] * av[k] / (bv[k] * bv[k]);
                }
            });
        }
        Op::Affine(x, s) => acc(nodes, grads, *x, |d| d.iter_mut().zip(g).for_each(|(a, b)| *a += s * b)),
        Op::AddRow(x, r) => {
            let dim = shape(*r)[0];
            acc(nodes, grads, *x, |d| d.iter_mut().zip(g).for_each(|(a, b)| *a += b));
            acc(nodes, grads, *r, |d| {
                for row in g.chunks(dim) {
                    d.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
            });
        }
        Op::MulRow(x, r) => {
            let dim = shape(*r)[0];
            let (xv, rv) = (val(*x), val(*r));
            acc(nodes, grads, *x, |d| {
                for (k, v) in d.iter_mut().enumerate() {
                    *v += g[k] * rv[k % dim];
                }
            });
            acc(nodes, grads, *r, |d| {
                for (k, &gk) in g.iter().enumerate() {
                    d[k % dim] += gk * xv[k];
                }
            });
        }
        Op::MulChannel(x, c) => {
            let ch = shape(*c)[0];
            let plane = (g.len() / ch.max(1)).max(1);
            let (xv, cv) = (val(*x), val(*c));
            acc(nodes, grads, *x, |d| {
                for (k, v) in d.iter_mut().enumerate() {
                    *v += g[k] * cv[k / plane];
                }
            });
            acc(nodes, grads, *c, |d| {
                for (k, &gk) in g.iter().enumerate() {
                    d[k / plane] += gk * xv[k];
                }
            });
        }
        Op::MulScalarAt(x, s, idx) => {
            let (xv, k) = (val(*x), val(*s)[*idx]);
            acc(nodes, grads, *x, |d| d.iter_mut().zip(g).for_each(|(a, b)| *a += k * b));
            acc(nodes, grads, *s, |d| d[*idx] += g.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>());
        }
        Op::Gelu(x) => {
            let xv = val(*x);
            acc(nodes, grads, *x, |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * gelu(xv[k]).1;
                }
            });
        }
        Op::Sigmoid(x) => acc(nodes, grads, *x, |d| {
            for k in 0..d.len() {
                d[k] += g[k] * y[k] * (1.0 - y[k]);
            }
        }),
        Op::Softplus(x) => {
            let xv = val(*x);
            acc(nodes, grads, *x, |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * sigmoid(xv[k]);
                }
            });
        }
        Op::Sum(x) => acc(nodes, grads, *x, |d| d.iter_mut().for_each(|v| *v += g[0])),
        Op::Mean(x) => acc(nodes, grads, *x, |d| {
            let s = g[0] / d.len().max(1) as f64;
            d.iter_mut().for_each(|v| *v += s);
        }),
        Op::MeanAxis(x, axis) => {
            let (outer, n, inner) = axis_split(shape(*x), *axis);
            acc(nodes, grads, *x, |d| {
                for o in 0..outer {
                    for k in 0..n {
                        for j in 0..inner {
                            d[(o * n + k) * inner + j] += g[o * inner + j] / n as f64;
                        }
                    }
                }
            });
        }
        Op::MatMul(a, b) => {
            let (sa, sb) = (shape(*a), shape(*b));
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let (av, bv) = (val(*a), val(*b));
            acc(nodes, grads, *a, |d| kernels::gemm(m, n, k, g, false, bv, true, d, 1.0));
            acc(nodes, grads, *b, |d| kernels::gemm(k, m, n, av, true, g, false, d, 1.0));
        }
        Op::MatMulNt(a, b) => {
            let (sa, sb) = (shape(*a), shape(*b));
            let (m, k, n) = (sa[0], sa[1], sb[0]);
            let (av, bv) = (val(*a), val(*b));
            acc(nodes, grads, *a, |d| kernels::gemm(m, n, k, g, false, bv, false, d, 1.0));
            acc(nodes, grads, *b, |d| kernels::gemm(n, m, k, g, true, av, false, d, 1.0));
        }
        Op::Transpose(x) => {
            let s = shape(*x);
            let (m, n) = (s[0], s[1]);
            acc(nodes, grads, *x, |d| {
                for r in 0..m {
                    for c in 0..n {
                        d[r * n + c] += g[c * m + r];
                    }
                }
            });
        }
        Op::Reshape(x) => acc(nodes, grads, *x, |d| d.iter_mut().zip(g).for_each(|(a, b)| *a += b)),
        Op::Concat(parts, axis) => {
            let out_shape = nodes[i].value.shape();
            let (outer, total, inner) = axis_split(out_shape, *axis);
            let mut offset = 0;
            for &p in parts {
                let n = shape(p)[*axis];
                acc(nodes, grads, p, |d| {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                        d[o * n * inner..(o + 1) * n * inner].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                });
                offset += n;
            }
        }
        Op::Slice(x, axis, start) => {
            let (outer, n, inner) = axis_split(shape(*x), *axis);
            let len = nodes[i].value.shape()[*axis];
            acc(nodes, grads, *x, |d| {
                for o in 0..outer {
                    let dst = &mut d[(o * n + start) * inner..(o * n + start + len) * inner];
                    dst.iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]).for_each(|(a, b)| *a += b);
                }
            });
        }
        Op::GatherRows(x, idx) => {
            let row = shape(*x)[1..].iter().product::<usize>();
            acc(nodes, grads, *x, |d| {
                for (r, &src) in idx.iter().enumerate() {
                    d[src * row..(src + 1) * row].iter_mut().zip(&g[r * row..(r + 1) * row]).for_each(|(a, b)| *a += b);
                }
            });
        }
        Op::Softmax(x, axis) => {
            let (outer, n, inner) = axis_split(shape(*x), *axis);
            acc(nodes, grads, *x, |d| {
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + j;
                        let dot: f64 = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..n {
                            d[at(k)] += y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
            });
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let dim = shape(*gamma)[0];
            let gv = val(*gamma);
            acc(nodes, grads, *gamma, |d| {
                for (k, &gk) in g.iter().enumerate() {
                    d[k % dim] += gk * xhat[k];
                }
            });
            acc(nodes, grads, *beta, |d| {
                for (k, &gk) in g.iter().enumerate() {
                    d[k % dim] += gk;
                }
            });
            acc(nodes, grads, *x, |d| {
                for (r, &s) in rstd.iter().enumerate() {
                    let base = r * dim;
                    let dxh: Vec<f64> = (0..dim).map(|k| g[base + k] * gv[k]).collect();
                    let m1 = dxh.iter().sum::<f64>() / dim as f64;
                    if s > 0.0 {
                        let m2 = (0..dim).map(|k| dxh[k] * xhat[base + k]).sum::<f64>() / dim as f64;
                        for k in 0..dim {
                            d[base + k] += s * (dxh[k] - m1 - xhat[base + k] * m2);
                        }
                    } else {
                        for k in 0..dim {
                            d[base + k] += -s * (dxh[k] - m1);
                        }
                    }
                }
            });
        }
        Op::Conv2d { x, w, b, geom, batch } => {
            let images = (*batch).max(1);
            let in_sz = geom.c_in * geom.h * geom.w;
            let out_sz = geom.c_out * geom.out_h() * geom.out_w();
            let (xv, wv) = (val(*x), val(*w));
            let wants_x = nodes[x.0].requires_grad;
            let wants_w = nodes[w.0].requires_grad;
            let wants_b = b.is_some_and(|b| nodes[b.0].requires_grad);
            let mut dx = wants_x.then(|| vec![0.0; xv.len()]);
            let mut dw = wants_w.then(|| vec![0.0; wv.len()]);
            let mut db = wants_b.then(|| vec![0.0; geom.c_out]);
            for n in 0..images {
                kernels::conv2d_backward(
                    geom,
                    &xv[n * in_sz..(n + 1) * in_sz],
                    wv,
                    &g[n * out_sz..(n + 1) * out_sz],
                    dx.as_mut().map(|d| &mut d[n * in_sz..(n + 1) * in_sz]),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
            }
            if let Some(dx) = dx {
                acc(nodes, grads, *x, |d| d.iter_mut().zip(&dx).for_each(|(a, b)| *a += b));
            }
            if let Some(dw) = dw {
                acc(nodes, grads, *w, |d| d.iter_mut().zip(&dw).for_each(|(a, b)| *a += b));
            }
            if let (Some(db), Some(b)) = (db, b) {
                acc(nodes, grads, *b, |d| d.iter_mut().zip(&db).for_each(|(a, b)| *a += b));
            }
        }
        Op::Bilinear(grid, points) => {
            let s = shape(*grid);
            let (c, h, w) = (s[0], s[1], s[2]);
            let (gv, pv) = (val(*grid), val(*points));
            let mut dgrid = nodes[grid.0].requires_grad.then(|| vec![0.0; gv.len()]);
            let mut dpts = nodes[points.0].requires_grad.then(|| vec![0.0; pv.len()]);
            kernels::bilinear_backward(gv, c, h, w, pv, g, dgrid.as_deref_mut(), dpts.as_deref_mut());
            if let Some(dg) = dgrid {
                acc(nodes, grads, *grid, |d| d.iter_mut().zip(&dg).for_each(|(a, b)| *a += b));
            }
            if let Some(dp) = dpts {
                acc(nodes, grads, *points, |d| d.iter_mut().zip(&dp).for_each(|(a, b)| *a += b));
            }
        }
        Op::Resize(x) => {
            let s = shape(*x);
            let o = nodes[i].value.shape();
            let (c, h, w, oh, ow) = (s[0], s[1], s[2], o[1], o[2]);
            acc(nodes, grads, *x, |d| kernels::resize_backward(g, c, h, w, oh, ow, d));
        }
        Op::HaarDwt(x) => {
            let s = shape(*x);
            let mut tmp = vec![0.0; g.len()];
            kernels::haar_idwt(g, s[0], s[1] / 2, s[2] / 2, &mut tmp);
            acc(nodes, grads, *x, |d| d.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b));
        }
        Op::HaarIdwt(x) => {
            let s = shape(*x);
            let mut tmp = vec![0.0; g.len()];
            kernels::haar_dwt(g, s[0] / 4, 2 * s[1], 2 * s[2], &mut tmp);
            acc(nodes, grads, *x, |d| d.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b));
        }
        Op::Cosine(q, s) => {
            let ss = shape(*s);
            let (n, p, dim) = (ss[0], ss[1], ss[2]);
            let (qv, sv) = (val(*q), val(*s));
            let mut dq = vec![0.0; qv.len()];
            let mut ds = vec![0.0; sv.len()];
            for a in 0..n {
                let qi = &qv[a * dim..(a + 1) * dim];
                let qn = qi.iter().map(|v| v * v).sum::<f64>().sqrt();
                for k in 0..p {
                    let gk = g[a * p + k];
                    if gk == 0.0 {
                        continue;
                    }
                    let off = (a * p + k) * dim;
                    let sk = &sv[off..off + dim];
                    let sn = sk.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let denom = qn * sn;
                    if denom > COSINE_EPS {
                        let c = y[a * p + k];
                        for j in 0..dim {
                            dq[a * dim + j] += gk * (sk[j] / denom - c * qi[j] / (qn * qn));
                            ds[off + j] += gk * (qi[j] / denom - c * sk[j] / (sn * sn));
                        }
                    } else {
                        for j in 0..dim {
                            dq[a * dim + j] += gk * sk[j] / COSINE_EPS;
                            ds[off + j] += gk * qi[j] / COSINE_EPS;
                        }
                    }
                }
            }
            acc(nodes, grads, *q, |d| d.iter_mut().zip(&dq).for_each(|(a, b)| *a += b));
            acc(nodes, grads, *s, |d| d.iter_mut().zip(&ds).for_each(|(a, b)| *a += b));
        }
        Op::HeadSum(a, s, heads) => {
            let ss = shape(*s);
            let (n, p, dim) = (ss[0], ss[1], ss[2]);
            let (gsz, dh) = (p / heads, dim / heads);
            let (av, sv) = (val(*a), val(*s));
            acc(nodes, grads, *a, |d| {
                for r in 0..n {
                    for h in 0..*heads {
                        let go = &g[r * dim + h * dh..r * dim + (h + 1) * dh];
                        for q in 0..gsz {
                            let k = h * gsz + q;
                            let src = &sv[(r * p + k) * dim + h * dh..(r * p + k) * dim + (h + 1) * dh];
                            d[r * p + k] += go.iter().zip(src).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
            });
            acc(nodes, grads, *s, |d| {
                for r in 0..n {
                    for h in 0..*heads {
                        let go = &g[r * dim + h * dh..r * dim + (h + 1) * dh];
                        for q in 0..gsz {
                            let k = h * gsz + q;
                            let wgt = av[r * p + k];
                            let dst = &mut d[(r * p + k) * dim + h * dh..(r * p + k) * dim + (h + 1) * dh];
                            dst.iter_mut().zip(go).for_each(|(x, y)| *x += wgt * y);
                        }
                    }
                }
            });
        }
    }
}
