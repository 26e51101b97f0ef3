//! Recorded-operation reverse-mode differentiation.
//!
//! A [`Tape`] owns every intermediate value of one forward evaluation. Each
//! primitive appends a node holding its output and enough information to
//! compute vector-Jacobian products; [`Tape::backward`] sweeps the nodes in
//! reverse once. Nodes built only from constants are flagged as not needing
//! gradients and are skipped by the sweep.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::gemm::gemm;
use crate::params::ParamStore;
use crate::tensor::{numel, strides, DType, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct ResizeAxis {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl ResizeAxis {
    /// Half-pixel (align-corners=false) source coordinates, clamped at the
    /// low border like the common framework convention.
    fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let mut lo = Vec::with_capacity(dst);
        let mut hi = Vec::with_capacity(dst);
        let mut frac = Vec::with_capacity(dst);
        for i in 0..dst {
            let s = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            lo.push(i0);
            hi.push(i1);
            frac.push(if i1 == i0 { 0.0 } else { s - i0 as f64 });
        }
        ResizeAxis { lo, hi, frac }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Powf(Var, f64),
    Clamp(Var, f64, f64),
    BroadcastTo(Var),
    SumAxis(Var, usize),
    SumAll(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    GatherLast(Var, Vec<usize>),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv2d {
        x: Var,
        k: Var,
        stride: usize,
        pad: usize,
    },
    Bilinear {
        map: Var,
        pts: Var,
    },
    WeightedSample {
        map: Var,
        pts: Var,
        wts: Var,
    },
    Resize {
        x: Var,
        rows: ResizeAxis,
        cols: ResizeAxis,
    },
    Dropout(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros if `v` does not reach
    /// the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor::from_vec(&self.shapes[v.0], g.clone()),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(Var, String)>,
    param_index: HashMap<String, Var>,
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

/// For each output element of a numpy-style broadcast, the source offset.
fn powf_fast(x: f64, p: f64) -> f64 {
    if p == -1.0 {
        1.0 / x
    } else if p == -2.0 {
        1.0 / (x * x)
    } else if p == 1.0 {
        x
    } else if p == 2.0 {
        x * x
    } else {
        x.powf(p)
    }
}

/// Accumulates `f(i)` into the gradient buffer of `v`.
#[inline]
fn accumulate<F: Fn(usize) -> f64>(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, f: F) {
    if !nodes[v.0].needs_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(buf) => {
            for (i, b) in buf.iter_mut().enumerate() {
                *b += f(i);
            }
        }
        slot => *slot = Some((0..nodes[v.0].value.numel()).map(f).collect()),
    }
}

fn broadcast_map(src: &[usize], dst: &[usize]) -> Vec<usize> {
    let lead = dst.len() - src.len();
    let src_strides = strides(src);
    let mut eff = vec![0usize; dst.len()];
    for (i, &e) in src.iter().enumerate() {
        eff[lead + i] = if e == 1 { 0 } else { src_strides[i] };
    }
    let total = numel(dst);
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; dst.len()];
    let mut off = 0usize;
    for _ in 0..total {
        out.push(off);
        for ax in (0..dst.len()).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < dst[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn permute_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let eff: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let total = numel(shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; axes.len()];
    let mut off = 0usize;
    for _ in 0..total {
        map.push(off);
        for ax in (0..axes.len()).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, map)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn im2col(
    x: &[f64],
    (cin, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
) -> Vec<f64> {
    let mut col = vec![0.0; cin * kh * kw * ho * wo];
    for c in 0..cin {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (c * kh + dy) * kw + dx;
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &x[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(
    col: &[f64],
    dx_out: &mut [f64],
    (cin, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
) {
    for c in 0..cin {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (c * kh + dy) * kw + dx;
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx_out[(c * h + iy as usize) * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `[C, HW]` to `[HW, C]`.
fn to_hwc(chw: &[f64], c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * hw];
    for ch in 0..c {
        for (p, &v) in chw[ch * hw..(ch + 1) * hw].iter().enumerate() {
            out[p * c + ch] = v;
        }
    }
    out
}

fn from_hwc(hwc: &[f64], c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * hw];
    for p in 0..hw {
        for ch in 0..c {
            out[ch * hw + p] = hwc[p * c + ch];
        }
    }
    out
}

#[inline]
fn corner_weights(fx: f64, fy: f64) -> [f64; 4] {
    [
        (1.0 - fx) * (1.0 - fy),
        fx * (1.0 - fy),
        (1.0 - fx) * fy,
        fx * fy,
    ]
}

/// Bilinear corner weights and indices for one sampling point; corners that
/// fall outside the map are reported as `None` (zero padding).
#[inline]
fn bilinear_corners(u: f64, v: f64, h: usize, w: usize) -> ([Option<usize>; 4], f64, f64) {
    let x0f = u.floor();
    let y0f = v.floor();
    let fx = u - x0f;
    let fy = v - y0f;
    let mut idx = [None; 4];
    if x0f.is_finite()
        && y0f.is_finite()
        && x0f > -2.0
        && y0f > -2.0
        && x0f < w as f64
        && y0f < h as f64
    {
        let x0 = x0f as isize;
        let y0 = y0f as isize;
        for (slot, (yy, xx)) in [(y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)]
            .into_iter()
            .enumerate()
        {
            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                idx[slot] = Some(yy as usize * w + xx as usize);
            }
        }
    }
    (idx, fx, fy)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dtype_of(&self, vars: &[Var]) -> DType {
        vars.iter()
            .fold(DType::Real64, |d, v| d.join(self.nodes[v.0].value.dtype()))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let dtype = self.dtype_of(inputs);
        let needs_grad = self.needs(inputs);
        self.nodes.push(Node {
            value: value.with_dtype(dtype),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is tracked (retrieved through [`Gradients::get`]).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Brings a named parameter onto the tape. Repeated requests for the same
    /// name return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_index.get(name) {
            return Ok(v);
        }
        let v = self.leaf(store.get(name)?.clone());
        self.params.push((v, name.to_string()));
        self.param_index.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let (a, b) = self.align_scalar(op_name, a, b)?;
        let av = self.value(a);
        let bv = self.value(b);
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::from_vec(av.shape(), data);
        Ok(self.push(out, make(a, b), &[a, b]))
    }

    /// Equal shapes pass through; a one-element operand is broadcast.
    fn align_scalar(&mut self, op: &'static str, a: Var, b: Var) -> Result<(Var, Var)> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa == sb {
            return Ok((a, b));
        }
        if numel(&sb) == 1 {
            let b2 = self.reshape(b, &vec![1; sa.len()])?;
            return Ok((a, self.broadcast_to(b2, &sa)?));
        }
        if numel(&sa) == 1 {
            let a2 = self.reshape(a, &vec![1; sb.len()])?;
            return Ok((self.broadcast_to(a2, &sb)?, b));
        }
        Err(Error::ShapeMismatch {
            op,
            lhs: sa,
            rhs: sb,
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = {
            let av = self.value(a);
            Tensor::from_vec(av.shape(), av.data().iter().map(|&x| f(x)).collect())
        };
        self.push(out, op, &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                value: bad,
                lo: f64::MIN_POSITIVE,
                hi: f64::INFINITY,
            });
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// `x^p` for nonnegative `x`.
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| x < 0.0) {
            return Err(Error::Domain {
                op: "powf",
                value: bad,
                lo: 0.0,
                hi: f64::INFINITY,
            });
        }
        Ok(self.unary(a, |x| powf_fast(x, p), Op::Powf(a, p)))
    }

    /// Saturating clamp; the gradient is zero where the input is clipped.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    // ------------------------------------------------------------------ structure

    /// Numpy-style broadcast (right-aligned; size-1 axes expand).
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(a).to_vec();
        if src.len() > shape.len()
            || src
                .iter()
                .rev()
                .zip(shape.iter().rev())
                .any(|(&s, &d)| s != d && s != 1)
        {
            return Err(Error::ShapeMismatch {
                op: "broadcast_to",
                lhs: src,
                rhs: shape.to_vec(),
            });
        }
        if src == shape {
            return Ok(a);
        }
        let map = broadcast_map(&src, shape);
        let av = self.value(a).data();
        let data = map.iter().map(|&i| av[i]).collect();
        Ok(self.push(Tensor::from_vec(shape, data), Op::BroadcastTo(a), &[a]))
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(
                "sum_axis",
                format!("axis {axis} for shape {shape:?}"),
            ));
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let av = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..ext {
                let src = &av[(o * ext + k) * inner..(o * ext + k + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut new_shape = shape.clone();
        new_shape.remove(axis);
        Ok(self.push(
            Tensor::from_vec(&new_shape, out),
            Op::SumAxis(a, axis),
            &[a],
        ))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ext = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::invalid("mean_axis", format!("axis {axis}")))?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / ext as f64))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true))
        {
            return Err(Error::invalid(
                "permute",
                format!("axes {axes:?} for shape {shape:?}"),
            ));
        }
        let (out_shape, map) = permute_map(&shape, axes);
        let av = self.value(a).data();
        let data = map.iter().map(|&i| av[i]).collect();
        Ok(self.push(
            Tensor::from_vec(&out_shape, data),
            Op::Permute(a, axes.to_vec()),
            &[a],
        ))
    }

    /// 2-D transpose of the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let n = self.shape(a).len();
        if n < 2 {
            return Err(Error::invalid("transpose", "needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..n).collect();
        axes.swap(n - 2, n - 1);
        self.permute(a, &axes)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(
                *parts
                    .first()
                    .ok_or_else(|| Error::invalid("concat", "no inputs"))?,
            )
            .to_vec();
        if axis >= first.len() {
            return Err(Error::invalid(
                "concat",
                format!("axis {axis} for shape {first:?}"),
            ));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len()
                && s.iter()
                    .enumerate()
                    .all(|(i, &e)| i == axis || e == first[i]);
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let ext = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(
            Tensor::from_vec(&shape, out),
            Op::Concat(parts.to_vec(), axis),
            parts,
        ))
    }

    /// Stacks equally shaped tensors along a new axis.
    pub fn stack(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let mut expanded = Vec::with_capacity(parts.len());
        for &p in parts {
            let mut s = self.shape(p).to_vec();
            if axis > s.len() {
                return Err(Error::invalid("stack", format!("axis {axis}")));
            }
            s.insert(axis, 1);
            expanded.push(self.reshape(p, &s)?);
        }
        self.concat(&expanded, axis)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&av[(o * ext + start) * inner..(o * ext + start + len) * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        Ok(self.push(
            Tensor::from_vec(&new_shape, out),
            Op::Slice { x: a, axis, start },
            &[a],
        ))
    }

    /// Picks one entry of the last axis per row: `out[r] = x[r, index[r]]`.
    pub fn gather_last(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let c = *shape
            .last()
            .ok_or_else(|| Error::invalid("gather_last", "rank 0"))?;
        let rows = numel(&shape[..shape.len() - 1]);
        if index.len() != rows {
            return Err(Error::invalid(
                "gather_last",
                format!("{} indices for {rows} rows", index.len()),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= c) {
            return Err(Error::invalid("gather_last", format!("index {bad} >= {c}")));
        }
        let av = self.value(a).data();
        let data = index
            .iter()
            .enumerate()
            .map(|(r, &i)| av[r * c + i])
            .collect();
        Ok(self.push(
            Tensor::from_vec(&shape[..shape.len() - 1], data),
            Op::GatherLast(a, index.to_vec()),
            &[a],
        ))
    }

    // ---------------------------------------------------------------- dense layers

    /// Affine map over the last axis: `x[..., Din] @ w[Din, Dout] + b[Dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[0]) || bs != [ws[1]] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: xs,
                rhs: ws,
            });
        }
        let (din, dout) = (ws[0], ws[1]);
        let rows = numel(&xs[..xs.len() - 1]);
        let mut out = vec![0.0; rows * dout];
        let bv = self.value(b).data();
        for r in 0..rows {
            out[r * dout..(r + 1) * dout].copy_from_slice(bv);
        }
        gemm(
            rows,
            din,
            dout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            true,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        Ok(self.push(
            Tensor::from_vec(&shape, out),
            Op::Linear { x, w, b },
            &[x, w, b],
        ))
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let c = *shape
            .last()
            .filter(|&&c| c >= 1)
            .ok_or_else(|| Error::invalid("softmax_lastdim", "last extent must be >= 1"))?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        Ok(self.push(Tensor::from_vec(&shape, out), Op::Softmax(a), &[a]))
    }

    pub fn log_softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let c = *shape
            .last()
            .filter(|&&c| c >= 1)
            .ok_or_else(|| Error::invalid("log_softmax_lastdim", "last extent must be >= 1"))?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        Ok(self.push(Tensor::from_vec(&shape, out), Op::LogSoftmax(a), &[a]))
    }

    pub fn layer_normalize(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap_or(&0);
        if c == 0 || self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::ShapeMismatch {
                op: "layer_normalize",
                lhs: shape,
                rhs: self.shape(gain).to_vec(),
            });
        }
        if !(eps > 0.0) {
            return Err(Error::invalid("layer_normalize", "eps must be > 0"));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let bb = self.value(bias).data();
        let rows = xv.len() / c;
        let mut out = vec![0.0; xv.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                out[r * c + j] = (row[j] - mean) * rstd * g[j] + bb[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        Ok(self.push(
            Tensor::from_vec(&shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                rstd: rstds,
            },
            &[x, gain, bias],
        ))
    }

    /// Cross-correlation of `x[Cin, H, W]` with `k[Cout, Cin, kh, kw]`, zero
    /// padding `pad` on every border.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if xs.len() != 3 || ks.len() != 4 || ks[1] != xs[0] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ks,
            });
        }
        if stride == 0 || !matches!(ks[2], 1 | 3) || !matches!(ks[3], 1 | 3) {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {}x{} stride {stride} unsupported", ks[2], ks[3]),
            ));
        }
        let (cin, h, w) = (xs[0], xs[1], xs[2]);
        let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::invalid("conv2d", "kernel larger than padded input"));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let col = im2col(
            self.value(x).data(),
            (cin, h, w),
            (kh, kw),
            stride,
            pad,
            (ho, wo),
        );
        let mut out = vec![0.0; cout * ho * wo];
        gemm(
            cout,
            cin * kh * kw,
            ho * wo,
            self.value(k).data(),
            false,
            &col,
            false,
            &mut out,
            false,
        );
        Ok(self.push(
            Tensor::from_vec(&[cout, ho, wo], out),
            Op::Conv2d { x, k, stride, pad },
            &[x, k],
        ))
    }

    /// Samples `map[C, H, W]` at fractional pixel positions `pts[N, 2]` given
    /// as `(u, v)` = (column, row). Neighbours outside the map read as zero.
    pub fn bilinear_sample(&mut self, map: Var, pts: Var) -> Result<Var> {
        let ms = self.shape(map).to_vec();
        let ps = self.shape(pts).to_vec();
        if ms.len() != 3 || ps.len() != 2 || ps[1] != 2 {
            return Err(Error::ShapeMismatch {
                op: "bilinear_sample",
                lhs: ms,
                rhs: ps,
            });
        }
        let (c, h, w) = (ms[0], ms[1], ms[2]);
        let n = ps[0];
        let mv = self.value(map).data();
        let pv = self.value(pts).data();
        let plane = h * w;
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let (idx, fx, fy) = bilinear_corners(pv[2 * i], pv[2 * i + 1], h, w);
            let wts = [
                (1.0 - fx) * (1.0 - fy),
                fx * (1.0 - fy),
                (1.0 - fx) * fy,
                fx * fy,
            ];
            let row = &mut out[i * c..(i + 1) * c];
            for (slot, &wt) in idx.iter().zip(&wts) {
                if let Some(off) = *slot {
                    for (ch, o) in row.iter_mut().enumerate() {
                        *o += wt * mv[ch * plane + off];
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::from_vec(&[n, c], out),
            Op::Bilinear { map, pts },
            &[map, pts],
        ))
    }

    /// Attention-weighted bilinear gather: `out[n] = Σ_p wts[n, p] ·
    /// sample(map, pts[n, p])` for `map[C, H, W]`, `pts[N, P, 2]`, `wts[N, P]`.
    /// Equivalent to `bilinear_sample` followed by a weighted sum, without
    /// materializing the `[N, P, C]` intermediate.
    pub fn weighted_sample(&mut self, map: Var, pts: Var, wts: Var) -> Result<Var> {
        let ms = self.shape(map).to_vec();
        let ps = self.shape(pts).to_vec();
        let ws = self.shape(wts).to_vec();
        if ms.len() != 3 || ps.len() != 3 || ps[2] != 2 || ws != ps[..2] {
            return Err(Error::ShapeMismatch {
                op: "weighted_sample",
                lhs: ms,
                rhs: ps,
            });
        }
        let (c, h, w) = (ms[0], ms[1], ms[2]);
        let (n, np) = (ps[0], ps[1]);
        let hwc = to_hwc(self.value(map).data(), c, h * w);
        let pv = self.value(pts).data();
        let wv = self.value(wts).data();
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = &mut out[i * c..(i + 1) * c];
            for p in 0..np {
                let k = i * np + p;
                let a = wv[k];
                if a == 0.0 {
                    continue;
                }
                let (idx, fx, fy) = bilinear_corners(pv[2 * k], pv[2 * k + 1], h, w);
                let cw = corner_weights(fx, fy);
                for (slot, &cwt) in idx.iter().zip(&cw) {
                    if let Some(off) = *slot {
                        let src = &hwc[off * c..(off + 1) * c];
                        let s = a * cwt;
                        for (o, m) in row.iter_mut().zip(src) {
                            *o += s * m;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::from_vec(&[n, c], out),
            Op::WeightedSample { map, pts, wts },
            &[map, pts, wts],
        ))
    }

    /// Bilinear resize of `x[C, H, W]` with half-pixel centers.
    pub fn interp_resize(&mut self, x: Var, target: (usize, usize)) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || target.0 == 0 || target.1 == 0 {
            return Err(Error::invalid(
                "interp_resize",
                format!("input {xs:?} target {target:?}"),
            ));
        }
        if (xs[1], xs[2]) == target {
            return Ok(x);
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let rows = ResizeAxis::new(h, target.0);
        let cols = ResizeAxis::new(w, target.1);
        let xv = self.value(x).data();
        let (h2, w2) = target;
        let mut out = vec![0.0; c * h2 * w2];
        for ch in 0..c {
            let src = &xv[ch * h * w..(ch + 1) * h * w];
            for i in 0..h2 {
                let (r0, r1, fy) = (rows.lo[i], rows.hi[i], rows.frac[i]);
                for j in 0..w2 {
                    let (c0, c1, fx) = (cols.lo[j], cols.hi[j], cols.frac[j]);
                    let top = src[r0 * w + c0] * (1.0 - fx) + src[r0 * w + c1] * fx;
                    let bot = src[r1 * w + c0] * (1.0 - fx) + src[r1 * w + c1] * fx;
                    out[(ch * h2 + i) * w2 + j] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        Ok(self.push(
            Tensor::from_vec(&[c, h2, w2], out),
            Op::Resize { x, rows, cols },
            &[x],
        ))
    }

    /// Inverted dropout. Identity when not training or when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Domain {
                op: "dropout",
                value: rate,
                lo: 0.0,
                hi: 1.0,
            });
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let xv = self.value(x);
        let out = Tensor::from_vec(
            xv.shape(),
            xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
        );
        Ok(self.push(out, Op::Dropout(x, mask), &[x]))
    }

    // ------------------------------------------------------------------- backward

    /// Reverse sweep from a one-element `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    /// Reverse sweep that accumulates every parameter gradient into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.gradients(loss)?;
        for (v, name) in &self.params {
            if let Some(g) = &grads.grads[v.0] {
                store.accumulate(name, g);
            }
        }
        Ok(grads)
    }

    fn backprop(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let out = self.nodes[id].value.data();
        let nodes = &self.nodes;
        macro_rules! acc {
            ($v:expr, $f:expr) => {
                accumulate(nodes, grads, $v, $f)
            };
        }
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc!(*a, |i| g[i]);
                acc!(*b, |i| g[i]);
            }
            Op::Sub(a, b) => {
                acc!(*a, |i| g[i]);
                acc!(*b, |i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc!(*a, |i| g[i] * bv[i]);
                acc!(*b, |i| g[i] * av[i]);
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                acc!(*a, |i| g[i] / bv[i]);
                acc!(*b, |i| -g[i] * out[i] / bv[i]);
            }
            Op::Scale(a, s) => acc!(*a, |i| g[i] * s),
            Op::AddScalar(a) => acc!(*a, |i| g[i]),
            Op::Exp(a) => acc!(*a, |i| g[i] * out[i]),
            Op::Log(a) => {
                let av = val(*a);
                acc!(*a, |i| g[i] / av[i]);
            }
            Op::Relu(a) => {
                let av = val(*a);
                acc!(*a, |i| if av[i] > 0.0 { g[i] } else { 0.0 });
            }
            Op::Sigmoid(a) => acc!(*a, |i| g[i] * out[i] * (1.0 - out[i])),
            Op::Tanh(a) => acc!(*a, |i| g[i] * (1.0 - out[i] * out[i])),
            Op::Powf(a, p) => {
                let av = val(*a);
                let p = *p;
                acc!(*a, |i| {
                    let x = av[i];
                    let d = if p == 0.0 {
                        0.0
                    } else if x == 0.0 {
                        if p == 1.0 {
                            1.0
                        } else if p > 1.0 {
                            0.0
                        } else {
                            f64::INFINITY
                        }
                    } else {
                        p * powf_fast(x, p - 1.0)
                    };
                    g[i] * d
                });
            }
            Op::Clamp(a, lo, hi) => {
                let av = val(*a);
                acc!(*a, |i| {
                    if av[i] >= *lo && av[i] <= *hi {
                        g[i]
                    } else {
                        0.0
                    }
                });
            }
            Op::BroadcastTo(a) => {
                if self.nodes[a.0].needs_grad {
                    let map = broadcast_map(self.shape(*a), self.nodes[id].value.shape());
                    let n = self.nodes[a.0].value.numel();
                    let buf = grads[a.0].get_or_insert_with(|| vec![0.0; n]);
                    for (o, &src) in map.iter().enumerate() {
                        buf[src] += g[o];
                    }
                }
            }
            Op::SumAxis(a, axis) => {
                let (_, ext, inner) = split_axis(self.shape(*a), *axis);
                acc!(*a, |i| {
                    let o = i / (ext * inner);
                    let r = i % inner;
                    g[o * inner + r]
                });
            }
            Op::SumAll(a) => acc!(*a, |_| g[0]),
            Op::Reshape(a) => acc!(*a, |i| g[i]),
            Op::Permute(a, axes) => {
                if self.nodes[a.0].needs_grad {
                    let (_, map) = permute_map(self.shape(*a), axes);
                    let n = self.nodes[a.0].value.numel();
                    let buf = grads[a.0].get_or_insert_with(|| vec![0.0; n]);
                    for (o, &src) in map.iter().enumerate() {
                        buf[src] += g[o];
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let shape = self.nodes[id].value.shape();
                let (_, total, inner) = split_axis(shape, *axis);
                let mut start = 0;
                for &p in parts {
                    let ext = self.shape(p)[*axis];
                    acc!(p, |i| {
                        let o = i / (ext * inner);
                        let rem = i % (ext * inner);
                        g[o * total * inner + start * inner + rem]
                    });
                    start += ext;
                }
            }
            Op::Slice { x, axis, start } => {
                let (_, ext, inner) = split_axis(self.shape(*x), *axis);
                let len = self.nodes[id].value.shape()[*axis];
                acc!(*x, |i| {
                    let o = i / (ext * inner);
                    let k = (i / inner) % ext;
                    if k >= *start && k < start + len {
                        g[(o * len + (k - start)) * inner + i % inner]
                    } else {
                        0.0
                    }
                });
            }
            Op::GatherLast(a, index) => {
                let c = *self.shape(*a).last().unwrap();
                acc!(*a, |i| if index[i / c] == i % c { g[i / c] } else { 0.0 });
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (din, dout) = (ws[0], ws[1]);
                let rows = numel(&xs[..xs.len() - 1]);
                if self.nodes[x.0].needs_grad {
                    let buf = grads[x.0].get_or_insert_with(|| vec![0.0; rows * din]);
                    gemm(rows, dout, din, g, false, val(*w), true, buf, true);
                }
                if self.nodes[w.0].needs_grad {
                    let buf = grads[w.0].get_or_insert_with(|| vec![0.0; din * dout]);
                    gemm(din, rows, dout, val(*x), true, g, false, buf, true);
                }
                if self.nodes[b.0].needs_grad {
                    let buf = grads[b.0].get_or_insert_with(|| vec![0.0; dout]);
                    for r in 0..rows {
                        for (bb, gg) in buf.iter_mut().zip(&g[r * dout..(r + 1) * dout]) {
                            *bb += gg;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if self.nodes[a.0].needs_grad {
                    let c = *self.shape(*a).last().unwrap();
                    let n = out.len();
                    let buf = grads[a.0].get_or_insert_with(|| vec![0.0; n]);
                    for r in 0..n / c {
                        let y = &out[r * c..(r + 1) * c];
                        let gy = &g[r * c..(r + 1) * c];
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            buf[r * c + j] += y[j] * (gy[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                if self.nodes[a.0].needs_grad {
                    let c = *self.shape(*a).last().unwrap();
                    let n = out.len();
                    let buf = grads[a.0].get_or_insert_with(|| vec![0.0; n]);
                    for r in 0..n / c {
                        let y = &out[r * c..(r + 1) * c];
                        let gy = &g[r * c..(r + 1) * c];
                        let s: f64 = gy.iter().sum();
                        for j in 0..c {
                            buf[r * c + j] += gy[j] - y[j].exp() * s;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let xv = val(*x);
                let gv = val(*gain);
                let c = gv.len();
                let rows = xv.len() / c;
                let xhat = |r: usize, j: usize| (xv[r * c + j] - mean[r]) * rstd[r];
                if self.nodes[x.0].needs_grad {
                    let buf = grads[x.0].get_or_insert_with(|| vec![0.0; rows * c]);
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let d = g[r * c + j] * gv[j];
                            m1 += d;
                            m2 += d * xhat(r, j);
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let d = g[r * c + j] * gv[j];
                            buf[r * c + j] += rstd[r] * (d - m1 - xhat(r, j) * m2);
                        }
                    }
                }
                if self.nodes[gain.0].needs_grad {
                    let buf = grads[gain.0].get_or_insert_with(|| vec![0.0; c]);
                    for r in 0..rows {
                        for j in 0..c {
                            buf[j] += g[r * c + j] * xhat(r, j);
                        }
                    }
                }
                if self.nodes[bias.0].needs_grad {
                    let buf = grads[bias.0].get_or_insert_with(|| vec![0.0; c]);
                    for r in 0..rows {
                        for j in 0..c {
                            buf[j] += g[r * c + j];
                        }
                    }
                }
            }
            Op::Conv2d { x, k, stride, pad } => {
                let xs = self.shape(*x);
                let ks = self.shape(*k);
                let os = self.nodes[id].value.shape();
                let (cin, h, w) = (xs[0], xs[1], xs[2]);
                let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
                let (ho, wo) = (os[1], os[2]);
                let kk = cin * kh * kw;
                if self.nodes[k.0].needs_grad {
                    let col = im2col(val(*x), (cin, h, w), (kh, kw), *stride, *pad, (ho, wo));
                    let buf = grads[k.0].get_or_insert_with(|| vec![0.0; cout * kk]);
                    gemm(cout, ho * wo, kk, g, false, &col, true, buf, true);
                }
                if self.nodes[x.0].needs_grad {
                    let mut dcol = vec![0.0; kk * ho * wo];
                    gemm(kk, cout, ho * wo, val(*k), true, g, false, &mut dcol, false);
                    let buf = grads[x.0].get_or_insert_with(|| vec![0.0; cin * h * w]);
                    col2im(&dcol, buf, (cin, h, w), (kh, kw), *stride, *pad, (ho, wo));
                }
            }
            Op::Bilinear { map, pts } => {
                let ms = self.shape(*map);
                let (c, h, w) = (ms[0], ms[1], ms[2]);
                let plane = h * w;
                let mv = val(*map);
                let pv = val(*pts);
                let n = pv.len() / 2;
                let want_map = self.nodes[map.0].needs_grad;
                let want_pts = self.nodes[pts.0].needs_grad;
                let mut dmap = if want_map {
                    grads[map.0].take().unwrap_or_else(|| vec![0.0; mv.len()])
                } else {
                    Vec::new()
                };
                let mut dpts = if want_pts {
                    grads[pts.0].take().unwrap_or_else(|| vec![0.0; pv.len()])
                } else {
                    Vec::new()
                };
                for i in 0..n {
                    let (idx, fx, fy) = bilinear_corners(pv[2 * i], pv[2 * i + 1], h, w);
                    let gi = &g[i * c..(i + 1) * c];
                    if want_map {
                        let wts = [
                            (1.0 - fx) * (1.0 - fy),
                            fx * (1.0 - fy),
                            (1.0 - fx) * fy,
                            fx * fy,
                        ];
                        for (slot, &wt) in idx.iter().zip(&wts) {
                            if let Some(off) = *slot {
                                for (ch, gg) in gi.iter().enumerate() {
                                    dmap[ch * plane + off] += wt * gg;
                                }
                            }
                        }
                    }
                    if want_pts {
                        let read =
                            |slot: usize, ch: usize| idx[slot].map_or(0.0, |o| mv[ch * plane + o]);
                        let (mut du, mut dv) = (0.0, 0.0);
                        for (ch, gg) in gi.iter().enumerate() {
                            let (m00, m01, m10, m11) =
                                (read(0, ch), read(1, ch), read(2, ch), read(3, ch));
                            du += gg * ((1.0 - fy) * (m01 - m00) + fy * (m11 - m10));
                            dv += gg * ((1.0 - fx) * (m10 - m00) + fx * (m11 - m01));
                        }
                        dpts[2 * i] += du;
                        dpts[2 * i + 1] += dv;
                    }
                }
                if want_map {
                    grads[map.0] = Some(dmap);
                }
                if want_pts {
                    grads[pts.0] = Some(dpts);
                }
            }
            Op::WeightedSample { map, pts, wts } => {
                let ms = self.shape(*map);
                let (c, h, w) = (ms[0], ms[1], ms[2]);
                let np = self.shape(*pts)[1];
                let hwc = to_hwc(val(*map), c, h * w);
                let pv = val(*pts);
                let wv = val(*wts);
                let n = wv.len() / np;
                let want_map = self.nodes[map.0].needs_grad;
                let want_pts = self.nodes[pts.0].needs_grad;
                let want_wts = self.nodes[wts.0].needs_grad;
                let mut dmap = vec![0.0; if want_map { hwc.len() } else { 0 }];
                let mut dpts = vec![0.0; if want_pts { pv.len() } else { 0 }];
                let mut dwts = vec![0.0; if want_wts { wv.len() } else { 0 }];
                for i in 0..n {
                    let gi = &g[i * c..(i + 1) * c];
                    for p in 0..np {
                        let k = i * np + p;
                        let a = wv[k];
                        if a == 0.0 && !want_wts {
                            continue;
                        }
                        let (idx, fx, fy) = bilinear_corners(pv[2 * k], pv[2 * k + 1], h, w);
                        let cw = corner_weights(fx, fy);
                        // g · map at each corner
                        let mut dots = [0.0; 4];
                        for (slot, d) in idx.iter().zip(dots.iter_mut()) {
                            if let Some(off) = *slot {
                                let src = &hwc[off * c..(off + 1) * c];
                                *d = gi.iter().zip(src).map(|(x, y)| x * y).sum();
                            }
                        }
                        if want_wts {
                            dwts[k] += cw.iter().zip(&dots).map(|(x, y)| x * y).sum::<f64>();
                        }
                        if want_map && a != 0.0 {
                            for (slot, &cwt) in idx.iter().zip(&cw) {
                                if let Some(off) = *slot {
                                    let dst = &mut dmap[off * c..(off + 1) * c];
                                    let s = a * cwt;
                                    for (d, gg) in dst.iter_mut().zip(gi) {
                                        *d += s * gg;
                                    }
                                }
                            }
                        }
                        if want_pts {
                            let [m00, m01, m10, m11] = dots;
                            dpts[2 * k] += a * ((1.0 - fy) * (m01 - m00) + fy * (m11 - m10));
                            dpts[2 * k + 1] += a * ((1.0 - fx) * (m10 - m00) + fx * (m11 - m01));
                        }
                    }
                }
                if want_map {
                    let chw = from_hwc(&dmap, c, h * w);
                    acc!(*map, |i| chw[i]);
                }
                if want_pts {
                    acc!(*pts, |i| dpts[i]);
                }
                if want_wts {
                    acc!(*wts, |i| dwts[i]);
                }
            }
            Op::Resize { x, rows, cols } => {
                if self.nodes[x.0].needs_grad {
                    let xs = self.shape(*x);
                    let (c, h, w) = (xs[0], xs[1], xs[2]);
                    let (h2, w2) = (rows.lo.len(), cols.lo.len());
                    let buf = grads[x.0].get_or_insert_with(|| vec![0.0; c * h * w]);
                    for ch in 0..c {
                        let dst = &mut buf[ch * h * w..(ch + 1) * h * w];
                        for i in 0..h2 {
                            let (r0, r1, fy) = (rows.lo[i], rows.hi[i], rows.frac[i]);
                            for j in 0..w2 {
                                let (c0, c1, fx) = (cols.lo[j], cols.hi[j], cols.frac[j]);
                                let gg = g[(ch * h2 + i) * w2 + j];
                                dst[r0 * w + c0] += gg * (1.0 - fy) * (1.0 - fx);
                                dst[r0 * w + c1] += gg * (1.0 - fy) * fx;
                                dst[r1 * w + c0] += gg * fy * (1.0 - fx);
                                dst[r1 * w + c1] += gg * fy * fx;
                            }
                        }
                    }
                }
            }
            Op::Dropout(a, mask) => acc!(*a, |i| g[i] * mask[i]),
        }
    }
}

#[cfg(test)]
mod tests;
