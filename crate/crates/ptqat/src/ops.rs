//! Differentiable tensor operations.
//!
//! Each op validates shapes, computes the forward value, and attaches a
//! [`BackwardRule`] carrying the intermediates its vector-Jacobian product
//! needs. Binary elementwise ops broadcast right-aligned (numpy rules);
//! gradients of broadcast inputs are sum-reduced back to the input shape.

use crate::error::{Error, Result};
use crate::tensor::{BackwardRule, InputGrads, Tensor};

// ── shape helpers ───────────────────────────────────────────────────────

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(Error::Dim(format!(
                "shapes {:?} and {:?} are not broadcast-compatible",
                a, b
            )));
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Flat index into `in_shape` (right-aligned against `out_shape`)
/// corresponding to flat index `out_idx` of `out_shape`.
fn map_broadcast_index(
    out_idx: usize,
    out_shape: &[usize],
    out_strides: &[usize],
    in_shape: &[usize],
    in_strides: &[usize],
) -> usize {
    let offset = out_shape.len() - in_shape.len();
    let mut idx = 0usize;
    for d in 0..in_shape.len() {
        let coord = (out_idx / out_strides[offset + d]) % out_shape[offset + d];
        if in_shape[d] != 1 {
            idx += coord * in_strides[d];
        }
    }
    idx
}

/// Sum-reduce a gradient over `out_shape` down to `in_shape`.
fn reduce_to_shape(grad: &[f64], out_shape: &[usize], in_shape: &[usize]) -> Vec<f64> {
    if out_shape == in_shape {
        return grad.to_vec();
    }
    let out_strides = strides_for(out_shape);
    let in_strides = strides_for(in_shape);
    let numel: usize = in_shape.iter().product();
    let mut out = vec![0.0; numel];
    for (i, g) in grad.iter().enumerate() {
        let j = map_broadcast_index(i, out_shape, &out_strides, in_shape, &in_strides);
        out[j] += g;
    }
    out
}

// ── raw matmul kernels ──────────────────────────────────────────────────

/// C[m,n] += A[m,k] · B[k,n]
fn mm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
}

/// D[m,k] += C[m,n] · B[k,n]ᵀ
fn mm_nt_acc(c: &[f64], b: &[f64], d: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let crow = &c[i * n..(i + 1) * n];
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += crow[j] * brow[j];
            }
            d[i * k + p] += acc;
        }
    }
}

/// D[k,n] += A[m,k]ᵀ · C[m,n]
fn mm_tn_acc(a: &[f64], c: &[f64], d: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &c[i * n..(i + 1) * n];
            let drow = &mut d[p * n..(p + 1) * n];
            for j in 0..n {
                drow[j] += aip * crow[j];
            }
        }
    }
}

// ── matmul ──────────────────────────────────────────────────────────────

struct MatMul {
    batch: usize, // 1 for unbatched
    m: usize,
    k: usize,
    n: usize,
    b_batched: bool, // rhs carries a batch dim
}

impl BackwardRule for MatMul {
    fn op_name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, inputs: &[Tensor], out_grad: &[f64], needs: &[bool]) -> InputGrads {
        let (batch, m, k, n) = (self.batch, self.m, self.k, self.n);
        let a = inputs[0].data();
        let b = inputs[1].data();
        let da = if needs[0] {
            let mut g = vec![0.0; batch * m * k];
            for bi in 0..batch {
                let boff = if self.b_batched { bi * k * n } else { 0 };
                mm_nt_acc(
                    &out_grad[bi * m * n..(bi + 1) * m * n],
                    &b[boff..boff + k * n],
                    &mut g[bi * m * k..(bi + 1) * m * k],
                    m,
                    k,
                    n,
                );
            }
            Some(g)
        } else {
            None
        };
        let db = if needs[1] {
            let len = if self.b_batched { batch * k * n } else { k * n };
            let mut g = vec![0.0; len];
            for bi in 0..batch {
                let boff = if self.b_batched { bi * k * n } else { 0 };
                mm_tn_acc(
                    &a[bi * m * k..(bi + 1) * m * k],
                    &out_grad[bi * m * n..(bi + 1) * m * n],
                    &mut g[boff..boff + k * n],
                    m,
                    k,
                    n,
                );
            }
            Some(g)
        } else {
            None
        };
        vec![da, db]
    }
}

/// Matrix product. Supports `[m,k]×[k,n]`, batched lhs `[b,m,k]×[k,n]`, and
/// fully batched `[b,m,k]×[b,k,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let sa = a.shape();
    let sb = b.shape();
    let (batch, m, k, b_batched) = match sa.len() {
        2 => (1usize, sa[0], sa[1], false),
        3 => (sa[0], sa[1], sa[2], sb.len() == 3),
        _ => {
            return Err(Error::Dim(format!(
                "matmul lhs must be rank 2 or 3, got {:?}",
                sa
            )))
        }
    };
    let (kb, n) = match (sb.len(), b_batched) {
        (2, false) => (sb[0], sb[1]),
        (3, true) => {
            if sb[0] != batch {
                return Err(Error::Dim(format!(
                    "matmul batch dims differ: {:?} vs {:?}",
                    sa, sb
                )));
            }
            (sb[1], sb[2])
        }
        _ => {
            return Err(Error::Dim(format!(
                "matmul rhs must be rank 2 or 3, got {:?}",
                sb
            )))
        }
    };
    if k != kb {
        return Err(Error::Dim(format!(
            "matmul inner extents differ: {:?} × {:?}",
            sa, sb
        )));
    }

    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        let boff = if b_batched { bi * k * n } else { 0 };
        mm_acc(
            &ad[bi * m * k..(bi + 1) * m * k],
            &bd[boff..boff + k * n],
            &mut out[bi * m * n..(bi + 1) * m * n],
            m,
            k,
            n,
        );
    }
    drop(ad);
    drop(bd);

    let out_shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
    Ok(Tensor::from_op(
        out_shape,
        out,
        vec![a.clone(), b.clone()],
        Box::new(MatMul { batch, m, k, n, b_batched }),
    ))
}

// ── conv2d ──────────────────────────────────────────────────────────────

struct Conv2d {
    stride: usize,
    pad: usize,
}

impl BackwardRule for Conv2d {
    fn op_name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, inputs: &[Tensor], out_grad: &[f64], needs: &[bool]) -> InputGrads {
        let xs = inputs[0].shape();
        let ws = inputs[1].shape();
        let (nb, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (ko, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let oh = (h + 2 * self.pad - kh) / self.stride + 1;
        let ow = (w + 2 * self.pad - kw) / self.stride + 1;
        let x = inputs[0].data();
        let wt = inputs[1].data();
        let mut dx = if needs[0] { Some(vec![0.0; x.len()]) } else { None };
        let mut dw = if needs[1] { Some(vec![0.0; wt.len()]) } else { None };

        for n in 0..nb {
            for k in 0..ko {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = out_grad[((n * ko + k) * oh + oy) * ow + ox];
                        if g == 0.0 {
                            continue;
                        }
                        for ci in 0..c {
                            for i in 0..kh {
                                let iy = (oy * self.stride + i) as isize - self.pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for j in 0..kw {
                                    let ix = (ox * self.stride + j) as isize - self.pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let xi = ((n * c + ci) * h + iy as usize) * w + ix as usize;
                                    let wi = ((k * c + ci) * kh + i) * kw + j;
                                    if let Some(dx) = dx.as_mut() {
                                        dx[xi] += g * wt[wi];
                                    }
                                    if let Some(dw) = dw.as_mut() {
                                        dw[wi] += g * x[xi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        vec![dx, dw]
    }
}

/// 2-D cross-correlation with zero padding.
/// `x: [N,C,H,W]`, `w: [K,C,kh,kw]` → `[N,K,H',W']`.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 4 || ws.len() != 4 {
        return Err(Error::Dim(format!(
            "conv2d expects rank-4 input and kernel, got {:?} and {:?}",
            xs, ws
        )));
    }
    let (nb, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (ko, ci, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if ci != c {
        return Err(Error::Dim(format!(
            "conv2d channel mismatch: input {:?} vs kernel {:?}",
            xs, ws
        )));
    }
    if kh > h + 2 * pad || kw > wd + 2 * pad {
        return Err(Error::Dim(format!(
            "conv2d kernel {:?} larger than padded input {:?} (pad {})",
            ws, xs, pad
        )));
    }
    if stride == 0 {
        return Err(Error::Contract("conv2d stride must be positive".into()));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;

    let xd = x.data();
    let wt = w.data();
    let mut out = vec![0.0; nb * ko * oh * ow];
    for n in 0..nb {
        for k in 0..ko {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for cc in 0..c {
                        for i in 0..kh {
                            let iy = (oy * stride + i) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for j in 0..kw {
                                let ix = (ox * stride + j) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += xd[((n * c + cc) * h + iy as usize) * wd + ix as usize]
                                    * wt[((k * c + cc) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((n * ko + k) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    drop(xd);
    drop(wt);
    Ok(Tensor::from_op(
        vec![nb, ko, oh, ow],
        out,
        vec![x.clone(), w.clone()],
        Box::new(Conv2d { stride, pad }),
    ))
}

// ── broadcast binary ops ────────────────────────────────────────────────

struct Add {
    out_shape: Vec<usize>,
}

impl BackwardRule for Add {
    fn op_name(&self) -> &'static str {
        "add"
    }

    fn backward(&self, inputs: &[Tensor], out_grad: &[f64], needs: &[bool]) -> InputGrads {
        let mut grads = Vec::with_capacity(2);
        for input in inputs {
            grads.push(if needs[grads.len()] {
                Some(reduce_to_shape(out_grad, &self.out_shape, &input.shape()))
            } else {
                None
            });
        }
        grads
    }
}

struct Mul {
    out_shape: Vec<usize>,
}

impl BackwardRule for Mul {
    fn op_name(&self) -> &'static str {
        "mul"
    }

    fn backward(&self, inputs: &[Tensor], out_grad: &[f64], needs: &[bool]) -> InputGrads {
        let sa = inputs[0].shape();
        let sb = inputs[1].shape();
        let out_strides = strides_for(&self.out_shape);
        let sa_strides = strides_for(&sa);
        let sb_strides = strides_for(&sb);
        let a = inputs[0].data();
        let b = inputs[1].data();
        let mut da = if needs[0] { Some(vec![0.0; a.len()]) } else { None };
        let mut db = if needs[1] { Some(vec![0.0; b.len()]) } else { None };
        for (i, g) in out_grad.iter().enumerate() {
            let ia = map_broadcast_index(i, &self.out_shape, &out_strides, &sa, &sa_strides);
            let ib = map_broadcast_index(i, &self.out_shape, &out_strides, &sb, &sb_strides);
            if let Some(da) = da.as_mut() {
                da[ia] += g * b[ib];
            }
            if let Some(db) = db.as_mut() {
                db[ib] += g * a[ia];
            }
        }
        vec![da, db]
    }
}

fn binary_forward(
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let sa = a.shape();
    let sb = b.shape();
    let out_shape = broadcast_shape(&sa, &sb)?;
    let numel: usize = out_shape.iter().product();
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; numel];
    if sa == sb {
        for i in 0..numel {
            out[i] = f(ad[i], bd[i]);
        }
    } else {
        let out_strides = strides_for(&out_shape);
        let sa_strides = strides_for(&sa);
        let sb_strides = strides_for(&sb);
        for (i, o) in out.iter_mut().enumerate() {
            let ia = map_broadcast_index(i, &out_shape, &out_strides, &sa, &sa_strides);
            let ib = map_broadcast_index(i, &out_shape, &out_strides, &sb, &sb_strides);
            *o = f(ad[ia], bd[ib]);
        }
    }
    Ok((out_shape, out))
}

/// Broadcasting elementwise sum.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (shape, out) = binary_forward(a, b, |x, y| x + y)?;
    Ok(Tensor::from_op(
        shape.clone(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(Add { out_shape: shape }),
    ))
}

/// Broadcasting elementwise product.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (shape, out) = binary_forward(a, b, |x, y| x * y)?;
    Ok(Tensor::from_op(
        shape.clone(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(Mul { out_shape: shape }),
    ))
}

struct MulScalar {
    c: f64,
}

impl BackwardRule for MulScalar {
    fn op_name(&self) -> &'static str {
        "mul_scalar"
    }

    fn backward(&self, _inputs: &[Tensor], out_grad: &[f64], needs: &[bool]) -> InputGrads {
        vec![if needs[0] {
            Some(out_grad.iter().map(|g| g * self.c).collect())
        } else {
            None
        }]
    }
}

/// Multiply by a compile-time constant (no gradient for the constant).
pub fn mul_scalar(x: &Tensor, c: f64) -> Tensor {
    let out = x.data().iter().map(|v| v * c).collect();
    Tensor::from_op(x.shape(), out, vec![x.clone()], Box::new(MulScalar { c }))
}

// ── unary activations ───────────────────────────────────────────────────

struct Relu;

impl BackwardRule for Relu {
    fn op_name(&self) -> &'static str {
        "relu"
    }

    fn backward(&self, inputs: &[Tensor], out_grad: &[f64], needs: &[bool]) -> InputGrads {
        vec![if needs[0] {
            let x = inputs[0].data();
            Some(
                out_grad
                    .iter()
                    .zip(x.iter())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect(),
            )
        } else {
            None
        }]
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    let out = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::from_op(x.shape(), out, vec![x.clone()], Box::new(Relu))
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

struct Gelu;

impl BackwardRule for Gelu {
    fn op_name(&self) -> &'static str {
        "gelu"
    }

    fn backward(&self, inputs: &[Tensor], out_grad: &[f64], needs: &[bool]) -> InputGrads {
        vec![if needs[0] {
            let x = inputs[0].data();
            Some(
                out_grad
                    .iter()
                    .zip(x.iter())
                    .map(|(g, &v)| {
                        let u = GELU_C * (v + GELU_A * v * v * v);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                    })
                    .collect(),
            )
        } else {
            None
        }]
    }
}

/// GELU with the tanh approximation:
/// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
pub fn gelu(x: &Tensor) -> Tensor {
    let out = x
        .data()
        .iter()
        .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
        .collect();
    Tensor::from_op(x.shape(), out, vec![x.clone()], Box::new(Gelu))
}

// ── softmax / layernorm ─────────────────────────────────────────────────

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

struct Softmax {
    axis: usize,
    out: Vec<f64>, // saved forward output
}

impl BackwardRule for Softmax {
    fn op_name(&self) -> &'static str {
        "softmax"
    }

    fn backward(&self, inputs: &[Tensor], out_grad: &[f64], needs: &[bool]) -> InputGrads {
        vec![if needs[0] {
            let shape = inputs[0].shape();
            let (outer, len, inner) = axis_split(&shape, self.axis);
            let mut dx = vec![0.0; out_grad.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut dot = 0.0;
                    for a in 0..len {
                        let idx = base + a * inner;
                        dot += out_grad[idx] * self.out[idx];
                    }
                    for a in 0..len {
                        let idx = base + a * inner;
                        dx[idx] = self.out[idx] * (out_grad[idx] - dot);
                    }
                }
            }
            Some(dx)
        } else {
            None
        }]
    }
}

/// Softmax along `axis`; each slice sums to one.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::Dim(format!(
            "softmax axis {} out of range for shape {:?}",
            axis, shape
        )));
    }
    let (outer, len, inner) = axis_split(&shape, axis);
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for a in 0..len {
                max = max.max(xd[base + a * inner]);
            }
            let mut sum = 0.0;
            for a in 0..len {
                let e = (xd[base + a * inner] - max).exp();
                out[base + a * inner] = e;
                sum += e;
            }
            for a in 0..len {
                out[base + a * inner] /= sum;
            }
        }
    }
    drop(xd);
    Ok(Tensor::from_op(
        shape,
        out.clone(),
        vec![x.clone()],
        Box::new(Softmax { axis, out }),
    ))
}

struct LayerNorm {
    axis: usize,
    xhat: Vec<f64>,
    inv: Vec<f64>, // 1/sqrt(var+eps) per normalization group
}

impl BackwardRule for LayerNorm {
    fn op_name(&self) -> &'static str {
        "layernorm"
    }

    fn backward(&self, inputs: &[Tensor], out_grad: &[f64], needs: &[bool]) -> InputGrads {
        vec![if needs[0] {
            let shape = inputs[0].shape();
            let (outer, len, inner) = axis_split(&shape, self.axis);
            let mut dx = vec![0.0; out_grad.len()];
            let nf = len as f64;
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let inv = self.inv[o * inner + i];
                    let mut mean_dy = 0.0;
                    let mut mean_dyx = 0.0;
                    for a in 0..len {
                        let idx = base + a * inner;
                        mean_dy += out_grad[idx];
                        mean_dyx += out_grad[idx] * self.xhat[idx];
                    }
                    mean_dy /= nf;
                    mean_dyx /= nf;
                    for a in 0..len {
                        let idx = base + a * inner;
                        dx[idx] = inv * (out_grad[idx] - mean_dy - self.xhat[idx] * mean_dyx);
                    }
                }
            }
            Some(dx)
        } else {
            None
        }]
    }
}

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Normalize along `axis` to zero mean and unit variance (no affine part;
/// scale/shift are separate tensors applied by the caller).
pub fn layernorm(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::Dim(format!(
            "layernorm axis {} out of range for shape {:?}",
            axis, shape
        )));
    }
    let (outer, len, inner) = axis_split(&shape, axis);
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    let mut invs = vec![0.0; outer * inner];
    let nf = len as f64;
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mean = 0.0;
            for a in 0..len {
                mean += xd[base + a * inner];
            }
            mean /= nf;
            let mut var = 0.0;
            for a in 0..len {
                let d = xd[base + a * inner] - mean;
                var += d * d;
            }
            var /= nf;
            let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
            invs[o * inner + i] = inv;
            for a in 0..len {
                let idx = base + a * inner;
                out[idx] = (xd[idx] - mean) * inv;
            }
        }
    }
    drop(xd);
    Ok(Tensor::from_op(
        shape,
        out.clone(),
        vec![x.clone()],
        Box::new(LayerNorm { axis, xhat: out, inv: invs }),
    ))
}

// ── shape ops ───────────────────────────────────────────────────────────

struct Reshape;

impl BackwardRule for Reshape {
    fn op_name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, _inputs: &[Tensor], out_grad: &[f64], needs: &[bool]) -> InputGrads {
        vec![if needs[0] { Some(out_grad.to_vec()) } else { None }]
    }
}

/// Same data, new shape (row-major order preserved).
pub fn reshape(x: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    if numel != x.numel() {
        return Err(Error::Dim(format!(
            "cannot reshape {:?} ({} elems) to {:?}",
            x.shape(),
            x.numel(),
            shape
        )));
    }
    Ok(Tensor::from_op(shape, x.to_vec(), vec![x.clone()], Box::new(Reshape)))
}

struct TransposeLast2;

fn transpose_last2_raw(data: &[f64], shape: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let (m, n) = (shape[rank - 2], shape[rank - 1]);
    let batch: usize = shape[..rank - 2].iter().product();
    let mut out = vec![0.0; data.len()];
    for b in 0..batch {
        let off = b * m * n;
        for i in 0..m {
            for j in 0..n {
                out[off + j * m + i] = data[off + i * n + j];
            }
        }
    }
    out
}

impl BackwardRule for TransposeLast2 {
    fn op_name(&self) -> &'static str {
        "transpose_last2"
    }

    fn backward(&self, inputs: &[Tensor], out_grad: &[f64], needs: &[bool]) -> InputGrads {
        vec![if needs[0] {
            let mut shape = inputs[0].shape();
            let rank = shape.len();
            shape.swap(rank - 2, rank - 1);
            Some(transpose_last2_raw(out_grad, &shape))
        } else {
            None
        }]
    }
}

/// Swap the trailing two axes.
pub fn transpose_last2(x: &Tensor) -> Result<Tensor> {
    let mut shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::Dim(format!(
            "transpose_last2 needs rank >= 2, got {:?}",
            shape
        )));
    }
    let out = transpose_last2_raw(&x.data(), &shape);
    let rank = shape.len();
    shape.swap(rank - 2, rank - 1);
    Ok(Tensor::from_op(shape, out, vec![x.clone()], Box::new(TransposeLast2)))
}

struct Patchify {
    p: usize,
}

fn patch_index_map(c: usize, h: usize, w: usize, p: usize) -> Vec<usize> {
    // out[(patch, feature)] = in[flat]; feature order (c, i, j)
    let (gh, gw) = (h / p, w / p);
    let mut map = Vec::with_capacity(c * h * w);
    for py in 0..gh {
        for px in 0..gw {
            for cc in 0..c {
                for i in 0..p {
                    for j in 0..p {
                        map.push((cc * h + py * p + i) * w + px * p + j);
                    }
                }
            }
        }
    }
    map
}

impl BackwardRule for Patchify {
    fn op_name(&self) -> &'static str {
        "patchify"
    }

    fn backward(&self, inputs: &[Tensor], out_grad: &[f64], needs: &[bool]) -> InputGrads {
        vec![if needs[0] {
            let s = inputs[0].shape();
            let (nb, c, h, w) = (s[0], s[1], s[2], s[3]);
            let map = patch_index_map(c, h, w, self.p);
            let per = c * h * w;
            let mut dx = vec![0.0; nb * per];
            for n in 0..nb {
                for (k, &src) in map.iter().enumerate() {
                    dx[n * per + src] = out_grad[n * per + k];
                }
            }
            Some(dx)
        } else {
            None
        }]
    }
}

/// Rearrange `[N,C,H,W]` into `[N, (H/p)(W/p), C·p·p]` non-overlapping
/// patches, row-major over the patch grid; per-patch features ordered
/// `(c, i, j)`.
pub fn patchify(x: &Tensor, p: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Dim(format!("patchify expects rank 4, got {:?}", s)));
    }
    let (nb, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h % p != 0 || w % p != 0 {
        return Err(Error::Dim(format!(
            "patchify: spatial dims {:?} not divisible by patch {}",
            s, p
        )));
    }
    let map = patch_index_map(c, h, w, p);
    let per = c * h * w;
    let xd = x.data();
    let mut out = vec![0.0; nb * per];
    for n in 0..nb {
        for (k, &src) in map.iter().enumerate() {
            out[n * per + k] = xd[n * per + src];
        }
    }
    drop(xd);
    Ok(Tensor::from_op(
        vec![nb, (h / p) * (w / p), c * p * p],
        out,
        vec![x.clone()],
        Box::new(Patchify { p }),
    ))
}

// ── reductions & losses ─────────────────────────────────────────────────

struct Sum;

impl BackwardRule for Sum {
    fn op_name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, inputs: &[Tensor], out_grad: &[f64], needs: &[bool]) -> InputGrads {
        vec![if needs[0] {
            Some(vec![out_grad[0]; inputs[0].numel()])
        } else {
            None
        }]
    }
}

/// Sum of all elements, as a scalar tensor.
pub fn sum(x: &Tensor) -> Tensor {
    let s: f64 = x.data().iter().sum();
    Tensor::from_op(vec![], vec![s], vec![x.clone()], Box::new(Sum))
}

struct MseLoss;

impl BackwardRule for MseLoss {
    fn op_name(&self) -> &'static str {
        "mse_loss"
    }

    fn backward(&self, inputs: &[Tensor], out_grad: &[f64], needs: &[bool]) -> InputGrads {
        let a = inputs[0].data();
        let b = inputs[1].data();
        let n = a.len() as f64;
        let g = out_grad[0];
        let da = if needs[0] {
            Some(
                a.iter()
                    .zip(b.iter())
                    .map(|(&x, &y)| g * 2.0 * (x - y) / n)
                    .collect(),
            )
        } else {
            None
        };
        let db = if needs[1] {
            Some(
                a.iter()
                    .zip(b.iter())
                    .map(|(&x, &y)| g * -2.0 * (x - y) / n)
                    .collect(),
            )
        } else {
            None
        };
        vec![da, db]
    }
}

/// Mean squared elementwise difference.
pub fn mse_loss(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Dim(format!(
            "mse_loss shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let ad = a.data();
    let bd = b.data();
    let n = ad.len() as f64;
    let s: f64 = ad.iter().zip(bd.iter()).map(|(&x, &y)| (x - y) * (x - y)).sum();
    drop(ad);
    drop(bd);
    Ok(Tensor::from_op(
        vec![],
        vec![s / n],
        vec![a.clone(), b.clone()],
        Box::new(MseLoss),
    ))
}

struct CrossEntropy {
    labels: Vec<usize>,
    probs: Vec<f64>,
}

impl BackwardRule for CrossEntropy {
    fn op_name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, inputs: &[Tensor], out_grad: &[f64], needs: &[bool]) -> InputGrads {
        vec![if needs[0] {
            let shape = inputs[0].shape();
            let (n, c) = (shape[0], shape[1]);
            let g = out_grad[0];
            let mut dl = vec![0.0; n * c];
            for row in 0..n {
                for col in 0..c {
                    let p = self.probs[row * c + col];
                    let t = if self.labels[row] == col { 1.0 } else { 0.0 };
                    dl[row * c + col] = g * (p - t) / n as f64;
                }
            }
            Some(dl)
        } else {
            None
        }]
    }
}

/// Mean negative log-likelihood of `labels` under row-softmax of `logits`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(Error::Dim(format!(
            "cross_entropy expects [N,C] logits, got {:?}",
            shape
        )));
    }
    let (n, c) = (shape[0], shape[1]);
    if labels.len() != n {
        return Err(Error::Dim(format!(
            "cross_entropy: {} logit rows but {} labels",
            n,
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Index(format!(
            "label {} out of range for {} classes",
            bad, c
        )));
    }
    let ld = logits.data();
    let mut probs = vec![0.0; n * c];
    let mut loss = 0.0;
    for row in 0..n {
        let r = &ld[row * c..(row + 1) * c];
        let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for col in 0..c {
            let e = (r[col] - max).exp();
            probs[row * c + col] = e;
            sum += e;
        }
        for col in 0..c {
            probs[row * c + col] /= sum;
        }
        let lse = max + sum.ln();
        loss += lse - r[labels[row]];
    }
    drop(ld);
    Ok(Tensor::from_op(
        vec![],
        vec![loss / n as f64],
        vec![logits.clone()],
        Box::new(CrossEntropy { labels: labels.to_vec(), probs }),
    ))
}
