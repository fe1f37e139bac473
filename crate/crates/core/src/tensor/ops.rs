//! Differentiable operations on [`Var`].

use std::rc::Rc;

use super::dense::{
    axis_split, broadcast_shape, broadcast_strides, contiguous_strides, for_each_broadcast, Tensor,
};
use super::tape::Var;
use crate::error::TensorError;

/// Index value marking a zero-filled slot in [`Var::gather`].
pub const PAD: usize = usize::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryKind {
    fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }
}

fn binary_backward(
    kind: BinaryKind,
    a: &Tensor,
    b: &Tensor,
    out_shape: &[usize],
    g: &[f64],
    need: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let (ad, bd) = (a.data(), b.data());
    if a.shape() == b.shape() {
        let ga = need[0].then(|| match kind {
            BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
            BinaryKind::Mul => g.iter().zip(bd).map(|(g, b)| g * b).collect(),
            BinaryKind::Div => g.iter().zip(bd).map(|(g, b)| g / b).collect(),
        });
        let gb = need[1].then(|| match kind {
            BinaryKind::Add => g.to_vec(),
            BinaryKind::Sub => g.iter().map(|g| -g).collect(),
            BinaryKind::Mul => g.iter().zip(ad).map(|(g, a)| g * a).collect(),
            BinaryKind::Div => g
                .iter()
                .zip(ad)
                .zip(bd)
                .map(|((g, a), b)| -g * a / (b * b))
                .collect(),
        });
        return vec![ga, gb];
    }
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    let ga = need[0].then(|| {
        let mut ga = vec![0.0; a.numel()];
        match kind {
            BinaryKind::Add | BinaryKind::Sub => {
                for_each_broadcast(out_shape, &sa, &sb, |k, ia, _| ga[ia] += g[k])
            }
            BinaryKind::Mul => {
                for_each_broadcast(out_shape, &sa, &sb, |k, ia, ib| ga[ia] += g[k] * bd[ib])
            }
            BinaryKind::Div => {
                for_each_broadcast(out_shape, &sa, &sb, |k, ia, ib| ga[ia] += g[k] / bd[ib])
            }
        }
        ga
    });
    let gb = need[1].then(|| {
        let mut gb = vec![0.0; b.numel()];
        match kind {
            BinaryKind::Add => for_each_broadcast(out_shape, &sa, &sb, |k, _, ib| gb[ib] += g[k]),
            BinaryKind::Sub => for_each_broadcast(out_shape, &sa, &sb, |k, _, ib| gb[ib] -= g[k]),
            BinaryKind::Mul => {
                for_each_broadcast(out_shape, &sa, &sb, |k, ia, ib| gb[ib] += g[k] * ad[ia])
            }
            BinaryKind::Div => for_each_broadcast(out_shape, &sa, &sb, |k, ia, ib| {
                gb[ib] -= g[k] * ad[ia] / (bd[ib] * bd[ib])
            }),
        }
        gb
    });
    vec![ga, gb]
}

impl<'t> Var<'t> {
    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    fn binary(self, rhs: Var<'t>, kind: BinaryKind) -> Result<Var<'t>, TensorError> {
        self.same_tape(&rhs);
        let a = self.value();
        let b = rhs.value();
        if kind == BinaryKind::Div && b.data().contains(&0.0) {
            return Err(TensorError::DivByZero { op: "div" });
        }
        let out_shape = broadcast_shape(kind.name(), a.shape(), b.shape())?;
        let out = match kind {
            BinaryKind::Add => binary_forward(&a, &b, &out_shape, |x, y| x + y),
            BinaryKind::Sub => binary_forward(&a, &b, &out_shape, |x, y| x - y),
            BinaryKind::Mul => binary_forward(&a, &b, &out_shape, |x, y| x * y),
            BinaryKind::Div => binary_forward(&a, &b, &out_shape, |x, y| x / y),
        };
        let value = Tensor::from_parts(out_shape.clone(), out);
        Ok(self.tape.push(value, &[self, rhs], move |g, need| {
            binary_backward(kind, &a, &b, &out_shape, g, need)
        }))
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(rhs, BinaryKind::Add)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(rhs, BinaryKind::Sub)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(rhs, BinaryKind::Mul)
    }

    /// Elementwise division; any zero in the divisor is an error.
    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(rhs, BinaryKind::Div)
    }

    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    fn unary(
        self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        let x = self.value();
        let y: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
        let y = Rc::new(Tensor::from_parts(x.shape().to_vec(), y));
        let y_keep = y.clone();
        self.tape
            .push(y, &[self], move |g, _| {
                let gx = x
                    .data()
                    .iter()
                    .zip(y_keep.data())
                    .zip(g)
                    .map(|((&xv, &yv), &gv)| gv * df(xv, yv))
                    .collect();
                vec![Some(gx)]
            })
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(|x| -x, |_, _| -1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn mul_scalar(self, c: f64) -> Var<'t> {
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn exp(self) -> Result<Var<'t>, TensorError> {
        let out = self.unary(f64::exp, |_, y| y);
        if !out.value().all_finite() {
            return Err(TensorError::NonFinite { op: "exp" });
        }
        Ok(out)
    }

    /// Natural logarithm; non-positive arguments are a domain error.
    pub fn ln(self) -> Result<Var<'t>, TensorError> {
        if let Some(&bad) = self.value().data().iter().find(|&&v| v <= 0.0) {
            return Err(TensorError::Domain { op: "log", value: bad });
        }
        Ok(self.unary(f64::ln, |x, _| 1.0 / x))
    }

    pub fn sqrt(self) -> Result<Var<'t>, TensorError> {
        if let Some(&bad) = self.value().data().iter().find(|&&v| v < 0.0) {
            return Err(TensorError::Domain { op: "sqrt", value: bad });
        }
        Ok(self.unary(f64::sqrt, |_, y| 0.5 / y))
    }

    /// Length of the squashed vector, `n^{3/2} / ((1+n)·√(n+ε))`, from its
    /// squared pre-squash norm `n ≥ 0`. The derivative stays finite at 0.
    pub fn squash_length(self, eps: f64) -> Result<Var<'t>, TensorError> {
        if let Some(&bad) = self.value().data().iter().find(|&&v| v < 0.0) {
            return Err(TensorError::Domain { op: "squash_length", value: bad });
        }
        Ok(self.unary(
            move |n| n / (1.0 + n) * (n / (n + eps)).sqrt(),
            move |n, _| {
                let scale = n.sqrt() / ((1.0 + n) * (n + eps).sqrt());
                scale * (1.5 - n / (1.0 + n) - 0.5 * n / (n + eps))
            },
        ))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    /// Logistic sigmoid `1 / (1 + e^-x)`.
    pub fn logistic(self) -> Var<'t> {
        self.unary(logistic, |_, y| y * (1.0 - y))
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(
            |x| if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() },
            |x, _| logistic(x),
        )
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// `max(x, lo)`; no gradient flows through clamped entries.
    pub fn clamp_min(self, lo: f64) -> Var<'t> {
        self.unary(move |x| x.max(lo), move |x, _| if x > lo { 1.0 } else { 0.0 })
    }

    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let total = x.sum();
        let n = x.numel();
        self.tape
            .push(Tensor::scalar(total), &[self], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.numel() as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    fn check_axis(&self, axis: usize) -> Result<Vec<usize>, TensorError> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                axis,
                rank: shape.len(),
            });
        }
        Ok(shape)
    }

    /// Sum along `axis`, keeping it as an extent-1 dimension when `keepdim`.
    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t>, TensorError> {
        let shape = self.check_axis(axis)?;
        let (outer, n, inner) = axis_split(&shape, axis);
        let x = self.value();
        let xd = x.data();
        let mut out = vec![0.0; outer * inner];
        if inner == 1 {
            for (d, row) in out.iter_mut().zip(xd.chunks(n)) {
                *d = row.iter().sum();
            }
        } else {
            sum_middle(xd, &mut out, outer, n, inner);
        }
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
            if out_shape.is_empty() {
                out_shape.push(1);
            }
        }
        Ok(self
            .tape
            .push(Tensor::from_parts(out_shape, out), &[self], move |g, _| {
                if inner == 1 {
                    return vec![Some(g.iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect())];
                }
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for j in 0..n {
                        gx[(o * n + j) * inner..(o * n + j + 1) * inner].copy_from_slice(src);
                    }
                }
                vec![Some(gx)]
            }))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>, TensorError> {
        let shape = self.check_axis(axis)?;
        let (outer, n, inner) = axis_split(&shape, axis);
        let x = self.value();
        let xd = x.data();
        let mut y = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| xd[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (xd[at(j)] - max).exp();
                    y[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    y[at(j)] /= z;
                }
            }
        }
        let y = Rc::new(Tensor::from_parts(shape, y));
        let y_keep = y.clone();
        Ok(self
            .tape
            .push(y, &[self], move |g, _| {
                let yd = y_keep.data();
                let mut gx = vec![0.0; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| g[at(j)] * yd[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] = yd[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>, TensorError> {
        let x = self.value();
        if shape.iter().product::<usize>() != x.numel() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: x.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor::new(shape, x.data().to_vec())?;
        Ok(self.tape.push(value, &[self], |g, _| vec![Some(g.to_vec())]))
    }

    /// `out[k] = x[index[k]]`, or zero where `index[k] == PAD`.
    pub fn gather(self, index: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var<'t>, TensorError> {
        let x = self.value();
        if shape.iter().product::<usize>() != index.len() || shape.contains(&0) {
            return Err(TensorError::Length {
                shape: shape.to_vec(),
                len: index.len(),
            });
        }
        let xd = x.data();
        if let Some(&bad) = index.iter().find(|&&i| i != PAD && i >= xd.len()) {
            return Err(TensorError::Config {
                op: "gather",
                reason: format!("index {bad} out of range for {} values", xd.len()),
            });
        }
        let out = index
            .iter()
            .map(|&i| if i == PAD { 0.0 } else { xd[i] })
            .collect();
        let n_in = x.numel();
        Ok(self
            .tape
            .push(Tensor::from_parts(shape.to_vec(), out), &[self], move |g, _| {
                let mut gx = vec![0.0; n_in];
                for (&i, &gv) in index.iter().zip(g) {
                    if i != PAD {
                        gx[i] += gv;
                    }
                }
                vec![Some(gx)]
            }))
    }

    /// Reorders dimensions so that output dimension `k` is input dimension `axes[k]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>, TensorError> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::Config {
                op: "permute",
                reason: format!("{axes:?} is not a permutation of rank {}", shape.len()),
            });
        }
        let in_strides = contiguous_strides(&shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let zero = vec![0; shape.len()];
        let mut index = vec![0; self.numel()];
        for_each_broadcast(&out_shape, &strides, &zero, |k, i, _| index[k] = i);
        self.gather(Rc::new(index), &out_shape)
    }

    /// Batched matrix product over the last two dimensions, broadcasting the
    /// leading (batch) dimensions.
    pub fn bmm(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(&rhs);
        let a = self.value();
        let b = rhs.value();
        let (sa, sb) = (a.shape(), b.shape());
        let mismatch = || TensorError::Shape {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let batch = broadcast_shape("matmul", batch_a, batch_b).map_err(|_| mismatch())?;
        let plan = Rc::new(BatchPlan::new(batch_a, batch_b, &batch));
        let nb = plan.pairs.len();
        let mut out = vec![0.0; nb * m * n];
        let (ad, bd) = (a.data(), b.data());
        for (t, &(ia, ib)) in plan.pairs.iter().enumerate() {
            mm_acc(
                &ad[ia * m * k..(ia + 1) * m * k],
                &bd[ib * k * n..(ib + 1) * k * n],
                &mut out[t * m * n..(t + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut out_shape = batch;
        out_shape.extend([m, n]);
        Ok(self.tape.push(
            Tensor::from_parts(out_shape, out),
            &[self, rhs],
            move |g, need| {
                let (ad, bd) = (a.data(), b.data());
                let mut ga = need[0].then(|| vec![0.0; a.numel()]);
                let mut gb = need[1].then(|| vec![0.0; b.numel()]);
                for (t, &(ia, ib)) in plan.pairs.iter().enumerate() {
                    let gt = &g[t * m * n..(t + 1) * m * n];
                    if let Some(ga) = ga.as_mut() {
                        let bt = &bd[ib * k * n..(ib + 1) * k * n];
                        mm_acc_bt(gt, bt, &mut ga[ia * m * k..(ia + 1) * m * k], k, n);
                    }
                    if let Some(gb) = gb.as_mut() {
                        let at = &ad[ia * m * k..(ia + 1) * m * k];
                        mm_acc_at(at, gt, &mut gb[ib * k * n..(ib + 1) * k * n], k, n);
                    }
                }
                vec![ga, gb]
            },
        ))
    }

    /// Plain 2-D matrix product.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        self.bmm(rhs)
    }

    /// Zero-padded 2-D cross-correlation of `self` (N×C×H×W) with `kernel`
    /// (O×C×K×K), computed by patch flattening followed by a matrix product.
    pub fn conv2d(
        self,
        kernel: Var<'t>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t>, TensorError> {
        let xs = self.shape();
        let ks = kernel.shape();
        if xs.len() != 4 || ks.len() != 4 || ks[1] != xs[1] || ks[2] != ks[3] {
            return Err(TensorError::Shape {
                op: "conv2d",
                lhs: xs,
                rhs: ks,
            });
        }
        let geom = ConvGeometry::new(xs[2], xs[3], ks[2], stride, padding)?;
        let (n, c, o, kk) = (xs[0], xs[1], ks[0], ks[2]);
        let (oh, ow) = (geom.out_h, geom.out_w);
        let index = Rc::new(geom.im2col_index(n, c));
        let cols = self.gather(index, &[n * oh * ow, c * kk * kk])?;
        let w = kernel.reshape(&[o, c * kk * kk])?.permute(&[1, 0])?;
        cols.matmul(w)?
            .reshape(&[n, oh, ow, o])?
            .permute(&[0, 3, 1, 2])
    }
}

pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn sum_middle(xd: &[f64], out: &mut [f64], outer: usize, n: usize, inner: usize) {
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for j in 0..n {
            let src = &xd[(o * n + j) * inner..(o * n + j + 1) * inner];
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
    }
}

fn binary_forward(a: &Tensor, b: &Tensor, out_shape: &[usize], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let (ad, bd) = (a.data(), b.data());
    if a.shape() == b.shape() {
        return ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect();
    }
    let mut out = vec![0.0; out_shape.iter().product()];
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    for_each_broadcast(out_shape, &sa, &sb, |k, ia, ib| out[k] = f(ad[ia], bd[ib]));
    out
}

/// `c += a · b` for row-major `a` (m×k) and `b` (k×n).
fn mm_acc(a: &[f64], b: &[f64], c: &mut [f64], _m: usize, k: usize, n: usize) {
    for (row, arow) in c.chunks_exact_mut(n).zip(a.chunks_exact(k)) {
        for (&av, brow) in arow.iter().zip(b.chunks_exact(n)) {
            row.iter_mut().zip(brow).for_each(|(c, &bv)| *c += av * bv);
        }
    }
}

/// `da += g · bᵀ` for `g` (m×n) and `b` (k×n).
fn mm_acc_bt(g: &[f64], b: &[f64], da: &mut [f64], k: usize, n: usize) {
    for (drow, grow) in da.chunks_exact_mut(k).zip(g.chunks_exact(n)) {
        for (d, brow) in drow.iter_mut().zip(b.chunks_exact(n)) {
            *d += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `db += aᵀ · g` for `a` (m×k) and `g` (m×n).
fn mm_acc_at(a: &[f64], g: &[f64], db: &mut [f64], k: usize, n: usize) {
    for (arow, grow) in a.chunks_exact(k).zip(g.chunks_exact(n)) {
        for (&av, drow) in arow.iter().zip(db.chunks_exact_mut(n)) {
            drow.iter_mut().zip(grow).for_each(|(d, &gv)| *d += av * gv);
        }
    }
}

/// Matrix-index pairs for every element of a broadcast batch.
struct BatchPlan {
    pairs: Vec<(usize, usize)>,
}

impl BatchPlan {
    fn new(batch_a: &[usize], batch_b: &[usize], batch: &[usize]) -> Self {
        let sa = broadcast_strides(batch_a, batch);
        let sb = broadcast_strides(batch_b, batch);
        let mut pairs = Vec::with_capacity(batch.iter().product());
        for_each_broadcast(batch, &sa, &sb, |_, ia, ib| pairs.push((ia, ib)));
        BatchPlan { pairs }
    }
}

/// Output geometry of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        in_h: usize,
        in_w: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self, TensorError> {
        if stride == 0 || kernel == 0 || kernel > in_h + 2 * padding || kernel > in_w + 2 * padding {
            return Err(TensorError::Config {
                op: "conv2d",
                reason: format!(
                    "kernel {kernel}, stride {stride}, padding {padding} on {in_h}x{in_w} gives no output"
                ),
            });
        }
        Ok(ConvGeometry {
            in_h,
            in_w,
            kernel,
            stride,
            padding,
            out_h: (in_h + 2 * padding - kernel) / stride + 1,
            out_w: (in_w + 2 * padding - kernel) / stride + 1,
        })
    }

    /// Flat input offset of kernel tap (`ky`, `kx`) for output (`oy`, `ox`)
    /// within one H×W plane, or `None` inside the zero padding.
    pub fn tap(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (oy * self.stride + ky) as isize - self.padding as isize;
        let x = (ox * self.stride + kx) as isize - self.padding as isize;
        if y < 0 || x < 0 || y >= self.in_h as isize || x >= self.in_w as isize {
            None
        } else {
            Some(y as usize * self.in_w + x as usize)
        }
    }

    /// Gather index turning N×C×H×W into rows of C·K·K patch values.
    fn im2col_index(&self, n: usize, c: usize) -> Vec<usize> {
        let k = self.kernel;
        let plane = self.in_h * self.in_w;
        let mut index = Vec::with_capacity(n * self.out_h * self.out_w * c * k * k);
        for b in 0..n {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    for ch in 0..c {
                        let base = (b * c + ch) * plane;
                        for ky in 0..k {
                            for kx in 0..k {
                                index.push(self.tap(oy, ox, ky, kx).map_or(PAD, |t| base + t));
                            }
                        }
                    }
                }
            }
        }
        index
    }
}
