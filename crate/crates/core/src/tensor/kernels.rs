//! Plain (tape-free) compute kernels shared by `Tensor` and `Var`.

use rayon::prelude::*;

use super::{check_finite, numel_of, strides_of, Float, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }

    #[inline]
    fn apply<T: Float>(self, a: T, b: T) -> T {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }
}

/// How `b` is laid over `a` under the trailing-dimension broadcast rule.
#[derive(Debug, Clone)]
pub(crate) enum Broadcast {
    Same,
    Scalar,
    /// `b` equals the trailing dims of `a`: index is `i % b.numel()`.
    Suffix(usize),
    General(Vec<usize>),
}

pub(crate) fn broadcast_plan(a: &[usize], b: &[usize], op: &'static str) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::Same);
    }
    let mismatch = || Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if b.len() > a.len() {
        return Err(mismatch());
    }
    let offset = a.len() - b.len();
    for (i, &bd) in b.iter().enumerate() {
        let ad = a[offset + i];
        if bd != ad && bd != 1 {
            return Err(mismatch());
        }
    }
    let bn = numel_of(b);
    if bn == 1 {
        return Ok(Broadcast::Scalar);
    }
    if a[offset..] == *b {
        return Ok(Broadcast::Suffix(bn));
    }
    // Effective stride of each `a` dim inside `b` (0 where broadcast).
    let bstrides = strides_of(b);
    let mut eff = vec![0; a.len()];
    for (i, &bd) in b.iter().enumerate() {
        if bd != 1 {
            eff[offset + i] = bstrides[i];
        }
    }
    Ok(Broadcast::General(eff))
}

/// Index of `b` for every flat index of `a`.
fn for_each_b_index(a_shape: &[usize], plan: &Broadcast, mut f: impl FnMut(usize, usize)) {
    let n = numel_of(a_shape);
    match plan {
        Broadcast::Same => (0..n).for_each(|i| f(i, i)),
        Broadcast::Scalar => (0..n).for_each(|i| f(i, 0)),
        Broadcast::Suffix(bn) => (0..n).for_each(|i| f(i, i % bn)),
        Broadcast::General(eff) => {
            let rank = a_shape.len();
            let mut idx = vec![0usize; rank];
            let mut bi = 0usize;
            for i in 0..n {
                f(i, bi);
                for d in (0..rank).rev() {
                    idx[d] += 1;
                    bi += eff[d];
                    if idx[d] < a_shape[d] {
                        break;
                    }
                    bi -= eff[d] * a_shape[d];
                    idx[d] = 0;
                }
            }
        }
    }
}

pub fn binary<T: Float>(op: BinaryOp, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let plan = broadcast_plan(a.shape(), b.shape(), op.name())?;
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); a.numel()];
    match plan {
        Broadcast::Same => {
            for ((o, &x), &y) in out.iter_mut().zip(ad).zip(bd) {
                *o = op.apply(x, y);
            }
        }
        Broadcast::Scalar => {
            let y = bd[0];
            for (o, &x) in out.iter_mut().zip(ad) {
                *o = op.apply(x, y);
            }
        }
        _ => for_each_b_index(a.shape(), &plan, |i, j| out[i] = op.apply(ad[i], bd[j])),
    }
    check_finite(op.name(), &out)?;
    Ok(Tensor::from_parts(a.shape().to_vec(), out))
}

/// Sum `grad` (shaped like `a`) down onto the broadcast operand shape `b`.
pub fn reduce_broadcast<T: Float>(grad: &Tensor<T>, b_shape: &[usize]) -> Result<Tensor<T>> {
    let plan = broadcast_plan(grad.shape(), b_shape, "reduce_broadcast")?;
    if let Broadcast::Same = plan {
        return Ok(grad.clone());
    }
    let mut acc = vec![0f64; numel_of(b_shape)];
    let gd = grad.data();
    for_each_b_index(grad.shape(), &plan, |i, j| acc[j] += gd[i].to_wide());
    Ok(Tensor::from_parts(
        b_shape.to_vec(),
        acc.into_iter().map(T::from_wide).collect(),
    ))
}

/// Repeat `t` to `shape` (inverse of [`reduce_broadcast`]).
pub fn broadcast_to<T: Float>(t: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let plan = broadcast_plan(shape, t.shape(), "broadcast_to")?;
    let td = t.data();
    let mut out = vec![T::zero(); numel_of(shape)];
    for_each_b_index(shape, &plan, |i, j| out[i] = td[j]);
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

pub fn unary<T: Float>(name: &'static str, a: &Tensor<T>, f: impl Fn(T) -> T) -> Result<Tensor<T>> {
    let out: Vec<T> = a.data().iter().map(|&v| f(v)).collect();
    check_finite(name, &out)?;
    Ok(Tensor::from_parts(a.shape().to_vec(), out))
}

fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::InvalidAxis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = numel_of(&shape[..axis]);
    let inner = numel_of(&shape[axis + 1..]);
    Ok((outer, shape[axis], inner))
}

/// Sum along `axis`, keeping it as a length-1 dimension.
pub fn sum_axis<T: Float>(a: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = split_axis(a.shape(), axis)?;
    let ad = a.data();
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let mut acc = 0f64;
            for k in 0..len {
                acc += ad[(o * len + k) * inner + i].to_wide();
            }
            out.push(T::from_wide(acc));
        }
    }
    let mut shape = a.shape().to_vec();
    shape[axis] = 1;
    check_finite("sum_axis", &out)?;
    Ok(Tensor::from_parts(shape, out))
}

pub fn softmax<T: Float>(a: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = split_axis(a.shape(), axis)?;
    let ad = a.data();
    let mut out = vec![T::zero(); a.numel()];
    let mut buf = vec![0f64; len];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let max = (0..len)
                .map(|k| ad[at(k)].to_wide())
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0f64;
            for (k, slot) in buf.iter_mut().enumerate() {
                *slot = (ad[at(k)].to_wide() - max).exp();
                total += *slot;
            }
            for (k, &e) in buf.iter().enumerate() {
                out[at(k)] = T::from_wide(e / total);
            }
        }
    }
    check_finite("softmax", &out)?;
    Ok(Tensor::from_parts(a.shape().to_vec(), out))
}

/// `dx = y ⊙ (dy − Σ_axis dy ⊙ y)`.
pub fn softmax_backward<T: Float>(y: &Tensor<T>, dy: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = split_axis(y.shape(), axis)?;
    let (yd, gd) = (y.data(), dy.data());
    let mut out = vec![T::zero(); y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let dot: f64 = (0..len)
                .map(|k| yd[at(k)].to_wide() * gd[at(k)].to_wide())
                .sum();
            for k in 0..len {
                let j = at(k);
                out[j] = T::from_wide(yd[j].to_wide() * (gd[j].to_wide() - dot));
            }
        }
    }
    Ok(Tensor::from_parts(y.shape().to_vec(), out))
}

pub fn permute<T: Float>(a: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let rank = a.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&x| x >= rank || std::mem::replace(&mut seen[x], true)) {
        return Err(Error::InvalidShape {
            shape: a.shape().to_vec(),
            reason: format!("invalid permutation {axes:?}"),
        });
    }
    if axes.iter().enumerate().all(|(i, &x)| i == x) {
        return Ok(a.clone());
    }
    let in_strides = a.strides();
    let out_shape: Vec<usize> = axes.iter().map(|&x| a.shape()[x]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&x| in_strides[x]).collect();
    let ad = a.data();
    let n = a.numel();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(ad[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

pub fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &x) in axes.iter().enumerate() {
        inv[x] = i;
    }
    inv
}

pub fn transpose_last2<T: Float>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let r = a.rank();
    if r < 2 {
        return Err(Error::InvalidShape {
            shape: a.shape().to_vec(),
            reason: "transpose needs rank >= 2".into(),
        });
    }
    let mut axes: Vec<usize> = (0..r).collect();
    axes.swap(r - 2, r - 1);
    permute(a, &axes)
}

/// Batched matmul `[.., M, K] × [.., K, N]`; a rank-2 `b` is shared across the batch.
pub fn matmul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mismatch = || Error::ShapeMismatch {
        op: "matmul",
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    };
    if a.rank() < 2 || b.rank() < 2 {
        return Err(mismatch());
    }
    let (ar, br) = (a.rank(), b.rank());
    let (m, k) = (a.shape()[ar - 2], a.shape()[ar - 1]);
    let (k2, n) = (b.shape()[br - 2], b.shape()[br - 1]);
    if k != k2 {
        return Err(mismatch());
    }
    let batch_shape = &a.shape()[..ar - 2];
    let shared_b = br == 2;
    if !shared_b && b.shape()[..br - 2] != *batch_shape {
        return Err(mismatch());
    }
    let batch = numel_of(batch_shape);
    let bw: Vec<f64> = b.data().iter().map(|v| v.to_wide()).collect();
    let ad = a.data();
    let mut out = vec![T::zero(); batch * m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(row, dst)| {
        let bi = row / m;
        let arow = &ad[row * k..(row + 1) * k];
        let boff = if shared_b { 0 } else { bi * k * n };
        let mut acc = vec![0f64; n];
        for (p, &av) in arow.iter().enumerate() {
            let av = av.to_wide();
            if av == 0.0 {
                continue;
            }
            let brow = &bw[boff + p * n..boff + (p + 1) * n];
            for (s, &bv) in acc.iter_mut().zip(brow) {
                *s += av * bv;
            }
        }
        for (d, s) in dst.iter_mut().zip(acc) {
            *d = T::from_wide(s);
        }
    });
    check_finite("matmul", &out)?;
    let mut shape = batch_shape.to_vec();
    shape.extend([m, n]);
    Ok(Tensor::from_parts(shape, out))
}

pub fn narrow<T: Float>(a: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    let (outer, dim, inner) = split_axis(a.shape(), axis)?;
    if len == 0 || start + len > dim {
        return Err(Error::InvalidShape {
            shape: a.shape().to_vec(),
            reason: format!("narrow [{start}, {}) out of range on axis {axis}", start + len),
        });
    }
    let ad = a.data();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * dim + start) * inner;
        out.extend_from_slice(&ad[base..base + len * inner]);
    }
    let mut shape = a.shape().to_vec();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, out))
}

pub fn concat<T: Float>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::InvalidShape {
        shape: vec![],
        reason: "concat of zero tensors".into(),
    })?;
    split_axis(first.shape(), axis)?;
    let mut total = 0;
    for p in parts {
        let same_rank = p.rank() == first.rank();
        let compatible = same_rank
            && p
                .shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(d, (x, y))| d == axis || x == y);
        if !compatible {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        total += p.shape()[axis];
    }
    let outer = numel_of(&first.shape()[..axis]);
    let inner = numel_of(&first.shape()[axis + 1..]);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, out))
}
