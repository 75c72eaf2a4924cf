use std::rc::Rc;
use std::sync::Arc;

use super::kernels::{self, BinaryOp};
use super::tape::{BackwardFn, TapeCell};
use super::{check_finite, Float, SparseMap, Tensor};
use crate::error::{Error, Result};

#[derive(Clone)]
struct NodeRef<T: Float> {
    tape: Rc<TapeCell<T>>,
    id: usize,
}

/// A tensor value that may participate in a [`super::Tape`].
///
/// Untracked vars behave like plain tensors. An op produces a tracked var
/// whenever at least one input is tracked.
#[derive(Clone)]
pub struct Var<T: Float = f32> {
    value: Tensor<T>,
    node: Option<NodeRef<T>>,
}

impl<T: Float> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("value", &self.value)
            .field("node", &self.node.as_ref().map(|n| n.id))
            .finish()
    }
}

impl<T: Float> From<Tensor<T>> for Var<T> {
    fn from(value: Tensor<T>) -> Self {
        Self::constant(value)
    }
}

type Rule<T> = dyn Fn(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>>;

impl<T: Float> Var<T> {
    pub fn constant(value: Tensor<T>) -> Self {
        Self { value, node: None }
    }

    pub(crate) fn tracked(value: Tensor<T>, tape: Rc<TapeCell<T>>, id: usize) -> Self {
        Self {
            value,
            node: Some(NodeRef { tape, id }),
        }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn into_value(self) -> Tensor<T> {
        self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub(crate) fn node_id(&self) -> Option<usize> {
        self.node.as_ref().map(|n| n.id)
    }

    pub(crate) fn node_on(&self, tape: &Rc<TapeCell<T>>) -> Option<usize> {
        self.node
            .as_ref()
            .filter(|n| Rc::ptr_eq(&n.tape, tape))
            .map(|n| n.id)
    }

    fn record(value: Tensor<T>, inputs: &[&Var<T>], rule: Box<Rule<T>>) -> Result<Self> {
        let mut tape: Option<&Rc<TapeCell<T>>> = None;
        for node in inputs.iter().filter_map(|v| v.node.as_ref()) {
            match tape {
                None => tape = Some(&node.tape),
                Some(t) if !Rc::ptr_eq(t, &node.tape) => return Err(Error::TapeMismatch),
                _ => {}
            }
        }
        let Some(tape) = tape else {
            return Ok(Self::constant(value));
        };
        let needs: Vec<bool> = inputs.iter().map(|v| v.is_tracked()).collect();
        let ids: Vec<usize> = inputs.iter().filter_map(|v| v.node_id()).collect();
        let backward: BackwardFn<T> = Box::new(move |g| {
            let grads = rule(g, &needs)?;
            grads
                .into_iter()
                .zip(&needs)
                .filter(|(_, &n)| n)
                .map(|(g, _)| {
                    g.ok_or_else(|| Error::Config("backward rule skipped a tracked input".into()))
                })
                .collect()
        });
        let id = tape.push(value.shape().to_vec(), ids, Some(backward))?;
        Ok(Self::tracked(value, Rc::clone(tape), id))
    }

    /// Value-identical copy that blocks gradient flow.
    pub fn stop_gradient(&self) -> Self {
        Self::constant(self.value.clone())
    }

    fn binary(&self, op: BinaryOp, other: &Self) -> Result<Self> {
        let out = kernels::binary(op, &self.value, &other.value)?;
        let (a, b) = (self.value.clone(), other.value.clone());
        let b_shape = b.shape().to_vec();
        let rule = move |g: &Tensor<T>, needs: &[bool]| -> Result<Vec<Option<Tensor<T>>>> {
            let ga = if !needs[0] {
                None
            } else {
                Some(match op {
                    BinaryOp::Add | BinaryOp::Sub => g.clone(),
                    BinaryOp::Mul => kernels::binary(BinaryOp::Mul, g, &b)?,
                    BinaryOp::Div => kernels::binary(BinaryOp::Div, g, &b)?,
                })
            };
            let gb = if !needs[1] {
                None
            } else {
                let full = match op {
                    BinaryOp::Add => g.clone(),
                    BinaryOp::Sub => g.scale(-1.0),
                    BinaryOp::Mul => kernels::binary(BinaryOp::Mul, g, &a)?,
                    BinaryOp::Div => {
                        // d(a/b)/db = -a/b²
                        let q = kernels::binary(BinaryOp::Div, &a, &b)?;
                        let q = kernels::binary(BinaryOp::Div, &q, &b)?;
                        kernels::binary(BinaryOp::Mul, g, &q)?.scale(-1.0)
                    }
                };
                Some(kernels::reduce_broadcast(&full, &b_shape)?)
            };
            Ok(vec![ga, gb])
        };
        Self::record(out, &[self, other], Box::new(rule))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.binary(BinaryOp::Add, other)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.binary(BinaryOp::Sub, other)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.binary(BinaryOp::Mul, other)
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        self.binary(BinaryOp::Div, other)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Self> {
        let out = kernels::unary("add_scalar", &self.value, |v| T::from_wide(v.to_wide() + c))?;
        Self::record(out, &[self], Box::new(|g, _| Ok(vec![Some(g.clone())])))
    }

    pub fn mul_scalar(&self, c: f64) -> Result<Self> {
        let out = kernels::unary("mul_scalar", &self.value, |v| T::from_wide(v.to_wide() * c))?;
        Self::record(out, &[self], Box::new(move |g, _| Ok(vec![Some(g.scale(c))])))
    }

    pub fn neg(&self) -> Result<Self> {
        self.mul_scalar(-1.0)
    }

    /// Elementwise map with derivative expressed through input `x` and output `y`.
    fn pointwise(
        &self,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Self> {
        let out = kernels::unary(name, &self.value, |v| T::from_wide(f(v.to_wide())))?;
        let (x, y) = (self.value.clone(), out.clone());
        let rule = move |g: &Tensor<T>, _: &[bool]| -> Result<Vec<Option<Tensor<T>>>> {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(y.data())
                .map(|((&g, &x), &y)| T::from_wide(g.to_wide() * df(x.to_wide(), y.to_wide())))
                .collect();
            Ok(vec![Some(Tensor::from_parts(g.shape().to_vec(), data))])
        };
        Self::record(out, &[self], Box::new(rule))
    }

    pub fn square(&self) -> Result<Self> {
        self.pointwise("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(&self) -> Result<Self> {
        self.pointwise("sqrt", f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn exp(&self) -> Result<Self> {
        self.pointwise("exp", f64::exp, |_, y| y)
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&self) -> Result<Self> {
        self.pointwise(
            "silu",
            |x| x / (1.0 + (-x).exp()),
            |x, _| {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    pub fn sum_all(&self) -> Result<Self> {
        let total = T::from_wide(self.value.sum());
        check_finite("sum_all", &[total])?;
        let shape = self.value.shape().to_vec();
        let rule = move |g: &Tensor<T>, _: &[bool]| -> Result<Vec<Option<Tensor<T>>>> {
            Ok(vec![Some(Tensor::full(shape.clone(), g.data()[0])?)])
        };
        Self::record(Tensor::scalar(total), &[self], Box::new(rule))
    }

    /// Sum along `axis`, which is kept with length 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        let out = kernels::sum_axis(&self.value, axis)?;
        let shape = self.value.shape().to_vec();
        let rule = move |g: &Tensor<T>, _: &[bool]| -> Result<Vec<Option<Tensor<T>>>> {
            Ok(vec![Some(kernels::broadcast_to(g, &shape)?)])
        };
        Self::record(out, &[self], Box::new(rule))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Self> {
        let len = *self.shape().get(axis).ok_or(Error::InvalidAxis {
            axis,
            rank: self.value.rank(),
        })?;
        self.sum_axis(axis)?.mul_scalar(1.0 / len as f64)
    }

    pub fn softmax(&self, axis: usize) -> Result<Self> {
        let out = kernels::softmax(&self.value, axis)?;
        let y = out.clone();
        let rule = move |g: &Tensor<T>, _: &[bool]| -> Result<Vec<Option<Tensor<T>>>> {
            Ok(vec![Some(kernels::softmax_backward(&y, g, axis)?)])
        };
        Self::record(out, &[self], Box::new(rule))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let out = kernels::matmul(&self.value, &other.value)?;
        let (a, b) = (self.value.clone(), other.value.clone());
        let rule = move |g: &Tensor<T>, needs: &[bool]| -> Result<Vec<Option<Tensor<T>>>> {
            let ga = if needs[0] {
                Some(kernels::matmul(g, &kernels::transpose_last2(&b)?)?)
            } else {
                None
            };
            let gb = if needs[1] {
                let at = kernels::transpose_last2(&a)?;
                if b.rank() == 2 && a.rank() > 2 {
                    // Shared weight: fold the batch into the contraction.
                    let k = a.shape()[a.rank() - 1];
                    let n = g.shape()[g.rank() - 1];
                    let rows = a.numel() / k;
                    let a2 = a.reshape([rows, k])?;
                    let g2 = g.reshape([rows, n])?;
                    Some(kernels::matmul(&kernels::transpose_last2(&a2)?, &g2)?)
                } else {
                    Some(kernels::matmul(&at, g)?)
                }
            } else {
                None
            };
            Ok(vec![ga, gb])
        };
        Self::record(out, &[self, other], Box::new(rule))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let out = self.value.reshape(shape)?;
        let in_shape = self.value.shape().to_vec();
        let rule = move |g: &Tensor<T>, _: &[bool]| -> Result<Vec<Option<Tensor<T>>>> {
            Ok(vec![Some(g.reshape(in_shape.clone())?)])
        };
        Self::record(out, &[self], Box::new(rule))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let out = kernels::permute(&self.value, axes)?;
        let inv = kernels::inverse_permutation(axes);
        let rule = move |g: &Tensor<T>, _: &[bool]| -> Result<Vec<Option<Tensor<T>>>> {
            Ok(vec![Some(kernels::permute(g, &inv)?)])
        };
        Self::record(out, &[self], Box::new(rule))
    }

    pub fn transpose_last2(&self) -> Result<Self> {
        let r = self.value.rank();
        if r < 2 {
            return Err(Error::InvalidAxis { axis: 1, rank: r });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let out = kernels::narrow(&self.value, axis, start, len)?;
        let shape = self.value.shape().to_vec();
        let rule = move |g: &Tensor<T>, _: &[bool]| -> Result<Vec<Option<Tensor<T>>>> {
            // Zero-pad the slice gradient back to the full axis.
            let mut parts = Vec::new();
            let mut pad_shape = shape.clone();
            let before = start;
            let after = shape[axis] - start - len;
            let zeros_before = (before > 0)
                .then(|| {
                    pad_shape[axis] = before;
                    Tensor::zeros(pad_shape.clone())
                })
                .transpose()?;
            let zeros_after = (after > 0)
                .then(|| {
                    pad_shape[axis] = after;
                    Tensor::zeros(pad_shape.clone())
                })
                .transpose()?;
            if let Some(z) = &zeros_before {
                parts.push(z);
            }
            parts.push(g);
            if let Some(z) = &zeros_after {
                parts.push(z);
            }
            Ok(vec![Some(kernels::concat(&parts, axis)?)])
        };
        Self::record(out, &[self], Box::new(rule))
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|p| &p.value).collect();
        let out = kernels::concat(&values, axis)?;
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let rule = move |g: &Tensor<T>, needs: &[bool]| -> Result<Vec<Option<Tensor<T>>>> {
            let mut start = 0;
            let mut grads = Vec::with_capacity(lens.len());
            for (&len, &need) in lens.iter().zip(needs) {
                grads.push(if need {
                    Some(kernels::narrow(g, axis, start, len)?)
                } else {
                    None
                });
                start += len;
            }
            Ok(grads)
        };
        Self::record(out, parts, Box::new(rule))
    }

    /// Apply a fixed sparse linear map (gather, pooling, resampling, ...).
    pub fn sparse(&self, map: &Arc<SparseMap>) -> Result<Self> {
        let out = map.apply(&self.value)?;
        let map = Arc::clone(map);
        let rule = move |g: &Tensor<T>, _: &[bool]| -> Result<Vec<Option<Tensor<T>>>> {
            Ok(vec![Some(map.transpose_apply(g)?)])
        };
        Self::record(out, &[self], Box::new(rule))
    }

    /// Repeat along broadcast dimensions to `shape` (trailing-dimension rule).
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        let out = kernels::broadcast_to(&self.value, shape)?;
        let in_shape = self.value.shape().to_vec();
        let rule = move |g: &Tensor<T>, _: &[bool]| -> Result<Vec<Option<Tensor<T>>>> {
            Ok(vec![Some(kernels::reduce_broadcast(g, &in_shape)?)])
        };
        Self::record(out, &[self], Box::new(rule))
    }
}
