use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use super::{check_finite, Float, Tensor, Var};
use crate::error::{Error, Result};

/// Backward rule: maps the output gradient to one gradient per recorded input.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Result<Vec<Tensor<T>>>>;

pub(crate) struct Node<T: Float> {
    shape: Vec<usize>,
    inputs: Vec<usize>,
    /// `None` marks a leaf.
    backward: Option<BackwardFn<T>>,
}

pub(crate) struct TapeCell<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

impl<T: Float> TapeCell<T> {
    pub(crate) fn push(&self, node_shape: Vec<usize>, inputs: Vec<usize>, backward: Option<BackwardFn<T>>) -> Result<usize> {
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        let mut nodes = self.nodes.borrow_mut();
        debug_assert!(inputs.iter().all(|&i| i < nodes.len()));
        nodes.push(Node {
            shape: node_shape,
            inputs,
            backward,
        });
        Ok(nodes.len() - 1)
    }
}

/// Ordered record of differentiable operations.
///
/// Nodes are appended as ops execute, so the record is topologically sorted
/// by construction. [`Tape::backward`] walks it once in reverse and then
/// drops every node; a consumed tape rejects further recording.
///
/// A tape is single-threaded (`!Send`).
pub struct Tape<T: Float = f32> {
    pub(crate) cell: Rc<TapeCell<T>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self {
            cell: Rc::new(TapeCell {
                nodes: RefCell::new(Vec::new()),
                consumed: Cell::new(false),
            }),
        }
    }

    /// Register a leaf that requires a gradient.
    pub fn leaf(&self, value: Tensor<T>) -> Result<Var<T>> {
        let id = self.cell.push(value.shape().to_vec(), Vec::new(), None)?;
        Ok(Var::tracked(value, Rc::clone(&self.cell), id))
    }

    pub fn len(&self) -> usize {
        self.cell.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_consumed(&self) -> bool {
        self.cell.consumed.get()
    }

    /// Reverse pass from a scalar `loss`. Gradients are summed into each
    /// input; every leaf receives a gradient (zeros if unreachable).
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        if self.cell.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        if loss.value().numel() != 1 {
            return Err(Error::NonScalarLoss(loss.value().shape().to_vec()));
        }
        let root = match loss.node_on(&self.cell) {
            Some(id) => id,
            None if loss.is_tracked() => return Err(Error::TapeMismatch),
            None => return Err(Error::DetachedLoss),
        };

        let nodes = std::mem::take(&mut *self.cell.nodes.borrow_mut());
        self.cell.consumed.set(true);

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root + 1];
        grads[root] = Some(Tensor::ones_like(loss.value()));
        let mut leaves = HashMap::new();

        for id in (0..=root).rev() {
            let node = &nodes[id];
            let Some(g) = grads[id].take() else {
                if node.backward.is_none() {
                    leaves.insert(id, Tensor::zeros(node.shape.clone())?);
                }
                continue;
            };
            let Some(rule) = &node.backward else {
                leaves.insert(id, g);
                continue;
            };
            let input_grads = rule(&g)?;
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (&input, ig) in node.inputs.iter().zip(input_grads) {
                check_finite("backward", ig.data())?;
                grads[input] = Some(match grads[input].take() {
                    Some(prev) => prev.add(&ig)?,
                    None => ig,
                });
            }
        }
        // Leaves recorded after the loss never saw it.
        for (id, node) in nodes.iter().enumerate().skip(root + 1) {
            if node.backward.is_none() {
                leaves.insert(id, Tensor::zeros(node.shape.clone())?);
            }
        }
        Ok(Gradients { leaves })
    }
}

/// Accumulated gradients of every leaf on a consumed tape.
#[derive(Debug, Clone)]
pub struct Gradients<T: Float = f32> {
    leaves: HashMap<usize, Tensor<T>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient with respect to `leaf`; `None` if it is not a leaf of this tape.
    pub fn get(&self, leaf: &Var<T>) -> Option<&Tensor<T>> {
        leaf.node_id().and_then(|id| self.leaves.get(&id))
    }
}
