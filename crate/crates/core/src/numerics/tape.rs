use std::cell::RefCell;
use std::sync::Arc;

use super::scalar::Scalar;
use super::tensor::TensorData;
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
pub type TensorId = usize;

/// Backward rule of one node: receives the gradient flowing into the node's
/// output and one zeroed accumulation buffer per parent slot (same length as
/// the parent's data); it must *add* its contribution into those buffers.
pub(super) type BackwardFn<T> = Box<dyn Fn(&[T], &mut [Vec<T>])>;

pub(super) struct Node<T> {
    pub shape: Vec<usize>,
    pub value: Arc<Vec<T>>,
    pub parents: Vec<TensorId>,
    pub backward: Option<BackwardFn<T>>,
    /// Leaf explicitly marked as wanting a gradient.
    pub requires_grad: bool,
    /// True if a gradient can reach some requires_grad leaf through this node.
    pub needs_grad: bool,
}

/// Define-by-run computation tape.
///
/// Node ids are handed out in creation order, so the node list is always a
/// valid topological order and `backward` can walk it once in reverse. A tape
/// is confined to one worker and rebuilt per training step.
pub struct Tape<T: Scalar> {
    pub(super) nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Vec<T>>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), grads: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Inserts a leaf tensor. Only leaves may request gradients directly.
    pub fn leaf(&self, value: TensorData<T>, requires_grad: bool) -> TensorId {
        let (shape, data) = value.into_parts();
        debug_assert!(data.iter().all(|v| v.is_finite()), "non-finite leaf value");
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value: Arc::new(data),
            parents: Vec::new(),
            backward: None,
            requires_grad,
            needs_grad: requires_grad,
        });
        nodes.len() - 1
    }

    /// Leaf that never receives a gradient (inputs, targets, masks).
    pub fn constant(&self, value: TensorData<T>) -> TensorId {
        self.leaf(value, false)
    }

    pub fn constant_scalar(&self, value: T) -> TensorId {
        self.constant(TensorData::scalar(value))
    }

    pub(super) fn push(
        &self,
        shape: Vec<usize>,
        value: Vec<T>,
        parents: Vec<TensorId>,
        backward: BackwardFn<T>,
    ) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        debug_assert!(
            value.iter().all(|v| v.is_finite()),
            "non-finite value produced by an op on finite inputs"
        );
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = parents.iter().any(|&p| nodes[p].needs_grad);
        nodes.push(Node {
            shape,
            value: Arc::new(value),
            parents,
            backward: if needs_grad { Some(backward) } else { None },
            requires_grad: false,
            needs_grad,
        });
        nodes.len() - 1
    }

    pub fn shape_of(&self, id: TensorId) -> Vec<usize> {
        self.nodes.borrow()[id].shape.clone()
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.nodes.borrow()[id].value.len()
    }

    /// Cheap shared handle to a node's data.
    pub fn data(&self, id: TensorId) -> Arc<Vec<T>> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    /// Copies a node out into a plain tensor.
    pub fn value(&self, id: TensorId) -> TensorData<T> {
        let nodes = self.nodes.borrow();
        TensorData::new(nodes[id].shape.clone(), nodes[id].value.as_ref().clone())
            .expect("node invariant")
    }

    /// Runs reverse-mode accumulation from a scalar loss.
    ///
    /// Gradients of all `requires_grad` leaves reachable from `loss` become
    /// available through [`Tape::grad`]. Visits every node at most once.
    pub fn backward(&self, loss: TensorId) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[loss].value.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", nodes[loss].shape),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[loss] = Some(vec![T::one()]);

        for id in (0..=loss).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(grad) = grads[id].take() else { continue };
            if let Some(back) = &node.backward {
                let mut bufs: Vec<Vec<T>> = node
                    .parents
                    .iter()
                    .map(|&p| vec![T::zero(); nodes[p].value.len()])
                    .collect();
                back(&grad, &mut bufs);
                for (buf, &p) in bufs.into_iter().zip(node.parents.iter()) {
                    if !nodes[p].needs_grad {
                        continue;
                    }
                    match &mut grads[p] {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(buf.iter()) {
                                *a += *b;
                            }
                        }
                        slot => *slot = Some(buf),
                    }
                }
            }
            if node.requires_grad {
                grads[id] = Some(grad);
            }
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }

    /// Gradient of the last `backward` call w.r.t. a leaf, if one reached it.
    pub fn grad(&self, id: TensorId) -> Option<TensorData<T>> {
        let grads = self.grads.borrow();
        let g = grads.get(id)?.as_ref()?;
        let shape = self.nodes.borrow()[id].shape.clone();
        Some(TensorData::new(shape, g.clone()).expect("grad shape invariant"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_is_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(TensorData::new(vec![4], vec![1.0, -2.0, 3.0, 0.5]).unwrap(), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_half_square_norm_is_x() {
        let tape = Tape::<f64>::new();
        let data = vec![1.0, -2.0, 3.0, 0.5];
        let x = tape.leaf(TensorData::new(vec![4], data.clone()).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let half = tape.scale(s, 0.5);
        tape.backward(half).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), data.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(TensorData::zeros(vec![3]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn repeated_operand_accumulates_both_contributions() {
        // d(x*x)/dx = 2x through the duplicate-parent path.
        let tape = Tape::<f64>::new();
        let x = tape.leaf(TensorData::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn constants_receive_no_grad() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(TensorData::scalar(2.0), true);
        let c = tape.constant_scalar(5.0);
        let y = tape.mul(x, c).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 5.0);
        assert!(tape.grad(c).is_none());
    }
}
