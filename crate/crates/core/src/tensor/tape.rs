use std::collections::HashMap;

use super::array::Tensor;
use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward rule sees: the parents' forward values, this node's
/// forward value, and the upstream gradient of the loss w.r.t. this node.
pub struct BackwardCtx<'a, T> {
    pub inputs: &'a [&'a Tensor<T>],
    pub output: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
}

/// Local vector-Jacobian product. Returns one entry per parent, in order;
/// `None` means "no gradient flows to that parent".
pub type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    parents: Vec<Var>,
    backward: Option<BackwardFn<T>>,
}

/// Reverse-mode gradient tape.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order. One tape lives for one mini-batch.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    grad_enabled: bool,
    backward_done: bool,
    bound: HashMap<usize, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
            backward_done: false,
            bound: HashMap::new(),
        }
    }

    /// A tape that never records backward rules. Every value is a constant.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
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

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Node {
            value,
            requires_grad: requires_grad && self.grad_enabled,
            parents: Vec::new(),
            backward: None,
        })
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Returns the leaf bound to `key`, creating it on first use. Lets a
    /// parameter appear once on the tape no matter how often it is read.
    pub fn bind(&mut self, key: usize, make: impl FnOnce() -> (Tensor<T>, bool)) -> Var {
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let (value, requires_grad) = make();
        let v = self.leaf(value, requires_grad);
        self.bound.insert(key, v);
        v
    }

    pub fn bound(&self, key: usize) -> Option<Var> {
        self.bound.get(&key).copied()
    }

    /// Records a derived value. The backward rule is only kept when some
    /// parent requires a gradient.
    pub fn record(
        &mut self,
        value: Tensor<T>,
        parents: &[Var],
        backward: impl Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var {
        let requires_grad = self.grad_enabled && parents.iter().any(|p| self.requires_grad(*p));
        self.push(Node {
            value,
            requires_grad,
            parents: parents.to_vec(),
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn<T>),
        })
    }

    fn push(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        self.nodes[v.0].value.clone()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    /// Propagates d`loss`/d· to every node that requires a gradient.
    ///
    /// A second call without [`zero_grad`](Self::zero_grad) is an error rather
    /// than a silent accumulation.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardAlreadyRun);
        }
        let shape = self.nodes[loss.0].value.shape();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::DetachedLoss);
        }
        self.grads[loss.0] = Some(Tensor::ones(shape.to_vec()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = self.grads[i].take() else {
                continue;
            };
            let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let parent_grads = backward(&BackwardCtx {
                inputs: &inputs,
                output: &node.value,
                grad: &grad,
            });
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[parent.0].value.shape());
                match &mut self.grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            self.grads[i] = Some(grad);
        }
        self.backward_done = true;
        Ok(())
    }
}
