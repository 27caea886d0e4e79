use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};

/// Maps the upstream gradient of a node to one optional gradient per input.
/// The flag slice says which inputs actually need a gradient.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    inputs: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Ordered record of executed operations.
///
/// A tape is single-use: once [`Tape::backward`] has run, the recorded
/// closures are released and a second call fails with
/// [`Error::TapeConsumed`].
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.len())
            .field("consumed", &self.consumed.get())
            .field("recording", &self.recording)
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
            recording: true,
        }
    }

    /// A tape that evaluates values only; nothing on it ever requires a gradient.
    pub fn no_grad() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a leaf; it requires a gradient iff the tensor says so.
    pub fn leaf(&self, value: &Tensor) -> Var<'_> {
        self.push_leaf(value.detached(), value.requires_grad())
    }

    /// Registers a trainable leaf regardless of the tensor's flag.
    pub fn param(&self, value: &Tensor) -> Var<'_> {
        self.push_leaf(value.detached(), true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        let value = if value.requires_grad() || value.grad().is_some() {
            value.detached()
        } else {
            value
        };
        self.push_leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push_leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            inputs: Vec::new(),
            requires_grad: requires_grad && self.recording,
            backward: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad_at(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Appends an op node. The backward closure is kept only when some input
    /// requires a gradient.
    pub(crate) fn push<F>(&self, value: Rc<Tensor>, inputs: &[Var<'_>], backward: F) -> Var<'_>
    where
        F: Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = self.recording && inputs.iter().any(|v| nodes[v.id].requires_grad);
        nodes.push(Node {
            value,
            inputs: inputs.iter().map(|v| v.id).collect(),
            requires_grad,
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn),
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Reverse pass from a scalar `loss`; gradients of leaves that require
    /// them are returned, accumulated additively over fan-out.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        assert!(
            std::ptr::eq(loss.tape, self),
            "loss was recorded on another tape"
        );
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        let mut nodes = self.nodes.borrow_mut();
        let loss_value = Rc::clone(&nodes[loss.id].value);
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        self.consumed.set(true);

        let mut pending: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        pending[loss.id] = Some(vec![1.0]);
        let mut leaves = HashMap::new();
        for id in (0..=loss.id).rev() {
            let Some(g) = pending[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(backward) = &node.backward else {
                leaves.insert(id, Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            };
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&i| nodes[i].requires_grad)
                .collect();
            let upstream = Tensor::from_parts(node.value.shape().to_vec(), g);
            let input_grads = backward(&upstream, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for ((&input, grad), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                let Some(grad) = grad.filter(|_| need) else {
                    continue;
                };
                debug_assert_eq!(grad.shape(), nodes[input].value.shape());
                match &mut pending[input] {
                    Some(acc) => acc.iter_mut().zip(grad.data()).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(grad.into_data()),
                }
            }
        }
        for node in nodes.iter_mut() {
            node.backward = None;
        }
        Ok(Gradients { leaves })
    }
}

/// Gradients of the leaves that required them, keyed by their tape slot.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.leaves.get(&var.id)
    }

    /// The gradient of `var`, or zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_at(self.id)
    }

    pub fn backward(self) -> Result<Gradients> {
        self.tape.backward(self)
    }
}
