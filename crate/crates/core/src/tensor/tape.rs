use std::cell::RefCell;
use std::rc::Rc;

use super::{Tensor, TensorError};
use crate::halfprec::{quantize_slice, OpClass, PrecisionPolicy};

pub type NodeId = usize;

/// Adjoint of one recorded operation.
///
/// `grad` is the gradient flowing into the operation's output; the result
/// holds one entry per input, `None` where `needs[i]` is false.
pub trait Backward {
    fn backward(&self, grad: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>>;
}

struct Leaf;

impl Backward for Leaf {
    fn backward(&self, _grad: &[f32], _needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        Vec::new()
    }
}

struct Node {
    inputs: Vec<Option<NodeId>>,
    op: Box<dyn Backward>,
    class: OpClass,
    len: usize,
    leaf: bool,
}

/// A tensor value flowing through a [`Tape`].
///
/// Cloning is cheap. A `Var` with no node is a constant: no gradient flows
/// into it and nothing about its producer is retained.
#[derive(Clone)]
pub struct Var {
    value: Rc<Tensor>,
    node: Option<NodeId>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> super::Shape {
        self.value.shape()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn tracked(&self) -> bool {
        self.node.is_some()
    }

    pub(crate) fn shared(&self) -> Rc<Tensor> {
        Rc::clone(&self.value)
    }

    pub fn into_tensor(self) -> Tensor {
        Rc::try_unwrap(self.value).unwrap_or_else(|rc| (*rc).clone())
    }
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.value.shape())
            .field("node", &self.node)
            .finish()
    }
}

/// Records differentiable operations in creation order.
///
/// Operations whose inputs are all constants are evaluated without being
/// recorded, so inference through a tape that holds no tracked leaves keeps
/// no intermediate state alive.
pub struct Tape {
    policy: PrecisionPolicy,
    nodes: RefCell<Vec<Node>>,
    leaf_grads: RefCell<Vec<Option<Vec<f32>>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new(PrecisionPolicy::FULL)
    }
}

impl Tape {
    pub fn new(policy: PrecisionPolicy) -> Self {
        Tape {
            policy,
            nodes: RefCell::new(Vec::new()),
            leaf_grads: RefCell::new(Vec::new()),
        }
    }

    pub fn policy(&self) -> PrecisionPolicy {
        self.policy
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Wrap a tensor; it becomes a gradient-collecting leaf when its
    /// `requires_grad` flag is set.
    pub fn leaf(&self, tensor: Tensor) -> Var {
        if !tensor.requires_grad() {
            return self.constant(tensor);
        }
        let len = tensor.numel();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            inputs: Vec::new(),
            op: Box::new(Leaf),
            class: OpClass::Weight,
            len,
            leaf: true,
        });
        Var {
            value: Rc::new(tensor),
            node: Some(nodes.len() - 1),
        }
    }

    pub fn constant(&self, tensor: Tensor) -> Var {
        Var {
            value: Rc::new(tensor),
            node: None,
        }
    }

    /// Whether outputs of `class` are rounded through FP16 on this tape.
    pub fn rounds(&self, class: OpClass) -> bool {
        self.policy.rounds(class)
    }

    pub(crate) fn round_if(&self, class: OpClass, values: &mut [f32]) {
        if self.policy.rounds(class) {
            quantize_slice(values);
        }
    }

    /// Record an operation. `op` is only kept when at least one input is
    /// tracked. The output value is rounded according to `class`.
    pub fn record<B: Backward + 'static>(&self, mut value: Tensor, inputs: &[&Var], class: OpClass, op: B) -> Var {
        self.round_if(class, value.data_mut());
        value.requires_grad = false;
        let ids: Vec<Option<NodeId>> = inputs.iter().map(|v| v.node).collect();
        if ids.iter().all(Option::is_none) {
            return self.constant(value);
        }
        let len = value.numel();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            inputs: ids,
            op: Box::new(op),
            class,
            len,
            leaf: false,
        });
        Var {
            value: Rc::new(value),
            node: Some(nodes.len() - 1),
        }
    }

    /// Accumulate `d root / d leaf` into every tracked leaf reachable from
    /// `root`. Repeated calls add to the stored leaf gradients.
    pub fn backward(&self, root: &Var) -> Result<(), TensorError> {
        if root.value.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root.value.shape()
            )));
        }
        let Some(root_id) = root.node else {
            return Err(TensorError::Contract("backward root is not recorded on the tape".into()));
        };
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f32>>> = (0..=root_id).map(|_| None).collect();
        grads[root_id] = Some(vec![1.0]);
        let mut leaf_grads = self.leaf_grads.borrow_mut();
        if leaf_grads.len() < nodes.len() {
            leaf_grads.resize(nodes.len(), None);
        }

        for id in (0..=root_id).rev() {
            let Some(mut grad) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if node.leaf {
                match &mut leaf_grads[id] {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += g),
                    slot @ None => *slot = Some(grad),
                }
                continue;
            }
            let rounds = self.policy.rounds(node.class);
            if rounds {
                quantize_slice(&mut grad);
            }
            let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let contributions = node.op.backward(&grad, &needs);
            for (input, contrib) in node.inputs.iter().zip(contributions) {
                let (Some(pid), Some(mut contrib)) = (input, contrib) else {
                    continue;
                };
                if rounds {
                    quantize_slice(&mut contrib);
                }
                debug_assert_eq!(contrib.len(), nodes[*pid].len);
                match &mut grads[*pid] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, g)| *a += g),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    /// Accumulated gradient of a leaf, if any has reached it.
    pub fn grad(&self, var: &Var) -> Option<Tensor> {
        let id = var.node?;
        let grads = self.leaf_grads.borrow();
        let g = grads.get(id)?.as_ref()?;
        Some(Tensor::from_vec(var.shape(), g.clone()).expect("gradient matches leaf shape"))
    }

    /// Gradient of a leaf, zeros when none reached it.
    pub fn grad_or_zeros(&self, var: &Var) -> Tensor {
        self.grad(var).unwrap_or_else(|| Tensor::zeros(var.shape()))
    }

    pub fn zero_grads(&self) {
        self.leaf_grads.borrow_mut().clear();
    }
}
