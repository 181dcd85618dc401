//! Tape-based reverse-mode differentiation.
//!
//! Every operation executed through a [`Var`] appends a node to the [`Tape`]
//! holding its output value and, when gradients are needed, a closure that
//! maps the output gradient to gradients of its inputs. Node ids grow
//! monotonically, so reverse id order is a reverse topological order.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Maps the output gradient to one optional gradient per parent. The mask
/// says which parents need one.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TapeMode {
    Recording,
    Inert,
}

struct Node {
    value: Tensor,
    parents: Vec<NodeId>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// The differentiation record of one forward pass.
pub struct Tape {
    mode: TapeMode,
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<String, NodeId>>,
}

/// A tensor value linked to its node on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_mode(TapeMode::Recording)
    }

    /// A tape that evaluates but never stores backward closures.
    pub fn inert() -> Self {
        Self::with_mode(TapeMode::Inert)
    }

    pub fn with_mode(mode: TapeMode) -> Self {
        Self {
            mode,
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
        }
    }

    pub fn mode(&self) -> TapeMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        })
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let requires_grad = self.mode == TapeMode::Recording;
        self.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        })
    }

    /// Registers the named parameter as a leaf. Repeated calls return the
    /// same node.
    pub fn param(&self, name: &str, store: &ParamStore) -> Result<Var<'_>> {
        if let Some(&id) = self.params.borrow().get(name) {
            return Ok(Var { tape: self, id });
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?
            .clone();
        let var = self.leaf(value);
        self.params.borrow_mut().insert(name.to_owned(), var.id);
        Ok(var)
    }

    /// Records an operation output. The backward closure is built lazily and
    /// only kept when some parent requires a gradient.
    pub(crate) fn record<F>(&self, value: Tensor, parents: &[Var<'_>], backward: F) -> Var<'_>
    where
        F: FnOnce() -> BackwardFn,
    {
        let requires_grad = self.mode == TapeMode::Recording && {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        let (parents, backward) = if requires_grad {
            (parents.iter().map(|p| p.id).collect(), Some(backward()))
        } else {
            (Vec::new(), None)
        };
        self.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        })
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        if self.mode == TapeMode::Inert {
            return Err(Error::Tape("backward on an inert tape".into()));
        }
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.numel() != 1 {
            return Err(Error::Tape(format!(
                "backward root must be a scalar, got shape {:?}",
                root_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        grads[root.id] = Some(vec![1.0]);
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&pid, pg), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let (Some(pg), true) = (pg, need) else { continue };
                debug_assert_eq!(pg.len(), nodes[pid].value.numel());
                match &mut grads[pid] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        let shapes = nodes[..=root.id].iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            grads,
            shapes,
            params: self.params.borrow().clone(),
        })
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
    }
}

/// Result of a reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: HashMap<String, NodeId>,
}

impl Gradients {
    /// Gradient with respect to a leaf; zero when the root does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.by_id(var.id)
            .unwrap_or_else(|| Tensor::zeros(&var.shape()).expect("valid shape"))
    }

    fn by_id(&self, id: NodeId) -> Option<Tensor> {
        let g = self.grads.get(id)?.as_ref()?;
        Tensor::from_vec(&self.shapes[id], g.clone()).ok()
    }

    pub fn param(&self, name: &str) -> Option<Tensor> {
        self.params.get(name).and_then(|&id| self.by_id(id))
    }

    /// Gradient for every parameter in the store, zero where the root does
    /// not depend on it.
    pub fn for_params(&self, store: &ParamStore) -> BTreeMap<String, Tensor> {
        store
            .iter()
            .map(|(name, value)| {
                let g = self
                    .param(name)
                    .unwrap_or_else(|| Tensor::zeros(value.shape()).expect("valid shape"));
                (name.to_owned(), g)
            })
            .collect()
    }
}
