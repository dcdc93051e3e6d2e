//! Reverse-mode gradient tape.
//!
//! Every op appends a node holding its forward value and, when any input
//! requires a gradient, a closure mapping the output gradient onto its inputs.
//! [`Graph::backward`] walks the nodes in reverse creation order, which is a
//! valid topological order because inputs always precede outputs.

use std::collections::HashMap;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) type BackwardFn = Box<dyn Fn(&Graph, &[f32], &mut GradSink<'_>)>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    param: Option<ParamId>,
    backward: Option<BackwardFn>,
}

/// Collects input gradients while a node's backward closure runs.
pub(crate) struct GradSink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f32>>],
}

impl GradSink<'_> {
    pub fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds `grad` into the accumulator of `v`.
    pub fn add(&mut self, v: Var, grad: Vec<f32>) {
        if !self.wants(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => super::kernels::add_assign(acc, &grad),
            slot @ None => *slot = Some(grad),
        }
    }

    /// Gives mutable access to the (zero-initialised) accumulator of `v`.
    pub fn with(&mut self, v: Var, f: impl FnOnce(&mut [f32])) {
        if !self.wants(v) {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let acc = self.grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(acc);
    }
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    params: Vec<(Var, ParamId)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds parameter gradients into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for &(var, id) in &self.params {
            if let Some(g) = self.get(var) {
                if let Some(bad) = g.iter().position(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "gradient of `{}` at element {bad}",
                        store.get(id).name
                    )));
                }
                super::kernels::add_assign(store.get_mut(id).grad.data_mut(), g);
            }
        }
        Ok(())
    }
}

/// Recorded computation over tensors (the gradient tape).
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A graph that records no backward closures; parameters enter as constants.
    pub fn inference() -> Self {
        Self {
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Parameter bound to `v`, if `v` is a parameter leaf.
    pub fn param_of(&self, v: Var) -> Option<ParamId> {
        self.nodes[v.0].param
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            param,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false, None)
    }

    /// A leaf whose gradient is tracked (used for input-gradient checks).
    pub fn input(&mut self, value: Tensor) -> Var {
        let rg = self.grad_enabled;
        self.push_leaf(value, rg, None)
    }

    /// Binds a stored parameter; repeated calls within one graph share the node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let rg = self.grad_enabled;
        let v = self.push_leaf(store.value(id).clone(), rg, Some(id));
        self.param_vars.insert(id, v);
        v
    }

    /// Appends an op node. `backward` is dropped when no input needs a gradient.
    pub(crate) fn push_op(&mut self, value: Tensor, inputs: &[Var], backward: BackwardFn) -> Var {
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            param: None,
            backward: requires_grad.then_some(backward),
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::InvalidArgument("loss is not on this tape".into()));
        }
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        if loss_node.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(bw) = &self.nodes[i].backward {
                let mut sink = GradSink {
                    nodes: &self.nodes,
                    grads: &mut grads[..i],
                };
                bw(self, &g, &mut sink);
            }
            grads[i] = Some(g);
        }
        let params = self
            .param_vars
            .iter()
            .filter(|(_, v)| v.0 <= loss.0)
            .map(|(&id, &v)| (v, id))
            .collect();
        Ok(Gradients { grads, params })
    }

    /// Runs [`Graph::backward`] and adds parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        self.backward(loss)?.accumulate_into(store)
    }
}
