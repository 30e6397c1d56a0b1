use std::collections::HashMap;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Vector-Jacobian product of one recorded operation.
///
/// `inputs` are the forward input values, `output` the forward result and
/// `grad` the gradient of the loss with respect to `output`. Entries of the
/// returned vector correspond to `inputs`; an input whose `needs` flag is
/// false may be answered with `None`.
pub trait Backward: Send + Sync {
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>>;
}

struct Node {
    value: Tensor,
    op: Option<Box<dyn Backward>>,
    inputs: Vec<Var>,
    requires_grad: bool,
}

/// Tape of a single forward pass.
///
/// Nodes are appended in evaluation order, which is therefore a topological
/// order; [`Graph::backward`] walks it once in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<(u64, usize), Var>,
    buffer_updates: Vec<(ParamId, Tensor)>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: None,
            inputs: Vec::new(),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Places a parameter on the tape. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id.0);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), p.trainable);
        self.params.insert(key, v);
        v
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

    /// Records an operation whose output has already been computed.
    pub fn apply(&mut self, op: Box<dyn Backward>, inputs: &[Var], output: Tensor) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: output,
            op: if requires_grad { Some(op) } else { None },
            inputs: inputs.to_vec(),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Queues a running-statistics update produced during the forward pass.
    pub(crate) fn push_buffer_update(&mut self, id: ParamId, value: Tensor) {
        self.buffer_updates.push((id, value));
    }

    /// Buffer updates recorded so far, in recording order.
    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.buffer_updates)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Graph(
                "backward already ran on this graph; run a new forward pass".into(),
            ));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Graph(format!(
                "loss must be a scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));
        let mut leaves = HashMap::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let Some(op) = &node.op else {
                if node.requires_grad {
                    leaves.insert(i, g);
                }
                continue;
            };
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let ins: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let in_grads = op.backward(&ins, &node.value, &g, &needs)?;
            for ((v, gi), need) in node.inputs.iter().zip(in_grads).zip(&needs) {
                let (Some(gi), true) = (gi, *need) else { continue };
                if gi.shape() != self.nodes[v.0].value.shape() {
                    return Err(Error::Graph(format!(
                        "gradient shape {:?} does not match input shape {:?}",
                        gi.shape(),
                        self.nodes[v.0].value.shape()
                    )));
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&gi),
                    slot => *slot = Some(gi),
                }
            }
        }

        Ok(Gradients {
            leaves,
            params: self.params.clone(),
        })
    }
}

/// Leaf gradients produced by one reverse pass.
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
    params: HashMap<(u64, usize), Var>,
}

impl Gradients {
    /// Gradient of an input or parameter node; `None` if it received none.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }

    pub fn param(&self, store: &ParamStore, id: ParamId) -> Option<&Tensor> {
        self.params
            .get(&(store.uid(), id.0))
            .and_then(|v| self.leaves.get(&v.0))
    }

    /// Adds parameter gradients into the store's gradient slots.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        let uid = store.uid();
        for (&(sid, idx), v) in &self.params {
            if sid != uid {
                continue;
            }
            if let Some(g) = self.leaves.get(&v.0) {
                store.get_mut(ParamId(idx)).grad.add_assign(g);
            }
        }
    }
}
