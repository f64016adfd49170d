use std::collections::HashMap;

use super::optim::{ParamId, ParamStore};
use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// A recorded operation that knows its vector-Jacobian product.
///
/// Ops outside the backend (the capsule routing, for one) plug into the tape
/// through this trait.
pub trait CustomOp<T: Float> {
    fn name(&self) -> &'static str;

    fn inputs(&self) -> &[Var];

    /// Gradients for each input given the gradient of the output. Entries
    /// for inputs with `needs[k] == false` may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

enum Source<T: Float> {
    Constant,
    Leaf,
    Param(ParamId),
    Op(Box<dyn CustomOp<T>>),
}

struct Node<T: Float> {
    value: Tensor<T>,
    source: Source<T>,
    requires_grad: bool,
}

/// Reverse-mode tape. Values are computed eagerly as ops are recorded.
pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Source::Constant, false)
    }

    /// A differentiable leaf that is not owned by a [`ParamStore`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Source::Leaf, true)
    }

    /// Binds a stored parameter; repeated calls return the same handle.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Source::Param(id), true);
        self.params.insert(id, v);
        v
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

    /// Records a custom op whose forward value the caller already computed.
    pub fn custom(&mut self, value: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|&v| self.requires_grad(v));
        Ok(self.push(value, Source::Op(op), requires_grad))
    }

    fn push(&mut self, value: Tensor<T>, source: Source<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            source,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", root.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        if root.requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Source::Op(op) = &node.source else {
                continue;
            };
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let inputs = op.inputs();
            let needs: Vec<bool> = inputs.iter().map(|&v| self.requires_grad(v)).collect();
            if !needs.iter().any(|&n| n) {
                continue;
            }
            let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
            let input_grads = op.backward(&values, &node.value, &grad, &needs);
            debug_assert_eq!(input_grads.len(), inputs.len(), "{} returned wrong arity", op.name());
            for ((&input, g), need) in inputs.iter().zip(input_grads).zip(needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(g.len(), self.value(input).numel(), "{} grad size", op.name());
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.source {
                Source::Param(id) => Some((id, Var(i))),
                _ => None,
            })
            .collect();
        Ok(Grads { grads, params })
    }
}

/// Gradients of a scalar with respect to the leaves of a graph.
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Float> Grads<T> {
    /// Gradient for a leaf or parameter handle; `None` if it was unreachable.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub(crate) fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[T])> + '_ {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.wrt(v).map(|g| (id, g)))
    }
}
