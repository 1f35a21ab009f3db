use std::sync::Arc;

use crate::{ParamId, ParamStore, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded op.
///
/// Implementations return one entry per input, `None` where the input does
/// not need a gradient.
pub trait Backward<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, ctx: &BackwardContext<'_, T>) -> Vec<Option<Vec<T>>>;
}

pub struct BackwardContext<'a, T> {
    pub grad_output: &'a [T],
    pub output: &'a [T],
    pub output_shape: &'a [usize],
    inputs: Vec<InputView<'a, T>>,
}

struct InputView<'a, T> {
    value: &'a [T],
    shape: &'a [usize],
    needs_grad: bool,
}

impl<'a, T> BackwardContext<'a, T> {
    pub fn input(&self, i: usize) -> &'a [T] {
        self.inputs[i].value
    }

    pub fn input_shape(&self, i: usize) -> &'a [usize] {
        self.inputs[i].shape
    }

    pub fn needs_grad(&self, i: usize) -> bool {
        self.inputs[i].needs_grad
    }
}

struct Node<T> {
    shape: Vec<usize>,
    value: Arc<Vec<T>>,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
}

/// Wengert list of executed ops. Nodes are appended in execution order, so
/// every node's inputs precede it.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(Var, ParamId)>,
}

/// Result of a reverse sweep: the gradient of the loss with respect to every
/// node that required one.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    visited_ops: usize,
}

impl<T> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Number of op nodes whose backward rule ran.
    pub fn visited_ops(&self) -> usize {
        self.visited_ops
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.op.is_some()).count()
    }

    fn push_leaf(&mut self, tensor: &Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape: tensor.shape().to_vec(),
            value: tensor.shared_data(),
            inputs: Vec::new(),
            op: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, tensor: &Tensor<T>) -> Var {
        self.push_leaf(tensor, false)
    }

    /// Records a leaf; it is differentiable iff `tensor.requires_grad()`.
    pub fn input(&mut self, tensor: &Tensor<T>) -> Var {
        self.push_leaf(tensor, tensor.requires_grad())
    }

    /// Records a stored parameter; [`Graph::backward`] accumulates into it.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let v = self.push_leaf(store.get(id), true);
        self.params.push((v, id));
        v
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.as_ref().clone()).expect("recorded shapes are valid")
    }

    /// Appends an op node. This is the extension point for fused ops defined
    /// outside this crate (the task losses use it).
    pub fn record(
        &mut self,
        inputs: &[Var],
        shape: Vec<usize>,
        value: Vec<T>,
        op: impl Backward<T> + 'static,
    ) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        #[cfg(debug_assertions)]
        {
            let finite_inputs = inputs
                .iter()
                .all(|v| self.value(*v).iter().all(|x| x.is_finite()));
            if finite_inputs {
                debug_assert!(
                    value.iter().all(|x| x.is_finite()),
                    "{} produced a non-finite value from finite inputs",
                    op.name()
                );
            }
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value: Arc::new(value),
            inputs: inputs.to_vec(),
            op: Some(Box::new(op)),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`. Nothing is written to any store.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        let mut visited_ops = 0;
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = &node.op else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(grad_output) = grads[idx].take() else {
                continue;
            };
            visited_ops += 1;
            let ctx = BackwardContext {
                grad_output: &grad_output,
                output: &node.value,
                output_shape: &node.shape,
                inputs: node
                    .inputs
                    .iter()
                    .map(|v| {
                        let n = &self.nodes[v.0];
                        InputView {
                            value: &n.value,
                            shape: &n.shape,
                            needs_grad: n.requires_grad,
                        }
                    })
                    .collect(),
            };
            let input_grads = op.backward(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", op.name());
            for (input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.len(), self.nodes[input.0].value.len(), "{}", op.name());
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(g),
                }
            }
            // Keep the output gradient so callers can inspect intermediate nodes.
            grads[idx] = Some(grad_output);
        }
        Ok(Gradients { grads, visited_ops })
    }

    /// Reverse sweep that also accumulates (`+=`) into every parameter
    /// recorded via [`Graph::param`].
    pub fn backward(
        &self,
        loss: Var,
        store: &mut ParamStore<T>,
    ) -> Result<Gradients<T>, TensorError> {
        let grads = self.gradients(loss)?;
        for &(v, id) in &self.params {
            if let Some(g) = grads.get(v) {
                store.get_mut(id).accumulate_grad(g)?;
            }
        }
        Ok(grads)
    }
}
