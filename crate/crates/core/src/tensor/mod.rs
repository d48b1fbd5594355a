//! Dense f64 tensors with a define-by-run reverse-mode autodiff graph.
//!
//! A [`Tensor`] is an immutable, cheaply clonable handle. Operations on tensors that
//! require gradients record a node holding the parents and a backward closure;
//! [`Tensor::backward`] walks that graph from a scalar loss and accumulates
//! gradients into every reachable tensor that requires them.

mod gradcheck;
mod linalg;
mod nn;
mod ops;
mod shape;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub use gradcheck::grad_check;
pub use nn::{RopeTables, LAYER_NORM_EPS};
pub(crate) use nn::filter_valid_raw;
pub use ops::gelu_scalar;
pub use shape::ZERO_FILL;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Gradient of the op output plus whatever the backward closure needs to see.
pub(crate) struct BackwardCtx<'a> {
    pub grad: &'a [f64],
    pub out: &'a [f64],
    pub parents: &'a [Tensor],
    pub needs: &'a [bool],
}

/// Returns one gradient per parent (`None` where the parent does not need one).
pub(crate) type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> + Send + Sync>;

struct Node {
    op: &'static str,
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    node: Option<Node>,
}

#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad);
        if let Some(node) = &self.0.node {
            s.field("op", &node.op);
        }
        if self.numel() <= 16 {
            s.field("data", &self.data());
        }
        s.finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Arc<Vec<f64>>, requires_grad: bool, node: Option<Node>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            node,
        }))
    }

    /// Constant tensor; fails if `data.len()` disagrees with `shape`.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(Error::shape("Tensor::new", shape, &[data.len()]));
        }
        Ok(Self::build(shape.to_vec(), Arc::new(data), false, None))
    }

    /// Leaf tensor that records gradients.
    pub fn parameter(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(Error::shape("Tensor::parameter", shape, &[data.len()]));
        }
        Ok(Self::build(shape.to_vec(), Arc::new(data), true, None))
    }

    pub fn scalar(value: f64) -> Self {
        Self::build(Vec::new(), Arc::new(vec![value]), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), Arc::new(vec![0.0; numel_of(shape)]), false, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::build(shape.to_vec(), Arc::new(vec![value; numel_of(shape)]), false, None)
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        Self::build(shape.to_vec(), Arc::new(rng.normal_vec(numel_of(shape), std)), false, None)
    }

    /// Records an op result. The node is dropped when no parent needs gradients.
    pub(crate) fn from_op(
        op: &'static str,
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        let requires_grad = parents.iter().any(Tensor::requires_grad);
        let node = requires_grad.then(|| Node {
            op,
            parents,
            backward,
        });
        Self::build(shape, Arc::new(data), requires_grad, node)
    }

    /// Same as [`Tensor::from_op`] but sharing an existing buffer (reshapes).
    pub(crate) fn from_op_shared(
        op: &'static str,
        data: Arc<Vec<f64>>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        let requires_grad = parents.iter().any(Tensor::requires_grad);
        let node = requires_grad.then(|| Node {
            op,
            parents,
            backward,
        });
        Self::build(shape, data, requires_grad, node)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.0.data)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.as_ref().clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    /// Name of the op that produced this tensor, if it is part of a graph.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.node.as_ref().map(|n| n.op)
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.0.data[0])
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    /// Constant view of the same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.shape.clone(), self.data_arc(), false, None)
    }

    /// Fresh leaf that records gradients, sharing this tensor's values.
    pub fn to_parameter(&self) -> Tensor {
        Self::build(self.0.shape.clone(), self.data_arc(), true, None)
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    fn accumulate_grad(&self, g: Vec<f64>) {
        let mut slot = self.0.grad.lock().expect("grad lock poisoned");
        match slot.as_mut() {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, v)| *e += v),
            None => *slot = Some(g),
        }
    }

    /// Reverse-mode sweep from a scalar. Gradients add onto any already stored.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let order = self.topo_order();
        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);

        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            if let Some(node) = &t.0.node {
                let needs: Vec<bool> = node.parents.iter().map(Tensor::requires_grad).collect();
                let ctx = BackwardCtx {
                    grad: &g,
                    out: t.data(),
                    parents: &node.parents,
                    needs: &needs,
                };
                let parent_grads = (node.backward)(&ctx);
                debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", node.op);
                for (p, pg) in node.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !p.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(pg.len(), p.numel(), "{} grad size", node.op);
                    match pending.get_mut(&p.id()) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, v)| *a += v),
                        None => {
                            pending.insert(p.id(), pg);
                        }
                    }
                }
            }
            t.accumulate_grad(g);
        }
        Ok(())
    }

    /// Post-order over the requires-grad subgraph: parents precede children.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        // (tensor, children already pushed)
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.0.node {
                for p in &node.parents {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![1.0, 2.0, 3.0], &[2, 2]).is_err());
        assert!(Tensor::new(vec![1.0; 4], &[2, 2]).is_ok());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let x = Tensor::parameter(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_twice_x() {
        let x = Tensor::parameter(vec![1.0, -2.0, 3.5], &[3]).unwrap();
        x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 7.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let x = Tensor::parameter(vec![2.0], &[1]).unwrap();
        let y = x.mul_scalar(3.0).add(&x.mul_scalar(4.0)).unwrap();
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![7.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::parameter(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(x.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn intermediate_tensors_get_gradients() {
        let x = Tensor::parameter(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.mul_scalar(2.0);
        y.sum().backward().unwrap();
        assert_eq!(y.grad().unwrap(), vec![1.0, 1.0]);
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn constants_record_no_graph() {
        let x = Tensor::new(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.mul_scalar(2.0);
        assert!(!y.requires_grad());
        assert!(y.op_name().is_none());
    }
}
