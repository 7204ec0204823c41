//! Dense `f32` tensors with a reverse-mode autodiff graph.
//!
//! Every [`Tensor`] is an immutable, reference-counted node. Operations on
//! tensors that require gradients record a backward rule pointing at their
//! inputs; [`Tensor::backward`] walks that graph once in reverse topological
//! order. Parameters are never mutated in place: optimizers build new leaf
//! tensors, so a cloned model keeps its own weights.
//!
//! [`Tensor::detach`] severs a tensor from the graph. The edge filter relies
//! on it to keep its low-pass branch out of the gradient path.

mod conv;
mod norm;
mod ops;

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

pub use conv::{conv2d, depthwise_conv2d, PaddingMode};
pub use norm::{batch_norm2d, layer_norm, BnMode, BnOutput};
pub use ops::{
    add, add_channel_bias, global_avg_pool2d, matmul, mean, mean_axis1, mul, relu, sub, sum, Elementwise,
};

type BackwardFn = Box<dyn Fn(&[f32]) -> Vec<Option<Vec<f32>>>>;

struct GradFn {
    name: &'static str,
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    data: Vec<f32>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f32>>>,
    grad_fn: Option<GradFn>,
    consumed: Cell<bool>,
}

/// A dense row-major `f32` array that can take part in autodiff.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.grad_fn.as_ref().map(|g| g.name))
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn from_node(node: Node) -> Self {
        Tensor(Rc::new(node))
    }

    /// Constant tensor. Fails when `data.len()` does not match the shape.
    pub fn new(data: Vec<f32>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, false)
    }

    /// Leaf tensor that accumulates a gradient.
    pub fn param(data: Vec<f32>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, true)
    }

    fn leaf(data: Vec<f32>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Self::from_node(Node {
            data,
            shape: shape.to_vec(),
            requires_grad,
            grad: RefCell::new(None),
            grad_fn: None,
            consumed: Cell::new(false),
        }))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Self::new(vec![value; numel(shape)], shape).expect("valid shape")
    }

    pub fn scalar(value: f32) -> Self {
        Self::new(vec![value], &[1]).expect("scalar")
    }

    /// Result of an operation. Records `backward` only when some parent
    /// requires a gradient.
    pub(crate) fn from_op(
        name: &'static str,
        data: Vec<f32>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: impl Fn(&[f32]) -> Vec<Option<Vec<f32>>> + 'static,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len(), "{name}: bad output size");
        let requires_grad = parents.iter().any(Tensor::requires_grad);
        let grad_fn = requires_grad.then(|| GradFn {
            name,
            parents,
            backward: Box::new(backward),
        });
        Self::from_node(Node {
            data,
            shape,
            requires_grad,
            grad: RefCell::new(None),
            grad_fn,
            consumed: Cell::new(false),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.0.data.clone()
    }

    /// Same values, no graph edge, never requires a gradient.
    pub fn detach(&self) -> Tensor {
        Self::from_node(Node {
            data: self.0.data.clone(),
            shape: self.0.shape.clone(),
            requires_grad: false,
            grad: RefCell::new(None),
            grad_fn: None,
            consumed: Cell::new(false),
        })
    }

    /// View with a new shape; the gradient is reshaped back.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape()
            )));
        }
        Ok(Tensor::from_op(
            "reshape",
            self.0.data.clone(),
            shape.to_vec(),
            vec![self.clone()],
            |g| vec![Some(g.to_vec())],
        ))
    }

    /// Reverse-mode pass from a scalar loss.
    ///
    /// Every reachable leaf with `requires_grad` gets its gradient
    /// accumulated. A graph can be consumed once; calling `backward` again on
    /// the same loss is a [`Error::Contract`] violation. A loss that does not
    /// require gradients is a no-op.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        if self.0.consumed.get() {
            return Err(Error::Contract(
                "backward called twice on the same graph".into(),
            ));
        }

        let order = self.topo_order();
        let mut grads: HashMap<*const Node, Vec<f32>> = HashMap::new();
        grads.insert(Rc::as_ptr(&self.0), vec![1.0]);

        for t in order.iter().rev() {
            let key = Rc::as_ptr(&t.0);
            let Some(g) = grads.remove(&key) else {
                continue;
            };
            match &t.0.grad_fn {
                None => {
                    if t.0.requires_grad {
                        let mut slot = t.0.grad.borrow_mut();
                        match slot.as_mut() {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                            None => *slot = Some(g),
                        }
                    }
                }
                Some(gf) => {
                    t.0.consumed.set(true);
                    let parent_grads = (gf.backward)(&g);
                    debug_assert_eq!(parent_grads.len(), gf.parents.len(), "{}", gf.name);
                    for (p, pg) in gf.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel(), "{}: grad size", gf.name);
                        grads
                            .entry(Rc::as_ptr(&p.0))
                            .and_modify(|acc| acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b))
                            .or_insert(pg);
                    }
                }
            }
        }
        Ok(())
    }

    /// Nodes reachable from `self` that require grad, parents before children.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Node> = HashSet::new();
        // (node, children_pushed)
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            let key = Rc::as_ptr(&t.0);
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(key) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(gf) = &t.0.grad_fn {
                for p in &gf.parents {
                    if p.requires_grad() && !seen.contains(&Rc::as_ptr(&p.0)) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

/// Central finite-difference gradient of `f` at `x`, computed in `f64` from
/// `f32` evaluations. Test helper shared by unit and integration tests.
#[doc(hidden)]
pub fn finite_difference(x: &[f32], h: f32, f: impl Fn(&[f32]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_len() {
        assert!(matches!(Tensor::new(vec![1.0; 5], &[2, 3]), Err(Error::Shape(_))));
        assert!(matches!(Tensor::new(vec![], &[0]), Err(Error::Shape(_))));
    }

    #[test]
    fn sum_gives_ones() {
        let x = Tensor::param(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        sum(&x).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn detach_asymmetry() {
        // forward value is zero, gradient is identity
        let x = Tensor::param(vec![0.5, 1.5, -2.0], &[3]).unwrap();
        let y = sub(&x, &x.detach()).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        sum(&y).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn detach_shares_values_and_blocks_grad() {
        let x = Tensor::param(vec![2.0, -3.0], &[2]).unwrap();
        let d = x.detach();
        assert_eq!(d.data(), x.data());
        assert!(!d.requires_grad());

        let y = mul(&x, &d).unwrap();
        sum(&y).backward().unwrap();
        assert_eq!(x.grad().unwrap(), x.to_vec());

        let z = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        sum(&z.detach()).backward().unwrap();
        assert!(z.grad().is_none());
    }

    #[test]
    fn backward_twice_is_rejected() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let loss = sum(&mul(&x, &x).unwrap());
        loss.backward().unwrap();
        assert!(matches!(loss.backward(), Err(Error::Contract(_))));
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(x.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // loss = sum(x*x + x) -> 2x + 1
        let x = Tensor::param(vec![1.0, -1.0, 0.5], &[3]).unwrap();
        let loss = sum(&add(&mul(&x, &x).unwrap(), &x).unwrap());
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0, -1.0, 2.0]);
    }

    #[test]
    fn reshape_round_trips_grad() {
        let x = Tensor::param((0..6).map(|v| v as f32).collect(), &[2, 3]).unwrap();
        let y = x.reshape(&[3, 2]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        let w = Tensor::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]).unwrap();
        sum(&mul(&y, &w).unwrap()).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(x.reshape(&[4]).is_err());
    }
}
