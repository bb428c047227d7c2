//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Tensors are row-major `f64` buffers with a shape. Operations build a DAG
//! of reference-counted nodes; [`Tensor::backward`] walks the graph in
//! reverse topological order and accumulates gradients into the
//! `requires_grad` leaves. Gradients *accumulate*: running backward twice
//! without [`Tensor::zero_grad`] doubles them, which is what gradient
//! accumulation over micro-batches relies on.
//!
//! All arithmetic is performed in `f64`. In 32-bit mode (see
//! [`crate::config::set_fp_mode`]) every operation result and parameter
//! update is rounded to `f32` precision, so training-mode numerics are
//! reproducible from the same storage type.
//!
//! Tensors are deliberately cheap values: cloning copies an `Rc`. A graph is
//! owned by whoever holds the loss tensor and is freed when dropped. Nodes
//! are not thread-safe; models exchange parameters across threads through
//! plain-data snapshots (see [`crate::model::ParamSnapshot`]).

pub mod ops;
mod optim;

pub use optim::{zero_grads, Adam, Parameter};

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::config::quantize_slice;
use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// Disables graph construction on the current thread while alive.
/// Used by inference so long videos do not build throwaway graphs.
pub struct NoGradGuard {
    prev: bool,
}

impl NoGradGuard {
    pub fn new() -> Self {
        let prev = NO_GRAD.with(|c| c.replace(true));
        NoGradGuard { prev }
    }
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        NO_GRAD.with(|c| c.set(self.prev));
    }
}

fn grad_disabled() -> bool {
    NO_GRAD.with(|c| c.get())
}

/// Backward rule: given the output node and the gradient flowing into it,
/// produce one optional gradient per parent (in `parents` order).
type BackwardFn = Box<dyn Fn(&Node, &[f64]) -> Vec<Option<Vec<f64>>>>;

pub(crate) struct Node {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// A dense row-major tensor participating in the autodiff graph.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

impl Tensor {
    // ── Construction ────────────────────────────────────────────────

    fn new_node(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents,
                backward: backward,
            }),
        }
    }

    /// A constant leaf (no gradient ever flows into it).
    pub fn constant(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape {
                op: "constant",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self::new_node(shape.to_vec(), data, false, Vec::new(), None))
    }

    /// A trainable leaf; gradients accumulate into it on backward passes.
    pub fn variable(shape: &[usize], mut data: Vec<f64>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape {
                op: "variable",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        quantize_slice(&mut data);
        Ok(Self::new_node(shape.to_vec(), data, true, Vec::new(), None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Self::new_node(shape.to_vec(), vec![0.0; n], false, Vec::new(), None)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n = shape.iter().product();
        Self::new_node(shape.to_vec(), vec![value; n], false, Vec::new(), None)
    }

    pub fn scalar(value: f64) -> Tensor {
        Self::new_node(vec![1], vec![value], false, Vec::new(), None)
    }

    /// Result node of an operation. Tracking is skipped when no parent
    /// requires gradients or a [`NoGradGuard`] is active.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        mut data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        quantize_slice(&mut data);
        let track = !grad_disabled() && parents.iter().any(|p| p.node.requires_grad);
        if track {
            Self::new_node(shape, data, true, parents, Some(backward))
        } else {
            Self::new_node(shape, data, false, Vec::new(), None)
        }
    }

    // ── Introspection ───────────────────────────────────────────────

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    /// Rows of a 1-D or 2-D tensor (the leading dimension).
    pub fn rows(&self) -> usize {
        self.node.shape.first().copied().unwrap_or(1)
    }

    /// Elements per row.
    pub fn row_len(&self) -> usize {
        if self.node.shape.len() <= 1 {
            1
        } else {
            self.node.shape[1..].iter().product()
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.node.data.borrow()
    }

    /// Copy of the buffer.
    pub fn to_vec(&self) -> Vec<f64> {
        self.node.data.borrow().clone()
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.node.data.borrow()[0]
    }

    /// Mutates leaf data in place (optimizer updates, finite-difference
    /// probes). Quantizes in 32-bit mode.
    pub fn set_data(&self, mut data: Vec<f64>) {
        debug_assert_eq!(data.len(), self.numel());
        quantize_slice(&mut data);
        *self.node.data.borrow_mut() = data;
    }

    pub fn nudge(&self, index: usize, delta: f64) {
        self.node.data.borrow_mut()[index] += delta;
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// A constant leaf sharing this tensor's current values; gradients do
    /// not flow through it.
    pub fn detach(&self) -> Tensor {
        Self::new_node(
            self.node.shape.clone(),
            self.to_vec(),
            false,
            Vec::new(),
            None,
        )
    }

    pub fn is_finite(&self) -> bool {
        self.node.data.borrow().iter().all(|x| x.is_finite())
    }

    // ── Backward pass ───────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Gradients of intermediate
    /// nodes live only for the duration of the call; `requires_grad` leaves
    /// accumulate into their `grad` buffers.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.node.shape
            )));
        }
        if !self.node.requires_grad {
            // Loss does not depend on any trainable leaf; nothing to do.
            return Ok(());
        }

        let order = self.topo_order();
        let mut flowing: HashMap<u64, Vec<f64>> = HashMap::new();
        flowing.insert(self.node.id, vec![1.0]);

        for t in order.iter().rev() {
            let Some(g) = flowing.remove(&t.node.id) else {
                continue;
            };
            match &t.node.backward {
                Some(bw) => {
                    let contribs = bw(&t.node, &g);
                    debug_assert_eq!(contribs.len(), t.node.parents.len());
                    for (parent, contrib) in t.node.parents.iter().zip(contribs) {
                        let Some(c) = contrib else { continue };
                        if !parent.node.requires_grad {
                            continue;
                        }
                        debug_assert_eq!(c.len(), parent.numel());
                        match flowing.entry(parent.node.id) {
                            std::collections::hash_map::Entry::Occupied(mut e) => {
                                for (a, b) in e.get_mut().iter_mut().zip(&c) {
                                    *a += b;
                                }
                            }
                            std::collections::hash_map::Entry::Vacant(e) => {
                                e.insert(c);
                            }
                        }
                    }
                }
                None => {
                    // Trainable leaf: persistent accumulation.
                    let mut slot = t.node.grad.borrow_mut();
                    let buf = slot.get_or_insert_with(|| vec![0.0; t.numel()]);
                    for (a, b) in buf.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order (leaves first) over the `requires_grad` subgraph.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashMap<u64, ()> = HashMap::new();
        // Iterative DFS; (node, child_cursor) pairs.
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.node.id, ());
        while let Some((t, cursor)) = stack.pop() {
            if cursor < t.node.parents.len() {
                let parent = t.node.parents[cursor].clone();
                stack.push((t, cursor + 1));
                if parent.node.requires_grad && !visited.contains_key(&parent.node.id) {
                    visited.insert(parent.node.id, ());
                    stack.push((parent, 0));
                }
            } else {
                order.push(t);
            }
        }
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let p = Tensor::variable(&[2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let loss = p.sum_all();
        loss.backward().unwrap();
        assert_eq!(p.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn quadratic_gradient_is_input() {
        let p = Tensor::variable(&[2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let loss = p.mul(&p).unwrap().sum_all().scale(0.5);
        loss.backward().unwrap();
        let g = p.grad().unwrap();
        for (gi, pi) in g.iter().zip(p.to_vec()) {
            assert!((gi - pi).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_twice_doubles_grads() {
        let p = Tensor::variable(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let loss = p.sum_all();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(p.grad().unwrap(), vec![2.0; 3]);
        p.zero_grad();
        assert!(p.grad().is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let p = Tensor::variable(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(p.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_node_gets_both_contributions() {
        // loss = sum(x * x) uses x twice via distinct parent slots.
        let x = Tensor::variable(&[2], vec![3.0, -1.0]).unwrap();
        let loss = x.mul(&x).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0, -2.0]);
    }

    #[test]
    fn no_grad_guard_suppresses_graph() {
        let x = Tensor::variable(&[2], vec![1.0, 2.0]).unwrap();
        let y = {
            let _g = NoGradGuard::new();
            x.scale(2.0)
        };
        assert!(!y.requires_grad());
        let z = x.scale(2.0);
        assert!(z.requires_grad());
    }

    #[test]
    fn constants_do_not_require_grad() {
        let c = Tensor::constant(&[2], vec![1.0, 2.0]).unwrap();
        let y = c.scale(3.0);
        assert!(!y.requires_grad());
    }

    #[test]
    fn detach_blocks_gradient() {
        let x = Tensor::variable(&[2], vec![1.0, 2.0]).unwrap();
        let loss = x.detach().sum_all();
        loss.backward().unwrap();
        assert!(x.grad().is_none());
    }
}
