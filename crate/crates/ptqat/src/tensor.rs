//! Dense float64 tensor with a reverse-mode autodiff tape.
//!
//! A [`Tensor`] is a cheaply clonable handle (`Rc`) to a flat row-major
//! `f64` buffer plus an optional gradient buffer. Every differentiable
//! operation appends a tape node to its output: the node keeps handles to
//! the operation's inputs and a [`BackwardRule`] holding whatever
//! intermediates the backward pass needs. Node ids come from a global
//! monotone counter, so ascending id order is exactly the forward append
//! order and [`Tensor::backward`] can sweep the tape strictly in reverse.
//!
//! Design constraints, deliberately simple:
//! - all accumulation in f64,
//! - row-major contiguous storage, no views; reshapes copy metadata only,
//! - single-threaded per graph (handles are `Rc`, not `Arc`).

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Per-input gradient contributions returned by a backward rule.
/// `None` for inputs whose gradient was not requested.
pub type InputGrads = Vec<Option<Vec<f64>>>;

/// Backward rule attached to a tape node. Implementations store the saved
/// intermediates they need (masks, softmax outputs, strides, ...).
pub trait BackwardRule {
    /// Stable op-kind identifier, used for tape comparisons in tests.
    fn op_name(&self) -> &'static str;

    /// Given the inputs and the gradient of the node output, return the
    /// gradient contribution for each input. `needs[i]` is false when input
    /// `i` needs no gradient; the rule may skip that work and return `None`.
    fn backward(&self, inputs: &[Tensor], out_grad: &[f64], needs: &[bool]) -> InputGrads;
}

/// Tape node: the op that produced a tensor plus handles to its inputs.
pub struct TapeNode {
    pub inputs: Vec<Tensor>,
    pub rule: Box<dyn BackwardRule>,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    node: Option<TapeNode>,
}

/// Dense n-dimensional f64 tensor handle.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        write!(
            f,
            "Tensor(id={}, shape={:?}, requires_grad={})",
            inner.id, inner.shape, inner.requires_grad
        )
    }
}

impl Tensor {
    /// Leaf tensor from a flat row-major buffer.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Contract(format!(
                "data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Self::new_inner(shape, data, false, None))
    }

    /// Scalar leaf.
    pub fn scalar(v: f64) -> Tensor {
        Self::new_inner(vec![], vec![v], false, None)
    }

    /// Zero-filled leaf.
    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let numel = shape.iter().product();
        Self::new_inner(shape, vec![0.0; numel], false, None)
    }

    pub(crate) fn new_inner(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        node: Option<TapeNode>,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                id: fresh_id(),
                shape,
                data,
                grad: None,
                requires_grad,
                node,
            })),
        }
    }

    /// Result of an op: output buffer plus the tape node that produced it.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: Vec<Tensor>,
        rule: Box<dyn BackwardRule>,
    ) -> Tensor {
        Self::new_inner(shape, data, false, Some(TapeNode { inputs, rule }))
    }

    pub fn id(&self) -> u64 {
        self.inner.borrow().id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    /// Borrow the flat data buffer.
    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |i| i.data.as_slice())
    }

    /// Copy the flat data buffer out.
    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "item() on non-scalar tensor");
        inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, requires: bool) {
        self.inner.borrow_mut().requires_grad = requires;
    }

    /// Accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Replace the data buffer in place (same length). Used by the optimizer
    /// between forward passes; never call while a tape referencing this
    /// tensor is still alive and about to be replayed.
    pub fn set_data(&self, data: Vec<f64>) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.data.len(), data.len(), "set_data length mismatch");
        inner.data = data;
    }

    /// Apply an in-place update to the data buffer.
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        let mut inner = self.inner.borrow_mut();
        f(&mut inner.data);
    }

    /// New leaf tensor with copied data and no tape history.
    pub fn detach(&self) -> Tensor {
        let inner = self.inner.borrow();
        Self::new_inner(inner.shape.clone(), inner.data.clone(), false, None)
    }

    fn node_inputs(&self) -> Option<Vec<Tensor>> {
        self.inner
            .borrow()
            .node
            .as_ref()
            .map(|n| n.inputs.clone())
    }

    /// Op-kind identifier of the producing tape node, if any.
    pub fn op_name(&self) -> Option<&'static str> {
        self.inner.borrow().node.as_ref().map(|n| n.rule.op_name())
    }

    /// Sequence of op names of the tape reachable from this tensor, in
    /// forward (append) order. Used to assert tape-replay determinism.
    pub fn tape_ops(&self) -> Vec<&'static str> {
        let order = topo_order(self);
        order
            .iter()
            .filter_map(|t| t.op_name())
            .collect()
    }

    /// Reverse-mode sweep from a scalar loss. Populates `grad` on every
    /// reachable tensor with `requires_grad = true`; repeated calls without
    /// `zero_grad` accumulate.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward() requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }

        let order = topo_order(self);

        // A tensor needs a gradient if it is itself marked requires_grad or
        // any tensor upstream of it is. Computed bottom-up over the tape.
        let mut needs: HashMap<u64, bool> = HashMap::new();
        for t in &order {
            let mut n = t.requires_grad();
            if !n {
                if let Some(inputs) = t.node_inputs() {
                    n = inputs.iter().any(|i| *needs.get(&i.id()).unwrap_or(&false));
                }
            }
            needs.insert(t.id(), n);
        }

        // Gradients accumulate in a side map during the sweep so rules can
        // freely borrow input data.
        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);

        for t in order.iter().rev() {
            let out_grad = match grads.get(&t.id()) {
                Some(g) => g.clone(),
                None => continue,
            };
            let inner = t.inner.borrow();
            let node = match inner.node.as_ref() {
                Some(n) => n,
                None => continue,
            };
            let need_flags: Vec<bool> = node
                .inputs
                .iter()
                .map(|i| *needs.get(&i.id()).unwrap_or(&false))
                .collect();
            if !need_flags.iter().any(|&b| b) {
                continue;
            }
            let contributions = node.rule.backward(&node.inputs, &out_grad, &need_flags);
            debug_assert_eq!(contributions.len(), node.inputs.len());
            for (input, contrib) in node.inputs.iter().zip(contributions) {
                if let Some(g) = contrib {
                    debug_assert_eq!(g.len(), input.numel());
                    let entry = grads
                        .entry(input.id())
                        .or_insert_with(|| vec![0.0; input.numel()]);
                    for (acc, v) in entry.iter_mut().zip(&g) {
                        *acc += v;
                    }
                }
            }
        }

        // Fold the sweep results into the persistent grad buffers.
        for t in &order {
            if !t.requires_grad() {
                continue;
            }
            if let Some(g) = grads.remove(&t.id()) {
                let mut inner = t.inner.borrow_mut();
                match inner.grad.as_mut() {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&g) {
                            *a += v;
                        }
                    }
                    None => inner.grad = Some(g),
                }
            }
        }
        Ok(())
    }
}

/// Tensors reachable from `root`, sorted by creation id. Ids are handed out
/// monotonically at creation, so this is the forward append order of the
/// tape restricted to the reachable subgraph.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut seen: HashMap<u64, ()> = HashMap::new();
    let mut out: Vec<Tensor> = Vec::new();
    let mut stack = vec![root.clone()];
    while let Some(t) = stack.pop() {
        if seen.contains_key(&t.id()) {
            continue;
        }
        seen.insert(t.id(), ());
        if let Some(inputs) = t.node_inputs() {
            stack.extend(inputs);
        }
        out.push(t);
    }
    out.sort_by_key(|t| t.id());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    #[test]
    fn from_vec_rejects_length_mismatch() {
        let err = Tensor::from_vec(vec![2, 3], vec![1.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn backward_requires_scalar() {
        let t = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(t.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn grad_accumulates_across_backward_calls() {
        let x = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        x.set_requires_grad(true);
        let loss = ops::sum(&ops::mul(&x, &x).unwrap());
        loss.backward().unwrap();
        loss.backward().unwrap();
        // d(sum x^2)/dx = 2x, called twice => 4x
        assert_eq!(x.grad().unwrap(), vec![4.0, 8.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn fanout_gradients_sum() {
        let x = Tensor::from_vec(vec![1], vec![3.0]).unwrap();
        x.set_requires_grad(true);
        let y = ops::add(&x, &x).unwrap();
        let loss = ops::sum(&y);
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn tape_replay_is_identical() {
        let run = || {
            let x = Tensor::from_vec(vec![2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
            x.set_requires_grad(true);
            let w = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, -0.5, 0.75]).unwrap();
            w.set_requires_grad(true);
            let y = ops::relu(&ops::matmul(&x, &w).unwrap());
            let loss = ops::sum(&y);
            loss.backward().unwrap();
            (loss.tape_ops(), x.grad().unwrap(), w.grad().unwrap())
        };
        let (ops1, gx1, gw1) = run();
        let (ops2, gx2, gw2) = run();
        assert_eq!(ops1, ops2);
        assert_eq!(gx1, gx2);
        assert_eq!(gw1, gw2);
    }
}
