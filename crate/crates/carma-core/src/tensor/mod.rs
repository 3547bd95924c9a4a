//! Dense tensors with a reverse-mode gradient tape.
//!
//! The tape is define-by-run: every op appends a node holding the output
//! values and a local-gradient closure. [`Tape::backward`] walks the nodes in
//! reverse construction order (which is a reverse topological order, since
//! inputs always precede outputs) and accumulates gradients per node.
//!
//! Tapes are rebuilt per training step; parameters live outside the tape and
//! are inserted as leaves each step. Inference tapes skip closure creation
//! entirely but still count ops, which keeps forward-cost accounting uniform
//! between training and evaluation.

mod ops;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Element type of all tensors. 64-bit by default; the `f32` cargo feature
/// switches storage to 32-bit for faster training. The finite-difference
/// oracles assume the default 64-bit build.
#[cfg(not(feature = "f32"))]
pub type Scalar = f64;
#[cfg(feature = "f32")]
pub type Scalar = f32;

/// Denominator guard for layer normalization.
pub const LN_EPS: Scalar = 1e-12;

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

type BackwardFn = Box<dyn Fn(&[Scalar], &mut GradBuf)>;

/// Tape entry: values live in the tensors and gradient closures that
/// captured them; the tape itself only needs the backward rule.
struct Node {
    backward: Option<BackwardFn>,
}

struct TapeInner {
    nodes: Vec<Node>,
    grad_enabled: bool,
    consumed: bool,
}

/// Gradient accumulation buffer indexed by node id.
pub(crate) struct GradBuf {
    slots: Vec<Option<Vec<Scalar>>>,
}

impl GradBuf {
    fn new(n: usize) -> Self {
        GradBuf {
            slots: vec![None; n],
        }
    }

    /// Mutable zero-initialized gradient slot for node `id`.
    pub(crate) fn acc(&mut self, id: usize, len: usize) -> &mut [Scalar] {
        self.slots[id].get_or_insert_with(|| vec![0.0; len])
    }
}

/// Records ops for reverse-mode differentiation.
///
/// Cloning a `Tape` clones a handle to the same recording; tensors keep one
/// such handle so ops can append nodes without threading the tape through
/// every call site.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// New recording tape.
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                grad_enabled: true,
                consumed: false,
            })),
        }
    }

    /// Tape that records values and op counts but no gradient closures.
    pub fn inference() -> Self {
        let t = Tape::new();
        t.inner.borrow_mut().grad_enabled = false;
        t
    }

    /// Whether ops on this tape register gradient closures.
    pub fn grad_enabled(&self) -> bool {
        self.inner.borrow().grad_enabled
    }

    /// Number of nodes recorded so far (leaves included).
    pub fn node_count(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub(crate) fn push_node(
        &self,
        values: Rc<Vec<Scalar>>,
        shape: Vec<usize>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        debug_assert_eq!(numel(&shape), values.len());
        let mut inner = self.inner.borrow_mut();
        let backward = if inner.grad_enabled { backward } else { None };
        let id = inner.nodes.len();
        inner.nodes.push(Node { backward });
        Tensor {
            tape: self.clone(),
            id,
            shape,
            values,
        }
    }

    /// Inserts a leaf tensor (parameter or constant). Leaves have no
    /// backward rule; their gradients are read from [`Gradients`].
    pub fn leaf(&self, values: Vec<Scalar>, shape: Vec<usize>) -> Result<Tensor> {
        if numel(&shape) != values.len() {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                lhs: shape,
                rhs: vec![values.len()],
            });
        }
        Ok(self.push_node(Rc::new(values), shape, None))
    }

    /// Scalar leaf of shape `[1]`.
    pub fn scalar(&self, v: Scalar) -> Tensor {
        self.push_node(Rc::new(vec![v]), vec![1], None)
    }

    /// Runs reverse-mode accumulation from a scalar loss.
    ///
    /// Rejects non-scalar roots, roots from another tape, and repeated calls
    /// on the same tape without a rebuild.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if !self.same_tape(&loss.tape) {
            return Err(Error::contract("backward: loss lives on a different tape"));
        }
        if loss.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        {
            let mut inner = self.inner.borrow_mut();
            if !inner.grad_enabled {
                return Err(Error::contract("backward on an inference tape"));
            }
            if inner.consumed {
                return Err(Error::contract(
                    "backward called twice on one tape; rebuild the tape per step",
                ));
            }
            inner.consumed = true;
        }

        let inner = self.inner.borrow();
        let mut grads = GradBuf::new(inner.nodes.len());
        grads.acc(loss.id, 1)[0] = 1.0;
        for id in (0..=loss.id).rev() {
            let Some(g) = grads.slots[id].take() else {
                continue;
            };
            if let Some(back) = &inner.nodes[id].backward {
                back(&g, &mut grads);
            }
            // Leaves keep their gradient readable after the walk.
            if inner.nodes[id].backward.is_none() {
                grads.slots[id] = Some(g);
            }
        }
        Ok(Gradients { slots: grads.slots })
    }
}

/// Gradients produced by [`Tape::backward`], queryable per tensor.
#[derive(Debug)]
pub struct Gradients {
    slots: Vec<Option<Vec<Scalar>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `t`, or `None` if `t` never influenced
    /// the loss.
    pub fn try_get(&self, t: &Tensor) -> Option<&[Scalar]> {
        self.slots.get(t.id).and_then(|s| s.as_deref())
    }

    /// Gradient of the loss w.r.t. `t`; zeros (with a warning) for tensors
    /// disconnected from the loss.
    pub fn get(&self, t: &Tensor) -> Vec<Scalar> {
        match self.try_get(t) {
            Some(g) => g.to_vec(),
            None => {
                log::warn!(
                    "gradient requested for a tensor disconnected from the loss (id {}); returning zeros",
                    t.id
                );
                vec![0.0; t.numel()]
            }
        }
    }

    /// Whether `t` participated in the loss.
    pub fn is_connected(&self, t: &Tensor) -> bool {
        self.try_get(t).is_some()
    }
}

/// Handle to one value on a tape.
///
/// Cloning is cheap (reference-counted); values are immutable once created.
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    id: usize,
    shape: Vec<usize>,
    values: Rc<Vec<Scalar>>,
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Borrow of the raw values (row-major).
    pub fn values(&self) -> &[Scalar] {
        &self.values
    }

    pub fn to_vec(&self) -> Vec<Scalar> {
        self.values.to_vec()
    }

    /// The single element of a scalar tensor.
    pub fn scalar_value(&self) -> Result<Scalar> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "scalar_value on shape {:?}",
                self.shape
            )));
        }
        Ok(self.values[0])
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub(crate) fn check_same_tape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.tape.same_tape(&other.tape) {
            Ok(())
        } else {
            Err(Error::contract(format!("{op}: operands on different tapes")))
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape)
            .field("values", &self.values)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_sum_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(vec![1.0, -2.0, 3.0, 0.5], vec![2, 2]).unwrap();
        let loss = x.sum_all().unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x), vec![1.0; 4]);
    }

    #[test]
    fn backward_of_square_is_2x() {
        let tape = Tape::new();
        let x = tape.leaf(vec![3.0], vec![1]).unwrap();
        let loss = x.mul(&x).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x), vec![6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], vec![2]).unwrap();
        let err = tape.backward(&x).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn backward_rejects_second_call() {
        let tape = Tape::new();
        let x = tape.leaf(vec![2.0], vec![1]).unwrap();
        let loss = x.mul(&x).unwrap();
        tape.backward(&loss).unwrap();
        assert!(tape.backward(&loss).is_err());
    }

    #[test]
    fn disconnected_tensor_gets_zero_grad() {
        let tape = Tape::new();
        let x = tape.leaf(vec![1.0], vec![1]).unwrap();
        let unused = tape.leaf(vec![5.0, 5.0], vec![2]).unwrap();
        let loss = x.mul(&x).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert!(!grads.is_connected(&unused));
        assert_eq!(grads.get(&unused), vec![0.0, 0.0]);
    }

    #[test]
    fn inference_tape_rejects_backward_but_counts_nodes() {
        let tape = Tape::inference();
        let x = tape.leaf(vec![1.0, 2.0], vec![2]).unwrap();
        let y = x.add(&x).unwrap();
        assert_eq!(y.to_vec(), vec![2.0, 4.0]);
        assert_eq!(tape.node_count(), 2);
        let loss = y.sum_all().unwrap();
        assert!(tape.backward(&loss).is_err());
    }

    #[test]
    fn cross_tape_ops_are_rejected() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.leaf(vec![1.0], vec![1]).unwrap();
        let b = t2.leaf(vec![1.0], vec![1]).unwrap();
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = x*x + x  =>  d/dx = 2x + 1
        let tape = Tape::new();
        let x = tape.leaf(vec![3.0], vec![1]).unwrap();
        let loss = x.mul(&x).unwrap().add(&x).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x), vec![7.0]);
    }
}
