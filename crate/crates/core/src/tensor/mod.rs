//! Dense f32 tensors with a define-by-run reverse-mode tape.
//!
//! A [`Tape`] is created per forward pass. Every op that touches a tensor with
//! `requires_grad` records a node; [`Tape::backward`] replays the nodes in
//! reverse recording order. Tensors are immutable once built, so frozen
//! parameters can be shared across threads.

mod attention;
mod ops;

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

pub use attention::{attend_external, attend_head, AttnSegment, ExternalSegment};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f32>>>,
}

/// Row-major contiguous f32 array. Cloning is cheap (shared handle).
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl Tensor {
    pub fn new(data: Vec<f32>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self::from_parts(data, shape.to_vec(), false))
    }

    /// A leaf that participates in gradient computation.
    pub fn parameter(data: Vec<f32>, shape: &[usize]) -> Result<Self> {
        Ok(Self::new(data, shape)?.with_requires_grad(true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(vec![0.0; numel], shape.to_vec(), false)
    }

    pub fn scalar(value: f32) -> Self {
        Self::from_parts(vec![value], Vec::new(), false)
    }

    pub(crate) fn from_parts(data: Vec<f32>, shape: Vec<usize>, requires_grad: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self::from_shared(Arc::new(data), shape, requires_grad)
    }

    fn from_shared(data: Arc<Vec<f32>>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Tensor {
            inner: Arc::new(Inner {
                id: next_id(),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
            }),
        }
    }

    /// New handle over the same data with the given gradient flag.
    pub fn with_requires_grad(&self, requires_grad: bool) -> Self {
        Self::from_shared(
            Arc::clone(&self.inner.data),
            self.inner.shape.clone(),
            requires_grad,
        )
    }

    pub fn detach(&self) -> Self {
        self.with_requires_grad(false)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.data.as_ref().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.inner.data[0]
    }

    /// Size of the last axis (1 for scalars).
    pub fn cols(&self) -> usize {
        self.inner.shape.last().copied().unwrap_or(1)
    }

    /// Product of all axes but the last.
    pub fn rows(&self) -> usize {
        let c = self.cols();
        if c == 0 {
            0
        } else {
            self.numel() / c
        }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let c = self.cols();
        &self.inner.data[r * c..(r + 1) * c]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.lock().expect("grad lock").clone()
    }

    pub fn take_grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.lock().expect("grad lock").take()
    }

    fn set_grad(&self, g: Vec<f32>) {
        *self.inner.grad.lock().expect("grad lock") = Some(g);
    }

    /// True when both handles point at the same storage.
    pub fn shares_data(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.inner.data, &other.inner.data)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f32> = self.data().iter().take(6).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data", &preview)
            .finish()
    }
}

pub(crate) struct BackwardCtx<'a> {
    pub grad: &'a [f32],
    pub inputs: &'a [Tensor],
    pub needs: &'a [bool],
}

pub(crate) type BackwardFn = Box<dyn FnOnce(&BackwardCtx<'_>) -> Vec<Option<Vec<f32>>>>;

struct Node {
    op: &'static str,
    inputs: Vec<Tensor>,
    output: Tensor,
    backward: BackwardFn,
}

/// Ordered record of differentiable operations for one forward pass.
pub struct Tape {
    recording: bool,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            recording: true,
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// A tape that never records; every op output is a plain constant.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Names of recorded ops, in recording order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.borrow().iter().map(|n| n.op).collect()
    }

    pub(crate) fn record<F>(
        &self,
        op: &'static str,
        inputs: &[&Tensor],
        data: Vec<f32>,
        shape: Vec<usize>,
        make_backward: F,
    ) -> Tensor
    where
        F: FnOnce() -> BackwardFn,
    {
        let tracked = self.recording && inputs.iter().any(|t| t.requires_grad());
        let output = Tensor::from_parts(data, shape, tracked);
        if tracked {
            self.nodes.borrow_mut().push(Node {
                op,
                inputs: inputs.iter().map(|t| (*t).clone()).collect(),
                output: output.clone(),
                backward: make_backward(),
            });
        }
        output
    }

    /// Reverse-mode sweep from a scalar loss. Consumes the recorded nodes and
    /// populates `grad` on every tracked tensor reachable from the tape.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: loss.shape().to_vec(),
                rhs: vec![],
            });
        }
        if !loss.requires_grad() {
            return Err(Error::State(
                "backward called on a loss that does not require grad".into(),
            ));
        }
        let nodes = self.nodes.take();
        let produced: HashSet<u64> = nodes.iter().map(|n| n.output.id()).collect();
        let mut leaves: BTreeMap<u64, Tensor> = BTreeMap::new();
        for node in &nodes {
            for t in &node.inputs {
                if t.requires_grad() && !produced.contains(&t.id()) {
                    leaves.entry(t.id()).or_insert_with(|| t.clone());
                }
            }
        }

        let mut grads: HashMap<u64, Vec<f32>> = HashMap::new();
        grads.insert(loss.id(), vec![1.0]);
        for node in nodes.into_iter().rev() {
            let Node {
                inputs,
                output,
                backward,
                ..
            } = node;
            let g = grads
                .remove(&output.id())
                .unwrap_or_else(|| vec![0.0; output.numel()]);
            let needs: Vec<bool> = inputs.iter().map(Tensor::requires_grad).collect();
            if needs.iter().any(|&n| n) {
                let input_grads = backward(&BackwardCtx {
                    grad: &g,
                    inputs: &inputs,
                    needs: &needs,
                });
                debug_assert_eq!(input_grads.len(), inputs.len());
                for ((t, need), ig) in inputs.iter().zip(&needs).zip(input_grads) {
                    if !need {
                        continue;
                    }
                    if let Some(ig) = ig {
                        debug_assert_eq!(ig.len(), t.numel());
                        match grads.get_mut(&t.id()) {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(t.id(), ig);
                            }
                        }
                    }
                }
            }
            output.set_grad(g);
        }
        for (id, leaf) in leaves {
            let g = grads.remove(&id).unwrap_or_else(|| vec![0.0; leaf.numel()]);
            leaf.set_grad(g);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::new(vec![1.0, 2.0, 3.0], &[2, 2]).is_err());
        let t = Tensor::new(vec![1.0; 6], &[2, 3]).unwrap();
        assert_eq!(t.rows(), 2);
        assert_eq!(t.cols(), 3);
    }

    #[test]
    fn inference_tape_records_nothing() {
        let tape = Tape::inference();
        let a = Tensor::parameter(vec![1.0, 2.0], &[2]).unwrap();
        let b = tape.scale(&a, 2.0);
        assert!(!b.requires_grad());
        assert!(tape.is_empty());
    }

    #[test]
    fn frozen_inputs_receive_no_grad() {
        let tape = Tape::new();
        let frozen = Tensor::new(vec![1.0, 2.0], &[1, 2]).unwrap();
        let w = Tensor::parameter(vec![0.5, -0.5], &[2, 1]).unwrap();
        let y = tape.matmul(&frozen, &w).unwrap();
        let loss = tape.sum_all(&y);
        tape.backward(&loss).unwrap();
        assert!(frozen.grad().is_none());
        assert_eq!(w.grad().unwrap(), vec![1.0, 2.0]);
        assert!(y.grad().is_some());
    }

    #[test]
    fn backward_requires_scalar_tracked_loss() {
        let tape = Tape::new();
        let w = Tensor::parameter(vec![0.5, -0.5], &[2]).unwrap();
        let y = tape.scale(&w, 3.0);
        assert!(tape.backward(&y).is_err());
        let c = Tensor::scalar(1.0);
        assert!(Tape::new().backward(&c).is_err());
    }

    #[test]
    fn shared_input_accumulates() {
        let tape = Tape::new();
        let w = Tensor::parameter(vec![3.0], &[1]).unwrap();
        let y = tape.mul(&w, &w).unwrap();
        let loss = tape.sum_all(&y);
        tape.backward(&loss).unwrap();
        assert_eq!(w.grad().unwrap(), vec![6.0]);
    }
}
