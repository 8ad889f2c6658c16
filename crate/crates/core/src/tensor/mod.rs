//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! The design is a dynamically recorded tape: every op that produces a
//! tensor from tracked inputs attaches a node holding its parents and a
//! backward closure. [`Tensor::backward`] walks the recorded graph in
//! reverse topological order, accumulates gradients into every tensor that
//! requires them, and frees the tape as it goes. Graphs are rebuilt on each
//! forward pass, which is what lets pruning masks, routes and merge maps
//! change the graph shape per step.
//!
//! Values are immutable once created. Forward ops validate their output for
//! NaN/Inf and surface [`TensorError::NonFinite`] instead of letting bad
//! values propagate.

mod kernels;
mod ops;
mod rten;

pub use ops::top_k_indices;
pub use rten::{read_rten, read_rten_from, write_rten, write_rten_to};

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape error: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: index error: {detail}")]
    Index { op: &'static str, detail: String },
    #[error("masked_softmax: mask row {row} is all zeros")]
    DegenerateMaskRow { row: usize },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("top_k_indices: k={k} out of range for n={n}")]
    TopKRange { k: usize, n: usize },
    #[error("backward requires a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("rten: {detail}")]
    Rten { detail: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// True when ops should record themselves on the tape.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Run `f` with tape recording disabled (inference mode).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    GRAD_ENABLED.with(|g| {
        let prev = g.replace(false);
        let out = f();
        g.set(prev);
        out
    })
}

/// Arguments handed to an op's backward closure.
pub(crate) struct BackwardArgs<'a> {
    pub grad_out: &'a [f32],
    pub out_data: &'a [f32],
    pub parents: &'a [Tensor],
}

struct Node {
    parents: Vec<Tensor>,
    backward: Box<dyn Fn(&BackwardArgs<'_>)>,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f32>>>,
    node: RefCell<Option<Node>>,
}

/// Dense row-major f32 tensor; cheap to clone (shared buffer).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

/// Whether an op's output needs the NaN/Inf scan. Pure data movement
/// (gather, reshape, ...) cannot create non-finite values from finite input.
#[derive(Clone, Copy, PartialEq)]
pub(crate) enum FiniteCheck {
    Check,
    Skip,
}

impl Tensor {
    fn make(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool, node: Option<Node>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                node: RefCell::new(node),
            }),
        }
    }

    /// Constant (untracked) tensor.
    pub fn new(data: Vec<f32>, shape: Vec<usize>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Self::make(shape, data, false, None)
    }

    /// Learnable leaf: participates in gradient accumulation.
    pub fn param(data: Vec<f32>, shape: Vec<usize>) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self::make(shape, data, true, None)
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Self::new(vec![0.0; n], shape)
    }

    pub fn ones(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Self::new(vec![1.0; n], shape)
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Tensor {
        let n = shape.iter().product();
        Self::new(vec![value; n], shape)
    }

    pub fn scalar(value: f32) -> Tensor {
        Self::new(vec![value], vec![1])
    }

    /// Record an op output. `backward` receives the output gradient and must
    /// accumulate into the parents' gradient buffers.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f32>,
        parents: Vec<Tensor>,
        check: FiniteCheck,
        backward: impl Fn(&BackwardArgs<'_>) + 'static,
    ) -> Result<Tensor> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if check == FiniteCheck::Check && !kernels::all_finite(&data) {
            return Err(TensorError::NonFinite { op });
        }
        let track = grad_enabled() && parents.iter().any(|p| p.inner.requires_grad);
        if track {
            Ok(Self::make(
                shape,
                data,
                true,
                Some(Node {
                    parents,
                    backward: Box::new(backward),
                }),
            ))
        } else {
            Ok(Self::make(shape, data, false, None))
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.inner.data[0]
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape() {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::Shape {
                op,
                detail: format!("expected 2-D, got {:?}", self.shape()),
            }),
        }
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.borrow().clone()
    }

    pub fn with_grad<R>(&self, f: impl FnOnce(Option<&[f32]>) -> R) -> R {
        f(self.inner.grad.borrow().as_deref())
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Accumulate into this tensor's gradient buffer.
    pub(crate) fn with_grad_buf(&self, f: impl FnOnce(&mut [f32])) {
        let mut g = self.inner.grad.borrow_mut();
        let buf = g.get_or_insert_with(|| vec![0.0; self.inner.data.len()]);
        f(buf);
    }

    /// Same values, detached from the tape.
    pub fn detach(&self) -> Tensor {
        Tensor::new(self.inner.data.clone(), self.inner.shape.clone())
    }

    /// Reverse-mode gradient of a scalar. Frees the tape while running, so a
    /// graph can be backpropagated once.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape().to_vec(),
            });
        }
        // Reverse postorder over parent edges = topological order.
        let mut topo: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((t, pi)) = stack.pop() {
            let next_parent = {
                let node = t.inner.node.borrow();
                node.as_ref().and_then(|n| n.parents.get(pi).cloned())
            };
            match next_parent {
                Some(p) => {
                    stack.push((t, pi + 1));
                    if visited.insert(p.id()) {
                        stack.push((p, 0));
                    }
                }
                None => topo.push(t),
            }
        }
        self.with_grad_buf(|g| g[0] = 1.0);
        for t in topo.iter().rev() {
            let node = t.inner.node.borrow_mut().take();
            let Some(node) = node else { continue };
            {
                let grad = t.inner.grad.borrow();
                let Some(gout) = grad.as_deref() else { continue };
                (node.backward)(&BackwardArgs {
                    grad_out: gout,
                    out_data: &t.inner.data,
                    parents: &node.parents,
                });
            }
            // Intermediate grads are spent; drop them to keep memory flat.
            *t.inner.grad.borrow_mut() = None;
        }
        Ok(())
    }
}
