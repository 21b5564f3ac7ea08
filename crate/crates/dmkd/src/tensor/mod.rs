//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! Storage is row-major and every operation materializes its output; there
//! are no views. Each op records a backward rule capturing copies of whatever
//! forward data it needs, so backward never re-borrows other tensors.
//!
//! Binary ops broadcast their right operand against the left, numpy-style
//! (right-aligned shapes, size-1 axes stretch), and gradients land only on
//! leaves created with `set_requires_grad(true)`:
//!
//! ```
//! use dmkd::Tensor;
//!
//! let m = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2])?;
//! let row = Tensor::from_vec(vec![10.0, 20.0], &[2])?;
//! assert_eq!(m.add(&row)?.to_vec(), vec![11.0, 22.0, 13.0, 24.0]);
//!
//! row.set_requires_grad(true);
//! m.add(&row)?.sum_all().backward()?;
//! // Each row entry fed two outputs, so its gradient is 2.
//! assert_eq!(row.grad().unwrap(), vec![2.0, 2.0]);
//! # Ok::<(), dmkd::DmkdError>(())
//! ```

pub mod autograd;
pub mod layout;
pub mod ops;
pub mod sgd;

pub use sgd::Sgd;

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use rand::{Rng, RngExt};

use crate::error::{DmkdError, Result};
use autograd::GradStore;

/// Reverse rule for one recorded op: given the upstream gradient of the
/// output, accumulate into the parents' entries of the pass-local store.
pub(crate) struct BackwardRule {
    pub op: &'static str,
    pub parents: Vec<Tensor>,
    pub apply: Box<dyn Fn(&[f64], &mut GradStore)>,
}

pub(crate) struct TensorInner {
    pub id: u64,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Persistent gradient, populated by backward only on requires_grad leaves.
    pub grad: Option<Vec<f64>>,
    /// True for leaves marked trainable and for any node downstream of one.
    pub requires_grad: bool,
    pub rule: Option<BackwardRule>,
}

/// Shared handle to a tensor node. Clones alias the same storage.
pub struct Tensor {
    inner: Rc<RefCell<TensorInner>>,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("id", &inner.id)
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .field("op", &inner.rule.as_ref().map(|r| r.op))
            .finish()
    }
}

impl Tensor {
    fn new_node(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, rule: Option<BackwardRule>) -> Tensor {
        debug_assert_eq!(layout::numel(&shape), data.len());
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced by {:?}",
            rule.as_ref().map(|r| r.op)
        );
        Tensor {
            inner: Rc::new(RefCell::new(TensorInner {
                id: autograd::next_id(),
                shape,
                data,
                grad: None,
                requires_grad,
                rule,
            })),
        }
    }

    /// Leaf from explicit data; errors when `data` does not fill `shape`.
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if layout::numel(shape) != data.len() {
            return Err(DmkdError::ShapeMismatch {
                op: "from_vec".into(),
                details: format!("shape {:?} needs {} values, got {}", shape, layout::numel(shape), data.len()),
            });
        }
        Ok(Tensor::new_node(shape.to_vec(), data, false, None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new_node(shape.to_vec(), vec![0.0; layout::numel(shape)], false, None)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::new_node(shape.to_vec(), vec![value; layout::numel(shape)], false, None)
    }

    /// Rank-1 single-element tensor, the scalar convention used by losses.
    pub fn scalar(value: f64) -> Tensor {
        Tensor::new_node(vec![1], vec![value], false, None)
    }

    /// Leaf with entries drawn i.i.d. from `uniform(lo, hi)`.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
        let data = (0..layout::numel(shape)).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::new_node(shape.to_vec(), data, false, None)
    }

    pub(crate) fn with_rule(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, rule: Option<BackwardRule>) -> Tensor {
        Tensor::new_node(shape, data, requires_grad, rule)
    }

    pub fn id(&self) -> u64 {
        self.inner.borrow().id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn rank(&self) -> usize {
        self.inner.borrow().shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    /// Borrowed view of the flat row-major data.
    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |i| i.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// The single value of a one-element tensor.
    ///
    /// Panics when `numel != 1`; use only where a scalar is structurally
    /// guaranteed (losses, fusion weights).
    pub fn item(&self) -> f64 {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "item() on tensor of {} elements", inner.data.len());
        inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    /// Marks a leaf as trainable. Panics on non-leaf tensors: interior nodes
    /// derive their flag from their parents.
    pub fn set_requires_grad(&self, flag: bool) {
        let mut inner = self.inner.borrow_mut();
        assert!(inner.rule.is_none(), "set_requires_grad on non-leaf tensor (op {:?})", inner.rule.as_ref().map(|r| r.op));
        inner.requires_grad = flag;
        if !flag {
            inner.grad = None;
        }
    }

    /// Copy of the accumulated gradient, if backward populated one.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// New leaf sharing this tensor's values but cut from the graph.
    pub fn detach(&self) -> Tensor {
        let inner = self.inner.borrow();
        Tensor::new_node(inner.shape.clone(), inner.data.clone(), false, None)
    }

    /// In-place overwrite of the stored values; optimizer use only. The shape
    /// must be unchanged and the tensor must be a leaf.
    pub(crate) fn overwrite_data(&self, new_data: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        assert!(inner.rule.is_none(), "overwrite_data on non-leaf");
        assert_eq!(inner.data.len(), new_data.len());
        inner.data.copy_from_slice(new_data);
    }

    /// Name of the op that produced this tensor, `None` for leaves.
    pub fn op_name(&self) -> Option<&'static str> {
        self.inner.borrow().rule.as_ref().map(|r| r.op)
    }

    pub(crate) fn parents(&self) -> Vec<Tensor> {
        self.inner
            .borrow()
            .rule
            .as_ref()
            .map(|r| r.parents.clone())
            .unwrap_or_default()
    }

    pub(crate) fn is_leaf(&self) -> bool {
        self.inner.borrow().rule.is_none()
    }

    pub(crate) fn accumulate_leaf_grad(&self, g: Vec<f64>) {
        let mut inner = self.inner.borrow_mut();
        debug_assert!(inner.rule.is_none());
        match &mut inner.grad {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g.iter()) {
                    *a += b;
                }
            }
            None => inner.grad = Some(g),
        }
    }

    pub(crate) fn apply_rule(&self, upstream: &[f64], store: &mut GradStore) {
        let inner = self.inner.borrow();
        if let Some(rule) = inner.rule.as_ref() {
            (rule.apply)(upstream, store);
        }
    }
}

/// Builds the output node for an op, recording the backward rule only when
/// gradients are globally enabled and some parent requires them. Dead
/// subgraphs (a frozen teacher, anything under `no_grad`) therefore record
/// nothing at all.
pub(crate) fn make_output<F>(
    op: &'static str,
    shape: Vec<usize>,
    data: Vec<f64>,
    parents: &[&Tensor],
    build: F,
) -> Tensor
where
    F: FnOnce() -> Box<dyn Fn(&[f64], &mut GradStore)>,
{
    let track = autograd::grad_enabled() && parents.iter().any(|p| p.requires_grad());
    if track {
        let rule = BackwardRule {
            op,
            parents: parents.iter().map(|p| (*p).clone()).collect(),
            apply: build(),
        };
        Tensor::with_rule(shape, data, true, Some(rule))
    } else {
        Tensor::with_rule(shape, data, false, None)
    }
}
