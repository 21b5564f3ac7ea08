//! Tape traversal: node ids, the pass-local gradient store, backward, and the
//! `no_grad` scope.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};

use crate::error::{DmkdError, Result};
use super::Tensor;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

pub(crate) fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

struct GradGuard {
    previous: bool,
}

impl Drop for GradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.previous));
    }
}

/// Runs `f` with gradient recording disabled on this thread. Ops executed
/// inside create plain tensors with no backward rules.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let guard = GradGuard { previous: GRAD_ENABLED.with(|c| c.replace(false)) };
    let out = f();
    drop(guard);
    out
}

/// Per-pass gradient accumulator keyed by node id. Entries are created lazily
/// and removed as the sweep consumes them, so memory tracks the live frontier
/// of the graph rather than its full size.
pub struct GradStore {
    map: HashMap<u64, Vec<f64>>,
}

impl GradStore {
    pub(crate) fn new() -> GradStore {
        GradStore { map: HashMap::new() }
    }

    /// Adds into the entry for `id`, zero-filled to `len` on first touch.
    pub(crate) fn accumulate(&mut self, id: u64, len: usize, add: impl FnOnce(&mut [f64])) {
        let entry = self.map.entry(id).or_insert_with(|| vec![0.0; len]);
        debug_assert_eq!(entry.len(), len);
        add(entry);
    }

    pub(crate) fn take(&mut self, id: u64) -> Option<Vec<f64>> {
        self.map.remove(&id)
    }
}

/// Nodes that both reach `root` through parent links and sit on a path from a
/// requires_grad leaf, in reverse creation order. Creation order is a valid
/// topological order because every op's parents exist before its output.
fn reachable_reverse_topo(root: &Tensor) -> Vec<Tensor> {
    let mut seen: HashSet<u64> = HashSet::new();
    let mut stack = vec![root.clone()];
    let mut nodes = Vec::new();
    while let Some(node) = stack.pop() {
        if !node.requires_grad() || !seen.insert(node.id()) {
            continue;
        }
        stack.extend(node.parents());
        nodes.push(node);
    }
    nodes.sort_by(|a, b| b.id().cmp(&a.id()));
    nodes
}

/// Reverse sweep from a scalar loss. Every requires_grad leaf reachable from
/// `loss` gets `∂loss/∂leaf` added into its persistent grad; repeated calls
/// without `zero_grad` accumulate.
pub fn backward(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(DmkdError::NotScalar { numel: loss.numel() });
    }
    if !loss.requires_grad() {
        // No trainable leaf feeds this value; nothing to propagate.
        return Ok(());
    }
    let order = reachable_reverse_topo(loss);
    let mut store = GradStore::new();
    store.accumulate(loss.id(), 1, |g| g[0] = 1.0);
    for node in &order {
        let Some(upstream) = store.take(node.id()) else {
            continue;
        };
        if node.is_leaf() {
            node.accumulate_leaf_grad(upstream);
        } else {
            node.apply_rule(&upstream, &mut store);
        }
    }
    Ok(())
}

impl Tensor {
    /// See [`backward`].
    pub fn backward(&self) -> Result<()> {
        backward(self)
    }
}
