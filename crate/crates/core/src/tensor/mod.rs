//! Dense f64 tensors with reverse-mode gradient accumulation.
//!
//! The graph is define-by-run: every operation records its operands and a
//! backward rule on the result node, and `backward` on a scalar loss walks
//! the recorded nodes once in reverse topological order. Graphs live for a
//! single training step; parameters are leaf tensors that persist across
//! steps and accumulate gradients in place.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

mod gradcheck;
mod ops;

pub use gradcheck::{finite_diff_check, FiniteDiffConfig};
pub use ops::*;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &mut GradStore)>;

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: Cell<bool>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Shared handle to one node of the computation graph.
///
/// Cloning is cheap and aliases the same storage. A `Tensor` is confined to
/// one thread while a graph is being built or traversed.
pub struct Tensor {
    inner: Rc<Inner>,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, requires_grad={})",
            self.inner.id,
            self.inner.shape,
            self.requires_grad()
        )
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Tensor {
    /// Constant tensor; validates the shape/data agreement and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "new",
                detail: format!("shape {:?} holds {} values, got {}", shape, numel, data.len()),
            });
        }
        check_finite("new", &data)?;
        Ok(Self::leaf(shape, data, false))
    }

    /// Trainable leaf tensor with gradient accumulation enabled.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::new(shape, data)?;
        t.inner.requires_grad.set(true);
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let numel = shape.iter().product();
        Self::leaf(shape, vec![0.0; numel], false)
    }

    pub fn scalar(v: f64) -> Result<Tensor> {
        Tensor::new(vec![1], vec![v])
    }

    /// Rank-2 tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(m * n);
        for r in rows {
            if r.len() != n {
                return Err(Error::Shape {
                    op: "from_rows",
                    detail: format!("row length {} differs from {}", r.len(), n),
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![m, n], data)
    }

    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(requires_grad),
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// Interior node recorded by an operation. `requires_grad` is inherited
    /// from the operands; the output values are checked finite so that every
    /// committed operation upholds the finiteness invariant.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Result<Tensor> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        check_finite(op, &data)?;
        let requires = parents.iter().any(|p| p.requires_grad());
        Ok(Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(requires),
                parents,
                backward: if requires { Some(backward) } else { None },
            }),
        })
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

    pub fn len(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Borrow the raw values. Do not hold across further graph construction.
    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.len() != 1 {
            return Err(Error::Contract {
                what: format!("item() on tensor of shape {:?}", self.shape()),
            });
        }
        Ok(self.inner.data.borrow()[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    /// Freeze or unfreeze a leaf. Effective from the next graph build.
    pub fn set_requires_grad(&self, on: bool) {
        self.inner.requires_grad.set(on);
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.parents.is_empty()
    }

    /// Copy of the accumulated gradient, if any backward pass has reached
    /// this tensor since the last reset.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Overwrite the stored values in place (optimizer updates, checkpoint
    /// restore). The length must match and the values must be finite.
    pub fn set_data(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::Shape {
                op: "set_data",
                detail: format!("tensor holds {} values, got {}", self.len(), values.len()),
            });
        }
        check_finite("set_data", values)?;
        self.inner.data.borrow_mut().copy_from_slice(values);
        Ok(())
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape() {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::Shape {
                op,
                detail: format!("expected a rank-2 tensor, got shape {s:?}"),
            }),
        }
    }

    /// Accepts a rank-1 `[d]` or rank-2 `[1, d]` tensor and returns `d`.
    pub(crate) fn dim_vector(&self, op: &'static str) -> Result<usize> {
        match self.shape() {
            [d] => Ok(*d),
            [1, d] => Ok(*d),
            s => Err(Error::Shape {
                op,
                detail: format!("expected a vector, got shape {s:?}"),
            }),
        }
    }

    /// Populate gradients of every reachable grad-requiring tensor with
    /// d(self)/d(tensor). Repeated calls accumulate.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::Contract {
                what: format!("backward requires a scalar loss, got shape {:?}", self.shape()),
            });
        }
        if !self.requires_grad() {
            // Loss does not depend on any trainable tensor; nothing to do.
            return Ok(());
        }
        let graph = Graph::trace(self);
        let mut store = GradStore::new();
        store.seed(self.id(), vec![1.0]);
        for node in graph.nodes.iter().rev() {
            let Some(g) = store.take(node.id()) else {
                continue;
            };
            {
                let mut slot = node.inner.grad.borrow_mut();
                match slot.as_mut() {
                    Some(buf) => {
                        for (b, v) in buf.iter_mut().zip(&g) {
                            *b += v;
                        }
                    }
                    None => *slot = Some(g.clone()),
                }
            }
            if let Some(f) = &node.inner.backward {
                f(&g, &mut store);
            }
        }
        debug_assert!(
            store.map.is_empty(),
            "backward left {} unconsumed gradient deposits; traversal order is broken",
            store.map.len()
        );
        Ok(())
    }
}

/// Recorded operations reachable from one output, in topological order:
/// every node's operands precede it, and each node appears exactly once.
pub struct Graph {
    nodes: Vec<Tensor>,
}

impl Graph {
    /// Walk parent links from `root`, keeping only the grad-requiring
    /// subgraph. Iterative post-order so deep graphs cannot overflow the
    /// stack.
    pub fn trace(root: &Tensor) -> Graph {
        let mut nodes = Vec::new();
        let mut visited: HashMap<u64, ()> = HashMap::new();
        // (tensor, child_cursor)
        let mut stack: Vec<(Tensor, usize)> = Vec::new();
        if root.requires_grad() {
            visited.insert(root.id(), ());
            stack.push((root.clone(), 0));
        }
        while let Some((node, cursor)) = stack.pop() {
            let parents = &node.inner.parents;
            let mut advanced = false;
            let mut idx = cursor;
            while idx < parents.len() {
                let p = &parents[idx];
                idx += 1;
                if p.requires_grad() && !visited.contains_key(&p.id()) {
                    visited.insert(p.id(), ());
                    stack.push((node.clone(), idx));
                    stack.push((p.clone(), 0));
                    advanced = true;
                    break;
                }
            }
            if !advanced {
                nodes.push(node);
            }
        }
        Graph { nodes }
    }

    pub fn nodes(&self) -> &[Tensor] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Per-backward-pass gradient buffers, keyed by node id. Kept separate from
/// the persistent `grad` slots so repeated backward calls each contribute
/// exactly one d(loss)/d(tensor).
pub(crate) struct GradStore {
    map: HashMap<u64, Vec<f64>>,
    sizes: HashMap<u64, usize>,
}

impl GradStore {
    fn new() -> GradStore {
        GradStore {
            map: HashMap::new(),
            sizes: HashMap::new(),
        }
    }

    fn seed(&mut self, id: u64, v: Vec<f64>) {
        self.map.insert(id, v);
    }

    fn take(&mut self, id: u64) -> Option<Vec<f64>> {
        self.map.remove(&id)
    }

    /// Mutable gradient buffer for `t`, zero-initialized on first touch.
    /// Accumulation only happens for grad-requiring operands.
    pub(crate) fn accum(&mut self, t: &Tensor) -> &mut [f64] {
        let len = t.len();
        self.sizes.insert(t.id(), len);
        self.map.entry(t.id()).or_insert_with(|| vec![0.0; len])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_agreement_enforced() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 4]).is_ok());
    }

    #[test]
    fn non_finite_rejected_at_construction() {
        let e = Tensor::new(vec![2], vec![1.0, f64::NAN]);
        assert!(matches!(e, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let x = Tensor::param(vec![1], vec![3.0]).unwrap();
        let sq = mul(&x, &x).unwrap();
        let loss = sum(&sq).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn disconnected_parameter_gets_no_gradient() {
        let x = Tensor::param(vec![1], vec![2.0]).unwrap();
        let p = Tensor::param(vec![1], vec![5.0]).unwrap();
        let loss = sum(&mul(&x, &x).unwrap()).unwrap();
        loss.backward().unwrap();
        assert!(p.grad().is_none());
        assert!(x.grad().is_some());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::param(vec![1], vec![3.0]).unwrap();
        let loss = sum(&mul(&x, &x).unwrap()).unwrap();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![12.0]);
    }

    #[test]
    fn frozen_tensor_keeps_empty_grad() {
        let x = Tensor::param(vec![1], vec![3.0]).unwrap();
        let w = Tensor::param(vec![1], vec![2.0]).unwrap();
        w.set_requires_grad(false);
        let loss = sum(&mul(&x, &w).unwrap()).unwrap();
        loss.backward().unwrap();
        assert!(w.grad().is_none());
        assert_eq!(x.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn backward_on_non_scalar_is_a_contract_error() {
        let x = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
        let y = mul(&x, &x).unwrap();
        assert!(matches!(y.backward(), Err(Error::Contract { .. })));
    }

    #[test]
    fn graph_topological_order_and_single_visit() {
        let x = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
        let a = mul(&x, &x).unwrap();
        let b = add(&a, &x).unwrap();
        let c = add(&a, &b).unwrap(); // `a` reachable along two paths
        let loss = sum(&c).unwrap();
        let g = Graph::trace(&loss);
        let positions: HashMap<u64, usize> = g
            .nodes()
            .iter()
            .enumerate()
            .map(|(i, t)| (t.id(), i))
            .collect();
        assert_eq!(positions.len(), g.len(), "every node appears exactly once");
        for node in g.nodes() {
            for p in &node.inner.parents {
                if let Some(pp) = positions.get(&p.id()) {
                    assert!(pp < &positions[&node.id()], "operands precede their node");
                }
            }
        }
    }
}
