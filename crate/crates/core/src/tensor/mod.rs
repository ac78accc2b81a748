//! Reverse-mode automatic differentiation over flat f64 arrays.
//!
//! The tape is define-by-run and rebuilt for every forward pass. Tensors are
//! cheap handles: shape + shared value buffer + an optional node on a tape.
//! Operations between tensors that carry no node are evaluated purely, which
//! is how eval-mode inference runs without recording anything.

mod ops;
mod store;

pub use store::{Mode, Param, ParamStore, Pass};

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

pub type NodeId = usize;

/// Accumulates gradient contributions during one backward sweep. Indexed by
/// node id; entries are allocated lazily.
pub struct GradBuf {
    slots: Vec<Vec<f64>>,
}

impl GradBuf {
    /// Gradient slice for `node`, zero-initialized to `len` on first touch.
    pub fn slot(&mut self, node: NodeId, len: usize) -> &mut [f64] {
        let slot = &mut self.slots[node];
        if slot.is_empty() {
            slot.resize(len, 0.0);
        }
        slot
    }
}

type BackwardFn = Box<dyn Fn(&[f64], &mut GradBuf)>;

struct Node {
    /// None for leaves; otherwise scatters the output gradient to parents.
    backward: Option<BackwardFn>,
    /// Leaves accumulate into the tape's persistent gradient store.
    leaf: bool,
}

#[derive(Default)]
struct TapeCell {
    nodes: RefCell<Vec<Node>>,
    /// Persistent per-leaf gradients; repeated backward calls accumulate here.
    acc: RefCell<Vec<Vec<f64>>>,
    /// Non-smooth decisions made during the forward pass (LeakyReLU signs,
    /// max-pool argmax picks), in op-execution order. Finite-difference
    /// checkers compare signatures between perturbed evaluations to skip
    /// coordinates whose perturbation crossed a kink. Recording is off by
    /// default; the gradient checker turns it on.
    track_kinks: std::cell::Cell<bool>,
    kinks: RefCell<Vec<u32>>,
}

/// Handle to a recording tape. Clones share the same tape.
#[derive(Clone, Default)]
pub struct Tape(Rc<TapeCell>);

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub fn node_count(&self) -> usize {
        self.0.nodes.borrow().len()
    }

    /// Signature of all kink decisions recorded so far.
    pub fn kink_signature(&self) -> Vec<u32> {
        self.0.kinks.borrow().clone()
    }

    pub fn set_kink_tracking(&self, on: bool) {
        self.0.track_kinks.set(on);
    }

    pub(crate) fn tracks_kinks(&self) -> bool {
        self.0.track_kinks.get()
    }

    fn record_kink(&self, mark: u32) {
        self.0.kinks.borrow_mut().push(mark);
    }

    fn push(&self, len: usize, leaf: bool, backward: Option<BackwardFn>) -> NodeId {
        let mut nodes = self.0.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { backward, leaf });
        let mut acc = self.0.acc.borrow_mut();
        if leaf {
            acc.push(vec![0.0; len]);
        } else {
            acc.push(Vec::new());
        }
        id
    }

    /// Register `t` as a differentiable leaf on this tape.
    pub fn watch(&self, t: &Tensor) -> Tensor {
        let id = self.push(t.len(), true, None);
        Tensor {
            shape: t.shape.clone(),
            values: t.values.clone(),
            node: Some(BoundNode {
                tape: self.clone(),
                id,
            }),
        }
    }

    /// Convenience: build a leaf tensor directly from data.
    pub fn var(&self, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::from_vec(values, shape)?;
        Ok(self.watch(&t))
    }

    /// Run one backward sweep from a scalar loss, accumulating leaf gradients.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape
            )));
        }
        let bound = loss.node.as_ref().ok_or_else(|| {
            Error::contract("backward requires a loss recorded on a tape".to_string())
        })?;
        if !self.same_tape(&bound.tape) {
            return Err(Error::contract(
                "loss tensor belongs to a different tape".to_string(),
            ));
        }
        let nodes = self.0.nodes.borrow();
        let mut buf = GradBuf {
            slots: vec![Vec::new(); nodes.len()],
        };
        buf.slots[bound.id] = vec![1.0];
        // Creation order is a topological order for define-by-run graphs, so a
        // single reverse sweep visits each node after all of its consumers.
        for id in (0..=bound.id).rev() {
            if buf.slots[id].is_empty() {
                continue;
            }
            let grad = std::mem::take(&mut buf.slots[id]);
            let node = &nodes[id];
            if let Some(backward) = &node.backward {
                backward(&grad, &mut buf);
            }
            if node.leaf {
                let mut acc = self.0.acc.borrow_mut();
                for (a, g) in acc[id].iter_mut().zip(&grad) {
                    *a += g;
                }
            }
        }
        Ok(())
    }

    /// Accumulated gradient of a leaf tensor, if it is one of ours.
    pub fn grad(&self, t: &Tensor) -> Option<Vec<f64>> {
        let bound = t.node.as_ref()?;
        if !self.same_tape(&bound.tape) {
            return None;
        }
        let nodes = self.0.nodes.borrow();
        if !nodes[bound.id].leaf {
            return None;
        }
        Some(self.0.acc.borrow()[bound.id].clone())
    }
}

#[derive(Clone)]
pub(crate) struct BoundNode {
    pub(crate) tape: Tape,
    pub(crate) id: NodeId,
}

/// Shape-carrying double-precision array, optionally recorded on a tape.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Rc<Vec<f64>>,
    node: Option<BoundNode>,
}

impl Tensor {
    pub fn from_vec(values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect != values.len() {
            return Err(Error::dim(format!(
                "shape {:?} implies {} values, got {}",
                shape,
                expect,
                values.len()
            )));
        }
        if shape.contains(&0) {
            return Err(Error::dim(format!("zero extent in shape {shape:?}")));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            values: Rc::new(values),
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let len: usize = shape.iter().product();
        Tensor::from_vec(vec![0.0; len], shape).expect("zeros shape")
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![],
            values: Rc::new(vec![v]),
            node: None,
        }
    }

    /// Flatten a list of equal-length rows into a [rows, width] tensor.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(Error::dim("from_rows needs at least one row".to_string()));
        }
        let width = rows[0].len();
        let mut values = Vec::with_capacity(rows.len() * width);
        for r in rows {
            if r.len() != width {
                return Err(Error::dim(format!(
                    "ragged rows: expected width {}, got {}",
                    width,
                    r.len()
                )));
            }
            values.extend_from_slice(r);
        }
        Tensor::from_vec(values, &[rows.len(), width])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.values[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Same values, detached from any tape.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.clone(),
            node: None,
        }
    }

    pub(crate) fn bound(&self) -> Option<&BoundNode> {
        self.node.as_ref()
    }

    pub(crate) fn with_node(shape: Vec<usize>, values: Vec<f64>, node: Option<BoundNode>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Tensor {
            shape,
            values: Rc::new(values),
            node,
        }
    }

    pub(crate) fn with_shared(
        shape: Vec<usize>,
        values: Rc<Vec<f64>>,
        node: Option<BoundNode>,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Tensor {
            shape,
            values,
            node,
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(shape={:?}, grad={}, values={:?})",
            self.shape,
            self.node.is_some(),
            if self.len() <= 8 {
                format!("{:?}", &self.values[..])
            } else {
                format!("[{} elems]", self.len())
            }
        )
    }
}

/// Resolve the common tape of an op's differentiable operands.
pub(crate) fn common_tape(operands: &[&Tensor]) -> Result<Option<Tape>> {
    let mut found: Option<Tape> = None;
    for t in operands {
        if let Some(b) = t.bound() {
            match &found {
                None => found = Some(b.tape.clone()),
                Some(t0) => {
                    if !t0.same_tape(&b.tape) {
                        return Err(Error::contract(
                            "operands recorded on different tapes".to_string(),
                        ));
                    }
                }
            }
        }
    }
    Ok(found)
}
