//! Dense f32 tensors with reverse-mode gradient recording.
//!
//! Tensors are immutable once created; the only mutable part is the
//! per-tensor gradient buffer, which `backward` fills for leaves that
//! were created with `require_grad`. Recording is define-by-run: while
//! a [`Tape`] is active on the current thread, every primitive in
//! [`ops`] that touches a grad-participating tensor pushes a node onto
//! the tape, and [`backward`] replays the nodes in reverse.
//!
//! Storage is 32-bit; reductions and loss accumulation run in 64-bit so
//! finite-difference validation has headroom.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::Rng;

use crate::error::{shape_err, VmError, VmResult};

pub mod kernels;
pub mod ops;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f32>>>,
}

/// N-dimensional row-major f32 tensor. Cheap to clone (shared storage).
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, requires_grad={})",
            self.inner.id, self.inner.shape, self.inner.requires_grad
        )
    }
}

impl Tensor {
    fn make(shape: Vec<usize>, data: Arc<Vec<f32>>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
            }),
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> VmResult<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(shape_err(
                "from_vec",
                format!("shape {:?} does not hold {} elements", shape, data.len()),
            ));
        }
        Ok(Tensor::make(shape.to_vec(), Arc::new(data), false))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::make(shape.to_vec(), Arc::new(vec![0.0; n]), false)
    }

    pub fn full(shape: &[usize], value: f32) -> Tensor {
        let n = shape.iter().product();
        Tensor::make(shape.to_vec(), Arc::new(vec![value; n]), false)
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor::make(vec![], Arc::new(vec![value]), false)
    }

    /// Normal(0, std^2) samples.
    pub fn randn(shape: &[usize], std: f32, rng: &mut impl Rng) -> Tensor {
        let n: usize = shape.iter().product();
        // Box-Muller; keeps us independent of distribution crates.
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let r = (-2.0 * u1.ln()).sqrt();
            let t = 2.0 * std::f64::consts::PI * u2;
            data.push((r * t.cos()) as f32 * std);
            if data.len() < n {
                data.push((r * t.sin()) as f32 * std);
            }
        }
        Tensor::make(shape.to_vec(), Arc::new(data), false)
    }

    pub fn uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut impl Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::make(shape.to_vec(), Arc::new(data), false)
    }

    /// Returns a leaf copy of this tensor that participates in gradient
    /// recording. The data buffer is shared.
    pub fn require_grad(&self) -> Tensor {
        Tensor::make(self.inner.shape.clone(), self.inner.data.clone(), true)
    }

    /// A non-recording view of the same storage.
    pub fn detach(&self) -> Tensor {
        Tensor::make(self.inner.shape.clone(), self.inner.data.clone(), false)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
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

    pub(crate) fn data_arc(&self) -> Arc<Vec<f32>> {
        self.inner.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn item(&self) -> VmResult<f32> {
        if self.numel() != 1 {
            return Err(VmError::Contract(format!(
                "item() on tensor with {} elements",
                self.numel()
            )));
        }
        Ok(self.inner.data[0])
    }

    /// Current gradient buffer, if `backward` has deposited one.
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.lock().unwrap().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().unwrap() = None;
    }

    pub fn take_grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.lock().unwrap().take()
    }

    fn accumulate_grad(&self, g: &[f32]) {
        let mut slot = self.inner.grad.lock().unwrap();
        match slot.as_mut() {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// All values finite?
    pub fn is_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

type BackFn = Box<dyn FnOnce(&[f32], &mut GradStore)>;

struct Node {
    #[allow(dead_code)]
    op: &'static str,
    out: u64,
    back: BackFn,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    /// Ids produced by nodes on this tape.
    live: HashSet<u64>,
    /// Grad-requiring tensors that entered the computation as inputs.
    leaves: HashMap<u64, Tensor>,
}

thread_local! {
    static ACTIVE: RefCell<Option<TapeInner>> = RefCell::new(None);
}

/// Guard that activates operation recording on the current thread.
///
/// One tape per thread: nesting is rejected. Dropping the guard discards
/// an unconsumed tape; [`backward`] consumes it.
pub struct Tape {
    _not_send: std::marker::PhantomData<*const ()>,
}

impl Tape {
    pub fn begin() -> VmResult<Tape> {
        ACTIVE.with(|a| {
            let mut slot = a.borrow_mut();
            if slot.is_some() {
                return Err(VmError::Contract(
                    "a tape is already active on this thread".into(),
                ));
            }
            *slot = Some(TapeInner::default());
            Ok(Tape {
                _not_send: std::marker::PhantomData,
            })
        })
    }

    /// Number of recorded nodes so far (diagnostics).
    pub fn len(&self) -> usize {
        ACTIVE.with(|a| a.borrow().as_ref().map_or(0, |t| t.nodes.len()))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Drop for Tape {
    fn drop(&mut self) {
        ACTIVE.with(|a| a.borrow_mut().take());
    }
}

pub fn recording() -> bool {
    ACTIVE.with(|a| a.borrow().is_some())
}

/// Accumulating store of gradients, keyed by tensor id.
#[derive(Default)]
pub struct GradStore {
    map: HashMap<u64, Vec<f32>>,
}

impl GradStore {
    /// Mutable gradient buffer for `id`, created zero-filled on first use.
    pub fn accum(&mut self, id: u64, len: usize) -> &mut [f32] {
        self.map.entry(id).or_insert_with(|| vec![0.0; len])
    }

    fn take(&mut self, id: u64) -> Option<Vec<f32>> {
        self.map.remove(&id)
    }

    fn set(&mut self, id: u64, g: Vec<f32>) {
        self.map.insert(id, g);
    }
}

/// Record a node for `out = op(inputs...)` on the active tape, if any
/// input participates in gradient tracking. `mk_back` receives one flag
/// per input telling whether that input needs a gradient.
pub(crate) fn maybe_record<F>(op: &'static str, inputs: &[&Tensor], out: &Tensor, mk_back: F)
where
    F: FnOnce(&[bool]) -> BackFn,
{
    ACTIVE.with(|a| {
        let mut slot = a.borrow_mut();
        let Some(tape) = slot.as_mut() else { return };
        let need: Vec<bool> = inputs
            .iter()
            .map(|t| t.requires_grad() || tape.live.contains(&t.id()))
            .collect();
        if !need.iter().any(|&b| b) {
            return;
        }
        for (t, &n) in inputs.iter().zip(&need) {
            if n && t.requires_grad() && !tape.live.contains(&t.id()) {
                tape.leaves.entry(t.id()).or_insert_with(|| (*t).clone());
            }
        }
        tape.live.insert(out.id());
        let back = mk_back(&need);
        tape.nodes.push(Node {
            op,
            out: out.id(),
            back,
        });
    })
}

/// Reverse sweep from a scalar loss. Deposits gradients into every
/// participating `require_grad` leaf (accumulating across calls) and
/// consumes the active tape.
pub fn backward(loss: &Tensor) -> VmResult<()> {
    if loss.numel() != 1 {
        return Err(VmError::Contract(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    let tape = ACTIVE
        .with(|a| a.borrow_mut().take())
        .ok_or_else(|| VmError::Contract("backward called with no active tape".into()))?;
    if !tape.live.contains(&loss.id()) {
        return Err(VmError::Contract(
            "loss is not connected to the active tape".into(),
        ));
    }
    let mut store = GradStore::default();
    store.set(loss.id(), vec![1.0]);
    for node in tape.nodes.into_iter().rev() {
        if let Some(g) = store.take(node.out) {
            (node.back)(&g, &mut store);
        }
    }
    for (id, leaf) in tape.leaves {
        if let Some(g) = store.take(id) {
            leaf.accumulate_grad(&g);
        }
    }
    Ok(())
}
