//! Dense n-dimensional tensors with reverse-mode automatic differentiation.
//!
//! The whole stack is generic over the element type: `f32` for production,
//! `f64` for verification (finite-difference tolerances are unreachable in
//! 32-bit). Tensors are immutable once produced by an op; parameters are
//! updated in place between steps through [`Tensor::update_data`].
//!
//! Contract violations (shape mismatches, non-finite values) panic with a
//! message naming the op that produced them. Recoverable errors (IO, config,
//! data) live in [`crate::error`].

mod conv;
mod graph;
mod linalg;
mod norm;
mod params;
mod pool;
mod rnn;
pub mod serialize;

pub use conv::{conv3d, deconv3d};
pub use graph::{gcn_layer, global_attention_pool, Propagation};
pub use linalg::{add_row_bias, fc, matmul, relu, sigmoid, softmax_last, softplus, tanh_op};
pub use norm::{batchnorm, BatchNormMode, RunningStats};
pub use params::{ParamSet, ParamSnapshot};
pub use pool::{maxpool3d, maxpool3d_partition, maxunpool3d, pooled_extent, PoolIndices};
pub use rnn::{gru_layer, lstm_layer, GruParams, LstmParams};

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element type of the numeric stack.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;

    /// Shorthand for converting an `f64` constant.
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("constant conversion")
    }
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
}

/// On-disk element type tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

type BackFn<S> = Box<dyn Fn(&[S]) -> Vec<Vec<S>>>;

struct Node<S: Scalar> {
    op: &'static str,
    parents: Vec<Tensor<S>>,
    backward: BackFn<S>,
}

struct Inner<S: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<S>>,
    grad: RefCell<Option<Vec<S>>>,
    requires_grad: bool,
    node: Option<Node<S>>,
}

/// A dense row-major n-dimensional array participating in a recorded
/// forward graph. Cloning is cheap (reference counted handle).
pub struct Tensor<S: Scalar> {
    inner: Rc<Inner<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

pub(crate) fn check_finite<S: Scalar>(op: &str, data: &[S]) {
    for (i, v) in data.iter().enumerate() {
        if !v.is_finite() {
            panic!("op `{op}` produced non-finite value {v:?} at flat index {i}");
        }
    }
}

impl<S: Scalar> Tensor<S> {
    fn new(shape: Vec<usize>, data: Vec<S>, requires_grad: bool, node: Option<Node<S>>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                node,
            }),
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Self {
        Self::new(shape.to_vec(), data, false, None)
    }

    /// Leaf tensor that accumulates gradients (a trainable parameter or a
    /// gradient-checked input).
    pub fn param(shape: &[usize], data: Vec<S>) -> Self {
        Self::new(shape.to_vec(), data, true, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_vec(shape, vec![S::zero(); n])
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let n = shape.iter().product();
        Self::from_vec(shape, vec![value; n])
    }

    pub fn scalar(value: S) -> Self {
        Self::from_vec(&[1], vec![value])
    }

    /// Result of a recorded op. Validates finiteness and wires the backward
    /// closure when any parent tracks gradients.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<S>,
        op: &'static str,
        parents: Vec<Tensor<S>>,
        backward: BackFn<S>,
    ) -> Self {
        check_finite(op, &data);
        let track = parents.iter().any(|p| p.inner.requires_grad || p.inner.node.is_some());
        let node = track.then(|| Node {
            op,
            parents,
            backward,
        });
        Self::new(shape, data, false, node)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<S>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.inner.data.borrow().clone()
    }

    pub fn item(&self) -> S {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.inner.data.borrow()[0]
    }

    /// Replace the stored values in place. Only meaningful for leaf tensors
    /// (optimizer updates, finite-difference perturbations).
    pub fn update_data(&self, f: impl FnOnce(&mut [S])) {
        f(&mut self.inner.data.borrow_mut());
    }

    pub fn set_data(&self, data: Vec<S>) {
        assert_eq!(data.len(), self.numel(), "set_data length mismatch");
        *self.inner.data.borrow_mut() = data;
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Add an externally computed gradient, as the reduction step of
    /// data-parallel training does.
    pub fn accumulate_grad(&self, g: &[S]) {
        assert_eq!(g.len(), self.numel(), "accumulate_grad length mismatch");
        self.accumulate_grad_unchecked(g)
    }

    fn accumulate_grad_unchecked(&self, g: &[S]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, gi) in buf.iter_mut().zip(g) {
                    *b += *gi;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
    /// reachable leaf with `requires_grad`; repeated calls without zeroing sum.
    pub fn backward(&self) {
        assert_eq!(self.numel(), 1, "backward() requires a scalar tensor");
        let order = self.topo_order();
        let mut grads: HashMap<u64, Vec<S>> = HashMap::new();
        grads.insert(self.inner.id, vec![S::one()]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.inner.id) else {
                continue;
            };
            if t.inner.requires_grad {
                t.accumulate_grad(&g);
            }
            if let Some(node) = &t.inner.node {
                let parent_grads = (node.backward)(&g);
                assert_eq!(
                    parent_grads.len(),
                    node.parents.len(),
                    "op `{}` backward returned wrong arity",
                    node.op
                );
                for (p, pg) in node.parents.iter().zip(parent_grads) {
                    if p.inner.requires_grad || p.inner.node.is_some() {
                        assert_eq!(
                            pg.len(),
                            p.numel(),
                            "op `{}` backward produced wrong gradient shape",
                            node.op
                        );
                        match grads.get_mut(&p.inner.id) {
                            Some(buf) => {
                                for (b, gi) in buf.iter_mut().zip(&pg) {
                                    *b += *gi;
                                }
                            }
                            None => {
                                grads.insert(p.inner.id, pg);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Parents-first topological order of the recorded graph.
    fn topo_order(&self) -> Vec<Tensor<S>> {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        // (tensor, children_expanded)
        let mut stack: Vec<(Tensor<S>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.inner.id) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.inner.node {
                for p in &node.parents {
                    if !visited.contains(&p.inner.id) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

fn same_shape<S: Scalar>(op: &str, a: &Tensor<S>, b: &Tensor<S>) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "op `{op}`: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

pub fn add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    same_shape("add", a, b);
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| *x + *y)
        .collect();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        "add",
        vec![a.clone(), b.clone()],
        Box::new(|g| vec![g.to_vec(), g.to_vec()]),
    )
}

pub fn sub<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    same_shape("sub", a, b);
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| *x - *y)
        .collect();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        "sub",
        vec![a.clone(), b.clone()],
        Box::new(|g| vec![g.to_vec(), g.iter().map(|x| -*x).collect()]),
    )
}

pub fn mul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    same_shape("mul", a, b);
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| *x * *y)
        .collect();
    let (ac, bc) = (a.clone(), b.clone());
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        "mul",
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let av = ac.data();
            let bv = bc.data();
            vec![
                g.iter().zip(bv.iter()).map(|(gi, y)| *gi * *y).collect(),
                g.iter().zip(av.iter()).map(|(gi, x)| *gi * *x).collect(),
            ]
        }),
    )
}

pub fn scale<S: Scalar>(a: &Tensor<S>, k: S) -> Tensor<S> {
    let data = a.data().iter().map(|x| *x * k).collect();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        "scale",
        vec![a.clone()],
        Box::new(move |g| vec![g.iter().map(|gi| *gi * k).collect()]),
    )
}

pub fn add_scalar<S: Scalar>(a: &Tensor<S>, k: S) -> Tensor<S> {
    let data = a.data().iter().map(|x| *x + k).collect();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        "add_scalar",
        vec![a.clone()],
        Box::new(|g| vec![g.to_vec()]),
    )
}

pub fn square<S: Scalar>(a: &Tensor<S>) -> Tensor<S> {
    let data = a.data().iter().map(|x| *x * *x).collect();
    let ac = a.clone();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        "square",
        vec![a.clone()],
        Box::new(move |g| {
            let av = ac.data();
            vec![g
                .iter()
                .zip(av.iter())
                .map(|(gi, x)| *gi * S::c(2.0) * *x)
                .collect()]
        }),
    )
}

pub fn exp<S: Scalar>(a: &Tensor<S>) -> Tensor<S> {
    let data: Vec<S> = a.data().iter().map(|x| x.exp()).collect();
    let out = data.clone();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        "exp",
        vec![a.clone()],
        Box::new(move |g| vec![g.iter().zip(out.iter()).map(|(gi, y)| *gi * *y).collect()]),
    )
}

pub fn ln<S: Scalar>(a: &Tensor<S>) -> Tensor<S> {
    let data: Vec<S> = a.data().iter().map(|x| x.ln()).collect();
    let ac = a.clone();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        "ln",
        vec![a.clone()],
        Box::new(move |g| {
            let av = ac.data();
            vec![g.iter().zip(av.iter()).map(|(gi, x)| *gi / *x).collect()]
        }),
    )
}

pub fn sum<S: Scalar>(a: &Tensor<S>) -> Tensor<S> {
    let s: S = a.data().iter().copied().sum();
    let n = a.numel();
    Tensor::from_op(
        vec![1],
        vec![s],
        "sum",
        vec![a.clone()],
        Box::new(move |g| vec![vec![g[0]; n]]),
    )
}

pub fn mean<S: Scalar>(a: &Tensor<S>) -> Tensor<S> {
    let n = a.numel();
    assert!(n > 0, "op `mean`: empty tensor");
    let s: S = a.data().iter().copied().sum();
    let inv = S::one() / S::from_usize(n).unwrap();
    Tensor::from_op(
        vec![1],
        vec![s * inv],
        "mean",
        vec![a.clone()],
        Box::new(move |g| vec![vec![g[0] * inv; n]]),
    )
}

pub fn reshape<S: Scalar>(a: &Tensor<S>, shape: &[usize]) -> Tensor<S> {
    assert_eq!(
        shape.iter().product::<usize>(),
        a.numel(),
        "op `reshape`: cannot reshape {:?} into {:?}",
        a.shape(),
        shape
    );
    Tensor::from_op(
        shape.to_vec(),
        a.to_vec(),
        "reshape",
        vec![a.clone()],
        Box::new(|g| vec![g.to_vec()]),
    )
}

/// Stack equal-shape tensors along a new leading axis.
pub fn stack0<S: Scalar>(parts: &[Tensor<S>]) -> Tensor<S> {
    assert!(!parts.is_empty(), "op `stack0`: empty input");
    let inner_shape = parts[0].shape().to_vec();
    let inner_n: usize = inner_shape.iter().product();
    let mut data = Vec::with_capacity(parts.len() * inner_n);
    for p in parts {
        assert_eq!(p.shape(), inner_shape.as_slice(), "op `stack0`: shape mismatch");
        data.extend_from_slice(&p.data());
    }
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(&inner_shape);
    let k = parts.len();
    Tensor::from_op(
        shape,
        data,
        "stack0",
        parts.to_vec(),
        Box::new(move |g| {
            (0..k)
                .map(|i| g[i * inner_n..(i + 1) * inner_n].to_vec())
                .collect()
        }),
    )
}

/// Select one subtensor along the leading axis.
pub fn index0<S: Scalar>(a: &Tensor<S>, i: usize) -> Tensor<S> {
    assert!(!a.shape().is_empty() && i < a.shape()[0], "op `index0`: index out of range");
    let inner_shape = a.shape()[1..].to_vec();
    let inner_n: usize = inner_shape.iter().product();
    let data = a.data()[i * inner_n..(i + 1) * inner_n].to_vec();
    let total = a.numel();
    Tensor::from_op(
        inner_shape,
        data,
        "index0",
        vec![a.clone()],
        Box::new(move |g| {
            let mut full = vec![S::zero(); total];
            full[i * inner_n..(i + 1) * inner_n].copy_from_slice(g);
            vec![full]
        }),
    )
}

/// Contiguous slice along the last axis of a 1-D or 2-D tensor.
pub fn narrow_last<S: Scalar>(a: &Tensor<S>, start: usize, len: usize) -> Tensor<S> {
    let shape = a.shape();
    let last = *shape.last().expect("narrow_last on rank-0 tensor");
    assert!(start + len <= last, "op `narrow_last`: slice out of range");
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let av = a.data();
    let mut data = Vec::with_capacity(rows * len);
    for r in 0..rows {
        data.extend_from_slice(&av[r * last + start..r * last + start + len]);
    }
    drop(av);
    let mut out_shape = shape.to_vec();
    *out_shape.last_mut().unwrap() = len;
    let total = a.numel();
    Tensor::from_op(
        out_shape,
        data,
        "narrow_last",
        vec![a.clone()],
        Box::new(move |g| {
            let mut full = vec![S::zero(); total];
            for r in 0..rows {
                full[r * last + start..r * last + start + len]
                    .copy_from_slice(&g[r * len..(r + 1) * len]);
            }
            vec![full]
        }),
    )
}

/// Concatenate two tensors along the last axis (ranks and leading extents
/// must agree).
pub fn concat_last<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (sa, sb) = (a.shape(), b.shape());
    assert_eq!(sa.len(), sb.len(), "op `concat_last`: rank mismatch");
    assert_eq!(
        &sa[..sa.len() - 1],
        &sb[..sb.len() - 1],
        "op `concat_last`: leading extents differ"
    );
    let (la, lb) = (*sa.last().unwrap(), *sb.last().unwrap());
    let rows: usize = sa[..sa.len() - 1].iter().product();
    let av = a.data();
    let bv = b.data();
    let mut data = Vec::with_capacity(rows * (la + lb));
    for r in 0..rows {
        data.extend_from_slice(&av[r * la..(r + 1) * la]);
        data.extend_from_slice(&bv[r * lb..(r + 1) * lb]);
    }
    drop(av);
    drop(bv);
    let mut shape = sa.to_vec();
    *shape.last_mut().unwrap() = la + lb;
    Tensor::from_op(
        shape,
        data,
        "concat_last",
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let mut ga = vec![S::zero(); rows * la];
            let mut gb = vec![S::zero(); rows * lb];
            for r in 0..rows {
                ga[r * la..(r + 1) * la].copy_from_slice(&g[r * (la + lb)..r * (la + lb) + la]);
                gb[r * lb..(r + 1) * lb]
                    .copy_from_slice(&g[r * (la + lb) + la..(r + 1) * (la + lb)]);
            }
            vec![ga, gb]
        }),
    )
}
