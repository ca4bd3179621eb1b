//! Wengert-style tape. Every op appends a node holding its forward value;
//! `backward` walks the nodes in reverse creation order.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::kernels::{self, Window};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a node on its tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product supplied by a custom op: given the upstream
/// gradient and the input values, returns one gradient per input.
pub type CustomBackward<T> = Box<dyn Fn(&Tensor<T>, &[&Tensor<T>]) -> Vec<Tensor<T>>>;

pub(crate) enum Op<T: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, T),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Clamp {
        input: NodeId,
        lo: T,
        hi: T,
    },
    Reshape(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Dense {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    },
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        window: Window,
        cols: Vec<T>,
    },
    ConvTranspose2d {
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        window: Window,
        cin: usize,
        input_t: Vec<T>,
    },
    MaxPool2d {
        input: NodeId,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    HalfSse(NodeId, NodeId),
    KlDiagGaussian {
        mu: NodeId,
        logvar: NodeId,
    },
    Custom {
        inputs: Vec<NodeId>,
        backward: CustomBackward<T>,
    },
}

impl<T: Scalar> Op<T> {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | HalfSse(a, b) => vec![*a, *b],
            Neg(a)
            | Scale(a, _)
            | Relu(a)
            | Sigmoid(a)
            | Tanh(a)
            | Exp(a)
            | Reshape(a)
            | Sum(a)
            | Mean(a)
            | GlobalAvgPool(a) => vec![*a],
            Clamp { input, .. } | MaxPool2d { input, .. } => vec![*input],
            Dense { input, weight, bias }
            | Conv2d {
                input,
                kernel: weight,
                bias,
                ..
            }
            | ConvTranspose2d {
                input,
                kernel: weight,
                bias,
                ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            KlDiagGaussian { mu, logvar } => vec![*mu, *logvar],
            Custom { inputs, .. } => inputs.clone(),
        }
    }
}

pub(crate) struct Node<T: Scalar> {
    pub value: Rc<Tensor<T>>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Records the forward computation of one training step.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.len())
            .field("consumed", &self.consumed.get())
            .finish()
    }
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: NodeId,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id.0].requires_grad
    }

    /// Value of a one-element variable.
    pub fn item(&self) -> T {
        self.value().data()[0]
    }
}

impl<T: Scalar> Tape<T> {
    /// Also switches the thread to flush-to-zero mode, see [`crate::flush_subnormals`].
    pub fn new() -> Self {
        crate::fpu::flush_subnormals();
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node. Requires exclusive access, so no `Var`
    /// into the old graph can survive.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
        self.consumed.set(false);
    }

    /// Records an input tensor.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: NodeId(nodes.len() - 1),
        }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn variable(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    /// Records a user-defined op with an explicit backward rule.
    pub fn custom<'t>(
        &'t self,
        inputs: &[Var<'t, T>],
        value: Tensor<T>,
        backward: CustomBackward<T>,
    ) -> Result<Var<'t, T>> {
        for v in inputs {
            self.check_owner(v)?;
        }
        let ids = inputs.iter().map(|v| v.id).collect();
        self.push("custom", value, Op::Custom { inputs: ids, backward })
    }

    pub(crate) fn value(&self, id: NodeId) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id.0].value)
    }

    pub(crate) fn check_owner(&self, v: &Var<'_, T>) -> Result<()> {
        if std::ptr::eq(self, v.tape) {
            Ok(())
        } else {
            Err(TensorError::ForeignVar)
        }
    }

    pub(crate) fn push(&self, name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var<'_, T>> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.inputs().iter().any(|i| nodes[i.0].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: NodeId(nodes.len() - 1),
        })
    }

    fn start_backward(&self, loss: &Var<'_, T>) -> Result<()> {
        self.check_owner(loss)?;
        if self.consumed.get() {
            return Err(TensorError::TapeConsumed);
        }
        let shape = loss.shape();
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        if !loss.requires_grad() {
            return Err(TensorError::DetachedLoss);
        }
        Ok(())
    }

    /// Gradients of `loss` with respect to every requires-grad leaf it
    /// depends on. Consumes the tape.
    pub fn backward(&self, loss: &Var<'_, T>) -> Result<GradientMap<T>> {
        self.start_backward(loss)?;
        self.consumed.set(true);
        self.sweep(loss.id, None)
    }

    /// Several reverse sweeps over one recorded forward pass. Sweep `i`
    /// differentiates `requests[i].0` with respect to the leaves in
    /// `requests[i].1` only; paths that do not lead to those leaves are
    /// not traversed, which acts as a stop-gradient on everything else.
    /// Consumes the tape.
    pub fn backward_split(&self, requests: &[(Var<'_, T>, &[Var<'_, T>])]) -> Result<Vec<GradientMap<T>>> {
        for (loss, wrt) in requests {
            self.start_backward(loss)?;
            for v in wrt.iter() {
                self.check_owner(v)?;
            }
        }
        self.consumed.set(true);
        requests
            .iter()
            .map(|(loss, wrt)| {
                let ids: Vec<NodeId> = wrt.iter().map(|v| v.id).collect();
                self.sweep(loss.id, Some(&ids))
            })
            .collect()
    }

    fn sweep(&self, loss: NodeId, targets: Option<&[NodeId]>) -> Result<GradientMap<T>> {
        let nodes = self.nodes.borrow();
        let end = loss.0 + 1;
        let mut need: Vec<bool> = nodes[..end].iter().map(|n| n.requires_grad).collect();
        if let Some(targets) = targets {
            let mut reach = vec![false; end];
            for t in targets {
                if t.0 < end {
                    reach[t.0] = true;
                }
            }
            for i in 0..end {
                if !reach[i] {
                    reach[i] = nodes[i].op.inputs().iter().any(|p| reach[p.0]);
                }
                need[i] &= reach[i];
            }
        }

        let mut grads: Vec<Option<Tensor<T>>> = (0..end).map(|_| None).collect();
        let seed = nodes[loss.0].value.map(|_| T::ONE)?;
        grads[loss.0] = Some(seed);
        let mut out = BTreeMap::new();

        for i in (0..end).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !need[i] {
                continue;
            }
            let node = &nodes[i];
            if let Op::Leaf = node.op {
                if !g.is_finite() {
                    return Err(TensorError::NonFinite { op: "backward" });
                }
                out.insert(NodeId(i), g);
                continue;
            }
            for (input, gi) in vjp(node, &g, &nodes, &need) {
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&gi),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Ok(GradientMap { entries: out })
    }
}

/// Gradients keyed by leaf node.
#[derive(Debug, Clone, Default)]
pub struct GradientMap<T: Scalar> {
    entries: BTreeMap<NodeId, Tensor<T>>,
}

impl<T: Scalar> GradientMap<T> {
    pub fn get(&self, v: &Var<'_, T>) -> Option<&Tensor<T>> {
        self.entries.get(&v.id)
    }

    pub fn get_id(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.entries.get(&id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &Tensor<T>)> {
        self.entries.iter()
    }

    pub fn remove(&mut self, v: &Var<'_, T>) -> Option<Tensor<T>> {
        self.entries.remove(&v.id)
    }
}

fn like<T: Scalar>(shape: &[usize], data: Vec<T>) -> Tensor<T> {
    Tensor::from_parts(shape.to_vec(), data)
}

fn elementwise<T: Scalar>(g: &Tensor<T>, f: impl Fn(usize, T) -> T) -> Tensor<T> {
    like(g.shape(), g.data().iter().enumerate().map(|(i, &v)| f(i, v)).collect())
}

/// Local vector-Jacobian products of one node, restricted to inputs that
/// need a gradient.
fn vjp<T: Scalar>(node: &Node<T>, g: &Tensor<T>, nodes: &[Node<T>], need: &[bool]) -> Vec<(NodeId, Tensor<T>)> {
    let val = |id: NodeId| -> &Tensor<T> { &nodes[id.0].value };
    let mut out = Vec::new();
    let mut emit = |id: NodeId, f: &mut dyn FnMut() -> Tensor<T>| {
        if need[id.0] {
            out.push((id, f()));
        }
    };
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            emit(*a, &mut || g.clone());
            emit(*b, &mut || g.clone());
        }
        Op::Sub(a, b) => {
            emit(*a, &mut || g.clone());
            emit(*b, &mut || elementwise(g, |_, v| -v));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            emit(*a, &mut || elementwise(g, |i, v| v * bv.data()[i]));
            emit(*b, &mut || elementwise(g, |i, v| v * av.data()[i]));
        }
        Op::Neg(a) => emit(*a, &mut || elementwise(g, |_, v| -v)),
        Op::Scale(a, s) => emit(*a, &mut || elementwise(g, |_, v| v * *s)),
        Op::Relu(a) => {
            let x = val(*a);
            emit(*a, &mut || {
                elementwise(g, |i, v| if x.data()[i] > T::ZERO { v } else { T::ZERO })
            });
        }
        Op::Sigmoid(a) => emit(*a, &mut || {
            elementwise(g, |i, v| {
                let s = y.data()[i];
                v * s * (T::ONE - s)
            })
        }),
        Op::Tanh(a) => emit(*a, &mut || {
            elementwise(g, |i, v| {
                let t = y.data()[i];
                v * (T::ONE - t * t)
            })
        }),
        Op::Exp(a) => emit(*a, &mut || elementwise(g, |i, v| v * y.data()[i])),
        Op::Clamp { input, lo, hi } => {
            let x = val(*input);
            emit(*input, &mut || {
                elementwise(g, |i, v| {
                    let xi = x.data()[i];
                    if xi >= *lo && xi <= *hi {
                        v
                    } else {
                        T::ZERO
                    }
                })
            });
        }
        Op::Reshape(a) => emit(*a, &mut || like(val(*a).shape(), g.data().to_vec())),
        Op::Sum(a) => {
            let x = val(*a);
            emit(*a, &mut || like(x.shape(), vec![g.data()[0]; x.numel()]));
        }
        Op::Mean(a) => {
            let x = val(*a);
            let s = g.data()[0] / T::from_f64(x.numel() as f64);
            emit(*a, &mut || like(x.shape(), vec![s; x.numel()]));
        }
        Op::Dense { input, weight, bias } => {
            let (x, w) = (val(*input), val(*weight));
            let (n, d, k) = (x.shape()[0], x.shape()[1], w.shape()[1]);
            emit(*input, &mut || {
                let mut dx = vec![T::ZERO; n * d];
                kernels::matmul(n, k, d, g.data(), false, w.data(), true, T::ZERO, &mut dx);
                like(x.shape(), dx)
            });
            emit(*weight, &mut || {
                let mut dw = vec![T::ZERO; d * k];
                kernels::matmul(d, n, k, x.data(), true, g.data(), false, T::ZERO, &mut dw);
                like(w.shape(), dw)
            });
            if let Some(b) = bias {
                emit(*b, &mut || {
                    let mut db = vec![T::ZERO; k];
                    for row in g.data().chunks(k) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    like(&[k], db)
                });
            }
        }
        Op::Conv2d {
            input,
            kernel,
            bias,
            window,
            cols,
        } => {
            let kv = val(*kernel);
            let o = kv.shape()[0];
            let plane = window.oh * window.ow;
            let g_t = kernels::swap_leading(g.data(), window.n, o, plane);
            emit(*input, &mut || {
                let mut dcols = vec![T::ZERO; window.col_rows() * window.col_cols()];
                kernels::matmul(
                    window.col_rows(),
                    o,
                    window.col_cols(),
                    kv.data(),
                    true,
                    &g_t,
                    false,
                    T::ZERO,
                    &mut dcols,
                );
                like(val(*input).shape(), kernels::col2im(&dcols, window))
            });
            emit(*kernel, &mut || {
                let mut dk = vec![T::ZERO; kv.numel()];
                kernels::matmul(
                    o,
                    window.col_cols(),
                    window.col_rows(),
                    &g_t,
                    false,
                    cols,
                    true,
                    T::ZERO,
                    &mut dk,
                );
                like(kv.shape(), dk)
            });
            if let Some(b) = bias {
                emit(*b, &mut || {
                    like(&[o], kernels::channel_sums(g.data(), window.n, o, plane))
                });
            }
        }
        Op::ConvTranspose2d {
            input,
            kernel,
            bias,
            window,
            cin,
            input_t,
        } => {
            let kv = val(*kernel);
            let in_plane = window.oh * window.ow;
            let dcols = kernels::im2col(g.data(), window);
            emit(*input, &mut || {
                let mut dx_t = vec![T::ZERO; cin * window.col_cols()];
                kernels::matmul(
                    *cin,
                    window.col_rows(),
                    window.col_cols(),
                    kv.data(),
                    false,
                    &dcols,
                    false,
                    T::ZERO,
                    &mut dx_t,
                );
                like(
                    val(*input).shape(),
                    kernels::swap_leading(&dx_t, *cin, window.n, in_plane),
                )
            });
            emit(*kernel, &mut || {
                let mut dk = vec![T::ZERO; kv.numel()];
                kernels::matmul(
                    *cin,
                    window.col_cols(),
                    window.col_rows(),
                    input_t,
                    false,
                    &dcols,
                    true,
                    T::ZERO,
                    &mut dk,
                );
                like(kv.shape(), dk)
            });
            if let Some(b) = bias {
                emit(*b, &mut || {
                    like(
                        &[window.c],
                        kernels::channel_sums(g.data(), window.n, window.c, window.h * window.w),
                    )
                });
            }
        }
        Op::MaxPool2d { input, argmax } => {
            let x = val(*input);
            emit(*input, &mut || {
                let mut dx = vec![T::ZERO; x.numel()];
                for (&src, &v) in argmax.iter().zip(g.data()) {
                    dx[src] += v;
                }
                like(x.shape(), dx)
            });
        }
        Op::GlobalAvgPool(a) => {
            let x = val(*a);
            let plane: usize = x.shape()[2..].iter().product();
            let inv = T::ONE / T::from_f64(plane as f64);
            emit(*a, &mut || {
                let mut dx = vec![T::ZERO; x.numel()];
                for (chunk, &v) in dx.chunks_mut(plane).zip(g.data()) {
                    chunk.iter_mut().for_each(|d| *d = v * inv);
                }
                like(x.shape(), dx)
            });
        }
        Op::SoftmaxCrossEntropy { logits, labels, probs } => {
            let x = val(*logits);
            let (n, k) = (x.shape()[0], x.shape()[1]);
            let s = g.data()[0] / T::from_f64(n as f64);
            emit(*logits, &mut || {
                let mut d: Vec<T> = probs.iter().map(|&p| p * s).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * k + l] -= s;
                }
                like(x.shape(), d)
            });
        }
        Op::HalfSse(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let s = g.data()[0] / T::from_f64(av.shape()[0] as f64);
            emit(*a, &mut || {
                like(
                    av.shape(),
                    av.data().iter().zip(bv.data()).map(|(&p, &q)| (p - q) * s).collect(),
                )
            });
            emit(*b, &mut || {
                like(
                    bv.shape(),
                    av.data().iter().zip(bv.data()).map(|(&p, &q)| (q - p) * s).collect(),
                )
            });
        }
        Op::KlDiagGaussian { mu, logvar } => {
            let (m, lv) = (val(*mu), val(*logvar));
            let s = g.data()[0] / T::from_f64(m.shape()[0] as f64);
            let half = T::from_f64(0.5);
            emit(*mu, &mut || elementwise(m, |_, v| v * s));
            emit(*logvar, &mut || elementwise(lv, |_, v| half * (v.exp() - T::ONE) * s));
        }
        Op::Custom { inputs, backward } => {
            let vals: Vec<&Tensor<T>> = inputs.iter().map(|&i| val(i)).collect();
            let gs = backward(g, &vals);
            for (&id, gi) in inputs.iter().zip(gs) {
                if need[id.0] {
                    out.push((id, gi));
                }
            }
        }
    }
    out
}
