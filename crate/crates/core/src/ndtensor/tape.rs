use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::sync::Arc;

use super::conv::{self, Padding};
use super::spectral::SpectralPlan;
use super::{split_axis, Tensor};
use crate::error::{Error, Result};

/// A linear map with an explicit adjoint, recordable on the tape.
///
/// Discretized operators (spatial derivatives, propagator solves, the
/// time-integration recursion) implement this so gradients flow through them
/// without materializing matrices.
pub trait LinearOp: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>>;
    fn apply(&self, x: &Tensor) -> Tensor;
    /// Adjoint applied to `g` (shaped like the output); returns a tensor shaped
    /// like `input_shape`.
    fn adjoint(&self, g: &Tensor, input_shape: &[usize]) -> Tensor;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnKind {
    Neg,
    Tanh,
    Gelu,
    Relu,
    Square,
    Sqrt,
    Exp,
}

enum Op {
    Leaf,
    Binary(BinKind, usize, usize),
    Unary(UnKind, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sum(usize),
    SumPerSample(usize),
    NormPerSample(usize),
    Matmul(usize, usize),
    Conv {
        x: usize,
        k: usize,
        padding: Padding,
    },
    ChannelBias(usize, usize),
    Spectral {
        x: usize,
        wr: usize,
        wi: usize,
        plan: Arc<SpectralPlan>,
    },
    Reshape(usize),
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Narrow {
        a: usize,
        axis: usize,
        start: usize,
    },
    Linear(usize, Arc<dyn LinearOp>),
}

impl Op {
    fn name(&self) -> String {
        match self {
            Op::Leaf => "leaf".into(),
            Op::Binary(k, ..) => format!("{k:?}").to_lowercase(),
            Op::Unary(k, _) => format!("{k:?}").to_lowercase(),
            Op::Scale(..) => "scale".into(),
            Op::AddScalar(_) => "add_scalar".into(),
            Op::Sum(_) => "sum".into(),
            Op::SumPerSample(_) => "sum_per_sample".into(),
            Op::NormPerSample(_) => "norm_per_sample".into(),
            Op::Matmul(..) => "matmul".into(),
            Op::Conv { .. } => "conv".into(),
            Op::ChannelBias(..) => "channel_bias".into(),
            Op::Spectral { .. } => "spectral_multiply".into(),
            Op::Reshape(_) => "reshape".into(),
            Op::Concat { .. } => "concat".into(),
            Op::Narrow { .. } => "narrow".into(),
            Op::Linear(_, op) => op.name().into(),
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording of a forward computation. Nodes are appended in evaluation
/// order, so the node list is a topological order of the graph.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient with respect to `v`, or zeros when `v` did not influence the root.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    pub fn params(&self, ts: &[Tensor]) -> Vec<Var<'_>> {
        ts.iter().map(|t| self.param(t.clone())).collect()
    }

    pub fn constants(&self, ts: &[Tensor]) -> Vec<Var<'_>> {
        ts.iter().map(|t| self.constant(t.clone())).collect()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn record(&self, value: Tensor, op: Op, parents: &[usize]) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let rg = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        Ok(self.push(value, op, rg))
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let first = vals
            .first()
            .ok_or_else(|| crate::error::invalid("concat of zero tensors"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(crate::error::invalid(format!("concat axis {axis} on rank {rank}")));
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for v in &vals {
            let ok = v.rank() == rank
                && (0..rank).all(|d| d == axis || v.shape()[d] == first.shape()[d]);
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            shape[axis] += v.shape()[axis];
        }
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in &vals {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        self.record(
            Tensor::from_parts(shape, data),
            Op::Concat {
                parts: ids.clone(),
                axis,
            },
            &ids,
        )
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_val = &nodes[root.id].value;
        if root_val.len() != 1 {
            return Err(Error::NonScalarRoot(root_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root.id] = Some(Tensor::from_parts(root_val.shape().to_vec(), vec![1.0]));

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let contribs = backward_node(&nodes, node, &g);
            grads[id] = Some(g);
            for (pid, pg) in contribs {
                if !nodes[pid].requires_grad {
                    continue;
                }
                match &mut grads[pid] {
                    Some(acc) => acc.axpy(1.0, &pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if long[long.len() - short.len()..] != *short {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(long.to_vec())
}

/// Sums `g` down to `len` trailing elements (inverse of suffix broadcasting).
fn reduce_to(g: Tensor, shape: &[usize]) -> Tensor {
    let len: usize = shape.iter().product();
    if len == g.len() {
        return Tensor::from_parts(shape.to_vec(), g.into_data());
    }
    let mut out = vec![0.0; len];
    for chunk in g.data().chunks(len) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `C[m×n] = A·B` with arbitrary strides (row stride, column stride).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths checked above; strides describe in-bounds layouts of
    // row-major m×k / k×n matrices or their transposes as chosen by callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn backward_node(nodes: &[Node], node: &Node, g: &Tensor) -> Vec<(usize, Tensor)> {
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    match &node.op {
        Op::Leaf => vec![],
        Op::Binary(kind, a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let out = node.value.shape();
            let gd = g.data();
            let xs = || av.data().iter().cycle();
            let ys = || bv.data().iter().cycle();
            let mut contribs = vec![];
            if nodes[*a].requires_grad {
                let ga: Vec<f64> = match kind {
                    BinKind::Add | BinKind::Sub => gd.to_vec(),
                    BinKind::Mul => gd.iter().zip(ys()).map(|(gi, y)| gi * y).collect(),
                    BinKind::Div => gd.iter().zip(ys()).map(|(gi, y)| gi / y).collect(),
                };
                contribs.push((*a, reduce_to(Tensor::from_parts(out.to_vec(), ga), av.shape())));
            }
            if nodes[*b].requires_grad {
                let gb: Vec<f64> = match kind {
                    BinKind::Add => gd.to_vec(),
                    BinKind::Sub => gd.iter().map(|gi| -gi).collect(),
                    BinKind::Mul => gd.iter().zip(xs()).map(|(gi, x)| gi * x).collect(),
                    BinKind::Div => gd.iter().zip(xs()).zip(ys()).map(|((gi, x), y)| -gi * x / (y * y)).collect(),
                };
                contribs.push((*b, reduce_to(Tensor::from_parts(out.to_vec(), gb), bv.shape())));
            }
            contribs
        }
        Op::Unary(kind, a) => {
            let x = val(*a);
            let y = &node.value;
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(y.data())
                .map(|((&gi, &xi), &yi)| match kind {
                    UnKind::Neg => -gi,
                    UnKind::Tanh => gi * (1.0 - yi * yi),
                    UnKind::Gelu => gi * gelu_grad(xi),
                    UnKind::Relu => {
                        if xi > 0.0 {
                            gi
                        } else {
                            0.0
                        }
                    }
                    UnKind::Square => 2.0 * xi * gi,
                    UnKind::Sqrt => gi / (2.0 * yi),
                    UnKind::Exp => gi * yi,
                })
                .collect();
            vec![(*a, Tensor::from_parts(x.shape().to_vec(), data))]
        }
        Op::Scale(a, c) => vec![(*a, g.scale(*c))],
        Op::AddScalar(a) => vec![(*a, g.clone())],
        Op::Sum(a) => {
            let s = g.item();
            vec![(*a, Tensor::full(val(*a).shape(), s))]
        }
        Op::SumPerSample(a) => {
            let av = val(*a);
            let stride = av.stride0();
            let data = (0..av.len()).map(|i| g.data()[i / stride]).collect();
            vec![(*a, Tensor::from_parts(av.shape().to_vec(), data))]
        }
        Op::NormPerSample(a) => {
            let av = val(*a);
            let stride = av.stride0();
            let norms = node.value.data();
            let data = (0..av.len())
                .map(|i| {
                    let n = norms[i / stride];
                    if n > 0.0 {
                        g.data()[i / stride] * av.data()[i] / n
                    } else {
                        0.0
                    }
                })
                .collect();
            vec![(*a, Tensor::from_parts(av.shape().to_vec(), data))]
        }
        Op::Matmul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            let mut ga = vec![0.0; m * k];
            // dA = dC · Bᵀ
            gemm(m, n, k, g.data(), (n as isize, 1), bv.data(), (1, n as isize), &mut ga, false);
            let mut gb = vec![0.0; k * n];
            // dB = Aᵀ · dC
            gemm(k, m, n, av.data(), (1, k as isize), g.data(), (n as isize, 1), &mut gb, false);
            vec![
                (*a, Tensor::from_parts(av.shape().to_vec(), ga)),
                (*b, Tensor::from_parts(bv.shape().to_vec(), gb)),
            ]
        }
        Op::Conv { x, k, padding } => {
            let (gx, gk) = conv::conv_backward(val(*x), val(*k), *padding, g);
            vec![(*x, gx), (*k, gk)]
        }
        Op::ChannelBias(x, b) => {
            let xv = val(*x);
            let c = val(*b).len();
            let (outer, inner) = channel_layout(xv.shape(), c);
            let mut gb = vec![0.0; c];
            for o in 0..outer {
                for (ch, acc) in gb.iter_mut().enumerate() {
                    let base = (o * c + ch) * inner;
                    *acc += g.data()[base..base + inner].iter().sum::<f64>();
                }
            }
            vec![(*x, g.clone()), (*b, Tensor::from_parts(vec![c], gb))]
        }
        Op::Spectral { x, wr, wi, plan } => {
            let (gx, gwr, gwi) = plan.backward(val(*x), val(*wr), val(*wi), g);
            vec![(*x, gx), (*wr, gwr), (*wi, gwi)]
        }
        Op::Reshape(a) => vec![(*a, Tensor::from_parts(val(*a).shape().to_vec(), g.data().to_vec()))],
        Op::Concat { parts, axis } => {
            let shape = node.value.shape();
            let (outer, _, inner) = split_axis(shape, *axis);
            let total = shape[*axis] * inner;
            let mut offset = 0;
            let mut out = Vec::with_capacity(parts.len());
            for &p in parts {
                let pv = val(p);
                let chunk = pv.shape()[*axis] * inner;
                let mut data = Vec::with_capacity(pv.len());
                for o in 0..outer {
                    let s = o * total + offset;
                    data.extend_from_slice(&g.data()[s..s + chunk]);
                }
                offset += chunk;
                out.push((p, Tensor::from_parts(pv.shape().to_vec(), data)));
            }
            out
        }
        Op::Narrow { a, axis, start } => {
            let av = val(*a);
            let (outer, full, inner) = split_axis(av.shape(), *axis);
            let len = node.value.shape()[*axis];
            let mut data = vec![0.0; av.len()];
            for o in 0..outer {
                let src = o * len * inner;
                let dst = (o * full + start) * inner;
                data[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
            }
            vec![(*a, Tensor::from_parts(av.shape().to_vec(), data))]
        }
        Op::Linear(a, op) => {
            let av = val(*a);
            vec![(*a, op.adjoint(g, av.shape()))]
        }
    }
}

/// (outer, inner) sizes around the channel axis of a `[B, C, ...]` tensor.
fn channel_layout(shape: &[usize], _c: usize) -> (usize, usize) {
    (shape[0], shape[2..].iter().product())
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn binary(self, other: Var<'t>, kind: BinKind, name: &'static str) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(name, a.shape(), b.shape())?;
        let n: usize = shape.iter().product();
        let f: fn(f64, f64) -> f64 = match kind {
            BinKind::Add => |x, y| x + y,
            BinKind::Sub => |x, y| x - y,
            BinKind::Mul => |x, y| x * y,
            BinKind::Div => |x, y| x / y,
        };
        // suffix broadcasting: the shorter operand repeats cyclically
        let data: Vec<f64> = a
            .data()
            .iter()
            .cycle()
            .zip(b.data().iter().cycle())
            .take(n)
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.tape.record(
            Tensor::from_parts(shape, data),
            Op::Binary(kind, self.id, other.id),
            &[self.id, other.id],
        )
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinKind::Add, "add")
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinKind::Sub, "sub")
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinKind::Mul, "mul")
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinKind::Div, "div")
    }

    fn unary(self, kind: UnKind) -> Result<Var<'t>> {
        let f: fn(f64) -> f64 = match kind {
            UnKind::Neg => |x| -x,
            UnKind::Tanh => f64::tanh,
            UnKind::Gelu => gelu,
            UnKind::Relu => |x| x.max(0.0),
            UnKind::Square => |x| x * x,
            UnKind::Sqrt => f64::sqrt,
            UnKind::Exp => f64::exp,
        };
        let v = self.value().map(f);
        self.tape.record(v, Op::Unary(kind, self.id), &[self.id])
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.unary(UnKind::Neg)
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.unary(UnKind::Tanh)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Result<Var<'t>> {
        self.unary(UnKind::Gelu)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary(UnKind::Relu)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary(UnKind::Square)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary(UnKind::Sqrt)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(UnKind::Exp)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        let v = self.value().scale(c);
        self.tape.record(v, Op::Scale(self.id, c), &[self.id])
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        let v = self.value().map(|x| x + c);
        self.tape.record(v, Op::AddScalar(self.id), &[self.id])
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let s = self.value().sum();
        self.tape.record(Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().len() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Reduces every axis but the first: `[B, ...] -> [B]`.
    pub fn sum_per_sample(self) -> Result<Var<'t>> {
        let v = self.value();
        if v.rank() == 0 {
            return Err(crate::error::invalid("sum_per_sample on a scalar"));
        }
        let stride = v.stride0();
        let data = v.data().chunks(stride).map(|c| c.iter().sum()).collect();
        self.tape.record(
            Tensor::from_parts(vec![v.shape()[0]], data),
            Op::SumPerSample(self.id),
            &[self.id],
        )
    }

    /// Euclidean norm over every axis but the first: `[B, ...] -> [B]`.
    /// The gradient at a zero norm is taken as zero.
    pub fn norm_per_sample(self) -> Result<Var<'t>> {
        let v = self.value();
        if v.rank() == 0 {
            return Err(crate::error::invalid("norm_per_sample on a scalar"));
        }
        let stride = v.stride0();
        let data = v
            .data()
            .chunks(stride)
            .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        self.tape.record(
            Tensor::from_parts(vec![v.shape()[0]], data),
            Op::NormPerSample(self.id),
            &[self.id],
        )
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, a.data(), (k as isize, 1), b.data(), (n as isize, 1), &mut c, false);
        self.tape.record(
            Tensor::from_parts(vec![m, n], c),
            Op::Matmul(self.id, other.id),
            &[self.id, other.id],
        )
    }

    /// Multi-channel cross-correlation; see [`conv::conv_forward`].
    pub fn conv(self, kernel: Var<'t>, padding: Padding) -> Result<Var<'t>> {
        let y = conv::conv_forward(&self.value(), &kernel.value(), padding)?;
        self.tape.record(
            y,
            Op::Conv {
                x: self.id,
                k: kernel.id,
                padding,
            },
            &[self.id, kernel.id],
        )
    }

    /// Adds a per-channel bias to a `[B, C, ...]` tensor.
    pub fn add_channel_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, b) = (self.value(), bias.value());
        let c = b.len();
        if x.rank() < 2 || x.shape()[1] != c {
            return Err(Error::ShapeMismatch {
                op: "add_channel_bias",
                lhs: x.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (outer, inner) = channel_layout(x.shape(), c);
        let mut data = x.data().to_vec();
        for o in 0..outer {
            for (ch, &bv) in b.data().iter().enumerate() {
                let base = (o * c + ch) * inner;
                for v in &mut data[base..base + inner] {
                    *v += bv;
                }
            }
        }
        self.tape.record(
            Tensor::from_parts(x.shape().to_vec(), data),
            Op::ChannelBias(self.id, bias.id),
            &[self.id, bias.id],
        )
    }

    /// Fourier-space channel mixing; see [`SpectralPlan`].
    pub fn spectral_multiply(
        self,
        wr: Var<'t>,
        wi: Var<'t>,
        plan: &Arc<SpectralPlan>,
    ) -> Result<Var<'t>> {
        let y = plan.forward(&self.value(), &wr.value(), &wi.value())?;
        self.tape.record(
            y,
            Op::Spectral {
                x: self.id,
                wr: wr.id,
                wi: wi.id,
                plan: plan.clone(),
            },
            &[self.id, wr.id, wi.id],
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        self.tape.record(v, Op::Reshape(self.id), &[self.id])
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value();
        if axis >= v.rank() || start + len > v.shape()[axis] || len == 0 {
            return Err(crate::error::invalid(format!(
                "narrow({axis}, {start}, {len}) on shape {:?}",
                v.shape()
            )));
        }
        let (outer, full, inner) = split_axis(v.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            data.extend_from_slice(&v.data()[s..s + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        self.tape.record(
            Tensor::from_parts(shape, data),
            Op::Narrow {
                a: self.id,
                axis,
                start,
            },
            &[self.id],
        )
    }

    pub fn linear(self, op: Arc<dyn LinearOp>) -> Result<Var<'t>> {
        let v = self.value();
        let shape = op.output_shape(v.shape())?;
        let y = op.apply(&v);
        debug_assert_eq!(y.shape(), shape.as_slice());
        self.tape.record(y, Op::Linear(self.id, op), &[self.id])
    }
}
