//! Dense f64 tensors with an optional reverse-mode tape.
//!
//! Forward computation is written once against the [`Ops`] trait and can run
//! either eagerly ([`Eager`], no gradient bookkeeping, used for beam-search
//! rollouts) or on a [`Tape`] that records every operation and replays it
//! backward to produce parameter gradients.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::error::{Error, Result};

/// Row-major dense array of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor-new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Raw kernels shared by the eager and taped paths.
// ---------------------------------------------------------------------------

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok((a[0], a[1], b[1]))
}

fn matmul_raw(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

fn log_softmax_raw(shape: &[usize], x: &[f64], out: &mut [f64]) {
    let cols = *shape.last().unwrap();
    for row in 0..x.len() / cols {
        let xs = &x[row * cols..(row + 1) * cols];
        let os = &mut out[row * cols..(row + 1) * cols];
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + xs.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for (o, v) in os.iter_mut().zip(xs) {
            *o = v - lse;
        }
    }
}

fn logaddexp_raw(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Broadcast check for elementwise binary ops: equal shapes, or one side a
/// single element.
fn broadcast_len(op: &'static str, a: &[usize], b: &[usize]) -> Result<usize> {
    let (la, lb) = (a.iter().product::<usize>(), b.iter().product::<usize>());
    if la == lb || la == 1 || lb == 1 {
        Ok(la.max(lb))
    } else {
        Err(Error::Shape {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

fn bcast(data: &[f64], i: usize) -> f64 {
    if data.len() == 1 {
        data[0]
    } else {
        data[i]
    }
}

// ---------------------------------------------------------------------------
// The operation set.
// ---------------------------------------------------------------------------

/// Forward operations available to model and loss code, implemented both
/// eagerly and on the gradient tape.
pub trait Ops {
    type V: Clone;

    /// A constant input (no gradient).
    fn constant(&self, t: Tensor) -> Self::V;
    /// A named trainable parameter leaf.
    fn param(&self, name: &str, t: &Tensor) -> Self::V;
    fn value(&self, v: &Self::V) -> Tensor;

    fn matmul(&self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn add(&self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mul(&self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn tanh(&self, a: &Self::V) -> Self::V;
    fn sigmoid(&self, a: &Self::V) -> Self::V;
    fn exp(&self, a: &Self::V) -> Self::V;
    fn ln(&self, a: &Self::V) -> Result<Self::V>;
    /// Multiply by a compile-time constant.
    fn scale(&self, a: &Self::V, c: f64) -> Self::V;
    /// Add a compile-time constant.
    fn offset(&self, a: &Self::V, c: f64) -> Self::V;
    fn log_softmax(&self, a: &Self::V) -> Self::V;
    fn sum(&self, a: &Self::V) -> Self::V;
    /// Slice along the first axis; output drops that axis.
    fn row(&self, a: &Self::V, i: usize) -> Result<Self::V>;
    /// Single element by flat index, as a scalar.
    fn index(&self, a: &Self::V, i: usize) -> Result<Self::V>;
    /// Stable log(exp(a) + exp(b)) for scalars.
    fn logaddexp(&self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    /// Stack scalars into a vector.
    fn stack(&self, xs: &[Self::V]) -> Result<Self::V>;
    fn reshape(&self, a: &Self::V, shape: Vec<usize>) -> Result<Self::V>;
    /// Identity in the forward pass, zero in the backward pass.
    fn stop_gradient(&self, a: &Self::V) -> Self::V;
}

// ---------------------------------------------------------------------------
// Eager backend.
// ---------------------------------------------------------------------------

/// Gradient-free backend; values are plain tensors.
pub struct Eager;

impl Ops for Eager {
    type V = Tensor;

    fn constant(&self, t: Tensor) -> Tensor {
        t
    }

    fn param(&self, _name: &str, t: &Tensor) -> Tensor {
        t.clone()
    }

    fn value(&self, v: &Tensor) -> Tensor {
        v.clone()
    }

    fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k, n) = matmul_dims(&a.shape, &b.shape)?;
        let mut out = vec![0.0; m * n];
        matmul_raw(m, k, n, &a.data, &b.data, &mut out);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let n = broadcast_len("add", &a.shape, &b.shape)?;
        let shape = if a.len() >= b.len() {
            a.shape.clone()
        } else {
            b.shape.clone()
        };
        let data = (0..n).map(|i| bcast(&a.data, i) + bcast(&b.data, i)).collect();
        Ok(Tensor { shape, data })
    }

    fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let n = broadcast_len("mul", &a.shape, &b.shape)?;
        let shape = if a.len() >= b.len() {
            a.shape.clone()
        } else {
            b.shape.clone()
        };
        let data = (0..n).map(|i| bcast(&a.data, i) * bcast(&b.data, i)).collect();
        Ok(Tensor { shape, data })
    }

    fn tanh(&self, a: &Tensor) -> Tensor {
        Tensor {
            shape: a.shape.clone(),
            data: a.data.iter().map(|v| v.tanh()).collect(),
        }
    }

    fn sigmoid(&self, a: &Tensor) -> Tensor {
        Tensor {
            shape: a.shape.clone(),
            data: a.data.iter().map(|v| sigmoid_scalar(*v)).collect(),
        }
    }

    fn exp(&self, a: &Tensor) -> Tensor {
        Tensor {
            shape: a.shape.clone(),
            data: a.data.iter().map(|v| v.exp()).collect(),
        }
    }

    fn ln(&self, a: &Tensor) -> Result<Tensor> {
        if a.data.iter().any(|v| *v <= 0.0) {
            return Err(Error::Domain("log of non-positive value".into()));
        }
        Ok(Tensor {
            shape: a.shape.clone(),
            data: a.data.iter().map(|v| v.ln()).collect(),
        })
    }

    fn scale(&self, a: &Tensor, c: f64) -> Tensor {
        Tensor {
            shape: a.shape.clone(),
            data: a.data.iter().map(|v| v * c).collect(),
        }
    }

    fn offset(&self, a: &Tensor, c: f64) -> Tensor {
        Tensor {
            shape: a.shape.clone(),
            data: a.data.iter().map(|v| v + c).collect(),
        }
    }

    fn log_softmax(&self, a: &Tensor) -> Tensor {
        let mut out = vec![0.0; a.len()];
        log_softmax_raw(&a.shape, &a.data, &mut out);
        Tensor {
            shape: a.shape.clone(),
            data: out,
        }
    }

    fn sum(&self, a: &Tensor) -> Tensor {
        Tensor::scalar(a.data.iter().sum())
    }

    fn row(&self, a: &Tensor, i: usize) -> Result<Tensor> {
        let (shape, span) = row_shape(&a.shape, i)?;
        Ok(Tensor {
            shape,
            data: a.data[i * span..(i + 1) * span].to_vec(),
        })
    }

    fn index(&self, a: &Tensor, i: usize) -> Result<Tensor> {
        if i >= a.len() {
            return Err(Error::Shape {
                op: "index",
                lhs: a.shape.clone(),
                rhs: vec![i],
            });
        }
        Ok(Tensor::scalar(a.data[i]))
    }

    fn logaddexp(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        check_scalar("logaddexp", a)?;
        check_scalar("logaddexp", b)?;
        Ok(Tensor::scalar(logaddexp_raw(a.item(), b.item())))
    }

    fn stack(&self, xs: &[Tensor]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(xs.len());
        for x in xs {
            check_scalar("stack", x)?;
            data.push(x.item());
        }
        Ok(Tensor::from_vec(data))
    }

    fn reshape(&self, a: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != a.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: a.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: a.data.clone(),
        })
    }

    fn stop_gradient(&self, a: &Tensor) -> Tensor {
        a.clone()
    }
}

fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn row_shape(shape: &[usize], i: usize) -> Result<(Vec<usize>, usize)> {
    if shape.is_empty() || i >= shape[0] {
        return Err(Error::Shape {
            op: "row",
            lhs: shape.to_vec(),
            rhs: vec![i],
        });
    }
    let rest: Vec<usize> = if shape.len() == 1 {
        vec![1]
    } else {
        shape[1..].to_vec()
    };
    let span = rest.iter().product();
    Ok((rest, span))
}

fn check_scalar(op: &'static str, t: &Tensor) -> Result<()> {
    if t.len() != 1 {
        return Err(Error::Shape {
            op,
            lhs: t.shape.clone(),
            rhs: vec![1],
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Tape backend.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize),
    Scale(usize, f64),
    Offset(usize),
    LogSoftmax(usize),
    Sum(usize),
    Row(usize, usize),
    Index(usize, usize),
    LogAddExp(usize, usize),
    Stack(Vec<usize>),
    Reshape(usize),
    StopGrad,
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records operations during the forward pass; a single backward sweep visits
/// each recorded operation exactly once, in reverse order of recording.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<Vec<(String, usize)>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(Vec::new()),
        }
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape.clone()
    }

    /// Reverse sweep from a scalar output; returns gradients for every
    /// registered parameter leaf reachable from it.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[out.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar output, got shape {:?}",
                nodes[out.0].value.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[out.0] = Some(vec![1.0]);

        let acc = |grads: &mut Vec<Option<Vec<f64>>>, id: usize, add: &dyn Fn(&mut [f64])| {
            let len = nodes[id].value.len();
            let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
            add(slot);
        };

        for i in (0..nodes.len()).rev() {
            let node = &nodes[i];
            // leaf gradients stay in place for collection below
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &node.op {
                Op::Leaf | Op::StopGrad => {}
                Op::Matmul(a, b) => {
                    let (m, k, n) =
                        matmul_dims(&nodes[*a].value.shape, &nodes[*b].value.shape).unwrap();
                    let av = &nodes[*a].value.data;
                    let bv = &nodes[*b].value.data;
                    // dA = G Bᵀ, dB = Aᵀ G
                    acc(&mut grads, *a, &|slot: &mut [f64]| {
                        for i2 in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[i2 * n + j] * bv[p * n + j];
                                }
                                slot[i2 * k + p] += s;
                            }
                        }
                    });
                    acc(&mut grads, *b, &|slot: &mut [f64]| {
                        for p in 0..k {
                            for j in 0..n {
                                let mut s = 0.0;
                                for i2 in 0..m {
                                    s += av[i2 * k + p] * g[i2 * n + j];
                                }
                                slot[p * n + j] += s;
                            }
                        }
                    });
                }
                Op::Add(a, b) => {
                    for &pid in &[*a, *b] {
                        acc(&mut grads, pid, &|slot: &mut [f64]| {
                            if slot.len() == g.len() {
                                for (s, gv) in slot.iter_mut().zip(&g) {
                                    *s += gv;
                                }
                            } else {
                                // broadcast scalar side
                                slot[0] += g.iter().sum::<f64>();
                            }
                        });
                    }
                }
                Op::Mul(a, b) => {
                    let av = nodes[*a].value.data.clone();
                    let bv = nodes[*b].value.data.clone();
                    acc(&mut grads, *a, &|slot: &mut [f64]| {
                        if slot.len() == g.len() {
                            for i2 in 0..g.len() {
                                slot[i2] += g[i2] * bcast(&bv, i2);
                            }
                        } else {
                            slot[0] += g.iter().enumerate().map(|(i2, gv)| gv * bcast(&bv, i2)).sum::<f64>();
                        }
                    });
                    acc(&mut grads, *b, &|slot: &mut [f64]| {
                        if slot.len() == g.len() {
                            for i2 in 0..g.len() {
                                slot[i2] += g[i2] * bcast(&av, i2);
                            }
                        } else {
                            slot[0] += g.iter().enumerate().map(|(i2, gv)| gv * bcast(&av, i2)).sum::<f64>();
                        }
                    });
                }
                Op::Tanh(a) => {
                    let y = &node.value.data;
                    acc(&mut grads, *a, &|slot: &mut [f64]| {
                        for i2 in 0..g.len() {
                            slot[i2] += g[i2] * (1.0 - y[i2] * y[i2]);
                        }
                    });
                }
                Op::Sigmoid(a) => {
                    let y = &node.value.data;
                    acc(&mut grads, *a, &|slot: &mut [f64]| {
                        for i2 in 0..g.len() {
                            slot[i2] += g[i2] * y[i2] * (1.0 - y[i2]);
                        }
                    });
                }
                Op::Exp(a) => {
                    let y = &node.value.data;
                    acc(&mut grads, *a, &|slot: &mut [f64]| {
                        for i2 in 0..g.len() {
                            slot[i2] += g[i2] * y[i2];
                        }
                    });
                }
                Op::Ln(a) => {
                    let x = &nodes[*a].value.data;
                    acc(&mut grads, *a, &|slot: &mut [f64]| {
                        for i2 in 0..g.len() {
                            slot[i2] += g[i2] / x[i2];
                        }
                    });
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(&mut grads, *a, &|slot: &mut [f64]| {
                        for i2 in 0..g.len() {
                            slot[i2] += g[i2] * c;
                        }
                    });
                }
                Op::Offset(a) | Op::Reshape(a) => {
                    acc(&mut grads, *a, &|slot: &mut [f64]| {
                        for i2 in 0..g.len() {
                            slot[i2] += g[i2];
                        }
                    });
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value.data;
                    let cols = *node.value.shape.last().unwrap();
                    acc(&mut grads, *a, &|slot: &mut [f64]| {
                        for row in 0..g.len() / cols {
                            let gs = &g[row * cols..(row + 1) * cols];
                            let ys = &y[row * cols..(row + 1) * cols];
                            let gsum: f64 = gs.iter().sum();
                            for j in 0..cols {
                                slot[row * cols + j] += gs[j] - ys[j].exp() * gsum;
                            }
                        }
                    });
                }
                Op::Sum(a) => {
                    acc(&mut grads, *a, &|slot: &mut [f64]| {
                        for s in slot.iter_mut() {
                            *s += g[0];
                        }
                    });
                }
                Op::Row(a, idx) => {
                    let span = node.value.len();
                    let off = idx * span;
                    acc(&mut grads, *a, &|slot: &mut [f64]| {
                        for i2 in 0..span {
                            slot[off + i2] += g[i2];
                        }
                    });
                }
                Op::Index(a, idx) => {
                    let idx = *idx;
                    acc(&mut grads, *a, &|slot: &mut [f64]| {
                        slot[idx] += g[0];
                    });
                }
                Op::LogAddExp(a, b) => {
                    let y = node.value.item();
                    let av = nodes[*a].value.item();
                    let bv = nodes[*b].value.item();
                    acc(&mut grads, *a, &|slot: &mut [f64]| {
                        slot[0] += g[0] * (av - y).exp();
                    });
                    acc(&mut grads, *b, &|slot: &mut [f64]| {
                        slot[0] += g[0] * (bv - y).exp();
                    });
                }
                Op::Stack(xs) => {
                    for (j, &pid) in xs.iter().enumerate() {
                        acc(&mut grads, pid, &|slot: &mut [f64]| {
                            slot[0] += g[j];
                        });
                    }
                }
            }
        }

        let by_name = self
            .params
            .borrow()
            .iter()
            .map(|(name, id)| {
                let len = nodes[*id].value.len();
                let g = grads[*id].take().unwrap_or_else(|| vec![0.0; len]);
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients { by_name })
    }
}

impl Ops for Tape {
    type V = Var;

    fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    fn param(&self, name: &str, t: &Tensor) -> Var {
        let v = self.push(t.clone(), Op::Leaf);
        self.params.borrow_mut().push((name.to_string(), v.0));
        v
    }

    fn value(&self, v: &Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    fn matmul(&self, a: &Var, b: &Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k, n) = matmul_dims(&av.shape, &bv.shape)?;
            let mut out = vec![0.0; m * n];
            matmul_raw(m, k, n, &av.data, &bv.data, &mut out);
            Tensor {
                shape: vec![m, n],
                data: out,
            }
        };
        Ok(self.push(out, Op::Matmul(a.0, b.0)))
    }

    fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            Eager.add(&nodes[a.0].value, &nodes[b.0].value)?
        };
        Ok(self.push(out, Op::Add(a.0, b.0)))
    }

    fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            Eager.mul(&nodes[a.0].value, &nodes[b.0].value)?
        };
        Ok(self.push(out, Op::Mul(a.0, b.0)))
    }

    fn tanh(&self, a: &Var) -> Var {
        let out = Eager.tanh(&self.nodes.borrow()[a.0].value);
        self.push(out, Op::Tanh(a.0))
    }

    fn sigmoid(&self, a: &Var) -> Var {
        let out = Eager.sigmoid(&self.nodes.borrow()[a.0].value);
        self.push(out, Op::Sigmoid(a.0))
    }

    fn exp(&self, a: &Var) -> Var {
        let out = Eager.exp(&self.nodes.borrow()[a.0].value);
        self.push(out, Op::Exp(a.0))
    }

    fn ln(&self, a: &Var) -> Result<Var> {
        let out = Eager.ln(&self.nodes.borrow()[a.0].value)?;
        Ok(self.push(out, Op::Ln(a.0)))
    }

    fn scale(&self, a: &Var, c: f64) -> Var {
        let out = Eager.scale(&self.nodes.borrow()[a.0].value, c);
        self.push(out, Op::Scale(a.0, c))
    }

    fn offset(&self, a: &Var, c: f64) -> Var {
        let out = Eager.offset(&self.nodes.borrow()[a.0].value, c);
        self.push(out, Op::Offset(a.0))
    }

    fn log_softmax(&self, a: &Var) -> Var {
        let out = Eager.log_softmax(&self.nodes.borrow()[a.0].value);
        self.push(out, Op::LogSoftmax(a.0))
    }

    fn sum(&self, a: &Var) -> Var {
        let out = Eager.sum(&self.nodes.borrow()[a.0].value);
        self.push(out, Op::Sum(a.0))
    }

    fn row(&self, a: &Var, i: usize) -> Result<Var> {
        let out = Eager.row(&self.nodes.borrow()[a.0].value, i)?;
        Ok(self.push(out, Op::Row(a.0, i)))
    }

    fn index(&self, a: &Var, i: usize) -> Result<Var> {
        let out = Eager.index(&self.nodes.borrow()[a.0].value, i)?;
        Ok(self.push(out, Op::Index(a.0, i)))
    }

    fn logaddexp(&self, a: &Var, b: &Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            Eager.logaddexp(&nodes[a.0].value, &nodes[b.0].value)?
        };
        Ok(self.push(out, Op::LogAddExp(a.0, b.0)))
    }

    fn stack(&self, xs: &[Var]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let vals: Vec<Tensor> = xs.iter().map(|v| nodes[v.0].value.clone()).collect();
            Eager.stack(&vals)?
        };
        Ok(self.push(out, Op::Stack(xs.iter().map(|v| v.0).collect())))
    }

    fn reshape(&self, a: &Var, shape: Vec<usize>) -> Result<Var> {
        let out = Eager.reshape(&self.nodes.borrow()[a.0].value, shape)?;
        Ok(self.push(out, Op::Reshape(a.0)))
    }

    fn stop_gradient(&self, a: &Var) -> Var {
        let out = self.nodes.borrow()[a.0].value.clone();
        self.push(out, Op::StopGrad)
    }
}

/// Central finite differences for a scalar function of a flat vector.
/// The gradient oracle used by the test suites.
pub fn finite_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut g = Vec::with_capacity(x.len());
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + eps;
        let fp = f(&xp);
        xp[i] = orig - eps;
        let fm = f(&xp);
        xp[i] = orig;
        g.push((fp - fm) / (2.0 * eps));
    }
    g
}

/// Named parameter gradients from one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    by_name: Vec<(String, Vec<f64>)>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.by_name
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, g)| g.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.by_name.iter().map(|(n, g)| (n.as_str(), g.as_slice()))
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    pub fn into_map(self) -> HashMap<String, Vec<f64>> {
        self.by_name.into_iter().collect()
    }
}
