use std::cell::RefCell;

use super::{Parameter, Tensor};
use crate::error::{Error, Result};

/// Elementwise operation kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Sub,
    Div,
    Sigmoid,
    Exp,
    Log,
    Gelu,
    Softplus,
    Sqrt,
    Relu,
}

/// Extents around one axis: `outer × len × inner` in row-major order.
#[derive(Clone, Copy, Debug)]
struct AxisView {
    outer: usize,
    len: usize,
    inner: usize,
}

impl AxisView {
    fn of(shape: &[usize], axis: usize) -> Self {
        AxisView {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }

    fn whole(n: usize) -> Self {
        AxisView {
            outer: 1,
            len: n,
            inner: 1,
        }
    }

    #[inline]
    fn at(&self, o: usize, l: usize, i: usize) -> usize {
        (o * self.len + l) * self.inner + i
    }
}

enum Op {
    Leaf,
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// y = f(x) with the local partial dy/dx stored per element.
    Unary { x: usize, partial: Vec<f32> },
    Softmax { x: usize, axis: AxisView },
    LogSoftmax { x: usize, axis: AxisView },
    Sum { x: usize, axis: AxisView },
    Broadcast { x: usize },
    Reshape { x: usize },
    Transpose { x: usize, rows: usize, cols: usize },
    Narrow { x: usize, axis: AxisView, start: usize },
    Concat { parts: Vec<(usize, usize)>, axis: AxisView },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f32>, rstd: Vec<f32> },
    RenormRows { x: usize, cols: usize, sums: Vec<f64> },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    op: Op,
    requires_grad: bool,
}

/// Records operations of one forward pass in topological order.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`; all zeros when `var` does not
    /// influence the root.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        let shape = self.shapes[var.id].clone();
        match &self.grads[var.id] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

fn check_finite(op: &'static str, values: &[f32]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// tanh approximation constants
const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

fn gelu_with_partial(x: f32) -> (f32, f32) {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    (y, 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
}

fn softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `c[m×n] = a[m×k] · b[k×n]`, accumulated in f64.
fn gemm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = Vec::with_capacity(m * n);
    let mut row = vec![0.0f64; n];
    for i in 0..m {
        row.fill(0.0);
        for p in 0..k {
            let av = f64::from(a[i * k + p]);
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * f64::from(bv);
            }
        }
        c.extend(row.iter().map(|&v| v as f32));
    }
    c
}

fn broadcast_strides(src: &[usize], dst: &[usize]) -> Option<Vec<usize>> {
    if src.len() > dst.len() {
        return None;
    }
    let pad = dst.len() - src.len();
    let mut strides = vec![0; dst.len()];
    let mut stride = 1;
    for d in (0..src.len()).rev() {
        let (s, t) = (src[d], dst[d + pad]);
        if s == t {
            strides[d + pad] = if s == 1 { 0 } else { stride };
        } else if s != 1 {
            return None;
        }
        stride *= s;
    }
    Some(strides)
}

/// Maps every destination element to its broadcast source index.
fn broadcast_index(dst: &[usize], strides: &[usize]) -> Vec<usize> {
    let n: usize = dst.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut counter = vec![0usize; dst.len()];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(src);
        for d in (0..dst.len()).rev() {
            counter[d] += 1;
            src += strides[d];
            if counter[d] < dst[d] {
                break;
            }
            src -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    out
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

    fn push(&self, shape: Vec<usize>, value: Vec<f32>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var { tape: self, id }
    }

    /// Differentiable leaf.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn param(&self, p: &Parameter) -> Var<'_> {
        if p.trainable {
            self.leaf(p.tensor.clone())
        } else {
            self.constant(p.tensor.clone())
        }
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].shape.clone()
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Dispatches an [`Elementwise`] kind over one or two operands.
    pub fn elementwise<'t>(&'t self, kind: Elementwise, operands: &[Var<'t>]) -> Result<Var<'t>> {
        use Elementwise::*;
        let arity = match kind {
            Add | Mul | Sub | Div => 2,
            _ => 1,
        };
        if operands.len() != arity {
            return Err(Error::Usage(format!(
                "{kind:?} takes {arity} operand(s), got {}",
                operands.len()
            )));
        }
        let x = operands[0];
        match kind {
            Add => x.add(operands[1]),
            Mul => x.mul(operands[1]),
            Sub => x.sub(operands[1]),
            Div => x.div(operands[1]),
            Sigmoid => x.sigmoid(),
            Exp => x.exp(),
            Log => x.log(),
            Gelu => x.gelu(),
            Softplus => x.softplus(),
            Sqrt => x.sqrt(),
            Relu => x.relu(),
        }
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no operands"))?
            .shape();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?}")));
            }
            total += s[axis];
            lens.push(s[axis]);
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let out_axis = AxisView::of(&shape, axis);
        let mut value = vec![0.0; shape.iter().product()];
        {
            let nodes = self.nodes.borrow();
            let mut offset = 0;
            for (p, &len) in parts.iter().zip(&lens) {
                let src = &nodes[p.id].value;
                for o in 0..out_axis.outer {
                    let chunk = len * out_axis.inner;
                    let dst_start = out_axis.at(o, offset, 0);
                    value[dst_start..dst_start + chunk]
                        .copy_from_slice(&src[o * chunk..(o + 1) * chunk]);
                }
                offset += len;
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.needs(&ids);
        Ok(self.push(
            shape,
            value,
            Op::Concat {
                parts: ids.into_iter().zip(lens).collect(),
                axis: out_axis,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[root.id].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward root must be scalar, got shape {:?}",
                nodes[root.id].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; nodes.len()];
        grads[root.id] = Some(vec![1.0]);

        let acc = |grads: &mut Vec<Option<Vec<f32>>>, id: usize, contrib: Vec<f32>| {
            if !nodes[id].requires_grad {
                return;
            }
            match &mut grads[id] {
                Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(contrib),
            }
        };

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf => {}
                &Op::Matmul { a, b, m, k, n } => {
                    if nodes[a].requires_grad {
                        let bv = &nodes[b].value;
                        let mut da = vec![0.0f32; m * k];
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &bv[p * n..(p + 1) * n];
                                da[i * k + p] = grow
                                    .iter()
                                    .zip(brow)
                                    .map(|(&x, &y)| f64::from(x) * f64::from(y))
                                    .sum::<f64>() as f32;
                            }
                        }
                        acc(&mut grads, a, da);
                    }
                    if nodes[b].requires_grad {
                        let av = &nodes[a].value;
                        let mut db = vec![0.0f64; k * n];
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let x = f64::from(av[i * k + p]);
                                if x == 0.0 {
                                    continue;
                                }
                                for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *d += x * f64::from(gv);
                                }
                            }
                        }
                        acc(&mut grads, b, db.into_iter().map(|v| v as f32).collect());
                    }
                }
                &Op::Add(a, b) => {
                    acc(&mut grads, a, g.clone());
                    acc(&mut grads, b, g.clone());
                }
                &Op::Sub(a, b) => {
                    acc(&mut grads, a, g.clone());
                    acc(&mut grads, b, g.iter().map(|v| -v).collect());
                }
                &Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[a].value, &nodes[b].value);
                    acc(&mut grads, a, g.iter().zip(bv).map(|(g, y)| g * y).collect());
                    acc(&mut grads, b, g.iter().zip(av).map(|(g, x)| g * x).collect());
                }
                &Op::Div(a, b) => {
                    let bv = &nodes[b].value;
                    let out = &node.value;
                    acc(&mut grads, a, g.iter().zip(bv).map(|(g, y)| g / y).collect());
                    acc(
                        &mut grads,
                        b,
                        g.iter()
                            .zip(out)
                            .zip(bv)
                            .map(|((g, q), y)| -g * q / y)
                            .collect(),
                    );
                }
                Op::Unary { x, partial } => {
                    acc(&mut grads, *x, g.iter().zip(partial).map(|(g, p)| g * p).collect());
                }
                &Op::Softmax { x, axis } => {
                    let y = &node.value;
                    let mut dx = vec![0.0f32; y.len()];
                    for o in 0..axis.outer {
                        for i in 0..axis.inner {
                            let dot: f64 = (0..axis.len)
                                .map(|l| {
                                    let j = axis.at(o, l, i);
                                    f64::from(g[j]) * f64::from(y[j])
                                })
                                .sum();
                            for l in 0..axis.len {
                                let j = axis.at(o, l, i);
                                dx[j] = y[j] * (g[j] - dot as f32);
                            }
                        }
                    }
                    acc(&mut grads, x, dx);
                }
                &Op::LogSoftmax { x, axis } => {
                    let y = &node.value;
                    let mut dx = vec![0.0f32; y.len()];
                    for o in 0..axis.outer {
                        for i in 0..axis.inner {
                            let total: f64 =
                                (0..axis.len).map(|l| f64::from(g[axis.at(o, l, i)])).sum();
                            for l in 0..axis.len {
                                let j = axis.at(o, l, i);
                                dx[j] = g[j] - y[j].exp() * total as f32;
                            }
                        }
                    }
                    acc(&mut grads, x, dx);
                }
                &Op::Sum { x, axis } => {
                    let mut dx = vec![0.0f32; axis.outer * axis.len * axis.inner];
                    for o in 0..axis.outer {
                        for l in 0..axis.len {
                            for i in 0..axis.inner {
                                dx[axis.at(o, l, i)] = g[o * axis.inner + i];
                            }
                        }
                    }
                    acc(&mut grads, x, dx);
                }
                &Op::Broadcast { x } => {
                    let strides = broadcast_strides(&nodes[x].shape, &node.shape)
                        .expect("validated at forward");
                    let mut dx = vec![0.0f64; nodes[x].value.len()];
                    for (j, s) in broadcast_index(&node.shape, &strides).into_iter().enumerate() {
                        dx[s] += f64::from(g[j]);
                    }
                    acc(&mut grads, x, dx.into_iter().map(|v| v as f32).collect());
                }
                &Op::Reshape { x } => acc(&mut grads, x, g.clone()),
                &Op::Transpose { x, rows, cols } => {
                    let mut dx = vec![0.0f32; rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[r * cols + c] = g[c * rows + r];
                        }
                    }
                    acc(&mut grads, x, dx);
                }
                &Op::Narrow { x, axis, start } => {
                    let out_len = node.shape.iter().product::<usize>() / (axis.outer * axis.inner);
                    let mut dx = vec![0.0f32; axis.outer * axis.len * axis.inner];
                    let chunk = out_len * axis.inner;
                    for o in 0..axis.outer {
                        let s = axis.at(o, start, 0);
                        dx[s..s + chunk].copy_from_slice(&g[o * chunk..(o + 1) * chunk]);
                    }
                    acc(&mut grads, x, dx);
                }
                Op::Concat { parts, axis } => {
                    let mut offset = 0;
                    for &(pid, len) in parts {
                        let chunk = len * axis.inner;
                        let mut dp = Vec::with_capacity(axis.outer * chunk);
                        for o in 0..axis.outer {
                            let s = axis.at(o, offset, 0);
                            dp.extend_from_slice(&g[s..s + chunk]);
                        }
                        acc(&mut grads, pid, dp);
                        offset += len;
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let cols = *node.shape.last().expect("rank >= 1");
                    let rows = xhat.len() / cols;
                    let gv = &nodes[*gain].value;
                    let mut dx = vec![0.0f32; xhat.len()];
                    let mut dgain = vec![0.0f64; cols];
                    let mut dbias = vec![0.0f64; cols];
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let xr = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_d = 0.0f64;
                        let mut mean_dx = 0.0f64;
                        for c in 0..cols {
                            let d = f64::from(gr[c]) * f64::from(gv[c]);
                            mean_d += d;
                            mean_dx += d * f64::from(xr[c]);
                            dgain[c] += f64::from(gr[c]) * f64::from(xr[c]);
                            dbias[c] += f64::from(gr[c]);
                        }
                        mean_d /= cols as f64;
                        mean_dx /= cols as f64;
                        for c in 0..cols {
                            let d = f64::from(gr[c]) * f64::from(gv[c]);
                            dx[r * cols + c] = (f64::from(rstd[r])
                                * (d - mean_d - f64::from(xr[c]) * mean_dx))
                                as f32;
                        }
                    }
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gain, dgain.into_iter().map(|v| v as f32).collect());
                    acc(&mut grads, *bias, dbias.into_iter().map(|v| v as f32).collect());
                }
                Op::RenormRows { x, cols, sums } => {
                    let y = &node.value;
                    let mut dx = vec![0.0f32; y.len()];
                    for (r, &s) in sums.iter().enumerate() {
                        if s == 0.0 {
                            continue;
                        }
                        let row = r * cols..(r + 1) * cols;
                        let dot: f64 = g[row.clone()]
                            .iter()
                            .zip(&y[row.clone()])
                            .map(|(a, b)| f64::from(*a) * f64::from(*b))
                            .sum();
                        for j in row {
                            dx[j] = ((f64::from(g[j]) - dot) / s) as f32;
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
            }
            grads[id] = Some(g);
        }

        let shapes = nodes.iter().map(|n| n.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape")
    }

    /// First element; convenient for scalar nodes.
    pub fn item(&self) -> f32 {
        self.tape.nodes.borrow()[self.id].value[0]
    }

    fn unary(self, op: &'static str, f: impl Fn(f32) -> (f32, f32)) -> Result<Var<'t>> {
        let (shape, value, partial) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let (value, partial): (Vec<f32>, Vec<f32>) = n.value.iter().map(|&x| f(x)).unzip();
            (n.shape.clone(), value, partial)
        };
        check_finite(op, &value)?;
        let rg = self.tape.needs(&[self.id]);
        Ok(self
            .tape
            .push(shape, value, Op::Unary { x: self.id, partial }, rg))
    }

    fn binary(
        self,
        rhs: Var<'t>,
        op: &'static str,
        f: impl Fn(f32, f32) -> f32,
        node: fn(usize, usize) -> Op,
    ) -> Result<Var<'t>> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[rhs.id]);
            if a.shape != b.shape {
                return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape, b.shape)));
            }
            let v: Vec<f32> = a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect();
            (a.shape.clone(), v)
        };
        check_finite(op, &value)?;
        let rg = self.tape.needs(&[self.id, rhs.id]);
        Ok(self.tape.push(shape, value, node(self.id, rhs.id), rg))
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "div", |a, b| a / b, Op::Div)
    }

    /// `self + rhs` with `rhs` broadcast to `self`'s shape.
    pub fn add_bcast(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let r = rhs.broadcast_to(&self.shape())?;
        self.add(r)
    }

    pub fn mul_bcast(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let r = rhs.broadcast_to(&self.shape())?;
        self.mul(r)
    }

    pub fn div_bcast(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let r = rhs.broadcast_to(&self.shape())?;
        self.div(r)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary("sigmoid", |x| {
            let s = sigmoid(x);
            (s, s * (1.0 - s))
        })
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary("exp", |x| {
            let e = x.exp();
            (e, e)
        })
    }

    pub fn log(self) -> Result<Var<'t>> {
        {
            let nodes = self.tape.nodes.borrow();
            if let Some(bad) = nodes[self.id].value.iter().find(|&&x| x <= 0.0 || x.is_nan()) {
                return Err(Error::domain("log", format!("non-positive input {bad}")));
            }
        }
        self.unary("log", |x| (x.ln(), 1.0 / x))
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        {
            let nodes = self.tape.nodes.borrow();
            if let Some(bad) = nodes[self.id].value.iter().find(|&&x| x < 0.0 || x.is_nan()) {
                return Err(Error::domain("sqrt", format!("negative input {bad}")));
            }
        }
        self.unary("sqrt", |x| {
            let r = x.sqrt();
            (r, 0.5 / r)
        })
    }

    pub fn gelu(self) -> Result<Var<'t>> {
        self.unary("gelu", gelu_with_partial)
    }

    pub fn softplus(self) -> Result<Var<'t>> {
        self.unary("softplus", |x| (softplus(x), sigmoid(x)))
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary("relu", |x| if x > 0.0 { (x, 1.0) } else { (0.0, 0.0) })
    }

    /// `max(x, floor)`; the gradient is zero where the floor binds.
    pub fn clamp_min(self, floor: f32) -> Result<Var<'t>> {
        self.unary("clamp_min", |x| if x > floor { (x, 1.0) } else { (floor, 0.0) })
    }

    pub fn scale(self, factor: f32) -> Result<Var<'t>> {
        self.unary("scale", |x| (x * factor, factor))
    }

    pub fn add_scalar(self, c: f32) -> Result<Var<'t>> {
        self.unary("add_scalar", |x| (x + c, 1.0))
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (m, k, n, value) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[rhs.id]);
            match (a.shape.as_slice(), b.shape.as_slice()) {
                (&[m, k], &[k2, n]) if k == k2 => (m, k, n, gemm(&a.value, &b.value, m, k, n)),
                (sa, sb) => {
                    return Err(Error::shape("matmul", format!("{sa:?} · {sb:?}")));
                }
            }
        };
        check_finite("matmul", &value)?;
        let rg = self.tape.needs(&[self.id, rhs.id]);
        Ok(self.tape.push(
            vec![m, n],
            value,
            Op::Matmul {
                a: self.id,
                b: rhs.id,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    fn axis_view(&self, op: &'static str, axis: usize) -> Result<(Vec<usize>, AxisView)> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::shape(op, format!("axis {axis} for shape {shape:?}")));
        }
        let view = AxisView::of(&shape, axis);
        Ok((shape, view))
    }

    fn softmax_like(self, axis: usize, log: bool) -> Result<Var<'t>> {
        let op = if log { "log_softmax" } else { "softmax" };
        let (shape, view) = self.axis_view(op, axis)?;
        if view.len == 0 {
            return Err(Error::domain(op, "empty axis"));
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let mut y = vec![0.0f32; x.len()];
            for o in 0..view.outer {
                for i in 0..view.inner {
                    let max = (0..view.len)
                        .map(|l| x[view.at(o, l, i)])
                        .fold(f32::NEG_INFINITY, f32::max);
                    let total: f64 = (0..view.len)
                        .map(|l| (f64::from(x[view.at(o, l, i)]) - f64::from(max)).exp())
                        .sum();
                    let log_total = total.ln();
                    for l in 0..view.len {
                        let j = view.at(o, l, i);
                        let shifted = f64::from(x[j]) - f64::from(max);
                        y[j] = if log {
                            (shifted - log_total) as f32
                        } else {
                            (shifted.exp() / total) as f32
                        };
                    }
                }
            }
            y
        };
        check_finite(op, &value)?;
        let rg = self.tape.needs(&[self.id]);
        let node = if log {
            Op::LogSoftmax { x: self.id, axis: view }
        } else {
            Op::Softmax { x: self.id, axis: view }
        };
        Ok(self.tape.push(shape, value, node, rg))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        self.softmax_like(axis, false)
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t>> {
        self.softmax_like(axis, true)
    }

    fn reduce(self, shape: Vec<usize>, view: AxisView) -> Result<Var<'t>> {
        if view.len == 0 {
            return Err(Error::domain("reduce", "empty reduction"));
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let mut out = Vec::with_capacity(view.outer * view.inner);
            for o in 0..view.outer {
                for i in 0..view.inner {
                    let s: f64 = (0..view.len).map(|l| f64::from(x[view.at(o, l, i)])).sum();
                    out.push(s as f32);
                }
            }
            out
        };
        check_finite("reduce", &value)?;
        let rg = self.tape.needs(&[self.id]);
        Ok(self
            .tape
            .push(shape, value, Op::Sum { x: self.id, axis: view }, rg))
    }

    /// Sum of all elements as a scalar.
    pub fn sum_all(self) -> Result<Var<'t>> {
        let n = self.shape().iter().product();
        self.reduce(Vec::new(), AxisView::whole(n))
    }

    pub fn mean_all(self) -> Result<Var<'t>> {
        let n: usize = self.shape().iter().product();
        self.sum_all()?.scale(1.0 / n as f32)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let (mut shape, view) = self.axis_view("sum", axis)?;
        shape[axis] = 1;
        self.reduce(shape, view)
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let (_, view) = self.axis_view("mean", axis)?;
        self.sum_axis(axis)?.scale(1.0 / view.len.max(1) as f32)
    }

    /// Numpy-style broadcast to `shape`.
    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t>> {
        let src = self.shape();
        if src == shape {
            return Ok(self);
        }
        let strides = broadcast_strides(&src, shape)
            .ok_or_else(|| Error::shape("broadcast", format!("{src:?} -> {shape:?}")))?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            broadcast_index(shape, &strides)
                .into_iter()
                .map(|s| x[s])
                .collect()
        };
        let rg = self.tape.needs(&[self.id]);
        Ok(self
            .tape
            .push(shape.to_vec(), value, Op::Broadcast { x: self.id }, rg))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let n: usize = shape.iter().product();
        let (old, value) = {
            let nodes = self.tape.nodes.borrow();
            (nodes[self.id].shape.clone(), nodes[self.id].value.clone())
        };
        if n != value.len() {
            return Err(Error::shape("reshape", format!("{old:?} -> {shape:?}")));
        }
        let rg = self.tape.needs(&[self.id]);
        Ok(self
            .tape
            .push(shape.to_vec(), value, Op::Reshape { x: self.id }, rg))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(self) -> Result<Var<'t>> {
        let (rows, cols, value) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let &[rows, cols] = n.shape.as_slice() else {
                return Err(Error::shape("transpose", format!("{:?}", n.shape)));
            };
            let mut v = vec![0.0f32; rows * cols];
            for r in 0..rows {
                for c in 0..cols {
                    v[c * rows + r] = n.value[r * cols + c];
                }
            }
            (rows, cols, v)
        };
        let rg = self.tape.needs(&[self.id]);
        Ok(self.tape.push(
            vec![cols, rows],
            value,
            Op::Transpose { x: self.id, rows, cols },
            rg,
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let (mut shape, view) = self.axis_view("narrow", axis)?;
        if start + len > view.len {
            return Err(Error::shape(
                "narrow",
                format!("[{start}, {}) exceeds extent {}", start + len, view.len),
            ));
        }
        shape[axis] = len;
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let chunk = len * view.inner;
            let mut v = Vec::with_capacity(view.outer * chunk);
            for o in 0..view.outer {
                let s = view.at(o, start, 0);
                v.extend_from_slice(&x[s..s + chunk]);
            }
            v
        };
        let rg = self.tape.needs(&[self.id]);
        Ok(self.tape.push(
            shape,
            value,
            Op::Narrow {
                x: self.id,
                axis: view,
                start,
            },
            rg,
        ))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`
    /// (both 1-D with the last axis' extent).
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f32) -> Result<Var<'t>> {
        if eps <= 0.0 {
            return Err(Error::domain("layer_norm", "eps must be positive"));
        }
        let shape = self.shape();
        let cols = *shape
            .last()
            .ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if gain.shape() != [cols] || bias.shape() != [cols] {
            return Err(Error::shape(
                "layer_norm",
                format!("gain {:?} / bias {:?} for width {cols}", gain.shape(), bias.shape()),
            ));
        }
        let (value, xhat, rstd) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let (gv, bv) = (&nodes[gain.id].value, &nodes[bias.id].value);
            let rows = if cols == 0 { 0 } else { x.len() / cols };
            let mut y = vec![0.0f32; x.len()];
            let mut xhat = vec![0.0f32; x.len()];
            let mut rstd = vec![0.0f32; rows];
            for r in 0..rows {
                let row = &x[r * cols..(r + 1) * cols];
                let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / cols as f64;
                let var = row
                    .iter()
                    .map(|&v| (f64::from(v) - mean).powi(2))
                    .sum::<f64>()
                    / cols as f64;
                let rs = 1.0 / (var + f64::from(eps)).sqrt();
                rstd[r] = rs as f32;
                for c in 0..cols {
                    let h = ((f64::from(row[c]) - mean) * rs) as f32;
                    xhat[r * cols + c] = h;
                    y[r * cols + c] = h * gv[c] + bv[c];
                }
            }
            (y, xhat, rstd)
        };
        check_finite("layer_norm", &value)?;
        let rg = self.tape.needs(&[self.id, gain.id, bias.id]);
        Ok(self.tape.push(
            shape,
            value,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Divides each row of a non-negative 2-D tensor by its sum; all-zero
    /// rows become uniform (and pass no gradient).
    pub fn renormalize_rows(self) -> Result<Var<'t>> {
        let shape = self.shape();
        let &[rows, cols] = shape.as_slice() else {
            return Err(Error::shape("renormalize_rows", format!("{shape:?}")));
        };
        let (value, sums) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let mut v = vec![0.0f32; rows * cols];
            let mut sums = vec![0.0f64; rows];
            for r in 0..rows {
                let row = &x[r * cols..(r + 1) * cols];
                if row.iter().any(|&p| p < 0.0) {
                    return Err(Error::domain("renormalize_rows", "negative entry"));
                }
                let s: f64 = row.iter().map(|&p| f64::from(p)).sum();
                sums[r] = s;
                for c in 0..cols {
                    v[r * cols + c] = if s > 0.0 {
                        (f64::from(row[c]) / s) as f32
                    } else {
                        1.0 / cols as f32
                    };
                }
            }
            (v, sums)
        };
        let rg = self.tape.needs(&[self.id]);
        Ok(self.tape.push(
            shape,
            value,
            Op::RenormRows {
                x: self.id,
                cols,
                sums,
            },
            rg,
        ))
    }
}
