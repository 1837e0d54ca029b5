//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its output value and, when any input
//! requires a gradient, enough saved state to run its vector-Jacobian
//! product. Nodes are appended in evaluation order, so the node list is a
//! topological order and [`Tape::backward`] is a single reverse sweep.

use std::cell::RefCell;
use std::sync::Arc;

use crate::element::{matmul_into, Real};
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

const GROUP_NORM_EPS: f64 = 1e-5;

enum Op<E> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, E),
    RowBias { x: usize, bias: usize },
    ChannelBias { x: usize, bias: usize },
    MatMul(MatMulInfo),
    Permute { x: usize, perm: Vec<usize> },
    Reshape { x: usize },
    Softmax { x: usize },
    Silu { x: usize },
    Sum { x: usize },
    Mean { x: usize },
    L1Mean { a: usize, b: usize },
    MseMean { a: usize, b: usize },
    Conv2d(Box<ConvInfo<E>>),
    GroupNorm(Box<GroupNormInfo<E>>),
    Upsample2x { x: usize },
    Concat0 { parts: Vec<usize> },
}

struct MatMulInfo {
    a: usize,
    b: usize,
    trans_b: bool,
    batch: usize,
    broadcast_b: bool,
    m: usize,
    k: usize,
    n: usize,
}

struct ConvInfo<E> {
    x: usize,
    w: usize,
    geom: ConvGeom,
    cols: Option<Vec<E>>,
}

#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

struct GroupNormInfo<E> {
    x: usize,
    gamma: usize,
    beta: usize,
    groups: usize,
    xhat: Vec<E>,
    rstd: Vec<E>,
}

struct Node<E> {
    value: Arc<Tensor<E>>,
    requires_grad: bool,
    op: Op<E>,
}

/// A recording of one differentiable computation.
///
/// A tape is single-threaded; build independent tapes on independent
/// threads.
pub struct Tape<E: Real = f32> {
    nodes: RefCell<Vec<Node<E>>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, E: Real = f32> {
    tape: &'t Tape<E>,
    id: usize,
}

impl<E: Real> std::fmt::Debug for Var<'_, E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<E: Real> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Real> Gradients<E> {
    /// Gradient w.r.t. `var`; zeros when `var` is unreachable from the loss.
    pub fn wrt(&self, var: Var<'_, E>) -> Tensor<E> {
        match self.grads.get(var.id).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&var.shape()),
        }
    }

    pub fn get(&self, var: Var<'_, E>) -> Option<&Tensor<E>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }
}

impl<E: Real> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Real> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Input leaf. `requires_grad` leaves receive gradients on backward.
    pub fn leaf(&self, value: Tensor<E>, requires_grad: bool) -> Var<'_, E> {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    /// Handle to an existing node by id.
    pub fn var_at(&self, id: usize) -> Var<'_, E> {
        assert!(id < self.len(), "node {id} not on tape");
        Var { tape: self, id }
    }

    pub fn constant(&self, value: Tensor<E>) -> Var<'_, E> {
        self.leaf(value, false)
    }

    /// Leaf sharing an existing allocation (model parameters).
    pub fn leaf_shared(&self, value: Arc<Tensor<E>>, requires_grad: bool) -> Var<'_, E> {
        self.push(value, requires_grad, Op::Leaf)
    }

    fn push(&self, value: Arc<Tensor<E>>, requires_grad: bool, op: Op<E>) -> Var<'_, E> {
        let mut nodes = self.nodes.borrow_mut();
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push_checked(
        &self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<E>,
        requires_grad: bool,
        op: Op<E>,
    ) -> Result<Var<'_, E>> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let t = Tensor::from_parts_unchecked(shape, data)?;
        Ok(self.push(Arc::new(t), requires_grad, op))
    }

    fn value(&self, id: usize) -> Arc<Tensor<E>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_, E>) -> Result<Gradients<E>> {
        assert!(std::ptr::eq(loss.tape, self), "loss belongs to another tape");
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<E>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(loss_node.value.shape(), E::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
            // Keep gradients of interior nodes around for inspection.
            grads[id] = Some(g);
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(TensorError::NonFinite { op: "backward" });
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<E: Real>(grads: &mut [Option<Tensor<E>>], nodes: &[Node<E>], id: usize, delta: Tensor<E>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a = *a + *b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn with_shape<E: Real>(shape: &[usize], data: Vec<E>) -> Tensor<E> {
    Tensor::from_parts_unchecked(shape.to_vec(), data).expect("backward shapes are consistent")
}

fn backprop<E: Real>(nodes: &[Node<E>], node: &Node<E>, g: &Tensor<E>, grads: &mut [Option<Tensor<E>>]) {
    let val = |id: usize| -> &Tensor<E> { &nodes[id].value };
    let gd = g.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            let neg = gd.iter().map(|&v| -v).collect();
            accumulate(grads, nodes, *b, with_shape(g.shape(), neg));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let da = gd.iter().zip(vb.data()).map(|(&g, &y)| g * y).collect();
            let db = gd.iter().zip(va.data()).map(|(&g, &x)| g * x).collect();
            accumulate(grads, nodes, *a, with_shape(g.shape(), da));
            accumulate(grads, nodes, *b, with_shape(g.shape(), db));
        }
        Op::Scale(x, s) => {
            let dx = gd.iter().map(|&v| v * *s).collect();
            accumulate(grads, nodes, *x, with_shape(g.shape(), dx));
        }
        Op::RowBias { x, bias } => {
            accumulate(grads, nodes, *x, g.clone());
            let c = val(*bias).len();
            let mut db = vec![E::zero(); c];
            for row in gd.chunks(c) {
                for (d, &v) in db.iter_mut().zip(row) {
                    *d = *d + v;
                }
            }
            accumulate(grads, nodes, *bias, with_shape(val(*bias).shape(), db));
        }
        Op::ChannelBias { x, bias } => {
            accumulate(grads, nodes, *x, g.clone());
            let c = val(*bias).len();
            let plane = gd.len() / c;
            let db = gd.chunks(plane).map(|ch| ch.iter().copied().sum()).collect();
            accumulate(grads, nodes, *bias, with_shape(val(*bias).shape(), db));
        }
        Op::MatMul(info) => matmul_backward(nodes, info, g, grads),
        Op::Permute { x, perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let dx = g.permute(&inv).expect("inverse permutation is valid");
            accumulate(grads, nodes, *x, dx);
        }
        Op::Reshape { x } => {
            accumulate(grads, nodes, *x, with_shape(val(*x).shape(), gd.to_vec()));
        }
        Op::Softmax { x } => {
            let y = node.value.data();
            let last = *node.value.shape().last().unwrap();
            let mut dx = vec![E::zero(); y.len()];
            for ((yr, gr), dr) in y.chunks(last).zip(gd.chunks(last)).zip(dx.chunks_mut(last)) {
                let dot: E = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for ((d, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                    *d = yi * (gi - dot);
                }
            }
            accumulate(grads, nodes, *x, with_shape(g.shape(), dx));
        }
        Op::Silu { x } => {
            let dx = val(*x)
                .data()
                .iter()
                .zip(gd)
                .map(|(&v, &gv)| {
                    let s = sigmoid(v);
                    gv * s * (E::one() + v * (E::one() - s))
                })
                .collect();
            accumulate(grads, nodes, *x, with_shape(g.shape(), dx));
        }
        Op::Sum { x } => {
            let shape = val(*x).shape().to_vec();
            accumulate(grads, nodes, *x, Tensor::full(&shape, gd[0]));
        }
        Op::Mean { x } => {
            let v = val(*x);
            let n = E::from_usize(v.len()).unwrap();
            accumulate(grads, nodes, *x, Tensor::full(v.shape(), gd[0] / n));
        }
        Op::L1Mean { a, b } => {
            let (va, vb) = (val(*a), val(*b));
            let scale = gd[0] / E::from_usize(va.len()).unwrap();
            let da: Vec<E> = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| sign(x - y) * scale)
                .collect();
            let db = da.iter().map(|&v| -v).collect();
            accumulate(grads, nodes, *a, with_shape(va.shape(), da));
            accumulate(grads, nodes, *b, with_shape(vb.shape(), db));
        }
        Op::MseMean { a, b } => {
            let (va, vb) = (val(*a), val(*b));
            let scale = gd[0] * E::from_f64_lossy(2.0) / E::from_usize(va.len()).unwrap();
            let da: Vec<E> = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| (x - y) * scale)
                .collect();
            let db = da.iter().map(|&v| -v).collect();
            accumulate(grads, nodes, *a, with_shape(va.shape(), da));
            accumulate(grads, nodes, *b, with_shape(vb.shape(), db));
        }
        Op::Conv2d(info) => conv_backward(nodes, info, g, grads),
        Op::GroupNorm(info) => group_norm_backward(nodes, info, g, grads),
        Op::Upsample2x { x } => {
            let shape = val(*x).shape().to_vec();
            let (c, h, w) = (shape[0], shape[1], shape[2]);
            let mut dx = vec![E::zero(); c * h * w];
            for ch in 0..c {
                for i in 0..2 * h {
                    for j in 0..2 * w {
                        let o = (ch * h + i / 2) * w + j / 2;
                        dx[o] = dx[o] + gd[(ch * 2 * h + i) * 2 * w + j];
                    }
                }
            }
            accumulate(grads, nodes, *x, with_shape(&shape, dx));
        }
        Op::Concat0 { parts } => {
            let mut offset = 0;
            for &p in parts {
                let v = val(p);
                let n = v.len();
                accumulate(grads, nodes, p, with_shape(v.shape(), gd[offset..offset + n].to_vec()));
                offset += n;
            }
        }
    }
}

fn sign<E: Real>(v: E) -> E {
    // |x| has derivative 0 at the kink.
    if v > E::zero() {
        E::one()
    } else if v < E::zero() {
        -E::one()
    } else {
        E::zero()
    }
}

fn sigmoid<E: Real>(v: E) -> E {
    E::one() / (E::one() + (-v).exp())
}

fn matmul_backward<E: Real>(nodes: &[Node<E>], info: &MatMulInfo, g: &Tensor<E>, grads: &mut [Option<Tensor<E>>]) {
    let MatMulInfo {
        a,
        b,
        trans_b,
        batch,
        broadcast_b,
        m,
        k,
        n,
    } = *info;
    let va = &nodes[a].value;
    let vb = &nodes[b].value;
    let gd = g.data();
    if nodes[a].requires_grad {
        // dA = dC · op(B)^T
        let mut da = vec![E::zero(); va.len()];
        if broadcast_b {
            matmul_into(&mut da, gd, false, vb.data(), !trans_b, batch * m, n, k, false);
        } else {
            for bi in 0..batch {
                matmul_into(
                    &mut da[bi * m * k..(bi + 1) * m * k],
                    &gd[bi * m * n..(bi + 1) * m * n],
                    false,
                    &vb.data()[bi * k * n..(bi + 1) * k * n],
                    !trans_b,
                    m,
                    n,
                    k,
                    false,
                );
            }
        }
        accumulate(grads, nodes, a, with_shape(va.shape(), da));
    }
    if nodes[b].requires_grad {
        let mut db = vec![E::zero(); vb.len()];
        let (ad, bd) = (va.data(), &mut db);
        if broadcast_b {
            if trans_b {
                // B stored n×k: dB = dC^T · A
                matmul_into(bd, gd, true, ad, false, n, batch * m, k, false);
            } else {
                matmul_into(bd, ad, true, gd, false, k, batch * m, n, false);
            }
        } else {
            for bi in 0..batch {
                let a_s = &ad[bi * m * k..(bi + 1) * m * k];
                let g_s = &gd[bi * m * n..(bi + 1) * m * n];
                let out = &mut bd[bi * k * n..(bi + 1) * k * n];
                if trans_b {
                    matmul_into(out, g_s, true, a_s, false, n, m, k, false);
                } else {
                    matmul_into(out, a_s, true, g_s, false, k, m, n, false);
                }
            }
        }
        accumulate(grads, nodes, b, with_shape(vb.shape(), db));
    }
}

fn im2col<E: Real>(x: &[E], geom: &ConvGeom) -> Vec<E> {
    let ConvGeom {
        cin,
        h,
        w,
        k,
        stride,
        pad,
        ho,
        wo,
        ..
    } = *geom;
    let mut cols = vec![E::zero(); cin * k * k * ho * wo];
    for c in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let src_row = &x[(c * h + ii as usize) * w..(c * h + ii as usize + 1) * w];
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && jj < w as isize {
                            dst[oi * wo + oj] = src_row[jj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<E: Real>(cols: &[E], geom: &ConvGeom) -> Vec<E> {
    let ConvGeom {
        cin,
        h,
        w,
        k,
        stride,
        pad,
        ho,
        wo,
        ..
    } = *geom;
    let mut x = vec![E::zero(); cin * h * w];
    for c in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let base = (c * h + ii as usize) * w;
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && jj < w as isize {
                            x[base + jj as usize] = x[base + jj as usize] + src[oi * wo + oj];
                        }
                    }
                }
            }
        }
    }
    x
}

fn is_pointwise(geom: &ConvGeom) -> bool {
    geom.k == 1 && geom.stride == 1 && geom.pad == 0
}

fn conv_backward<E: Real>(nodes: &[Node<E>], info: &ConvInfo<E>, g: &Tensor<E>, grads: &mut [Option<Tensor<E>>]) {
    let geom = &info.geom;
    let vx = &nodes[info.x].value;
    let vw = &nodes[info.w].value;
    let ckk = geom.cin * geom.k * geom.k;
    let npix = geom.ho * geom.wo;
    if nodes[info.w].requires_grad {
        let cols: &[E] = match &info.cols {
            Some(c) => c,
            None => vx.data(),
        };
        let mut dw = vec![E::zero(); vw.len()];
        matmul_into(&mut dw, g.data(), false, cols, true, geom.cout, npix, ckk, false);
        accumulate(grads, nodes, info.w, with_shape(vw.shape(), dw));
    }
    if nodes[info.x].requires_grad {
        let mut dcols = vec![E::zero(); ckk * npix];
        matmul_into(&mut dcols, vw.data(), true, g.data(), false, ckk, geom.cout, npix, false);
        let dx = if is_pointwise(geom) { dcols } else { col2im(&dcols, geom) };
        accumulate(grads, nodes, info.x, with_shape(vx.shape(), dx));
    }
}

fn group_norm_backward<E: Real>(
    nodes: &[Node<E>],
    info: &GroupNormInfo<E>,
    g: &Tensor<E>,
    grads: &mut [Option<Tensor<E>>],
) {
    let vx = &nodes[info.x].value;
    let gamma = nodes[info.gamma].value.data();
    let c = gamma.len();
    let plane = vx.len() / c;
    let cpg = c / info.groups;
    let gd = g.data();
    let xhat = &info.xhat;

    if nodes[info.gamma].requires_grad || nodes[info.beta].requires_grad {
        let mut dgamma = vec![E::zero(); c];
        let mut dbeta = vec![E::zero(); c];
        for ch in 0..c {
            let r = ch * plane..(ch + 1) * plane;
            dgamma[ch] = gd[r.clone()].iter().zip(&xhat[r.clone()]).map(|(&a, &b)| a * b).sum();
            dbeta[ch] = gd[r].iter().copied().sum();
        }
        accumulate(grads, nodes, info.gamma, with_shape(&[c], dgamma));
        accumulate(grads, nodes, info.beta, with_shape(&[c], dbeta));
    }
    if nodes[info.x].requires_grad {
        let mut dx = vec![E::zero(); vx.len()];
        let count = E::from_usize(cpg * plane).unwrap();
        for grp in 0..info.groups {
            let r = grp * cpg * plane..(grp + 1) * cpg * plane;
            let mut sum_d = E::zero();
            let mut sum_dx = E::zero();
            for i in r.clone() {
                let d = gd[i] * gamma[i / plane];
                sum_d = sum_d + d;
                sum_dx = sum_dx + d * xhat[i];
            }
            let mean_d = sum_d / count;
            let mean_dx = sum_dx / count;
            let rstd = info.rstd[grp];
            for i in r {
                let d = gd[i] * gamma[i / plane];
                dx[i] = rstd * (d - mean_d - xhat[i] * mean_dx);
            }
        }
        accumulate(grads, nodes, info.x, with_shape(vx.shape(), dx));
    }
}

impl<'t, E: Real> Var<'t, E> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<E> {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor<E>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs(self.id)
    }

    fn same_tape(&self, other: &Var<'t, E>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    fn binary(
        self,
        other: Var<'t, E>,
        name: &'static str,
        f: impl Fn(E, E) -> E,
        op: fn(usize, usize) -> Op<E>,
    ) -> Result<Var<'t, E>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(TensorError::shape(name, a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.requires_grad() || other.requires_grad();
        self.tape
            .push_checked(name, a.shape().to_vec(), data, rg, op(self.id, other.id))
    }

    pub fn add(self, other: Var<'t, E>) -> Result<Var<'t, E>> {
        self.binary(other, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(self, other: Var<'t, E>) -> Result<Var<'t, E>> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(self, other: Var<'t, E>) -> Result<Var<'t, E>> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn scale(self, s: E) -> Result<Var<'t, E>> {
        let a = self.value();
        let data = a.data().iter().map(|&x| x * s).collect();
        self.tape
            .push_checked("scale", a.shape().to_vec(), data, self.requires_grad(), Op::Scale(self.id, s))
    }

    /// Adds a `[C]` bias along the last axis.
    pub fn add_row_bias(self, bias: Var<'t, E>) -> Result<Var<'t, E>> {
        self.same_tape(&bias);
        let (x, b) = (self.value(), bias.value());
        let c = *x.shape().last().unwrap();
        if b.shape() != [c] {
            return Err(TensorError::shape("add_row_bias", x.shape(), b.shape()));
        }
        let data = x
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(b.data()).map(|(&v, &bb)| v + bb))
            .collect();
        let rg = self.requires_grad() || bias.requires_grad();
        self.tape.push_checked(
            "add_row_bias",
            x.shape().to_vec(),
            data,
            rg,
            Op::RowBias {
                x: self.id,
                bias: bias.id,
            },
        )
    }

    /// Adds a `[C]` bias along the first axis of a `[C, ...]` tensor.
    pub fn add_channel_bias(self, bias: Var<'t, E>) -> Result<Var<'t, E>> {
        self.same_tape(&bias);
        let (x, b) = (self.value(), bias.value());
        let c = x.shape()[0];
        if b.shape() != [c] {
            return Err(TensorError::shape("add_channel_bias", x.shape(), b.shape()));
        }
        let plane = x.len() / c;
        let data = x
            .data()
            .chunks(plane)
            .zip(b.data())
            .flat_map(|(ch, &bb)| ch.iter().map(move |&v| v + bb))
            .collect();
        let rg = self.requires_grad() || bias.requires_grad();
        self.tape.push_checked(
            "add_channel_bias",
            x.shape().to_vec(),
            data,
            rg,
            Op::ChannelBias {
                x: self.id,
                bias: bias.id,
            },
        )
    }

    /// Batched matrix product `[.., p, q] × [.., q, r] → [.., p, r]`.
    ///
    /// Batch extents must match exactly, or `other` may be a plain matrix
    /// that is broadcast over the batch of `self`.
    pub fn matmul(self, other: Var<'t, E>) -> Result<Var<'t, E>> {
        self.matmul_impl(other, false)
    }

    /// `self · otherᵀ` on the last two axes.
    pub fn matmul_t(self, other: Var<'t, E>) -> Result<Var<'t, E>> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(self, other: Var<'t, E>, trans_b: bool) -> Result<Var<'t, E>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        let op_name = if trans_b { "matmul_t" } else { "matmul" };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(TensorError::shape(op_name, sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(TensorError::shape(op_name, sa, sb));
        }
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let broadcast_b = batch_b.is_empty();
        if !broadcast_b && batch_a != batch_b {
            return Err(TensorError::shape(op_name, sa, sb));
        }
        let batch: usize = batch_a.iter().product();
        let mut out = vec![E::zero(); batch * m * n];
        if broadcast_b {
            matmul_into(&mut out, a.data(), false, b.data(), trans_b, batch * m, k, n, false);
        } else {
            for bi in 0..batch {
                matmul_into(
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    &a.data()[bi * m * k..(bi + 1) * m * k],
                    false,
                    &b.data()[bi * k * n..(bi + 1) * k * n],
                    trans_b,
                    m,
                    k,
                    n,
                    false,
                );
            }
        }
        let mut shape = batch_a.to_vec();
        shape.extend([m, n]);
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push_checked(
            op_name,
            shape,
            out,
            rg,
            Op::MatMul(MatMulInfo {
                a: self.id,
                b: other.id,
                trans_b,
                batch,
                broadcast_b,
                m,
                k,
                n,
            }),
        )
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, E>> {
        let out = self.value().permute(perm)?;
        Ok(self.tape.push(
            Arc::new(out),
            self.requires_grad(),
            Op::Permute {
                x: self.id,
                perm: perm.to_vec(),
            },
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, E>> {
        let out = self.value().reshape(shape)?;
        Ok(self
            .tape
            .push(Arc::new(out), self.requires_grad(), Op::Reshape { x: self.id }))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_lastdim(self) -> Result<Var<'t, E>> {
        let x = self.value();
        let last = *x.shape().last().unwrap();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(last) {
            let max = row.iter().copied().fold(E::neg_infinity(), E::max);
            let mut total = E::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        self.tape.push_checked(
            "softmax_lastdim",
            x.shape().to_vec(),
            out,
            self.requires_grad(),
            Op::Softmax { x: self.id },
        )
    }

    pub fn silu(self) -> Result<Var<'t, E>> {
        let x = self.value();
        let data = x.data().iter().map(|&v| v * sigmoid(v)).collect();
        self.tape
            .push_checked("silu", x.shape().to_vec(), data, self.requires_grad(), Op::Silu { x: self.id })
    }

    pub fn sum(self) -> Result<Var<'t, E>> {
        let s = self.value().sum();
        self.tape
            .push_checked("sum", vec![1], vec![s], self.requires_grad(), Op::Sum { x: self.id })
    }

    pub fn mean(self) -> Result<Var<'t, E>> {
        let s = self.value().mean();
        self.tape
            .push_checked("mean", vec![1], vec![s], self.requires_grad(), Op::Mean { x: self.id })
    }

    /// Mean absolute difference over all elements.
    pub fn l1_mean(self, other: Var<'t, E>) -> Result<Var<'t, E>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let v = l1_mean(&a, &b)?;
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push_checked(
            "l1_mean",
            vec![1],
            vec![v],
            rg,
            Op::L1Mean {
                a: self.id,
                b: other.id,
            },
        )
    }

    /// Mean squared difference over all elements.
    pub fn mse_mean(self, other: Var<'t, E>) -> Result<Var<'t, E>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(TensorError::shape("mse_mean", a.shape(), b.shape()));
        }
        let total: E = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let v = total / E::from_usize(a.len()).unwrap();
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push_checked(
            "mse_mean",
            vec![1],
            vec![v],
            rg,
            Op::MseMean {
                a: self.id,
                b: other.id,
            },
        )
    }

    /// 2-D convolution of a `[Cin, H, W]` map with `[Cout, Cin, k, k]` weights.
    pub fn conv2d(self, weight: Var<'t, E>, stride: usize, pad: usize) -> Result<Var<'t, E>> {
        self.same_tape(&weight);
        let (x, w) = (self.value(), weight.value());
        let (sx, sw) = (x.shape(), w.shape());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] || stride == 0 {
            return Err(TensorError::shape("conv2d", sx, sw));
        }
        let (cin, h, wd) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(TensorError::dim("conv2d", format!("kernel {k} larger than padded input {sx:?}")));
        }
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            cout,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        };
        let cols = if is_pointwise(&geom) {
            None
        } else {
            Some(im2col(x.data(), &geom))
        };
        let npix = geom.ho * geom.wo;
        let mut out = vec![E::zero(); cout * npix];
        let col_data: &[E] = cols.as_deref().unwrap_or(x.data());
        matmul_into(&mut out, w.data(), false, col_data, false, cout, cin * k * k, npix, false);
        let rg = self.requires_grad() || weight.requires_grad();
        let keep_cols = if weight.requires_grad() { cols } else { None };
        self.tape.push_checked(
            "conv2d",
            vec![cout, geom.ho, geom.wo],
            out,
            rg,
            Op::Conv2d(Box::new(ConvInfo {
                x: self.id,
                w: weight.id,
                geom,
                cols: keep_cols,
            })),
        )
    }

    /// Group normalization of a `[C, ...]` tensor with per-channel affine.
    pub fn group_norm(self, groups: usize, gamma: Var<'t, E>, beta: Var<'t, E>) -> Result<Var<'t, E>> {
        self.same_tape(&gamma);
        self.same_tape(&beta);
        let x = self.value();
        let (gv, bv) = (gamma.value(), beta.value());
        let c = x.shape()[0];
        if groups == 0 || c % groups != 0 {
            return Err(TensorError::dim("group_norm", format!("{c} channels not divisible into {groups} groups")));
        }
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(TensorError::shape("group_norm", x.shape(), gv.shape()));
        }
        let plane = x.len() / c;
        let per_group = c / groups * plane;
        let count = E::from_usize(per_group).unwrap();
        let eps = E::from_f64_lossy(GROUP_NORM_EPS);
        let mut xhat = vec![E::zero(); x.len()];
        let mut rstd = vec![E::zero(); groups];
        for grp in 0..groups {
            let src = &x.data()[grp * per_group..(grp + 1) * per_group];
            let mean = src.iter().copied().sum::<E>() / count;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / count;
            let r = E::one() / (var + eps).sqrt();
            rstd[grp] = r;
            for (dst, &v) in xhat[grp * per_group..(grp + 1) * per_group].iter_mut().zip(src) {
                *dst = (v - mean) * r;
            }
        }
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gv.data()[i / plane] + bv.data()[i / plane])
            .collect();
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        self.tape.push_checked(
            "group_norm",
            x.shape().to_vec(),
            out,
            rg,
            Op::GroupNorm(Box::new(GroupNormInfo {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                groups,
                xhat,
                rstd,
            })),
        )
    }

    /// Nearest-neighbour 2× upsampling of a `[C, H, W]` map.
    pub fn upsample2x(self) -> Result<Var<'t, E>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 3 {
            return Err(TensorError::dim("upsample2x", format!("expected [C,H,W], got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut out = vec![E::zero(); c * 4 * h * w];
        for ch in 0..c {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    out[(ch * 2 * h + i) * 2 * w + j] = x.data()[(ch * h + i / 2) * w + j / 2];
                }
            }
        }
        self.tape.push_checked(
            "upsample2x",
            vec![c, 2 * h, 2 * w],
            out,
            self.requires_grad(),
            Op::Upsample2x { x: self.id },
        )
    }

    /// Concatenate along axis 0.
    pub fn concat0(parts: &[Var<'t, E>]) -> Result<Var<'t, E>> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let values: Vec<_> = parts.iter().map(|p| {
            first.same_tape(p);
            p.value()
        }).collect();
        let refs: Vec<&Tensor<E>> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat0(&refs)?;
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(first.tape.push(
            Arc::new(out),
            rg,
            Op::Concat0 {
                parts: parts.iter().map(|p| p.id).collect(),
            },
        ))
    }
}

/// Mean absolute difference of two equally shaped tensors.
pub fn l1_mean<E: Real>(a: &Tensor<E>, b: &Tensor<E>) -> Result<E> {
    if a.shape() != b.shape() {
        return Err(TensorError::shape("l1_mean", a.shape(), b.shape()));
    }
    let total: E = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y).abs()).sum();
    Ok(total / E::from_usize(a.len()).unwrap())
}
