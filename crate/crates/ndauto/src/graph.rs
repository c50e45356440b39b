use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use crate::error::{shape_err, NdError, Result};
use crate::gemm::gemm;
use crate::params::{ParamId, ParamStore};
use crate::{Real, Tensor};

const LAYER_NORM_EPS: Real = 1e-5;
/// Added under the square root of every L2 normalization.
pub const L2_EPS: Real = 1e-8;

/// Geometry of a same-padded, stride-1 square convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvGeom {
    pub fn in_features(&self) -> usize {
        self.in_channels * self.height * self.width
    }
    pub fn out_features(&self) -> usize {
        self.out_channels * self.height * self.width
    }
    pub fn patch(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, Real),
    AddScalar(usize),
    Relu(usize),
    Exp(usize),
    Ln(usize),
    Softplus(usize),
    Square(usize),
    Clamp(usize, Real, Real),
    Minimum(usize, usize),
    Sum(usize),
    Mean(usize),
    RowSum(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<Real>,
        rstd: Vec<Real>,
    },
    L2Normalize {
        x: usize,
        norms: Vec<Real>,
    },
    ConcatCols(usize, usize),
    LogSoftmax(usize),
    GatherCols(usize, Vec<usize>),
    IndexRows(usize, Vec<usize>),
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeom,
        cols: Vec<Real>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run tape. Build one per forward pass and drop it afterwards.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, usize>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Grads {
    node: Vec<Option<Tensor>>,
    params: HashMap<ParamId, usize>,
}

impl Grads {
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.node.get(v.id).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|&n| self.node[n].as_ref())
    }

    /// One gradient per store slice; unreachable parameters get zeros.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| match self.param(id) {
                Some(g) => g.clone(),
                None => Tensor::zeros(store.get(id).shape()),
            })
            .collect()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A value that never receives gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives gradient iff the tensor has `requires_grad` set.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        let g = t.requires_grad();
        self.push(t, Op::Leaf, g)
    }

    /// Bind a parameter; binding the same id twice returns the same node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&n) = self.params.borrow().get(&id) {
            return Var { graph: self, id: n };
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.params.borrow_mut().insert(id, v.id);
        v
    }

    /// Bind a parameter as a constant (frozen; no gradient).
    pub fn frozen(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        self.constant(store.get(id).clone())
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Reverse sweep from a scalar `loss`. Gradients are kept for leaves
    /// only; leaves that do not influence the loss get no entry and
    /// [`Grads::for_store`] turns that into zeros.
    pub fn backward(&self, loss: Var<'_>) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.id].value.shape().to_vec();
        if nodes[loss.id].value.len() != 1 {
            return Err(NdError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Vec<Real>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);

        for i in (0..=loss.id).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &nodes[i];
            let mut acc = |j: usize, g: Vec<Real>| {
                if !nodes[j].needs_grad {
                    return;
                }
                match &mut grads[j] {
                    Some(existing) => {
                        for (a, b) in existing.iter_mut().zip(g) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            };
            let val = |j: usize| &nodes[j].value;
            let y = &node.value;
            match &node.op {
                Op::Leaf => grads[i] = Some(dy),
                Op::MatMul(a, b) => {
                    let (m, k, n) = (val(*a).rows(), val(*a).cols(), val(*b).cols());
                    if nodes[*a].needs_grad {
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, &dy, false, val(*b).data(), true, 0.0, &mut da);
                        acc(*a, da);
                    }
                    if nodes[*b].needs_grad {
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, val(*a).data(), true, &dy, false, 0.0, &mut db);
                        acc(*b, db);
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, dy.clone());
                    acc(*b, dy);
                }
                Op::Sub(a, b) => {
                    acc(*a, dy.clone());
                    acc(*b, dy.iter().map(|g| -g).collect());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a).data(), val(*b).data());
                    acc(*a, dy.iter().zip(bv).map(|(g, x)| g * x).collect());
                    acc(*b, dy.iter().zip(av).map(|(g, x)| g * x).collect());
                }
                Op::AddRow(a, r) => {
                    let n = y.cols();
                    let mut dr = vec![0.0; n];
                    for row in dy.chunks(n) {
                        for (d, g) in dr.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    acc(*a, dy);
                    acc(*r, dr);
                }
                Op::MulRow(a, r) => {
                    let n = y.cols();
                    let (av, rv) = (val(*a).data(), val(*r).data());
                    let mut dr = vec![0.0; n];
                    let mut da = vec![0.0; dy.len()];
                    for (idx, g) in dy.iter().enumerate() {
                        let c = idx % n;
                        dr[c] += g * av[idx];
                        da[idx] = g * rv[c];
                    }
                    acc(*a, da);
                    acc(*r, dr);
                }
                Op::Scale(a, c) => acc(*a, dy.iter().map(|g| g * c).collect()),
                Op::AddScalar(a) => acc(*a, dy),
                Op::Relu(a) => {
                    let xv = val(*a).data();
                    acc(
                        *a,
                        dy.iter()
                            .zip(xv)
                            .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                            .collect(),
                    );
                }
                Op::Exp(a) => acc(*a, dy.iter().zip(y.data()).map(|(g, e)| g * e).collect()),
                Op::Ln(a) => acc(*a, dy.iter().zip(val(*a).data()).map(|(g, x)| g / x).collect()),
                Op::Softplus(a) => acc(
                    *a,
                    dy.iter().zip(val(*a).data()).map(|(g, x)| g * sigmoid(*x)).collect(),
                ),
                Op::Square(a) => acc(*a, dy.iter().zip(val(*a).data()).map(|(g, x)| 2.0 * g * x).collect()),
                Op::Clamp(a, lo, hi) => acc(
                    *a,
                    dy.iter()
                        .zip(val(*a).data())
                        .map(|(g, x)| if *x >= *lo && *x <= *hi { *g } else { 0.0 })
                        .collect(),
                ),
                Op::Minimum(a, b) => {
                    let (av, bv) = (val(*a).data(), val(*b).data());
                    let mut da = vec![0.0; dy.len()];
                    let mut db = vec![0.0; dy.len()];
                    for k in 0..dy.len() {
                        if av[k] <= bv[k] {
                            da[k] = dy[k];
                        } else {
                            db[k] = dy[k];
                        }
                    }
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::Sum(a) => acc(*a, vec![dy[0]; val(*a).len()]),
                Op::Mean(a) => {
                    let n = val(*a).len();
                    acc(*a, vec![dy[0] / n as Real; n]);
                }
                Op::RowSum(a) => {
                    let n = val(*a).cols();
                    let mut da = Vec::with_capacity(val(*a).len());
                    for g in &dy {
                        da.extend(std::iter::repeat_n(*g, n));
                    }
                    acc(*a, da);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let n = y.cols();
                    let gv = val(*gain).data();
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    let mut dx = vec![0.0; dy.len()];
                    for (r, (dyr, xh)) in dy.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for c in 0..n {
                            dg[c] += dyr[c] * xh[c];
                            db[c] += dyr[c];
                            let dxh = dyr[c] * gv[c];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[c];
                        }
                        mean_dxh /= n as Real;
                        mean_dxh_xh /= n as Real;
                        let out = &mut dx[r * n..(r + 1) * n];
                        for c in 0..n {
                            let dxh = dyr[c] * gv[c];
                            out[c] = rstd[r] * (dxh - mean_dxh - xh[c] * mean_dxh_xh);
                        }
                    }
                    acc(*x, dx);
                    acc(*gain, dg);
                    acc(*bias, db);
                }
                Op::L2Normalize { x, norms } => {
                    let n = y.cols();
                    let mut dx = vec![0.0; dy.len()];
                    for (r, (dyr, yr)) in dy.chunks(n).zip(y.data().chunks(n)).enumerate() {
                        let dot: Real = dyr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            dx[r * n + c] = (dyr[c] - yr[c] * dot) / norms[r];
                        }
                    }
                    acc(*x, dx);
                }
                Op::ConcatCols(a, b) => {
                    let (p, q) = (val(*a).cols(), val(*b).cols());
                    let mut da = Vec::with_capacity(val(*a).len());
                    let mut db = Vec::with_capacity(val(*b).len());
                    for row in dy.chunks(p + q) {
                        da.extend_from_slice(&row[..p]);
                        db.extend_from_slice(&row[p..]);
                    }
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::LogSoftmax(a) => {
                    let n = y.cols();
                    let mut dx = vec![0.0; dy.len()];
                    for (r, (dyr, yr)) in dy.chunks(n).zip(y.data().chunks(n)).enumerate() {
                        let s: Real = dyr.iter().sum();
                        for c in 0..n {
                            dx[r * n + c] = dyr[c] - yr[c].exp() * s;
                        }
                    }
                    acc(*a, dx);
                }
                Op::GatherCols(a, idx) => {
                    let n = val(*a).cols();
                    let mut da = vec![0.0; val(*a).len()];
                    for (r, &c) in idx.iter().enumerate() {
                        da[r * n + c] += dy[r];
                    }
                    acc(*a, da);
                }
                Op::IndexRows(a, idx) => {
                    let n = val(*a).cols();
                    let mut da = vec![0.0; val(*a).len()];
                    for (k, &r) in idx.iter().enumerate() {
                        for c in 0..n {
                            da[r * n + c] += dy[k * n + c];
                        }
                    }
                    acc(*a, da);
                }
                Op::Conv2d { x, w, b, geom, cols } => {
                    let hw = geom.height * geom.width;
                    let batch = val(*x).rows();
                    let co = geom.out_channels;
                    // dy is [B, Cout, HW]; gemm wants [B*HW, Cout].
                    let mut dyt = vec![0.0; batch * hw * co];
                    let mut dbias = vec![0.0; co];
                    for s in 0..batch {
                        for c in 0..co {
                            for p in 0..hw {
                                let g = dy[s * co * hw + c * hw + p];
                                dyt[(s * hw + p) * co + c] = g;
                                dbias[c] += g;
                            }
                        }
                    }
                    let patch = geom.patch();
                    if nodes[*w].needs_grad {
                        let mut dw = vec![0.0; patch * co];
                        gemm(patch, batch * hw, co, cols, true, &dyt, false, 0.0, &mut dw);
                        acc(*w, dw);
                    }
                    acc(*b, dbias);
                    if nodes[*x].needs_grad {
                        let mut dcols = vec![0.0; batch * hw * patch];
                        gemm(
                            batch * hw,
                            co,
                            patch,
                            &dyt,
                            false,
                            val(*w).data(),
                            true,
                            0.0,
                            &mut dcols,
                        );
                        acc(*x, col2im(&dcols, batch, geom));
                    }
                }
            }
        }

        let params = self.params.borrow().clone();
        let node = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| g.map(|d| Tensor::new(n.value.shape().to_vec(), d).expect("grad shape")))
            .collect();
        Ok(Grads { node, params })
    }
}

fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: Real) -> Real {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn im2col(x: &[Real], batch: usize, g: &ConvGeom) -> Vec<Real> {
    let (h, w, k) = (g.height as isize, g.width as isize, g.kernel as isize);
    let pad = k / 2;
    let patch = g.patch();
    let mut cols = vec![0.0; batch * (h * w) as usize * patch];
    for s in 0..batch {
        let xs = &x[s * g.in_features()..(s + 1) * g.in_features()];
        for py in 0..h {
            for px in 0..w {
                let row = (s * (h * w) as usize + (py * w + px) as usize) * patch;
                let mut col = 0;
                for c in 0..g.in_channels {
                    for ky in 0..k {
                        for kx in 0..k {
                            let (yy, xx) = (py + ky - pad, px + kx - pad);
                            if yy >= 0 && yy < h && xx >= 0 && xx < w {
                                cols[row + col] = xs[c * (h * w) as usize + (yy * w + xx) as usize];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[Real], batch: usize, g: &ConvGeom) -> Vec<Real> {
    let (h, w, k) = (g.height as isize, g.width as isize, g.kernel as isize);
    let pad = k / 2;
    let patch = g.patch();
    let mut x = vec![0.0; batch * g.in_features()];
    for s in 0..batch {
        let xs = &mut x[s * g.in_features()..(s + 1) * g.in_features()];
        for py in 0..h {
            for px in 0..w {
                let row = (s * (h * w) as usize + (py * w + px) as usize) * patch;
                let mut col = 0;
                for c in 0..g.in_channels {
                    for ky in 0..k {
                        for kx in 0..k {
                            let (yy, xx) = (py + ky - pad, px + kx - pad);
                            if yy >= 0 && yy < h && xx >= 0 && xx < w {
                                xs[c * (h * w) as usize + (yy * w + xx) as usize] += cols[row + col];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    x
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Ref<'g, Tensor> {
        Ref::map(self.graph.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn item(&self) -> Real {
        self.value().item()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.value().rows()
    }

    pub fn cols(&self) -> usize {
        self.value().cols()
    }

    /// Same value, cut off from the tape.
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant(self.to_tensor())
    }

    fn unary(&self, op: Op, f: impl Fn(Real) -> Real) -> Var<'g> {
        let out = self.value().map(f);
        let ng = self.graph.needs(&[self.id]);
        self.graph.push(out, op, ng)
    }

    fn binary_same(
        &self,
        other: Var<'g>,
        name: &'static str,
        op: Op,
        f: impl Fn(Real, Real) -> Real,
    ) -> Result<Var<'g>> {
        let out = {
            let (a, b) = (self.value(), other.value());
            if a.shape() != b.shape() {
                return Err(shape_err(name, format!("{:?} vs {:?}", a.shape(), b.shape())));
            }
            let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        let ng = self.graph.needs(&[self.id, other.id]);
        Ok(self.graph.push(out, op, ng))
    }

    pub fn matmul(&self, other: Var<'g>) -> Result<Var<'g>> {
        let out = {
            let (a, b) = (self.value(), other.value());
            if a.cols() != b.rows() {
                return Err(shape_err("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
            }
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut c);
            Tensor::from_rows(m, n, c)
        };
        let ng = self.graph.needs(&[self.id, other.id]);
        Ok(self.graph.push(out, Op::MatMul(self.id, other.id), ng))
    }

    pub fn add(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary_same(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary_same(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary_same(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn minimum(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary_same(other, "minimum", Op::Minimum(self.id, other.id), Real::min)
    }

    fn row_broadcast(
        &self,
        row: Var<'g>,
        name: &'static str,
        op: Op,
        f: impl Fn(Real, Real) -> Real,
    ) -> Result<Var<'g>> {
        let out = {
            let (a, r) = (self.value(), row.value());
            if r.rows() != 1 || r.cols() != a.cols() {
                return Err(shape_err(name, format!("{:?} with row {:?}", a.shape(), r.shape())));
            }
            let n = a.cols();
            let rv = r.data();
            let data = a.data().iter().enumerate().map(|(i, x)| f(*x, rv[i % n])).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        let ng = self.graph.needs(&[self.id, row.id]);
        Ok(self.graph.push(out, op, ng))
    }

    /// `self[i, :] + row[0, :]` for every row.
    pub fn add_row(&self, row: Var<'g>) -> Result<Var<'g>> {
        self.row_broadcast(row, "add_row", Op::AddRow(self.id, row.id), |a, b| a + b)
    }

    /// `self[i, :] * row[0, :]` for every row.
    pub fn mul_row(&self, row: Var<'g>) -> Result<Var<'g>> {
        self.row_broadcast(row, "mul_row", Op::MulRow(self.id, row.id), |a, b| a * b)
    }

    pub fn scale(&self, c: Real) -> Var<'g> {
        self.unary(Op::Scale(self.id, c), |x| x * c)
    }

    pub fn neg(&self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: Real) -> Var<'g> {
        self.unary(Op::AddScalar(self.id), |x| x + c)
    }

    pub fn relu(&self) -> Var<'g> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn exp(&self) -> Var<'g> {
        self.unary(Op::Exp(self.id), Real::exp)
    }

    pub fn ln(&self) -> Var<'g> {
        self.unary(Op::Ln(self.id), Real::ln)
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&self) -> Var<'g> {
        self.unary(Op::Softplus(self.id), softplus)
    }

    pub fn square(&self) -> Var<'g> {
        self.unary(Op::Square(self.id), |x| x * x)
    }

    pub fn clamp(&self, lo: Real, hi: Real) -> Var<'g> {
        self.unary(Op::Clamp(self.id, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn sum(&self) -> Var<'g> {
        let s = self.value().sum();
        let ng = self.graph.needs(&[self.id]);
        self.graph.push(Tensor::scalar(s), Op::Sum(self.id), ng)
    }

    /// Mean over all entries; the mean of an empty tensor is 0.
    pub fn mean(&self) -> Var<'g> {
        let (s, n) = {
            let v = self.value();
            (v.sum(), v.len())
        };
        let m = if n == 0 { 0.0 } else { s / n as Real };
        let ng = self.graph.needs(&[self.id]);
        self.graph.push(Tensor::scalar(m), Op::Mean(self.id), ng)
    }

    /// Per-row sum, `[m, n] -> [m, 1]`.
    pub fn row_sum(&self) -> Var<'g> {
        let out = {
            let v = self.value();
            let n = v.cols();
            let data: Vec<Real> = v.data().chunks(n.max(1)).map(|r| r.iter().sum()).collect();
            Tensor::from_rows(v.rows(), 1, data)
        };
        let ng = self.graph.needs(&[self.id]);
        self.graph.push(out, Op::RowSum(self.id), ng)
    }

    /// Per-row dot product of two same-shaped matrices, `[m, 1]`.
    pub fn row_dot(&self, other: Var<'g>) -> Result<Var<'g>> {
        Ok(self.mul(other)?.row_sum())
    }

    /// Row-wise layer normalization followed by a per-feature affine map.
    pub fn layer_norm(&self, gain: Var<'g>, bias: Var<'g>) -> Result<Var<'g>> {
        let (out, xhat, rstd) = {
            let (x, g, b) = (self.value(), gain.value(), bias.value());
            let n = x.cols();
            if g.len() != n || b.len() != n {
                return Err(shape_err(
                    "layer_norm",
                    format!("features {n}, gain {:?}, bias {:?}", g.shape(), b.shape()),
                ));
            }
            let mut out = Vec::with_capacity(x.len());
            let mut xhat = Vec::with_capacity(x.len());
            let mut rstd = Vec::with_capacity(x.rows());
            for row in x.data().chunks(n.max(1)) {
                let mean = row.iter().sum::<Real>() / n as Real;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / n as Real;
                let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                rstd.push(r);
                for (c, v) in row.iter().enumerate() {
                    let h = (v - mean) * r;
                    xhat.push(h);
                    out.push(h * g.data()[c] + b.data()[c]);
                }
            }
            (Tensor::new(x.shape().to_vec(), out)?, xhat, rstd)
        };
        let ng = self.graph.needs(&[self.id, gain.id, bias.id]);
        Ok(self.graph.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Scale each row to unit L2 norm, with [`L2_EPS`] under the root.
    pub fn l2_normalize(&self) -> Var<'g> {
        let (out, norms) = {
            let x = self.value();
            let n = x.cols().max(1);
            let mut out = Vec::with_capacity(x.len());
            let mut norms = Vec::with_capacity(x.rows());
            for row in x.data().chunks(n) {
                let nr = (row.iter().map(|v| v * v).sum::<Real>() + L2_EPS).sqrt();
                norms.push(nr);
                out.extend(row.iter().map(|v| v / nr));
            }
            (Tensor::new(x.shape().to_vec(), out).expect("same shape"), norms)
        };
        let ng = self.graph.needs(&[self.id]);
        self.graph.push(out, Op::L2Normalize { x: self.id, norms }, ng)
    }

    pub fn concat_cols(&self, other: Var<'g>) -> Result<Var<'g>> {
        let out = {
            let (a, b) = (self.value(), other.value());
            if a.rows() != b.rows() {
                return Err(shape_err("concat_cols", format!("{:?} and {:?}", a.shape(), b.shape())));
            }
            let (p, q) = (a.cols(), b.cols());
            let mut data = Vec::with_capacity(a.len() + b.len());
            for r in 0..a.rows() {
                data.extend_from_slice(&a.data()[r * p..(r + 1) * p]);
                data.extend_from_slice(&b.data()[r * q..(r + 1) * q]);
            }
            Tensor::from_rows(a.rows(), p + q, data)
        };
        let ng = self.graph.needs(&[self.id, other.id]);
        Ok(self.graph.push(out, Op::ConcatCols(self.id, other.id), ng))
    }

    pub fn log_softmax(&self) -> Var<'g> {
        let out = {
            let x = self.value();
            let n = x.cols().max(1);
            let mut data = Vec::with_capacity(x.len());
            for row in x.data().chunks(n) {
                let mx = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
                let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<Real>().ln();
                data.extend(row.iter().map(|v| v - lse));
            }
            Tensor::new(x.shape().to_vec(), data).expect("same shape")
        };
        let ng = self.graph.needs(&[self.id]);
        self.graph.push(out, Op::LogSoftmax(self.id), ng)
    }

    /// `out[r, 0] = self[r, idx[r]]`.
    pub fn gather_cols(&self, idx: &[usize]) -> Result<Var<'g>> {
        let out = {
            let x = self.value();
            if idx.len() != x.rows() {
                return Err(shape_err(
                    "gather_cols",
                    format!("{} indices for {} rows", idx.len(), x.rows()),
                ));
            }
            let n = x.cols();
            let mut data = Vec::with_capacity(idx.len());
            for (r, &c) in idx.iter().enumerate() {
                if c >= n {
                    return Err(NdError::Index {
                        op: "gather_cols",
                        index: c,
                        size: n,
                    });
                }
                data.push(x.data()[r * n + c]);
            }
            Tensor::from_rows(idx.len(), 1, data)
        };
        let ng = self.graph.needs(&[self.id]);
        Ok(self.graph.push(out, Op::GatherCols(self.id, idx.to_vec()), ng))
    }

    /// Select (and possibly repeat) rows: `out[k, :] = self[idx[k], :]`.
    pub fn index_rows(&self, idx: &[usize]) -> Result<Var<'g>> {
        let out = {
            let x = self.value();
            let n = x.cols();
            let mut data = Vec::with_capacity(idx.len() * n);
            for &r in idx {
                if r >= x.rows() {
                    return Err(NdError::Index {
                        op: "index_rows",
                        index: r,
                        size: x.rows(),
                    });
                }
                data.extend_from_slice(&x.data()[r * n..(r + 1) * n]);
            }
            Tensor::from_rows(idx.len(), n, data)
        };
        let ng = self.graph.needs(&[self.id]);
        Ok(self.graph.push(out, Op::IndexRows(self.id, idx.to_vec()), ng))
    }

    /// Same-padded stride-1 convolution. `self` is `[B, Cin*H*W]`, `w` is
    /// `[Cin*k*k, Cout]`, `b` is `[1, Cout]`; output is `[B, Cout*H*W]`.
    pub fn conv2d(&self, w: Var<'g>, b: Var<'g>, geom: ConvGeom) -> Result<Var<'g>> {
        if geom.kernel.is_multiple_of(2) {
            return Err(shape_err("conv2d", "kernel must be odd"));
        }
        let (out, cols) = {
            let (x, wv, bv) = (self.value(), w.value(), b.value());
            if x.cols() != geom.in_features()
                || wv.rows() != geom.patch()
                || wv.cols() != geom.out_channels
                || bv.len() != geom.out_channels
            {
                return Err(shape_err(
                    "conv2d",
                    format!("x {:?}, w {:?}, b {:?} for {geom:?}", x.shape(), wv.shape(), bv.shape()),
                ));
            }
            let batch = x.rows();
            let hw = geom.height * geom.width;
            let co = geom.out_channels;
            let cols = im2col(x.data(), batch, &geom);
            let mut prod = vec![0.0; batch * hw * co];
            gemm(
                batch * hw,
                geom.patch(),
                co,
                &cols,
                false,
                wv.data(),
                false,
                0.0,
                &mut prod,
            );
            let mut out = vec![0.0; batch * co * hw];
            for s in 0..batch {
                for p in 0..hw {
                    for c in 0..co {
                        out[s * co * hw + c * hw + p] = prod[(s * hw + p) * co + c] + bv.data()[c];
                    }
                }
            }
            (Tensor::from_rows(batch, co * hw, out), cols)
        };
        let ng = self.graph.needs(&[self.id, w.id, b.id]);
        Ok(self.graph.push(
            out,
            Op::Conv2d {
                x: self.id,
                w: w.id,
                b: b.id,
                geom,
                cols,
            },
            ng,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_input_grad;

    fn t(rows: usize, cols: usize, v: &[Real]) -> Tensor {
        Tensor::from_rows(rows, cols, v.to_vec())
    }

    #[test]
    fn sum_gives_ones() {
        let g = Graph::new();
        let p = g.leaf(t(1, 3, &[0.3, -1.0, 2.0]).requiring_grad());
        let grads = g.backward(p.sum()).unwrap();
        assert_eq!(grads.wrt(p).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn half_squared_norm_gives_identity() {
        let g = Graph::new();
        let vals = [0.3, -1.0, 2.0];
        let p = g.leaf(t(1, 3, &vals).requiring_grad());
        let loss = p.square().sum().scale(0.5);
        let grads = g.backward(loss).unwrap();
        for (a, b) in grads.wrt(p).unwrap().data().iter().zip(vals) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let g = Graph::new();
        let p = g.leaf(t(1, 2, &[1.0, 2.0]).requiring_grad());
        assert!(matches!(g.backward(p), Err(NdError::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_params_get_zero() {
        let mut store = ParamStore::new();
        let a = store.add("a", t(1, 2, &[1.0, 2.0]));
        let b = store.add("b", t(1, 2, &[3.0, 4.0]));
        let g = Graph::new();
        let loss = g.param(&store, a).sum();
        let grads = g.backward(loss).unwrap().for_store(&store);
        assert_eq!(grads[a.0].data(), &[1.0, 1.0]);
        assert_eq!(grads[b.0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let g = Graph::new();
        let x = g.constant(t(1, 3, &[1.0, 1.0, 1.0]));
        let y = x
            .layer_norm(
                g.constant(Tensor::filled(&[1, 3], 1.0)),
                g.constant(Tensor::zeros(&[1, 3])),
            )
            .unwrap();
        assert!(y.value().data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn layer_norm_keeps_normalized_input() {
        let g = Graph::new();
        let x = g.constant(t(1, 2, &[-1.0, 1.0]));
        let y = x
            .layer_norm(
                g.constant(Tensor::filled(&[1, 2], 1.0)),
                g.constant(Tensor::zeros(&[1, 2])),
            )
            .unwrap();
        let v = y.to_tensor();
        let expect = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!((v.data()[0] + expect).abs() < 1e-12);
        assert!((v.data()[1] - expect).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_rejects_wrong_gain() {
        let g = Graph::new();
        let x = g.constant(t(1, 3, &[1.0, 2.0, 3.0]));
        let r = x.layer_norm(g.constant(Tensor::zeros(&[1, 2])), g.constant(Tensor::zeros(&[1, 2])));
        assert!(matches!(r, Err(NdError::Shape { .. })));
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn conv_matches_direct_sum() {
        let geom = ConvGeom {
            in_channels: 2,
            out_channels: 3,
            height: 4,
            width: 5,
            kernel: 3,
        };
        let x: Vec<Real> = (0..2 * geom.in_features())
            .map(|i| ((i * 7 % 11) as Real) * 0.1 - 0.5)
            .collect();
        let w: Vec<Real> = (0..geom.patch() * 3)
            .map(|i| ((i * 5 % 13) as Real) * 0.05 - 0.3)
            .collect();
        let b = [0.1, -0.2, 0.3];
        let g = Graph::new();
        let y = g
            .constant(t(2, geom.in_features(), &x))
            .conv2d(g.constant(t(geom.patch(), 3, &w)), g.constant(t(1, 3, &b)), geom)
            .unwrap()
            .to_tensor();
        for s in 0..2 {
            for co in 0..3 {
                for py in 0..4isize {
                    for px in 0..5isize {
                        let mut acc = b[co];
                        for ci in 0..2 {
                            for ky in 0..3isize {
                                for kx in 0..3isize {
                                    let (yy, xx) = (py + ky - 1, px + kx - 1);
                                    if (0..4).contains(&yy) && (0..5).contains(&xx) {
                                        let xi = s * 40 + ci * 20 + (yy * 5 + xx) as usize;
                                        let wi = (ci * 9 + (ky * 3 + kx) as usize) * 3 + co;
                                        acc += x[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        let got = y.at(s, co * 20 + (py * 5 + px) as usize);
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_gradient_matches_finite_differences() {
        let geom = ConvGeom {
            in_channels: 2,
            out_channels: 2,
            height: 3,
            width: 3,
            kernel: 3,
        };
        let x: Vec<Real> = (0..2 * geom.in_features()).map(|i| (i as Real * 0.31).sin()).collect();
        let w: Vec<Real> = (0..geom.patch() * 2).map(|i| (i as Real * 0.17).cos() * 0.3).collect();
        let wt = t(geom.patch(), 2, &w);
        let err = check_input_grad(&t(2, geom.in_features(), &x), |g, xv| {
            let wv = g.leaf(wt.clone());
            let b = g.constant(t(1, 2, &[0.05, -0.1]));
            Ok(xv.conv2d(wv, b, geom)?.square().sum())
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
        let err = check_input_grad(&wt, |g, wv| {
            let xv = g.constant(t(2, geom.in_features(), &x));
            let b = g.constant(t(1, 2, &[0.05, -0.1]));
            Ok(xv.conv2d(wv, b, geom)?.relu().sum())
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
