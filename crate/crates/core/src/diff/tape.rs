//! Reverse-mode gradient tape.
//!
//! Every operation appends a node holding its value; [`Tape::backward`]
//! walks the nodes in reverse and returns per-node gradients. A tape can
//! be differentiated once.

use std::sync::Arc;

use super::tensor::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Probabilities are clamped below at this value inside the logistic loss.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Target-grouped gather structure for sparse message passing.
///
/// Entry `k` of segment `v` reads row `sources[k]` of the state matrix and
/// row `rows[k]` of the weight matrix, and accumulates into row `v`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GatherCsr {
    offsets: Vec<usize>,
    sources: Vec<u32>,
    rows: Vec<u32>,
}

impl GatherCsr {
    pub fn new(offsets: Vec<usize>, sources: Vec<u32>, rows: Vec<u32>) -> Self {
        assert!(!offsets.is_empty(), "offsets must hold at least one entry");
        assert_eq!(sources.len(), rows.len());
        assert_eq!(*offsets.last().unwrap(), sources.len());
        GatherCsr {
            offsets,
            sources,
            rows,
        }
    }

    pub fn num_targets(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_entries(&self) -> usize {
        self.sources.len()
    }

    pub fn segment(&self, target: usize) -> std::ops::Range<usize> {
        self.offsets[target]..self.offsets[target + 1]
    }

    pub fn sources(&self) -> &[u32] {
        &self.sources
    }

    pub fn rows(&self) -> &[u32] {
        &self.rows
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(String),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    ConcatCols(Var, Var),
    GatherRows(Var, Vec<usize>),
    PlaceRow {
        src: Var,
        row: usize,
    },
    Message {
        states: Var,
        weights: Var,
        base: Var,
        csr: Arc<GatherCsr>,
    },
    Sum(Var),
    LogisticLoss {
        logits: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of one backward pass, indexed by tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, usize)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads[var.0].take()
    }

    /// `(name, gradient)` for every parameter node that received a gradient.
    ///
    /// A parameter read more than once appears once per read.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(name, i)| self.grads[*i].as_ref().map(|g| (name.as_str(), g)))
    }

    /// Adds every parameter gradient into the store that owns that name.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (name, g) in self.params() {
            store.accumulate(name, g);
        }
    }
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.push_shared(Arc::new(value), op)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Shared handle to a node value, for feeding it into another tape without copying.
    pub fn shared_value(&self, var: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[var.0].value)
    }

    /// Constant input; its gradient is still reported by `backward`.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    pub fn input_shared(&mut self, value: Arc<Tensor>) -> Var {
        self.push_shared(value, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store
            .shared(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter '{name}'")))?;
        Ok(self.push_shared(value, Op::Param(name.to_string())))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        if bv.shape().len() != 2 || bv.shape()[0] != k {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let n = bv.cols();
        let mut out = vec![0.0; m * n];
        let (ad, bd) = (av.data(), bv.data());
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &a_ip) in ad[i * k..(i + 1) * k].iter().enumerate() {
                if a_ip == 0.0 {
                    continue;
                }
                for (o, &b) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += a_ip * b;
                }
            }
        }
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.len() != xv.cols() {
            return Err(Error::Shape(format!(
                "bias {:?} for input {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let mut out = xv.clone();
        let n = bv.len();
        for row in out.data_mut().chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut out = self.value(a).clone();
        for (o, y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= y;
        }
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        self.push(out, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = relu(*v));
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        self.push(out, Op::Sigmoid(x))
    }

    /// Per-row normalization to zero mean and unit variance, then `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if d == 0 || self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::Shape(format!(
                "layer_norm over {:?} with gamma {:?}, beta {:?}",
                xv.shape(),
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for (h, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *h = (v - mean) * s;
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = Vec::with_capacity(rows * d);
        for r in 0..rows {
            for j in 0..d {
                out.push(xhat[r * d + j] * g[j] + b[j]);
            }
        }
        let shape = xv.shape().to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(Error::Shape(format!(
                "concat {:?} with {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (p, q) = (av.cols(), bv.cols());
        let mut out = Vec::with_capacity(av.rows() * (p + q));
        for r in 0..av.rows() {
            out.extend_from_slice(av.row(r));
            out.extend_from_slice(bv.row(r));
        }
        let rows = av.rows();
        Ok(self.push(Tensor::new(vec![rows, p + q], out)?, Op::ConcatCols(a, b)))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= xv.rows() {
                return Err(Error::Shape(format!("row {i} of {:?}", xv.shape())));
            }
            out.extend_from_slice(xv.row(i));
        }
        Ok(self.push(
            Tensor::new(vec![idx.len(), c], out)?,
            Op::GatherRows(x, idx.to_vec()),
        ))
    }

    /// `[nrows, d]` zeros with `src` written into row `row`.
    pub fn place_row(&mut self, src: Var, row: usize, nrows: usize) -> Result<Var> {
        if row >= nrows {
            return Err(Error::Shape(format!("row {row} of {nrows}")));
        }
        let sv = self.value(src);
        let d = sv.len();
        let mut out = Tensor::zeros(&[nrows, d]);
        out.row_mut(row).copy_from_slice(sv.data());
        Ok(self.push(out, Op::PlaceRow { src, row }))
    }

    /// `out[v] = base[v] + sum over entries k of segment v of states[src_k] * weights[row_k]`.
    ///
    /// A single-row weight matrix is shared by every entry.
    pub fn message(&mut self, states: Var, weights: Var, base: Var, csr: Arc<GatherCsr>) -> Result<Var> {
        let (sv, wv, bv) = (self.value(states), self.value(weights), self.value(base));
        let d = sv.cols();
        if wv.cols() != d || bv.cols() != d || bv.rows() != csr.num_targets() {
            return Err(Error::Shape(format!(
                "message states {:?}, weights {:?}, base {:?}, {} targets",
                sv.shape(),
                wv.shape(),
                bv.shape(),
                csr.num_targets()
            )));
        }
        let shared = wv.rows() == 1;
        let mut out = bv.clone();
        let (sd, wd) = (sv.data(), wv.data());
        for v in 0..csr.num_targets() {
            let orow = &mut out.data_mut()[v * d..(v + 1) * d];
            for k in csr.segment(v) {
                let s = csr.sources[k] as usize;
                let r = if shared { 0 } else { csr.rows[k] as usize };
                let x = &sd[s * d..(s + 1) * d];
                let w = &wd[r * d..(r + 1) * d];
                for j in 0..d {
                    orow[j] += x[j] * w[j];
                }
            }
        }
        Ok(self.push(
            out,
            Op::Message {
                states,
                weights,
                base,
                csr,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// `sum_k weights[k] * BCE(sigmoid(logits[k]), targets[k])` with clamped logs.
    pub fn logistic_loss(&mut self, logits: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.len() != targets.len() || lv.len() != weights.len() {
            return Err(Error::Shape(format!(
                "{} logits, {} targets, {} weights",
                lv.len(),
                targets.len(),
                weights.len()
            )));
        }
        let floor = PROB_FLOOR.ln();
        let mut total = 0.0;
        for ((&z, &y), &w) in lv.data().iter().zip(targets).zip(weights) {
            // ln p = -softplus(-z), ln(1 - p) = -softplus(z)
            let lp = (-softplus(-z)).max(floor);
            let lq = (-softplus(z)).max(floor);
            total -= w * (y * lp + (1.0 - y) * lq);
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::LogisticLoss {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
        ))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{what} {:?} with {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    /// Backpropagates from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let seed = Tensor::new(self.value(loss).shape().to_vec(), vec![1.0])?;
        self.backward_seeded(vec![(loss, seed)])
    }

    /// Backpropagates from several outputs with caller-provided upstream gradients.
    pub fn backward_seeded(&mut self, seeds: Vec<(Var, Tensor)>) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (var, g) in seeds {
            if g.shape() != self.value(var).shape() {
                return Err(Error::Shape(format!(
                    "seed {:?} for output {:?}",
                    g.shape(),
                    self.value(var).shape()
                )));
            }
            accumulate(&mut grads, var, g);
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Param(name) => Some((name.clone(), i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let (ad, bd, gd) = (av.data(), bv.data(), g.data());
                let mut da = vec![0.0; m * k];
                for r in 0..m {
                    let grow = &gd[r * n..(r + 1) * n];
                    for p in 0..k {
                        let brow = &bd[p * n..(p + 1) * n];
                        da[r * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                    }
                }
                let mut db = vec![0.0; k * n];
                for r in 0..m {
                    let grow = &gd[r * n..(r + 1) * n];
                    for p in 0..k {
                        let a_rp = ad[r * k + p];
                        if a_rp == 0.0 {
                            continue;
                        }
                        for (o, x) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *o += a_rp * x;
                        }
                    }
                }
                accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da).unwrap());
                accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db).unwrap());
            }
            Op::AddBias(x, bias) => {
                let bv = self.value(*bias);
                let n = bv.len();
                let mut db = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (o, x) in db.iter_mut().zip(row) {
                        *o += x;
                    }
                }
                accumulate(grads, *x, g.clone());
                accumulate(grads, *bias, Tensor::new(bv.shape().to_vec(), db).unwrap());
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let mut da = g.clone();
                for (o, y) in da.data_mut().iter_mut().zip(self.value(*b).data()) {
                    *o *= y;
                }
                let mut db = g.clone();
                for (o, y) in db.data_mut().iter_mut().zip(self.value(*a).data()) {
                    *o *= y;
                }
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Scale(x, c) => {
                let mut dx = g.clone();
                dx.data_mut().iter_mut().for_each(|v| *v *= c);
                accumulate(grads, *x, dx);
            }
            Op::Relu(x) => {
                let mut dx = g.clone();
                for (o, y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    if *y <= 0.0 {
                        *o = 0.0;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let mut dx = g.clone();
                for (o, s) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    *o *= s * (1.0 - s);
                }
                accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gamma);
                let d = gv.len();
                let rows = rstd.len();
                let gd = g.data();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx = vec![0.0; rows * d];
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let grow = &gd[r * d..(r + 1) * d];
                    let hrow = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        dgamma[j] += grow[j] * hrow[j];
                        dbeta[j] += grow[j];
                        dxhat[j] = grow[j] * gv.data()[j];
                        mean_dh += dxhat[j];
                        mean_dh_h += dxhat[j] * hrow[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        dx[r * d + j] = rstd[r] * (dxhat[j] - mean_dh - hrow[j] * mean_dh_h);
                    }
                }
                accumulate(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), dx).unwrap());
                accumulate(grads, *gamma, Tensor::new(gv.shape().to_vec(), dgamma).unwrap());
                accumulate(
                    grads,
                    *beta,
                    Tensor::new(self.value(*beta).shape().to_vec(), dbeta).unwrap(),
                );
            }
            Op::ConcatCols(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (p, q) = (av.cols(), bv.cols());
                let mut da = Vec::with_capacity(av.len());
                let mut db = Vec::with_capacity(bv.len());
                for row in g.data().chunks(p + q) {
                    da.extend_from_slice(&row[..p]);
                    db.extend_from_slice(&row[p..]);
                }
                accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da).unwrap());
                accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db).unwrap());
            }
            Op::GatherRows(x, idx) => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.shape());
                for (k, &r) in idx.iter().enumerate() {
                    for (o, v) in dx.row_mut(r).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::PlaceRow { src, row } => {
                let sv = self.value(*src);
                let ds = Tensor::new(sv.shape().to_vec(), g.row(*row).to_vec()).unwrap();
                accumulate(grads, *src, ds);
            }
            Op::Message {
                states,
                weights,
                base,
                csr,
            } => {
                let (sv, wv) = (self.value(*states), self.value(*weights));
                let d = sv.cols();
                let shared = wv.rows() == 1;
                let (sd, wd, gd) = (sv.data(), wv.data(), g.data());
                let mut ds = vec![0.0; sv.len()];
                let mut dw = vec![0.0; wv.len()];
                for v in 0..csr.num_targets() {
                    let grow = &gd[v * d..(v + 1) * d];
                    for k in csr.segment(v) {
                        let s = csr.sources[k] as usize;
                        let r = if shared { 0 } else { csr.rows[k] as usize };
                        let x = &sd[s * d..(s + 1) * d];
                        let w = &wd[r * d..(r + 1) * d];
                        let dsr = &mut ds[s * d..(s + 1) * d];
                        for j in 0..d {
                            dsr[j] += grow[j] * w[j];
                        }
                        let dwr = &mut dw[r * d..(r + 1) * d];
                        for j in 0..d {
                            dwr[j] += grow[j] * x[j];
                        }
                    }
                }
                accumulate(grads, *states, Tensor::new(sv.shape().to_vec(), ds).unwrap());
                accumulate(grads, *weights, Tensor::new(wv.shape().to_vec(), dw).unwrap());
                accumulate(grads, *base, g.clone());
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                accumulate(grads, *x, Tensor::filled(xv.shape(), g.item()));
            }
            Op::LogisticLoss {
                logits,
                targets,
                weights,
            } => {
                let lv = self.value(*logits);
                let floor = PROB_FLOOR.ln();
                let up = g.item();
                let mut dz = Vec::with_capacity(lv.len());
                for ((&z, &y), &w) in lv.data().iter().zip(targets).zip(weights) {
                    let p = sigmoid(z);
                    let mut d = 0.0;
                    // d(-ln p)/dz = p - 1 and d(-ln(1-p))/dz = p, zero where clamped
                    if -softplus(-z) > floor {
                        d += y * (p - 1.0);
                    }
                    if -softplus(z) > floor {
                        d += (1.0 - y) * p;
                    }
                    dz.push(up * w * d);
                }
                accumulate(grads, *logits, Tensor::new(lv.shape().to_vec(), dz).unwrap());
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
    match &mut grads[var.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
