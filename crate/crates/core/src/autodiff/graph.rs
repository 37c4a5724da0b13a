use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Row-segmented multi-head attention geometry.
///
/// Queries are laid out as `batch * query_len` rows and keys/values as
/// `batch * key_len` rows; row `b * len + i` belongs to sequence `b`.
#[derive(Clone, Debug)]
pub struct AttentionLayout {
    pub batch: usize,
    pub query_len: usize,
    pub key_len: usize,
    pub heads: usize,
    pub causal: bool,
    /// `batch * key_len` flags; `false` marks a padded key.
    pub key_mask: Vec<bool>,
}

impl AttentionLayout {
    fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        self.key_mask[b * self.key_len + j] && (!self.causal || j <= i)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    LogOneMinus { x: Var, floor: f64 },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gather { table: Var, ids: Vec<usize> },
    Pick { x: Var, ids: Vec<usize> },
    RowMean(Var),
    Sum(Var),
    WeightedSum { x: Var, weights: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, layout: AttentionLayout, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<String>,
}

/// Define-by-run tape. Build one per step, call [`Graph::backward`] once.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientMap(BTreeMap<String, Tensor>);

impl GradientMap {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn into_inner(self) -> BTreeMap<String, Tensor> {
        self.0
    }
}

/// `c = beta * c + op(a) * op(b)` with `op(a)` of shape m×k and `op(b)` k×n.
/// A transposed operand is stored in its untransposed row-major layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above pin every buffer to exactly the extent the
    // strides address, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_finite_rows(t: &Tensor, what: &'static str) -> Result<()> {
    if t.has_nan() {
        Err(Error::NonFinite(what))
    } else {
        Ok(())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a trainable leaf whose gradient is reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].param = Some(name.into());
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.value(a).matrix_dims();
        let (br, bc) = self.value(b).matrix_dims();
        let (bk, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != bk {
            return Err(Error::dim(format!(
                "matmul inner dimensions disagree: {:?} · {:?}{}",
                self.value(a).shape(),
                self.value(b).shape(),
                if trans_b { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), trans_b, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, trans_b }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds a vector to every row (last axis) of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = self.value(x).last_dim();
        if self.value(bias).numel() != cols {
            return Err(Error::dim(format!(
                "add_row: bias of {} elements for rows of {cols}",
                self.value(bias).numel()
            )));
        }
        let bv = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(bv).map(|(a, b)| a + b))
            .collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddRow(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
            .expect("shape preserved");
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, Op::Exp(x), f64::exp)
    }

    /// `ln(max(1 - x, floor))`; the gradient is zero where the floor is active.
    pub fn log_one_minus(&mut self, x: Var, floor: f64) -> Var {
        self.map(x, Op::LogOneMinus { x, floor }, |v| (1.0 - v).max(floor).ln())
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        check_finite_rows(t, "softmax_rows")?;
        let cols = t.last_dim();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SoftmaxRows(x), rg))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        check_finite_rows(t, "log_softmax_rows")?;
        let cols = t.last_dim();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::LogSoftmaxRows(x), rg))
    }

    /// Normalizes every vector along the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let d = self.value(x).last_dim();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::dim(format!(
                "layer_norm: gamma/beta must have {d} elements"
            )));
        }
        let xt = self.value(x);
        let rows = xt.numel() / d;
        let mut xhat = vec![0.0; xt.numel()];
        let mut rstd = vec![0.0; rows];
        for (r, row) in xt.data().chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let out = xhat
            .chunks(d)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((h, g), b)| h * g + b))
            .collect();
        let value = Tensor::new(xt.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            rg,
        ))
    }

    /// Selects rows of an embedding table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(table).matrix_dims();
        if ids.is_empty() {
            return Err(Error::dim("gather_rows with no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::dim(format!("row {bad} out of range for {rows} rows")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::new(vec![ids.len(), cols], out)?;
        let rg = self.rg(table);
        Ok(self.push(value, Op::Gather { table, ids: ids.to_vec() }, rg))
    }

    /// `out[r] = x[r, ids[r]]`.
    pub fn pick(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let cols = self.value(x).last_dim();
        let rows = self.value(x).numel() / cols;
        if ids.len() != rows {
            return Err(Error::dim(format!("pick: {} ids for {rows} rows", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= cols) {
            return Err(Error::dim(format!("pick: column {bad} out of range for {cols}")));
        }
        let data = self.value(x).data();
        let out = ids.iter().enumerate().map(|(r, &c)| data[r * cols + c]).collect();
        let value = Tensor::new(vec![rows], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Pick { x, ids: ids.to_vec() }, rg))
    }

    pub fn row_mean(&mut self, x: Var) -> Var {
        let cols = self.value(x).last_dim();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(cols)
            .map(|r| r.iter().sum::<f64>() / cols as f64)
            .collect();
        let n = out.len();
        let value = Tensor::new(vec![n], out).expect("rows > 0");
        let rg = self.rg(x);
        self.push(value, Op::RowMean(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// `Σ w_i x_i` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != self.value(x).numel() {
            return Err(Error::dim(format!(
                "weighted_sum: {} weights for {} elements",
                weights.len(),
                self.value(x).numel()
            )));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(&weights)
            .map(|(a, w)| a * w)
            .sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, rg))
    }

    /// Scaled dot-product attention over row segments, heads split along columns.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Result<Var> {
        let (qr, d) = self.value(q).matrix_dims();
        let (kr, kd) = self.value(k).matrix_dims();
        let (vr, vd) = self.value(v).matrix_dims();
        let l = &layout;
        if qr != l.batch * l.query_len || kr != l.batch * l.key_len || vr != kr {
            return Err(Error::dim("attention rows disagree with layout"));
        }
        if kd != d || vd != d || l.heads == 0 || d % l.heads != 0 {
            return Err(Error::dim(format!(
                "attention width {d} not split evenly across {} heads",
                l.heads
            )));
        }
        if l.key_mask.len() != kr {
            return Err(Error::dim("attention key mask length"));
        }
        if l.causal && l.query_len != l.key_len {
            return Err(Error::dim("causal attention needs square segments"));
        }
        let dh = d / l.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let (tq, tk) = (l.query_len, l.key_len);
        let mut probs = vec![0.0; l.batch * l.heads * tq * tk];
        let mut out = vec![0.0; qr * d];
        let mut scores = vec![0.0; tk];
        for b in 0..l.batch {
            for h in 0..l.heads {
                let col = h * dh;
                for i in 0..tq {
                    let qrow = &qd[(b * tq + i) * d + col..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..tk {
                        if l.allowed(b, i, j) {
                            let krow = &kd[(b * tk + j) * d + col..][..dh];
                            let s = qrow.iter().zip(krow).map(|(x, y)| x * y).sum::<f64>() * scale;
                            scores[j] = s;
                            max = max.max(s);
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let p = &mut probs[((b * l.heads + h) * tq + i) * tk..][..tk];
                    let mut z = 0.0;
                    for j in 0..tk {
                        if l.allowed(b, i, j) {
                            p[j] = (scores[j] - max).exp();
                            z += p[j];
                        }
                    }
                    let orow = &mut out[(b * tq + i) * d + col..][..dh];
                    for j in 0..tk {
                        if p[j] != 0.0 {
                            p[j] /= z;
                            let vrow = &vd[(b * tk + j) * d + col..][..dh];
                            for (o, x) in orow.iter_mut().zip(vrow) {
                                *o += p[j] * x;
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![qr, d], out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(value, Op::Attention { q, k, v, layout, probs }, rg))
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every named
    /// parameter the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<GradientMap> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = BTreeMap::new();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            if let Some(name) = &node.param {
                let t = Tensor::new(node.value.shape().to_vec(), g)?;
                match out.get_mut(name) {
                    None => {
                        out.insert(name.clone(), t);
                    }
                    Some(existing) => {
                        let e: &mut Tensor = existing;
                        for (a, b) in e.data_mut().iter_mut().zip(t.data()) {
                            *a += b;
                        }
                    }
                }
            }
        }
        Ok(GradientMap(out))
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.value(*a).matrix_dims();
                let n = node.value.matrix_dims().1;
                let bd = self.value(*b).data();
                let ad = self.value(*a).data();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    // dA = dC · op(B)ᵀ
                    gemm(m, n, k, g, false, bd, !*trans_b, 1.0, ga);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    if *trans_b {
                        // B is n×k: dB = dCᵀ · A
                        gemm(n, m, k, g, true, ad, false, 1.0, gb);
                    } else {
                        // B is k×n: dB = Aᵀ · dC
                        gemm(k, m, n, ad, true, g, false, 1.0, gb);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.grad_slot(grads, *v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                let cols = node.value.last_dim();
                if let Some(gb) = self.grad_slot(grads, *bias) {
                    for row in g.chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(bd) {
                        *o += gi * bi;
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(ad) {
                        *o += gi * ai;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b * c);
                }
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for ((o, gi), xi) in gx.iter_mut().zip(g).zip(xd) {
                        if *xi > 0.0 {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Exp(x) => {
                let y = node.value.data();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for ((o, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                        *o += gi * yi;
                    }
                }
            }
            Op::LogOneMinus { x, floor } => {
                let xd = self.value(*x).data();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for ((o, gi), xi) in gx.iter_mut().zip(g).zip(xd) {
                        let m = 1.0 - xi;
                        if m > *floor {
                            *o -= gi / m;
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let cols = node.value.last_dim();
                let y = node.value.data();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for ((o, gr), yr) in gx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((oi, gi), yi) in o.iter_mut().zip(gr).zip(yr) {
                            *oi += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(x) => {
                let cols = node.value.last_dim();
                let y = node.value.data();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for ((o, gr), yr) in gx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let total: f64 = gr.iter().sum();
                        for ((oi, gi), yi) in o.iter_mut().zip(gr).zip(yr) {
                            *oi += gi - yi.exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = node.value.last_dim();
                let gam = self.value(*gamma).data();
                if let Some(gb) = self.grad_slot(grads, *beta) {
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
                if let Some(gg) = self.grad_slot(grads, *gamma) {
                    for (row, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((a, gi), hi) in gg.iter_mut().zip(row).zip(hrow) {
                            *a += gi * hi;
                        }
                    }
                }
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let mut dxhat = vec![0.0; d];
                    for (r, (row, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for ((dh, gi), gm) in dxhat.iter_mut().zip(row).zip(gam) {
                            *dh = gi * gm;
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dh =
                            dxhat.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let out = &mut gx[r * d..(r + 1) * d];
                        for ((o, dh), h) in out.iter_mut().zip(&dxhat).zip(hrow) {
                            *o += rstd[r] * (dh - mean_d - h * mean_dh);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let cols = node.value.last_dim();
                if let Some(gt) = self.grad_slot(grads, *table) {
                    for (row, &i) in g.chunks(cols).zip(ids) {
                        gt[i * cols..(i + 1) * cols]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Pick { x, ids } => {
                let cols = self.value(*x).last_dim();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (r, (&c, gi)) in ids.iter().zip(g).enumerate() {
                        gx[r * cols + c] += gi;
                    }
                }
            }
            Op::RowMean(x) => {
                let cols = self.value(*x).last_dim();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (row, gi) in gx.chunks_mut(cols).zip(g) {
                        row.iter_mut().for_each(|a| *a += gi / cols as f64);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::WeightedSum { x, weights } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (a, w) in gx.iter_mut().zip(weights) {
                        *a += g[0] * w;
                    }
                }
            }
            Op::Attention { q, k, v, layout, probs } => {
                self.attention_backward(*q, *k, *v, layout, probs, g, grads);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        l: &AttentionLayout,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let d = self.value(q).last_dim();
        let dh = d / l.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let (tq, tk) = (l.query_len, l.key_len);
        let mut gq = vec![0.0; qd.len()];
        let mut gk = vec![0.0; kd.len()];
        let mut gv = vec![0.0; vd.len()];
        let mut ds = vec![0.0; tk];
        for b in 0..l.batch {
            for h in 0..l.heads {
                let col = h * dh;
                for i in 0..tq {
                    let p = &probs[((b * l.heads + h) * tq + i) * tk..][..tk];
                    let grow = &g[(b * tq + i) * d + col..][..dh];
                    let mut dot = 0.0;
                    for j in 0..tk {
                        if p[j] == 0.0 {
                            ds[j] = 0.0;
                            continue;
                        }
                        let vrow = &vd[(b * tk + j) * d + col..][..dh];
                        let dp: f64 = grow.iter().zip(vrow).map(|(x, y)| x * y).sum();
                        ds[j] = dp;
                        dot += p[j] * dp;
                        let gvrow = &mut gv[(b * tk + j) * d + col..][..dh];
                        for (o, x) in gvrow.iter_mut().zip(grow) {
                            *o += p[j] * x;
                        }
                    }
                    let qrow = &qd[(b * tq + i) * d + col..][..dh];
                    for j in 0..tk {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let s = p[j] * (ds[j] - dot) * scale;
                        let krow = &kd[(b * tk + j) * d + col..][..dh];
                        let gqrow = &mut gq[(b * tq + i) * d + col..][..dh];
                        for (o, x) in gqrow.iter_mut().zip(krow) {
                            *o += s * x;
                        }
                        let gkrow = &mut gk[(b * tk + j) * d + col..][..dh];
                        for (o, x) in gkrow.iter_mut().zip(qrow) {
                            *o += s * x;
                        }
                    }
                }
            }
        }
        for (var, local) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(slot) = self.grad_slot(grads, var) {
                slot.iter_mut().zip(&local).for_each(|(a, b)| *a += b);
            }
        }
    }
}
