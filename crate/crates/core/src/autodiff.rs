//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation on a [`Tape`] records its inputs and returns a [`Var`]
//! handle. [`Tape::backward`] walks the record in reverse and materializes
//! gradients for leaves created with `requires_grad` and for interior nodes
//! registered through [`Tape::retain`]. Gradients of all other interior nodes
//! are dropped as soon as they have been propagated, so memory for stored
//! gradients grows with the number of taps rather than with the graph.
//!
//! Repeated calls to `backward` accumulate into the stored gradients;
//! [`Tape::clear_gradients`] resets them.
//!
//! Broadcasting is limited to a single-element right operand in
//! [`Tape::add`], [`Tape::sub`] and [`Tape::mul`]. Everything else has to be
//! shaped explicitly.

use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    pub fn node_id(self) -> usize {
        self.idx
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    Scale(usize, f64),
    Power(usize, f64),
    Relu(usize),
    Gelu(usize),
    Sigmoid(usize),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    MeanRows(usize),
    Sum(usize),
    Gather {
        src: usize,
        index: Arc<[usize]>,
    },
    Reshape(usize),
    ConcatRows(usize, usize),
    ConcatCols(Vec<usize>),
    BceWithLogits {
        logits: usize,
        targets: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<Option<usize>>,
        valid: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Recorded computation graph; nodes are stored in topological order.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    retained: HashSet<usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[kk * p..(kk + 1) * p]) {
                *o += av * bv;
            }
        }
    }
    out
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

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            retained: HashSet::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::StaleTape);
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies the value of `v` into a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v)?.clone();
        Ok(self.constant(value))
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        let i = self.check(v)?;
        Ok(&self.nodes[i].value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.value(v)?.shape())
    }

    /// Stored gradient of a leaf or retained node, if backward has populated it.
    pub fn grad(&self, v: Var) -> Result<Option<&Tensor>> {
        let i = self.check(v)?;
        Ok(self.nodes[i].grad.as_ref())
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        let i = self.check(v)?;
        Ok(self.nodes[i].requires_grad)
    }

    /// Keeps the gradient of an interior node after backward.
    pub fn retain(&mut self, v: Var) -> Result<()> {
        let i = self.check(v)?;
        self.retained.insert(i);
        Ok(())
    }

    pub fn clear_gradients(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let ((m, k), (k2, p)) = match (va.dims2(), vb.dims2()) {
            (Ok(x), Ok(y)) => (x, y),
            _ => return Err(shape_err("matmul", va, vb)),
        };
        if k != k2 {
            return Err(shape_err("matmul", va, vb));
        }
        let out = Tensor::new(vec![m, p], matmul_raw(va.data(), vb.data(), m, k, p))?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(out, Op::MatMul(ia, ib), rg))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let data: Vec<f64> = if va.shape() == vb.shape() {
            va.data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| f(x, y))
                .collect()
        } else if vb.len() == 1 {
            let y = vb.data()[0];
            va.data().iter().map(|&x| f(x, y)).collect()
        } else {
            return Err(shape_err(name, va, vb));
        };
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(out, op(ia, ib), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: impl FnOnce(usize) -> Op) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(f);
        let rg = self.rg(&[ia]);
        Ok(self.push(out, op(ia), rg))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary(a, |x| x + s, Op::AddScalar)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary(a, |x| x * s, |i| Op::Scale(i, s))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        self.unary(a, |x| x.powf(p), |i| Op::Power(i, p))
    }

    /// `max(x, 0)`; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, gelu, Op::Gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let va = &self.nodes[ia].value;
        let (m, n) = va.dims2()?;
        let mut out = va.data().to_vec();
        for row in out.chunks_mut(n.max(1)).take(m) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[ia]);
        Ok(self.push(out, Op::SoftmaxRows(ia), rg))
    }

    /// Row-wise layer normalization of an `m×d` input with affine `gamma`,
    /// `beta` of length `d`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let vx = &self.nodes[ix].value;
        let (m, d) = vx.dims2()?;
        let (vg, vb) = (&self.nodes[ig].value, &self.nodes[ib].value);
        if vg.len() != d {
            return Err(shape_err("layer_norm", vx, vg));
        }
        if vb.len() != d {
            return Err(shape_err("layer_norm", vx, vb));
        }
        let mut xhat = vec![0.0; m * d];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for r in 0..m {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for c in 0..d {
                let h = (row[c] - mean) * inv;
                xhat[r * d + c] = h;
                out[r * d + c] = h * vg.data()[c] + vb.data()[c];
            }
        }
        let out = Tensor::new(vec![m, d], out)?;
        let rg = self.rg(&[ix, ig, ib]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// `x·w + b` with `b` (length `p`) added to every row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (ix, iw, ib) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let (vx, vw, vb) = (
            &self.nodes[ix].value,
            &self.nodes[iw].value,
            &self.nodes[ib].value,
        );
        let ((m, k), (k2, p)) = match (vx.dims2(), vw.dims2()) {
            (Ok(a), Ok(b)) => (a, b),
            _ => return Err(shape_err("linear", vx, vw)),
        };
        if k != k2 {
            return Err(shape_err("linear", vx, vw));
        }
        if vb.len() != p {
            return Err(shape_err("linear", vw, vb));
        }
        let mut out = matmul_raw(vx.data(), vw.data(), m, k, p);
        for row in out.chunks_mut(p.max(1)) {
            for (o, &bv) in row.iter_mut().zip(vb.data()) {
                *o += bv;
            }
        }
        let out = Tensor::new(vec![m, p], out)?;
        let rg = self.rg(&[ix, iw, ib]);
        Ok(self.push(out, Op::Linear { x: ix, w: iw, b: ib }, rg))
    }

    /// Averages the rows of an `m×d` input into a `1×d` row (global average
    /// pooling over tokens).
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let va = &self.nodes[ia].value;
        let (m, d) = va.dims2()?;
        if m == 0 {
            return Err(Error::invalid("mean_rows of an empty matrix"));
        }
        let mut out = vec![0.0; d];
        for row in va.data().chunks(d.max(1)) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let out = Tensor::new(vec![1, d], out)?;
        let rg = self.rg(&[ia]);
        Ok(self.push(out, Op::MeanRows(ia), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = Tensor::scalar(self.nodes[ia].value.sum());
        let rg = self.rg(&[ia]);
        Ok(self.push(out, Op::Sum(ia), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a)?.len();
        if n == 0 {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// General rearrangement: output element `i` is input element `index[i]`.
    pub fn gather(&mut self, a: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let va = &self.nodes[ia].value;
        if index.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape {
                op: "gather",
                left: vec![index.len()],
                right: shape.to_vec(),
            });
        }
        if let Some(&bad) = index.iter().find(|&&j| j >= va.len()) {
            return Err(Error::invalid(format!(
                "gather index {bad} out of range for {} elements",
                va.len()
            )));
        }
        let data = index.iter().map(|&j| va.data()[j]).collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        let rg = self.rg(&[ia]);
        Ok(self.push(out, Op::Gather { src: ia, index }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.clone().reshape(shape)?;
        let rg = self.rg(&[ia]);
        Ok(self.push(out, Op::Reshape(ia), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a)?.dims2()?;
        let index: Arc<[usize]> = (0..n)
            .flat_map(|c| (0..m).map(move |r| r * n + c))
            .collect();
        self.gather(a, index, &[n, m])
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.value(a)?.dims2()?;
        if start > end || end > m {
            return Err(Error::invalid(format!(
                "row range {start}..{end} out of bounds for {m} rows"
            )));
        }
        let index: Arc<[usize]> = (start * n..end * n).collect();
        self.gather(a, index, &[end - start, n])
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.value(a)?.dims2()?;
        if start > end || end > n {
            return Err(Error::invalid(format!(
                "column range {start}..{end} out of bounds for {n} columns"
            )));
        }
        let w = end - start;
        let index: Arc<[usize]> = (0..m)
            .flat_map(|r| (start..end).map(move |c| r * n + c))
            .collect();
        self.gather(a, index, &[m, w])
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let ((ma, na), (mb, nb)) = (va.dims2()?, vb.dims2()?);
        if na != nb {
            return Err(shape_err("concat_rows", va, vb));
        }
        let mut data = va.data().to_vec();
        data.extend_from_slice(vb.data());
        let out = Tensor::new(vec![ma + mb, na], data)?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(out, Op::ConcatRows(ia, ib), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let ids = parts
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<Vec<_>>>()?;
        let first = ids
            .first()
            .ok_or_else(|| Error::invalid("concat_cols of zero tensors"))?;
        let (m, _) = self.nodes[*first].value.dims2()?;
        let mut widths = Vec::with_capacity(ids.len());
        for &i in &ids {
            let (mi, ni) = self.nodes[i].value.dims2()?;
            if mi != m {
                return Err(shape_err(
                    "concat_cols",
                    &self.nodes[*first].value,
                    &self.nodes[i].value,
                ));
            }
            widths.push(ni);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&i, &w) in ids.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[i].value.data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::new(vec![m, total], data)?;
        let rg = self.rg(&ids);
        Ok(self.push(out, Op::ConcatCols(ids), rg))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let il = self.check(logits)?;
        let vl = &self.nodes[il].value;
        if vl.len() != targets.len() || vl.is_empty() {
            return Err(Error::Shape {
                op: "bce_with_logits",
                left: vl.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let loss = vl
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &t)| softplus(x) - t * x)
            .sum::<f64>()
            / targets.len() as f64;
        let rg = self.rg(&[il]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits: il,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Softmax cross-entropy over the leading (channel) axis of a
    /// `K×P` or `K×H×W` logit tensor. `labels` has one entry per pixel;
    /// `None` pixels are ignored and excluded from the mean. With no valid
    /// pixel the loss is 0.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[Option<usize>]) -> Result<Var> {
        let il = self.check(logits)?;
        let vl = &self.nodes[il].value;
        let k = *vl
            .shape()
            .first()
            .ok_or_else(|| Error::invalid("softmax_cross_entropy needs a channel axis"))?;
        let pixels = vl.len() / k.max(1);
        if labels.len() != pixels {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                left: vl.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(bad) = labels.iter().flatten().find(|&&l| l >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for {k} channels")));
        }
        let d = vl.data();
        let mut total = 0.0;
        let mut valid = 0usize;
        for (p, label) in labels.iter().enumerate() {
            let Some(l) = *label else { continue };
            let mx = (0..k).map(|c| d[c * pixels + p]).fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + (0..k).map(|c| (d[c * pixels + p] - mx).exp()).sum::<f64>().ln();
            total += lse - d[l * pixels + p];
            valid += 1;
        }
        let loss = if valid == 0 { 0.0 } else { total / valid as f64 };
        let rg = self.rg(&[il]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits: il,
                labels: labels.to_vec(),
                valid,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let r = self.check(root)?;
        if self.nodes[r].value.len() != 1 {
            return Err(Error::NonScalarRoot(self.nodes[r].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; r + 1];
        grads[r] = Some(vec![1.0]);
        for i in (0..=r).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            let keep = matches!(self.nodes[i].op, Op::Leaf) || self.retained.contains(&i);
            if keep {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(&g) {
                            *a += v;
                        }
                    }
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
            }
        }
        // Leaves and retained nodes the root does not depend on get zeros.
        for (i, node) in self.nodes.iter_mut().enumerate().take(r + 1) {
            let keep = (matches!(node.op, Op::Leaf) && node.requires_grad) || self.retained.contains(&i);
            if keep && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let needs = |j: usize| nodes[j].requires_grad;
        fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node], j: usize, f: impl FnOnce(&mut [f64])) {
            let len = nodes[j].value.len();
            f(grads[j].get_or_insert_with(|| vec![0.0; len]));
        }
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = nodes[*a].value.dims2().unwrap();
                let (_, p) = nodes[*b].value.dims2().unwrap();
                if needs(*a) {
                    let bv = nodes[*b].value.data();
                    acc(grads, nodes, *a, |ga| {
                        for r in 0..m {
                            for kk in 0..k {
                                let mut s = 0.0;
                                for c in 0..p {
                                    s += g[r * p + c] * bv[kk * p + c];
                                }
                                ga[r * k + kk] += s;
                            }
                        }
                    });
                }
                if needs(*b) {
                    let av = nodes[*a].value.data();
                    acc(grads, nodes, *b, |gb| {
                        for r in 0..m {
                            for kk in 0..k {
                                let x = av[r * k + kk];
                                if x == 0.0 {
                                    continue;
                                }
                                for c in 0..p {
                                    gb[kk * p + c] += x * g[r * p + c];
                                }
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if needs(*a) {
                    acc(grads, nodes, *a, |ga| {
                        for (x, &v) in ga.iter_mut().zip(g) {
                            *x += v;
                        }
                    });
                }
                if needs(*b) {
                    let broadcast = nodes[*b].value.len() != g.len();
                    acc(grads, nodes, *b, |gb| {
                        if broadcast {
                            gb[0] += sign * g.iter().sum::<f64>();
                        } else {
                            for (x, &v) in gb.iter_mut().zip(g) {
                                *x += sign * v;
                            }
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                let broadcast = vb.len() != va.len() || nodes[*b].value.shape() != nodes[*a].value.shape();
                if needs(*a) {
                    acc(grads, nodes, *a, |ga| {
                        for (idx, x) in ga.iter_mut().enumerate() {
                            let y = if broadcast { vb[0] } else { vb[idx] };
                            *x += g[idx] * y;
                        }
                    });
                }
                if needs(*b) {
                    acc(grads, nodes, *b, |gb| {
                        if broadcast {
                            gb[0] += g.iter().zip(va).map(|(&gv, &x)| gv * x).sum::<f64>();
                        } else {
                            for (idx, y) in gb.iter_mut().enumerate() {
                                *y += g[idx] * va[idx];
                            }
                        }
                    });
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if needs(*a) {
                    acc(grads, nodes, *a, |ga| {
                        for (x, &v) in ga.iter_mut().zip(g) {
                            *x += v;
                        }
                    });
                }
            }
            Op::Scale(a, s) => {
                if needs(*a) {
                    acc(grads, nodes, *a, |ga| {
                        for (x, &v) in ga.iter_mut().zip(g) {
                            *x += v * s;
                        }
                    });
                }
            }
            Op::Power(a, p) => {
                if needs(*a) {
                    let va = nodes[*a].value.data();
                    acc(grads, nodes, *a, |ga| {
                        for (idx, x) in ga.iter_mut().enumerate() {
                            *x += g[idx] * p * va[idx].powf(p - 1.0);
                        }
                    });
                }
            }
            Op::Relu(a) => {
                if needs(*a) {
                    let va = nodes[*a].value.data();
                    acc(grads, nodes, *a, |ga| {
                        for (idx, x) in ga.iter_mut().enumerate() {
                            if va[idx] > 0.0 {
                                *x += g[idx];
                            }
                        }
                    });
                }
            }
            Op::Gelu(a) => {
                if needs(*a) {
                    let va = nodes[*a].value.data();
                    acc(grads, nodes, *a, |ga| {
                        for (idx, x) in ga.iter_mut().enumerate() {
                            *x += g[idx] * gelu_grad(va[idx]);
                        }
                    });
                }
            }
            Op::Sigmoid(a) => {
                if needs(*a) {
                    let y = node.value.data();
                    acc(grads, nodes, *a, |ga| {
                        for (idx, x) in ga.iter_mut().enumerate() {
                            *x += g[idx] * y[idx] * (1.0 - y[idx]);
                        }
                    });
                }
            }
            Op::SoftmaxRows(a) => {
                if needs(*a) {
                    let (m, n) = node.value.dims2().unwrap();
                    let y = node.value.data();
                    acc(grads, nodes, *a, |ga| {
                        for r in 0..m {
                            let row = r * n..(r + 1) * n;
                            let dot: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(a, b)| a * b).sum();
                            for c in row {
                                ga[c] += y[c] * (g[c] - dot);
                            }
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (m, d) = node.value.dims2().unwrap();
                if needs(*gamma) {
                    acc(grads, nodes, *gamma, |gg| {
                        for r in 0..m {
                            for c in 0..d {
                                gg[c] += g[r * d + c] * xhat[r * d + c];
                            }
                        }
                    });
                }
                if needs(*beta) {
                    acc(grads, nodes, *beta, |gb| {
                        for r in 0..m {
                            for c in 0..d {
                                gb[c] += g[r * d + c];
                            }
                        }
                    });
                }
                if needs(*x) {
                    let gv = nodes[*gamma].value.data();
                    acc(grads, nodes, *x, |gx| {
                        let mut dxhat = vec![0.0; d];
                        for r in 0..m {
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for c in 0..d {
                                dxhat[c] = g[r * d + c] * gv[c];
                                s1 += dxhat[c];
                                s2 += dxhat[c] * xhat[r * d + c];
                            }
                            let scale = inv_std[r] / d as f64;
                            for c in 0..d {
                                gx[r * d + c] +=
                                    scale * (d as f64 * dxhat[c] - s1 - xhat[r * d + c] * s2);
                            }
                        }
                    });
                }
            }
            Op::Linear { x, w, b } => {
                let (m, k) = nodes[*x].value.dims2().unwrap();
                let (_, p) = nodes[*w].value.dims2().unwrap();
                if needs(*x) {
                    let wv = nodes[*w].value.data();
                    acc(grads, nodes, *x, |gx| {
                        for r in 0..m {
                            for kk in 0..k {
                                let mut s = 0.0;
                                for c in 0..p {
                                    s += g[r * p + c] * wv[kk * p + c];
                                }
                                gx[r * k + kk] += s;
                            }
                        }
                    });
                }
                if needs(*w) {
                    let xv = nodes[*x].value.data();
                    acc(grads, nodes, *w, |gw| {
                        for r in 0..m {
                            for kk in 0..k {
                                let xe = xv[r * k + kk];
                                if xe == 0.0 {
                                    continue;
                                }
                                for c in 0..p {
                                    gw[kk * p + c] += xe * g[r * p + c];
                                }
                            }
                        }
                    });
                }
                if needs(*b) {
                    acc(grads, nodes, *b, |gb| {
                        for r in 0..m {
                            for c in 0..p {
                                gb[c] += g[r * p + c];
                            }
                        }
                    });
                }
            }
            Op::MeanRows(a) => {
                if needs(*a) {
                    let (m, d) = nodes[*a].value.dims2().unwrap();
                    acc(grads, nodes, *a, |ga| {
                        for r in 0..m {
                            for c in 0..d {
                                ga[r * d + c] += g[c] / m as f64;
                            }
                        }
                    });
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    acc(grads, nodes, *a, |ga| {
                        for x in ga.iter_mut() {
                            *x += g[0];
                        }
                    });
                }
            }
            Op::Gather { src, index } => {
                if needs(*src) {
                    acc(grads, nodes, *src, |gs| {
                        for (o, &j) in index.iter().enumerate() {
                            gs[j] += g[o];
                        }
                    });
                }
            }
            Op::ConcatRows(a, b) => {
                let split = nodes[*a].value.len();
                if needs(*a) {
                    acc(grads, nodes, *a, |ga| {
                        for (x, &v) in ga.iter_mut().zip(&g[..split]) {
                            *x += v;
                        }
                    });
                }
                if needs(*b) {
                    acc(grads, nodes, *b, |gb| {
                        for (x, &v) in gb.iter_mut().zip(&g[split..]) {
                            *x += v;
                        }
                    });
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = node.value.dims2().unwrap();
                let mut offset = 0;
                for &j in parts {
                    let (_, w) = nodes[j].value.dims2().unwrap();
                    if needs(j) {
                        acc(grads, nodes, j, |gj| {
                            for r in 0..m {
                                for c in 0..w {
                                    gj[r * w + c] += g[r * total + offset + c];
                                }
                            }
                        });
                    }
                    offset += w;
                }
            }
            Op::BceWithLogits { logits, targets } => {
                if needs(*logits) {
                    let xs = nodes[*logits].value.data();
                    let n = targets.len() as f64;
                    acc(grads, nodes, *logits, |gl| {
                        for (idx, x) in gl.iter_mut().enumerate() {
                            *x += g[0] * (sigmoid(xs[idx]) - targets[idx]) / n;
                        }
                    });
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                valid,
            } => {
                if needs(*logits) && *valid > 0 {
                    let v = &nodes[*logits].value;
                    let k = v.shape()[0];
                    let pixels = labels.len();
                    let d = v.data();
                    let w = g[0] / *valid as f64;
                    acc(grads, nodes, *logits, |gl| {
                        for (p, label) in labels.iter().enumerate() {
                            let Some(l) = *label else { continue };
                            let mx = (0..k).map(|c| d[c * pixels + p]).fold(f64::NEG_INFINITY, f64::max);
                            let z: f64 = (0..k).map(|c| (d[c * pixels + p] - mx).exp()).sum();
                            for c in 0..k {
                                let prob = (d[c * pixels + p] - mx).exp() / z;
                                let target = if c == l { 1.0 } else { 0.0 };
                                gl[c * pixels + p] += w * (prob - target);
                            }
                        }
                    });
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let id = tape.constant(t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let m = tape.constant(t2(&[&[0.3, -1.0], &[2.0, 5.5]]));
        let out = tape.matmul(id, m).unwrap();
        assert_eq!(tape.value(out).unwrap(), tape.value(m).unwrap());

        let a = tape.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.constant(t2(&[&[0.0], &[1.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).unwrap().data(), &[2.0, 4.0]);
        assert_eq!(tape.shape(c).unwrap(), &[2, 1]);

        let z = tape.constant(Tensor::zeros(&[2, 3]));
        let any = tape.constant(Tensor::from_fn(&[3, 4], |i| i as f64 - 3.0));
        let zc = tape.matmul(z, any).unwrap();
        assert_eq!(tape.value(zc).unwrap(), &Tensor::zeros(&[2, 4]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Shape { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(&[&[0.0, 0.0], &[1000.0, 1000.0], &[0.0, 3f64.ln()]]));
        let y = tape.softmax_rows(x).unwrap();
        let v = tape.value(y).unwrap().data().to_vec();
        assert_eq!(&v[..4], &[0.5, 0.5, 0.5, 0.5]);
        assert!((v[4] - 0.25).abs() < 1e-15);
        assert!((v[5] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).unwrap().data(), &[0.0, 0.0, 2.0]);
        let ones = tape.constant(Tensor::ones(&[3]));
        let m = tape.mul(x, ones).unwrap();
        assert_eq!(tape.value(m).unwrap(), tape.value(x).unwrap());
        let h = tape.constant(Tensor::new(vec![1], vec![0.5]).unwrap());
        let p = tape.powf(h, 2.0).unwrap();
        assert_eq!(tape.value(p).unwrap().data(), &[0.25]);
        let bad = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(tape.add(x, bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap(), true);
        let r = tape.relu(x).unwrap();
        let s = tape.sum(r).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn constituent_examples() {
        let mut tape = Tape::new();
        let row = tape.constant(Tensor::full(&[2, 4], 3.0));
        let gamma = tape.constant(Tensor::ones(&[4]));
        let beta = tape.constant(Tensor::zeros(&[4]));
        let ln = tape.layer_norm(row, gamma, beta).unwrap();
        assert!(tape.value(ln).unwrap().data().iter().all(|&v| v == 0.0));

        let tokens = tape.constant(Tensor::from_fn(&[5, 3], |i| (i % 3) as f64 + 0.5));
        let pooled = tape.mean_rows(tokens).unwrap();
        assert_eq!(tape.value(pooled).unwrap().data(), &[0.5, 1.5, 2.5]);

        let z = tape.constant(Tensor::zeros(&[1]));
        let gz = tape.gelu(z).unwrap();
        assert_eq!(tape.value(gz).unwrap().data(), &[0.0]);
    }

    #[test]
    fn backward_simple_cases() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(), true);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().unwrap().data(), &[1.0, 1.0, 1.0]);

        tape.clear_gradients();
        let sq = tape.mul(x, x).unwrap();
        let s2 = tape.sum(sq).unwrap();
        tape.backward(s2).unwrap();
        assert_eq!(tape.grad(x).unwrap().unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn repeated_backward_accumulates_until_cleared() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 3.0]).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        let first = tape.grad(x).unwrap().unwrap().clone();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().unwrap().data(), &[4.0, 12.0]);
        tape.clear_gradients();
        assert!(tape.grad(x).unwrap().is_none());
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().unwrap(), &first);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_vars() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(x), Err(Error::NonScalarRoot(_))));
        let mut other = Tape::new();
        let y = other.leaf(Tensor::scalar(1.0), true);
        assert!(matches!(tape.backward(y), Err(Error::StaleTape)));
        assert!(matches!(tape.value(y), Err(Error::StaleTape)));
    }

    #[test]
    fn retained_interior_matches_explicit_leaf() {
        // chain: h = x*x; u = h*3; root = sum(relu-free) of u*h
        let data = Tensor::new(vec![3], vec![0.7, -1.2, 2.0]).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(data.clone(), true);
        let h = tape.mul(x, x).unwrap();
        tape.retain(h).unwrap();
        let u = tape.scale(h, 3.0).unwrap();
        let w = tape.mul(u, h).unwrap();
        let root = tape.sum(w).unwrap();
        tape.backward(root).unwrap();
        let retained = tape.grad(h).unwrap().unwrap().clone();

        let mut rebuilt = Tape::new();
        let hv = data.map(|v| v * v);
        let h2 = rebuilt.leaf(hv, true);
        let u2 = rebuilt.scale(h2, 3.0).unwrap();
        let w2 = rebuilt.mul(u2, h2).unwrap();
        let root2 = rebuilt.sum(w2).unwrap();
        rebuilt.backward(root2).unwrap();
        assert_eq!(rebuilt.grad(h2).unwrap().unwrap(), &retained);
    }

    #[test]
    fn unreachable_retained_nodes_get_zero_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]), true);
        let side = tape.scale(x, 2.0).unwrap();
        tape.retain(side).unwrap();
        let root = tape.sum(x).unwrap();
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(side).unwrap().unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_ignores_unlabeled_pixels() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[3, 2]), true);
        let loss = tape.softmax_cross_entropy(logits, &[Some(1), None]).unwrap();
        assert!((tape.value(loss).unwrap().data()[0] - 3f64.ln()).abs() < 1e-15);
        let none = tape.softmax_cross_entropy(logits, &[None, None]).unwrap();
        assert_eq!(tape.value(none).unwrap().data()[0], 0.0);
    }
}
