//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to the [`Tape`]; node ids are therefore a
//! topological order and the backward sweep simply walks them in reverse.
//! Nodes that do not depend on a parameter leaf carry no gradient and are
//! skipped, so constant inputs (features, masks, augmentation coefficients)
//! cost nothing on the way back.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{matmul_nt, matmul_tn, Tensor};

/// One anchor row of a hinge (triplet) objective over a similarity-like
/// matrix `D`: each `(row, p)` with `p` in `positives` is compared against
/// every `(row, n)` with `n` in `negatives`.
#[derive(Debug, Clone)]
pub struct HingeAnchor {
    pub row: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Relu(usize),
    Softplus(usize),
    Sum(usize),
    RowSum(usize),
    RowLogSumExp(usize, Option<Rc<Vec<bool>>>),
    GatherRows(usize, Rc<Vec<usize>>),
    GatherEntries(usize, Rc<Vec<usize>>),
    ConcatRows(Vec<usize>),
    NormalizeRows(usize, f64),
    Hinge {
        d: usize,
        anchors: Rc<Vec<HingeAnchor>>,
        margin: f64,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward/backward pass. Single-owner; build a
/// fresh tape per step.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

/// Gradients of a scalar root with respect to every node on the tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; exactly zero when the root does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Tensor {
        match &self.grads[var.id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.id]),
        }
    }

    pub fn take(&mut self, var: Var<'_>) -> Tensor {
        match self.grads[var.id].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[var.id]),
        }
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

    /// A differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
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

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if !nodes[root.id].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got shape {:?}",
                nodes[root.id].value.shape()
            )));
        }
        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root.id] = Some(Tensor::full(nodes[root.id].value.shape(), 1.0));

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = Some(g);
                continue;
            }
            let wants = |p: usize| nodes[p].requires_grad;
            let mut acc = |p: usize, t: Tensor| match &mut grads[p] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if wants(*a) {
                        acc(*a, matmul_nt(&g, &nodes[*b].value));
                    }
                    if wants(*b) {
                        acc(*b, matmul_tn(&nodes[*a].value, &g));
                    }
                }
                Op::Transpose(a) => acc(*a, g.transpose()),
                Op::Add(a, b) => {
                    if wants(*a) {
                        acc(*a, reduce_to(&g, &nodes[*a].value));
                    }
                    if wants(*b) {
                        acc(*b, reduce_to(&g, &nodes[*b].value));
                    }
                }
                Op::Sub(a, b) => {
                    if wants(*a) {
                        acc(*a, reduce_to(&g, &nodes[*a].value));
                    }
                    if wants(*b) {
                        acc(*b, reduce_to(&g, &nodes[*b].value).map(|v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    if wants(*a) {
                        acc(*a, reduce_to(&broadcast_mul(&g, vb), va));
                    }
                    if wants(*b) {
                        acc(*b, reduce_to(&broadcast_mul(&g, va), vb));
                    }
                }
                Op::Scale(a, s) => acc(*a, g.map(|v| v * s)),
                Op::Exp(a) => acc(*a, g.zip_map(&node.value, |g, y| g * y)),
                Op::Log(a) => acc(*a, g.zip_map(&nodes[*a].value, |g, x| g / x)),
                Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |g, y| g * (1.0 - y * y))),
                Op::Relu(a) => acc(
                    *a,
                    g.zip_map(&nodes[*a].value, |g, x| if x > 0.0 { g } else { 0.0 }),
                ),
                Op::Softplus(a) => acc(*a, g.zip_map(&nodes[*a].value, |g, x| g * sigmoid(x))),
                Op::Sum(a) => acc(*a, Tensor::full(nodes[*a].value.shape(), g.item())),
                Op::RowSum(a) => {
                    let x = &nodes[*a].value;
                    let c = x.cols();
                    let mut out = Tensor::zeros(x.shape());
                    for r in 0..x.rows() {
                        let gv = g.data()[r];
                        out.row_mut(r).iter_mut().for_each(|v| *v = gv);
                    }
                    debug_assert_eq!(out.len(), x.rows() * c);
                    acc(*a, out);
                }
                Op::RowLogSumExp(a, mask) => {
                    let x = &nodes[*a].value;
                    let c = x.cols();
                    let mut out = Tensor::zeros(x.shape());
                    for r in 0..x.rows() {
                        let lse = node.value.data()[r];
                        let gv = g.data()[r];
                        let xr = x.row(r);
                        let orow = out.row_mut(r);
                        for j in 0..c {
                            if mask.as_ref().is_none_or(|m| m[r * c + j]) {
                                orow[j] = gv * (xr[j] - lse).exp();
                            }
                        }
                    }
                    acc(*a, out);
                }
                Op::GatherRows(a, idx) => {
                    let x = &nodes[*a].value;
                    let mut out = Tensor::zeros(x.shape());
                    for (k, &i) in idx.iter().enumerate() {
                        for (o, v) in out.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    acc(*a, out);
                }
                Op::GatherEntries(a, idx) => {
                    let mut out = Tensor::zeros(nodes[*a].value.shape());
                    for (&i, &gv) in idx.iter().zip(g.data()) {
                        out.data_mut()[i] += gv;
                    }
                    acc(*a, out);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = nodes[p].value.rows();
                        if wants(p) {
                            let c = g.cols();
                            let slice = g.data()[offset * c..(offset + rows) * c].to_vec();
                            acc(p, Tensor::new(nodes[p].value.shape().to_vec(), slice).unwrap());
                        }
                        offset += rows;
                    }
                }
                Op::NormalizeRows(a, eps) => {
                    let x = &nodes[*a].value;
                    let y = &node.value;
                    let mut out = Tensor::zeros(x.shape());
                    for r in 0..x.rows() {
                        let norm = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                        let gr = g.row(r);
                        let orow = out.row_mut(r);
                        if norm > *eps {
                            let yr = y.row(r);
                            let proj: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..orow.len() {
                                orow[j] = (gr[j] - yr[j] * proj) / norm;
                            }
                        } else {
                            for j in 0..orow.len() {
                                orow[j] = gr[j] / eps;
                            }
                        }
                    }
                    acc(*a, out);
                }
                Op::Hinge { d, anchors, margin } => {
                    let dv = &nodes[*d].value;
                    let c = dv.cols();
                    let total_pos: usize = anchors.iter().map(|a| a.positives.len()).sum();
                    let mut out = Tensor::zeros(dv.shape());
                    let gv = g.item();
                    for anchor in anchors.iter() {
                        if anchor.negatives.is_empty() {
                            continue;
                        }
                        let w = gv / (total_pos as f64 * anchor.negatives.len() as f64);
                        let base = anchor.row * c;
                        for &p in &anchor.positives {
                            let dp = dv.data()[base + p];
                            for &n in &anchor.negatives {
                                if dp - dv.data()[base + n] + margin > 0.0 {
                                    out.data_mut()[base + p] += w;
                                    out.data_mut()[base + n] -= w;
                                }
                            }
                        }
                    }
                    acc(*d, out);
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Overflow-free `ln(1 + eˣ)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Sums `g` down to the shape of `target` (scalar broadcasting only).
fn reduce_to(g: &Tensor, target: &Tensor) -> Tensor {
    if target.len() == g.len() {
        g.clone()
    } else {
        Tensor::new(target.shape().to_vec(), vec![g.sum()]).unwrap()
    }
}

fn broadcast_mul(g: &Tensor, other: &Tensor) -> Tensor {
    if other.len() == g.len() {
        g.zip_map(other, |a, b| a * b)
    } else {
        let s = other.item();
        g.map(|v| v * s)
    }
}

fn check_broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.len() == 1 {
        Ok(a.shape().to_vec())
    } else if a.len() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::Dimension {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        })
    }
}

fn broadcast_apply(a: &Tensor, b: &Tensor, shape: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = if a.len() == b.len() {
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
    } else if b.len() == 1 {
        let y = b.item();
        a.data().iter().map(|&x| f(x, y)).collect()
    } else {
        let x = a.item();
        b.data().iter().map(|&y| f(x, y)).collect()
    };
    Tensor::new(shape, data).unwrap()
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

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn backward(&self) -> Result<Gradients> {
        self.tape.backward(*self)
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.tape.requires_grad(self.id);
        self.tape.push(value, op, rg)
    }

    fn binary(&self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.tape.requires_grad(self.id) || self.tape.requires_grad(other.id);
        self.tape.push(value, op, rg)
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let out = self.value().matmul(&other.value())?;
        Ok(self.binary(other, out, Op::MatMul(self.id, other.id)))
    }

    pub fn t(&self) -> Var<'t> {
        let out = self.value().transpose();
        self.unary(out, Op::Transpose(self.id))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let shape = check_broadcast("add", &a, &b)?;
        let out = broadcast_apply(&a, &b, shape, |x, y| x + y);
        Ok(self.binary(other, out, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let shape = check_broadcast("sub", &a, &b)?;
        let out = broadcast_apply(&a, &b, shape, |x, y| x - y);
        Ok(self.binary(other, out, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let shape = check_broadcast("mul", &a, &b)?;
        let out = broadcast_apply(&a, &b, shape, |x, y| x * y);
        Ok(self.binary(other, out, Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let out = self.value().map(|v| v * s);
        self.unary(out, Op::Scale(self.id, s))
    }

    pub fn exp(&self) -> Var<'t> {
        let out = self.value().map(f64::exp);
        self.unary(out, Op::Exp(self.id))
    }

    pub fn log(&self) -> Result<Var<'t>> {
        let x = self.value();
        if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let out = x.map(f64::ln);
        Ok(self.unary(out, Op::Log(self.id)))
    }

    pub fn tanh(&self) -> Var<'t> {
        let out = self.value().map(f64::tanh);
        self.unary(out, Op::Tanh(self.id))
    }

    pub fn relu(&self) -> Var<'t> {
        let out = self.value().map(|v| v.max(0.0));
        self.unary(out, Op::Relu(self.id))
    }

    pub fn softplus(&self) -> Var<'t> {
        let out = self.value().map(softplus);
        self.unary(out, Op::Softplus(self.id))
    }

    /// `ln σ(x) = −softplus(−x)`.
    pub fn log_sigmoid(&self) -> Var<'t> {
        self.scale(-1.0).softplus().scale(-1.0)
    }

    pub fn sum(&self) -> Var<'t> {
        let out = Tensor::scalar(self.value().sum());
        self.unary(out, Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Row sums as an `r × 1` column.
    pub fn row_sum(&self) -> Var<'t> {
        let x = self.value();
        let data = x.iter_rows().map(|r| r.iter().sum()).collect();
        self.unary(Tensor::matrix(x.rows(), 1, data), Op::RowSum(self.id))
    }

    /// Stable per-row log-sum-exp as an `r × 1` column. With a mask, only
    /// entries whose mask bit is set take part; every row must keep at
    /// least one entry.
    pub fn row_logsumexp(&self, mask: Option<Rc<Vec<bool>>>) -> Result<Var<'t>> {
        let x = self.value();
        let c = x.cols();
        if let Some(m) = &mask {
            if m.len() != x.len() {
                return Err(Error::Dimension {
                    op: "row_logsumexp",
                    left: x.shape().to_vec(),
                    right: vec![m.len()],
                });
            }
        }
        let mut data = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let keep = |j: usize| mask.as_ref().is_none_or(|m| m[r * c + j]);
            let row = x.row(r);
            let max = (0..c)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::contract(format!("row_logsumexp: row {r} is fully masked")));
            }
            let s: f64 = (0..c).filter(|&j| keep(j)).map(|j| (row[j] - max).exp()).sum();
            data.push(max + s.ln());
        }
        Ok(self.unary(Tensor::matrix(x.rows(), 1, data), Op::RowLogSumExp(self.id, mask)))
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.rows()) {
            return Err(Error::contract(format!(
                "gather_rows index {bad} out of range for {} rows",
                x.rows()
            )));
        }
        let out = x.select_rows(idx);
        Ok(self.unary(out, Op::GatherRows(self.id, Rc::new(idx.to_vec()))))
    }

    /// Picks entries by flat row-major index into a `k × 1` column.
    pub fn gather_entries(&self, idx: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.len()) {
            return Err(Error::contract(format!(
                "gather_entries index {bad} out of range for {} entries",
                x.len()
            )));
        }
        let out = Tensor::matrix(idx.len(), 1, idx.iter().map(|&i| x.data()[i]).collect());
        Ok(self.unary(out, Op::GatherEntries(self.id, Rc::new(idx.to_vec()))))
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::vstack(&refs)?;
        let tape = first.tape;
        let rg = parts.iter().any(|p| tape.requires_grad(p.id));
        Ok(tape.push(out, Op::ConcatRows(parts.iter().map(|p| p.id).collect()), rg))
    }

    /// Divides each row by `max(‖row‖, eps)`.
    pub fn normalize_rows(&self, eps: f64) -> Var<'t> {
        let x = self.value();
        let mut out = (*x).clone();
        for r in 0..x.rows() {
            let norm = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            out.row_mut(r).iter_mut().for_each(|v| *v /= norm);
        }
        self.unary(out, Op::NormalizeRows(self.id, eps))
    }

    /// Mean over all `(anchor, positive)` of the mean over that anchor's
    /// negatives of `max(0, D[a,p] − D[a,n] + margin)`.
    pub fn hinge(&self, anchors: Rc<Vec<HingeAnchor>>, margin: f64) -> Result<Var<'t>> {
        let d = self.value();
        let (rows, c) = (d.rows(), d.cols());
        let mut total = 0.0;
        let mut total_pos = 0usize;
        for a in anchors.iter() {
            if a.row >= rows || a.positives.iter().chain(&a.negatives).any(|&j| j >= c) {
                return Err(Error::contract("hinge anchor index out of range"));
            }
            total_pos += a.positives.len();
            if a.negatives.is_empty() {
                continue;
            }
            let base = a.row * c;
            let inv = 1.0 / a.negatives.len() as f64;
            for &p in &a.positives {
                let dp = d.data()[base + p];
                let mut s = 0.0;
                for &n in &a.negatives {
                    s += (dp - d.data()[base + n] + margin).max(0.0);
                }
                total += s * inv;
            }
        }
        if total_pos == 0 {
            return Err(Error::contract("hinge needs at least one positive"));
        }
        let out = Tensor::scalar(total / total_pos as f64);
        Ok(self.unary(
            out,
            Op::Hinge {
                d: self.id,
                anchors,
                margin,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn product_rule() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let y = tape.param(Tensor::scalar(3.0));
        let z = x.mul(y).unwrap();
        let g = z.backward().unwrap();
        assert_eq!(g.get(x).item(), 3.0);
        assert_eq!(g.get(y).item(), 2.0);
    }

    #[test]
    fn sum_exp_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::matrix(1, 2, vec![0.0, 1.0]));
        let g = x.exp().sum().backward().unwrap();
        let gx = g.get(x);
        assert!(close(gx.data()[0], 1.0, 1e-15));
        assert!(close(gx.data()[1], std::f64::consts::E, 1e-15));
    }

    #[test]
    fn constant_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let unused = tape.param(Tensor::matrix(1, 2, vec![5.0, 6.0]));
        let c = tape.constant(Tensor::scalar(4.0));
        let root = c.scale(2.0).add(x.sum().scale(0.0)).unwrap();
        let g = root.backward().unwrap();
        assert!(g.get(unused).data().iter().all(|&v| v == 0.0));
        assert!(g.get(x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let tape = Tape::new();
        let x = tape.param(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        assert!(matches!(x.exp().backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::new();
        let zeros = tape.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]));
        assert_eq!(zeros.exp().value().data(), &[1.0, 1.0]);

        let x = tape.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]));
        let back = x.exp().log().unwrap();
        for (a, b) in back.value().data().iter().zip(x.value().data()) {
            assert!(close(*a, *b, 1e-15));
        }

        let r = tape.constant(Tensor::matrix(1, 2, vec![-1.0, 2.0]));
        assert_eq!(r.relu().value().data(), &[0.0, 2.0]);
    }

    #[test]
    fn log_of_nonpositive_is_domain_error() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]));
        assert!(matches!(x.log(), Err(Error::Domain { .. })));
    }

    #[test]
    fn logsumexp_is_overflow_safe() {
        let tape = Tape::new();
        let x = tape.param(Tensor::matrix(2, 3, vec![1e3, 999.0, -1e3, 1e3, 1e3, 1e3]));
        let lse = x.row_logsumexp(None).unwrap();
        assert!(lse.value().is_finite());
        let expected = 1e3 + (1.0 + (-1.0f64).exp() + (-2000.0f64).exp()).ln();
        assert!(close(lse.value().data()[0], expected, 1e-9));
        assert!(close(lse.value().data()[1], 1e3 + 3f64.ln(), 1e-9));
        let g = lse.sum().backward().unwrap();
        assert!(g.get(x).is_finite());
    }

    #[test]
    fn masked_logsumexp_ignores_masked_entries() {
        let tape = Tape::new();
        let x = tape.param(Tensor::matrix(1, 3, vec![1.0, 50.0, 2.0]));
        let mask = Rc::new(vec![true, false, true]);
        let lse = x.row_logsumexp(Some(mask)).unwrap();
        let expected = (1f64.exp() + 2f64.exp()).ln();
        assert!(close(lse.item(), expected, 1e-12));
        let g = lse.backward().unwrap().get(x);
        assert_eq!(g.data()[1], 0.0);
    }

    #[test]
    fn broadcast_rules() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(a.add(b), Err(Error::Dimension { .. })));
        let s = tape.constant(Tensor::scalar(1.5));
        assert_eq!(a.add(s).unwrap().value().data(), &[1.5; 6]);
        assert_eq!(s.add(a).unwrap().shape(), vec![2, 3]);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let tape = Tape::new();
            let x = tape.param(Tensor::matrix(3, 3, (0..9).map(|v| (v as f64).sin()).collect()));
            let y = x.matmul(x.t()).unwrap().tanh().row_logsumexp(None).unwrap().sum();
            y.item().to_bits()
        };
        assert_eq!(run(), run());
    }
}
