//! Define-by-run reverse-mode differentiation over dense matrices.
//!
//! Each op computes its value eagerly when recorded; `backward` replays the
//! tape in reverse creation order (a valid reverse topological order by
//! construction) and accumulates exactly one gradient per parameter leaf.

use super::matrix::{sigmoid, softmax_rows, DenseMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<usize> },
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    HadamardConst(NodeId, DenseMatrix),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Clamp(NodeId, f64, f64),
    // the additive constant folds into the eager value; backward needs
    // only the multiplier
    Affine(NodeId, f64),
    SoftmaxRows(NodeId),
    SumAll(NodeId),
    MeanRows(NodeId),
    Transpose(NodeId),
    ScaleByScalar(NodeId, NodeId),
    Recip(NodeId),
    Entry(NodeId, usize, usize),
    ConcatRows(Vec<NodeId>),
}

struct Node {
    op: Op,
    value: DenseMatrix,
}

#[derive(Default)]
pub struct GradientTape {
    nodes: Vec<Node>,
}

/// Accumulated gradients keyed by parameter index.
#[derive(Debug, Clone, Default)]
pub struct GradMap {
    grads: Vec<Option<DenseMatrix>>,
}

impl GradMap {
    pub fn get(&self, param: usize) -> Option<&DenseMatrix> {
        self.grads.get(param).and_then(|g| g.as_ref())
    }

    pub fn take(self) -> Vec<Option<DenseMatrix>> {
        self.grads
    }
}

impl GradientTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &DenseMatrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: DenseMatrix) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn dim_err(&self, detail: String) -> Error {
        Error::Dimension {
            op_index: self.nodes.len(),
            detail,
        }
    }

    pub fn constant(&mut self, value: DenseMatrix) -> NodeId {
        self.push(Op::Leaf { param: None }, value)
    }

    /// A differentiable leaf; gradients accumulate under `param_index`.
    pub fn param(&mut self, param_index: usize, value: DenseMatrix) -> NodeId {
        self.push(
            Op::Leaf {
                param: Some(param_index),
            },
            value,
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(self.dim_err(format!(
                "matmul {}x{} * {}x{}",
                va.rows(),
                va.cols(),
                vb.rows(),
                vb.cols()
            )));
        }
        let v = va.matmul(vb);
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if !self.value(a).same_shape(self.value(b)) {
            return Err(self.dim_err("elementwise add shape mismatch".into()));
        }
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a, b), v))
    }

    /// Broadcast a 1xC row over every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(self.dim_err("bias row must be 1 x cols(a)".into()));
        }
        let mut v = va.clone();
        for r in 0..v.rows() {
            for c in 0..v.cols() {
                let x = v.get(r, c) + vr.get(0, c);
                v.set(r, c, x);
            }
        }
        Ok(self.push(Op::AddRow(a, row), v))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if !self.value(a).same_shape(self.value(b)) {
            return Err(self.dim_err("hadamard shape mismatch".into()));
        }
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        Ok(self.push(Op::Hadamard(a, b), v))
    }

    pub fn hadamard_const(&mut self, a: NodeId, mask: DenseMatrix) -> Result<NodeId> {
        if !self.value(a).same_shape(&mask) {
            return Err(self.dim_err("hadamard_const shape mismatch".into()));
        }
        let v = self.value(a).zip(&mask, |x, y| x * y);
        Ok(self.push(Op::HadamardConst(a, mask), v))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Log(a), v)
    }

    /// Clamp to [lo, hi]; gradient is zero outside the open interval.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), v)
    }

    pub fn affine(&mut self, a: NodeId, mul: f64, add: f64) -> NodeId {
        let v = self.value(a).map(|x| mul * x + add);
        self.push(Op::Affine(a, mul), v)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows(self.value(a));
        self.push(Op::SoftmaxRows(a), v)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).values().iter().sum();
        let v = DenseMatrix::from_vec(1, 1, vec![s]).expect("finite sum");
        self.push(Op::SumAll(a), v)
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let rows = va.rows() as f64;
        let mut v = DenseMatrix::zeros(1, va.cols());
        for r in 0..va.rows() {
            for c in 0..va.cols() {
                v.set(0, c, v.get(0, c) + va.get(r, c) / rows);
            }
        }
        self.push(Op::MeanRows(a), v)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    /// Multiply a matrix node by a 1x1 scalar node.
    pub fn scale_by(&mut self, mat: NodeId, scalar: NodeId) -> Result<NodeId> {
        if !self.value(scalar).is_scalar() {
            return Err(self.dim_err("scale_by needs a 1x1 scalar node".into()));
        }
        let s = self.value(scalar).scalar();
        let v = self.value(mat).map(|x| x * s);
        Ok(self.push(Op::ScaleByScalar(mat, scalar), v))
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| 1.0 / x);
        self.push(Op::Recip(a), v)
    }

    /// Extract a single entry as a 1x1 node.
    pub fn entry(&mut self, a: NodeId, r: usize, c: usize) -> Result<NodeId> {
        let va = self.value(a);
        if r >= va.rows() || c >= va.cols() {
            return Err(self.dim_err(format!("entry ({r},{c}) out of range")));
        }
        let v = DenseMatrix::from_vec(1, 1, vec![va.get(r, c)]).expect("finite");
        Ok(self.push(Op::Entry(a, r, c), v))
    }

    /// Stack 1xC nodes into an NxC matrix.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(self.dim_err("concat_rows needs at least one part".into()));
        }
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut values = Vec::new();
        for &p in parts {
            let vp = self.value(p);
            if vp.cols() != cols {
                return Err(self.dim_err("concat_rows column mismatch".into()));
            }
            rows += vp.rows();
            values.extend_from_slice(vp.values());
        }
        let v = DenseMatrix::from_vec(rows, cols, values).expect("finite");
        Ok(self.push(Op::ConcatRows(parts.to_vec()), v))
    }

    /// Reverse pass from a scalar loss node. Returns gradients for every
    /// parameter leaf touched by the graph.
    pub fn backward(&self, loss: NodeId) -> Result<GradMap> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract("backward requires a scalar loss node".into()));
        }
        let mut grads: Vec<Option<DenseMatrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(DenseMatrix::from_vec(1, 1, vec![1.0]).expect("finite"));

        let mut out = GradMap::default();
        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf { param } => {
                    if let Some(p) = param {
                        if out.grads.len() <= *p {
                            out.grads.resize(*p + 1, None);
                        }
                        match &mut out.grads[*p] {
                            Some(acc) => acc.add_assign_scaled(&g, 1.0),
                            slot => *slot = Some(g),
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul(&self.nodes[b.0].value.transpose());
                    let db = self.nodes[a.0].value.transpose().matmul(&g);
                    accumulate(&mut grads, a.0, da);
                    accumulate(&mut grads, b.0, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a.0, g.clone());
                    accumulate(&mut grads, b.0, g);
                }
                Op::AddRow(a, row) => {
                    let mut drow = DenseMatrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            drow.set(0, c, drow.get(0, c) + g.get(r, c));
                        }
                    }
                    accumulate(&mut grads, a.0, g);
                    accumulate(&mut grads, row.0, drow);
                }
                Op::Hadamard(a, b) => {
                    let da = g.zip(&self.nodes[b.0].value, |gv, bv| gv * bv);
                    let db = g.zip(&self.nodes[a.0].value, |gv, av| gv * av);
                    accumulate(&mut grads, a.0, da);
                    accumulate(&mut grads, b.0, db);
                }
                Op::HadamardConst(a, mask) => {
                    let da = g.zip(mask, |gv, mv| gv * mv);
                    accumulate(&mut grads, a.0, da);
                }
                Op::Tanh(a) => {
                    let da = g.zip(&node.value, |gv, y| gv * (1.0 - y * y));
                    accumulate(&mut grads, a.0, da);
                }
                Op::Sigmoid(a) => {
                    let da = g.zip(&node.value, |gv, y| gv * y * (1.0 - y));
                    accumulate(&mut grads, a.0, da);
                }
                Op::Relu(a) => {
                    let da = g.zip(&self.nodes[a.0].value, |gv, x| if x > 0.0 { gv } else { 0.0 });
                    accumulate(&mut grads, a.0, da);
                }
                Op::Exp(a) => {
                    let da = g.zip(&node.value, |gv, y| gv * y);
                    accumulate(&mut grads, a.0, da);
                }
                Op::Log(a) => {
                    let da = g.zip(&self.nodes[a.0].value, |gv, x| gv / x);
                    accumulate(&mut grads, a.0, da);
                }
                Op::Clamp(a, lo, hi) => {
                    let da = g.zip(&self.nodes[a.0].value, |gv, x| {
                        if x > *lo && x < *hi {
                            gv
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, a.0, da);
                }
                Op::Affine(a, mul) => {
                    let da = g.map(|gv| gv * mul);
                    accumulate(&mut grads, a.0, da);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut da = DenseMatrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = (0..y.cols()).map(|c| g.get(r, c) * y.get(r, c)).sum();
                        for c in 0..y.cols() {
                            da.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    accumulate(&mut grads, a.0, da);
                }
                Op::SumAll(a) => {
                    let s = g.scalar();
                    let va = &self.nodes[a.0].value;
                    let da = DenseMatrix::zeros(va.rows(), va.cols()).map(|_| s);
                    accumulate(&mut grads, a.0, da);
                }
                Op::MeanRows(a) => {
                    let va = &self.nodes[a.0].value;
                    let scale = 1.0 / va.rows() as f64;
                    let mut da = DenseMatrix::zeros(va.rows(), va.cols());
                    for r in 0..va.rows() {
                        for c in 0..va.cols() {
                            da.set(r, c, g.get(0, c) * scale);
                        }
                    }
                    accumulate(&mut grads, a.0, da);
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, a.0, g.transpose());
                }
                Op::ScaleByScalar(mat, scalar) => {
                    let s = self.nodes[scalar.0].value.scalar();
                    let dm = g.map(|gv| gv * s);
                    let ds: f64 = g
                        .values()
                        .iter()
                        .zip(self.nodes[mat.0].value.values())
                        .map(|(&gv, &mv)| gv * mv)
                        .sum();
                    accumulate(&mut grads, mat.0, dm);
                    accumulate(
                        &mut grads,
                        scalar.0,
                        DenseMatrix::from_vec(1, 1, vec![ds]).expect("finite"),
                    );
                }
                Op::Recip(a) => {
                    let da = g.zip(&node.value, |gv, y| -gv * y * y);
                    accumulate(&mut grads, a.0, da);
                }
                Op::Entry(a, r, c) => {
                    let va = &self.nodes[a.0].value;
                    let mut da = DenseMatrix::zeros(va.rows(), va.cols());
                    da.set(*r, *c, g.scalar());
                    accumulate(&mut grads, a.0, da);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let vp = &self.nodes[p.0].value;
                        let mut dp = DenseMatrix::zeros(vp.rows(), vp.cols());
                        for r in 0..vp.rows() {
                            for c in 0..vp.cols() {
                                dp.set(r, c, g.get(offset + r, c));
                            }
                        }
                        offset += vp.rows();
                        accumulate(&mut grads, p.0, dp);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<DenseMatrix>], idx: usize, g: DenseMatrix) {
    match &mut grads[idx] {
        Some(acc) => acc.add_assign_scaled(&g, 1.0),
        slot => *slot = Some(g),
    }
}
