//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive op as it executes. Calling
//! [`Tape::backward`] on a scalar walks the record in exact reverse order and
//! sums every pullback into the leaves. Leaves registered with
//! [`Tape::param`] are reported back by parameter id; everything registered
//! with [`Tape::constant`] is treated as data.
//!
//! The op set is the one the models in this crate need, and nothing else.
//! Broadcasting exists only for adding a `1 x n` bias to every row.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use thiserror::Error;

use crate::tensor::{argmax, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },
    #[error("{op}: index {index} out of range for extent {extent}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("{op}: temperature must be positive, got {value}")]
    InvalidTemperature { op: &'static str, value: f64 },
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput([usize; 2]),
}

pub type Result<T> = std::result::Result<T, GradError>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat { parts: Vec<Var>, axis: Axis },
    Slice { src: Var, axis: Axis, start: usize },
    Embedding { table: Var, ids: Vec<usize> },
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Softmax { src: Var, temperature: f64 },
    LogSoftmax(Var),
    MaxPool { src: Var, argmax: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Gather { src: Var, indices: Vec<usize> },
    StraightThrough(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
}

/// Gradients of one backward pass, keyed by parameter id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    by_param: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: usize) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    pub fn into_map(self) -> BTreeMap<usize, Tensor> {
        self.by_param
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(GradError::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        })
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_vec(t.rows(), t.cols(), t.data().iter().map(|&v| f(v)).collect())
}

fn softmax_rows(x: &Tensor, temperature: f64) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let o = out.row_mut(r);
        let mut z = 0.0;
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = ((xi - m) / temperature).exp();
            z += *oi;
        }
        for oi in o.iter_mut() {
            *oi /= z;
        }
    }
    out
}

fn log_softmax_rows(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for (oi, &xi) in out.row_mut(r).iter_mut().zip(row) {
            *oi = xi - lse;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Registers parameter `id`. Registering the same id twice returns the
    /// same leaf, so its gradient collects every use.
    pub fn param(&mut self, id: usize, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(value.clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(GradError::ShapeMismatch {
                op: "matmul",
                left: ta.shape(),
                right: tb.shape(),
            });
        }
        let out = ta.matmul(tb);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    /// Elementwise sum. `b` may also be a `1 x n` row added to every row of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = if ta.shape() == tb.shape() {
            let mut o = ta.clone();
            o.add_assign(tb);
            o
        } else if tb.rows() == 1 && tb.cols() == ta.cols() {
            let mut o = ta.clone();
            for r in 0..o.rows() {
                for (x, &y) in o.row_mut(r).iter_mut().zip(tb.data()) {
                    *x += y;
                }
            }
            o
        } else {
            return Err(GradError::ShapeMismatch {
                op: "add",
                left: ta.shape(),
                right: tb.shape(),
            });
        };
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same("sub", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::from_vec(ta.rows(), ta.cols(), data);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same("mul", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(ta.rows(), ta.cols(), data);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = map(self.value(a), |v| v * k);
        self.push(out, Op::Scale(a, k))
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let first = match parts.first() {
            Some(&p) => self.value(p),
            None => {
                return Err(GradError::Invalid {
                    op: "concat",
                    reason: "no inputs".into(),
                })
            }
        };
        let out = match axis {
            Axis::Cols => {
                let rows = first.rows();
                let mut cols = 0;
                for &p in parts {
                    let t = self.value(p);
                    if t.rows() != rows {
                        return Err(GradError::ShapeMismatch {
                            op: "concat",
                            left: first.shape(),
                            right: t.shape(),
                        });
                    }
                    cols += t.cols();
                }
                let mut out = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    let mut off = 0;
                    for &p in parts {
                        let t = self.value(p);
                        out.row_mut(r)[off..off + t.cols()].copy_from_slice(t.row(r));
                        off += t.cols();
                    }
                }
                out
            }
            Axis::Rows => {
                let cols = first.cols();
                let mut data = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let t = self.value(p);
                    if t.cols() != cols {
                        return Err(GradError::ShapeMismatch {
                            op: "concat",
                            left: first.shape(),
                            right: t.shape(),
                        });
                    }
                    rows += t.rows();
                    data.extend_from_slice(t.data());
                }
                Tensor::from_vec(rows, cols, data)
            }
        };
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn slice(&mut self, src: Var, axis: Axis, start: usize, len: usize) -> Result<Var> {
        let t = self.value(src);
        let extent = match axis {
            Axis::Rows => t.rows(),
            Axis::Cols => t.cols(),
        };
        if start + len > extent {
            return Err(GradError::IndexOutOfRange {
                op: "slice",
                index: start + len,
                extent,
            });
        }
        let out = match axis {
            Axis::Rows => Tensor::from_vec(
                len,
                t.cols(),
                t.data()[start * t.cols()..(start + len) * t.cols()].to_vec(),
            ),
            Axis::Cols => {
                let mut o = Tensor::zeros(t.rows(), len);
                for r in 0..t.rows() {
                    o.row_mut(r).copy_from_slice(&t.row(r)[start..start + len]);
                }
                o
            }
        };
        Ok(self.push(out, Op::Slice { src, axis, start }))
    }

    pub fn row(&mut self, src: Var, r: usize) -> Result<Var> {
        self.slice(src, Axis::Rows, r, 1)
    }

    /// Rows `ids` of `table`, stacked.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let mut out = Tensor::zeros(ids.len(), t.cols());
        for (i, &id) in ids.iter().enumerate() {
            if id >= t.rows() {
                return Err(GradError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    extent: t.rows(),
                });
            }
            out.row_mut(i).copy_from_slice(t.row(id));
        }
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = map(self.value(a), f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        });
        self.push(out, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = map(self.value(a), f64::exp);
        self.push(out, Op::Exp(a))
    }

    /// Row-wise `softmax(x / temperature)`.
    pub fn softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        // NaN compares false, so it is rejected here too.
        if !(temperature > 0.0) {
            return Err(GradError::InvalidTemperature {
                op: "softmax",
                value: temperature,
            });
        }
        let out = softmax_rows(self.value(a), temperature);
        Ok(self.push(
            out,
            Op::Softmax {
                src: a,
                temperature,
            },
        ))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let out = log_softmax_rows(self.value(a));
        self.push(out, Op::LogSoftmax(a))
    }

    /// Column-wise maximum over rows (max-pool over time). Ties go to the
    /// earliest row.
    pub fn max_pool(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rows() == 0 {
            return Err(GradError::Invalid {
                op: "max_pool",
                reason: "empty sequence".into(),
            });
        }
        let mut out = Tensor::zeros(1, t.cols());
        let mut arg = vec![0; t.cols()];
        for c in 0..t.cols() {
            let mut best = t.get(0, c);
            for r in 1..t.rows() {
                let v = t.get(r, c);
                if v > best {
                    best = v;
                    arg[c] = r;
                }
            }
            out.set(0, c, best);
        }
        Ok(self.push(out, Op::MaxPool { src: a, argmax: arg }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.len().max(1) as f64);
        self.push(out, Op::Mean(a))
    }

    /// `out[i] = src[i, indices[i]]`, an `m x 1` column.
    pub fn gather(&mut self, src: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(src);
        if indices.len() != t.rows() {
            return Err(GradError::ShapeMismatch {
                op: "gather",
                left: t.shape(),
                right: [indices.len(), 1],
            });
        }
        let mut out = Tensor::zeros(t.rows(), 1);
        for (r, &c) in indices.iter().enumerate() {
            if c >= t.cols() {
                return Err(GradError::IndexOutOfRange {
                    op: "gather",
                    index: c,
                    extent: t.cols(),
                });
            }
            out.set(r, 0, t.get(r, c));
        }
        Ok(self.push(
            out,
            Op::Gather {
                src,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Forward: one-hot rows at `indices`. Backward: identity into `src`.
    pub fn straight_through(&mut self, src: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(src);
        if indices.len() != t.rows() {
            return Err(GradError::ShapeMismatch {
                op: "straight_through",
                left: t.shape(),
                right: [indices.len(), 1],
            });
        }
        let mut out = Tensor::zeros(t.rows(), t.cols());
        for (r, &c) in indices.iter().enumerate() {
            if c >= t.cols() {
                return Err(GradError::IndexOutOfRange {
                    op: "straight_through",
                    index: c,
                    extent: t.cols(),
                });
            }
            out.set(r, c, 1.0);
        }
        Ok(self.push(out, Op::StraightThrough(src)))
    }

    /// Hard argmax variant of [`Tape::straight_through`].
    pub fn straight_through_argmax(&mut self, src: Var) -> Result<Var> {
        let t = self.value(src);
        let idx: Vec<usize> = (0..t.rows()).map(|r| argmax(t.row(r))).collect();
        self.straight_through(src, &idx)
    }

    /// `Σ_i out_i` for a list of scalars.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        match terms {
            [] => Ok(self.constant(Tensor::scalar(0.0))),
            [one] => Ok(*one),
            _ => {
                let stacked = self.concat(terms, Axis::Rows)?;
                Ok(self.sum(stacked))
            }
        }
    }

    /// Reverse sweep from the scalar `out`.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let shape = self.value(out).shape();
        if shape != [1, 1] {
            return Err(GradError::NonScalarOutput(shape));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(out.0 + 1);
        grads.resize_with(out.0 + 1, || None);
        grads[out.0] = Some(Tensor::scalar(1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        let mut by_param = BTreeMap::new();
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let y = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    by_param.insert(*id, g);
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_nt(self.value(*b));
                    let gb = self.value(*a).matmul_tn(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::Add(a, b) => {
                    let tb = self.value(*b);
                    if tb.rows() == g.rows() {
                        acc(&mut grads, *b, g.clone());
                    } else {
                        let mut gb = Tensor::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (x, &y) in gb.data_mut().iter_mut().zip(g.row(r)) {
                                *x += y;
                            }
                        }
                        acc(&mut grads, *b, gb);
                    }
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, map(&g, |v| -v));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ga = Tensor::from_vec(
                        g.rows(),
                        g.cols(),
                        g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect(),
                    );
                    let gb = Tensor::from_vec(
                        g.rows(),
                        g.cols(),
                        g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect(),
                    );
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, k) => acc(&mut grads, *a, map(&g, |v| v * k)),
                Op::Concat { parts, axis } => {
                    let mut off = 0;
                    for &p in parts {
                        let t = self.value(p);
                        let gp = match axis {
                            Axis::Cols => {
                                let mut gp = Tensor::zeros(t.rows(), t.cols());
                                for r in 0..t.rows() {
                                    gp.row_mut(r)
                                        .copy_from_slice(&g.row(r)[off..off + t.cols()]);
                                }
                                off += t.cols();
                                gp
                            }
                            Axis::Rows => {
                                let gp = Tensor::from_vec(
                                    t.rows(),
                                    t.cols(),
                                    g.data()[off * t.cols()..(off + t.rows()) * t.cols()]
                                        .to_vec(),
                                );
                                off += t.rows();
                                gp
                            }
                        };
                        acc(&mut grads, p, gp);
                    }
                }
                Op::Slice { src, axis, start } => {
                    let t = self.value(*src);
                    let mut gs = Tensor::zeros(t.rows(), t.cols());
                    match axis {
                        Axis::Rows => {
                            let c = t.cols();
                            gs.data_mut()[start * c..start * c + g.len()]
                                .copy_from_slice(g.data());
                        }
                        Axis::Cols => {
                            for r in 0..t.rows() {
                                gs.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                            }
                        }
                    }
                    acc(&mut grads, *src, gs);
                }
                Op::Embedding { table, ids } => {
                    let t = self.value(*table);
                    let mut gt = Tensor::zeros(t.rows(), t.cols());
                    for (i, &id) in ids.iter().enumerate() {
                        for (x, &y) in gt.row_mut(id).iter_mut().zip(g.row(i)) {
                            *x += y;
                        }
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::Tanh(a) => {
                    let ga = Tensor::from_vec(
                        g.rows(),
                        g.cols(),
                        g.data().iter().zip(y.data()).map(|(g, y)| g * (1.0 - y * y)).collect(),
                    );
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = Tensor::from_vec(
                        g.rows(),
                        g.cols(),
                        g.data().iter().zip(y.data()).map(|(g, y)| g * y * (1.0 - y)).collect(),
                    );
                    acc(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let ga = Tensor::from_vec(
                        g.rows(),
                        g.cols(),
                        g.data()
                            .iter()
                            .zip(x.data())
                            .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                            .collect(),
                    );
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = Tensor::from_vec(
                        g.rows(),
                        g.cols(),
                        g.data().iter().zip(y.data()).map(|(g, y)| g * y).collect(),
                    );
                    acc(&mut grads, *a, ga);
                }
                Op::Softmax { src, temperature } => {
                    let mut ga = Tensor::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, &gi), &yi) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *o = yi * (gi - dot) / temperature;
                        }
                    }
                    acc(&mut grads, *src, ga);
                }
                Op::LogSoftmax(a) => {
                    let mut ga = Tensor::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let total: f64 = gr.iter().sum();
                        for ((o, &gi), &yi) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *o = gi - yi.exp() * total;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::MaxPool { src, argmax } => {
                    let t = self.value(*src);
                    let mut gs = Tensor::zeros(t.rows(), t.cols());
                    for (c, &r) in argmax.iter().enumerate() {
                        gs.set(r, c, g.get(0, c));
                    }
                    acc(&mut grads, *src, gs);
                }
                Op::Sum(a) => {
                    let t = self.value(*a);
                    acc(&mut grads, *a, Tensor::filled(t.rows(), t.cols(), g.item()));
                }
                Op::Mean(a) => {
                    let t = self.value(*a);
                    let k = g.item() / t.len().max(1) as f64;
                    acc(&mut grads, *a, Tensor::filled(t.rows(), t.cols(), k));
                }
                Op::Gather { src, indices } => {
                    let t = self.value(*src);
                    let mut gs = Tensor::zeros(t.rows(), t.cols());
                    for (r, &c) in indices.iter().enumerate() {
                        gs.set(r, c, g.get(r, 0));
                    }
                    acc(&mut grads, *src, gs);
                }
                Op::StraightThrough(a) => acc(&mut grads, *a, g),
            }
        }
        Ok(Gradients { by_param })
    }
}

/// Outcome of [`finite_difference_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(tensor, flat index)` with the largest error.
    pub worst: (usize, usize),
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
///
/// The floor keeps coordinates whose true derivative is ~0 from reporting
/// round-off noise as a large relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Picks `n` coordinates uniformly over all entries of `params`
/// (with replacement when `n` exceeds the entry count).
pub fn sample_coordinates<R: Rng>(params: &[Tensor], n: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let total: usize = params.iter().map(Tensor::len).sum();
    if total == 0 {
        return Vec::new();
    }
    (0..n)
        .map(|_| {
            let mut k = rng.random_range(0..total);
            let mut t = 0;
            while k >= params[t].len() {
                k -= params[t].len();
                t += 1;
            }
            (t, k)
        })
        .collect()
}

/// Compares `analytic` against five-point central differences of `f` at
/// the listed coordinates and returns the largest relative error.
pub fn finite_difference_check<F>(
    mut f: F,
    params: &[Tensor],
    analytic: &[Tensor],
    coords: &[(usize, usize)],
    eps: f64,
) -> FdReport
where
    F: FnMut(&[Tensor]) -> f64,
{
    let mut work = params.to_vec();
    let mut report = FdReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: (0, 0),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for &(t, k) in coords {
        let x0 = work[t].data()[k];
        let mut eval = |x: f64, work: &mut Vec<Tensor>| {
            work[t].data_mut()[k] = x;
            f(work)
        };
        let f_p1 = eval(x0 + eps, &mut work);
        let f_m1 = eval(x0 - eps, &mut work);
        let f_p2 = eval(x0 + 2.0 * eps, &mut work);
        let f_m2 = eval(x0 - 2.0 * eps, &mut work);
        work[t].data_mut()[k] = x0;
        let numeric = (8.0 * (f_p1 - f_m1) - (f_p2 - f_m2)) / (12.0 * eps);
        let a = analytic[t].data()[k];
        let err = relative_error(a, numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.checked == 1 {
            report.max_rel_error = err;
            report.worst = (t, k);
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor {
        Tensor::from_vec(
            r,
            c,
            (0..r * c).map(|_| rng.random_range(-scale..scale)).collect(),
        )
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(1, 5, 0.3));
        let y = tape.softmax(x, 1.0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&mut rng, 4, 7, 5.0));
        let ls = tape.log_softmax(x);
        let s = tape.softmax(x, 1.0).unwrap();
        for (a, b) in tape.value(ls).data().iter().zip(tape.value(s).data()) {
            assert!((a - b.ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rejects_non_positive_temperature() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(1, 2, 1.0));
        assert!(matches!(
            tape.softmax(x, 0.0),
            Err(GradError::InvalidTemperature { .. })
        ));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(2, 3));
        assert_eq!(
            tape.matmul(a, b),
            Err(GradError::ShapeMismatch {
                op: "matmul",
                left: [2, 3],
                right: [2, 3]
            })
        );
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.param(0, &Tensor::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5]]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.param(0).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_two_x() {
        let xv = Tensor::row_vector(vec![1.5, -0.25, 4.0]);
        let mut tape = Tape::new();
        let x = tape.param(0, &xv);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.param(0).unwrap().data(), &[3.0, -0.5, 8.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(0, &Tensor::zeros(1, 2));
        assert_eq!(tape.backward(x), Err(GradError::NonScalarOutput([1, 2])));
    }

    #[test]
    fn unused_params_get_no_gradient_entry() {
        let mut tape = Tape::new();
        let a = tape.param(0, &Tensor::scalar(2.0));
        let _b = tape.param(1, &Tensor::scalar(5.0));
        let s = tape.sum(a);
        let g = tape.backward(s).unwrap();
        assert!(g.param(1).is_none());
    }

    #[test]
    fn straight_through_forwards_hard_and_passes_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(0, &Tensor::row_vector(vec![0.1, 0.7, 0.2]));
        let st = tape.straight_through_argmax(x).unwrap();
        assert_eq!(tape.value(st).data(), &[0.0, 1.0, 0.0]);
        let w = tape.constant(Tensor::row_vector(vec![1.0, 2.0, 3.0]));
        let p = tape.mul(st, w).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.param(0).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    fn two_layer(tape: &mut Tape, params: &[Tensor], x: &Tensor) -> Var {
        let x = tape.constant(x.clone());
        let w1 = tape.param(0, &params[0]);
        let b1 = tape.param(1, &params[1]);
        let w2 = tape.param(2, &params[2]);
        let h = tape.matmul(x, w1).unwrap();
        let h = tape.add(h, b1).unwrap();
        let h = tape.tanh(h);
        let o = tape.matmul(h, w2).unwrap();
        let o = tape.log_softmax(o);
        let picked = tape.gather(o, &[1, 0, 2]).unwrap();
        let m = tape.max_pool(h).unwrap();
        let m = tape.sum(m);
        let p = tape.sum(picked);
        tape.sub(m, p).unwrap()
    }

    #[test]
    fn two_layer_tanh_network_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = vec![
            rand_tensor(&mut rng, 4, 5, 1.0),
            rand_tensor(&mut rng, 1, 5, 1.0),
            rand_tensor(&mut rng, 5, 3, 1.0),
        ];
        let x = rand_tensor(&mut rng, 3, 4, 1.0);
        let mut tape = Tape::new();
        let out = two_layer(&mut tape, &params, &x);
        let g = tape.backward(out).unwrap();
        let analytic: Vec<Tensor> = (0..3).map(|i| g.param(i).unwrap().clone()).collect();
        let coords = sample_coordinates(&params, 60, &mut rng);
        let report = finite_difference_check(
            |p| {
                let mut t = Tape::new();
                let o = two_layer(&mut t, p, &x);
                t.scalar(o)
            },
            &params,
            &analytic,
            &coords,
            1e-4,
        );
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = vec![
            rand_tensor(&mut rng, 4, 5, 1.0),
            rand_tensor(&mut rng, 1, 5, 1.0),
            rand_tensor(&mut rng, 5, 3, 1.0),
        ];
        let x1 = rand_tensor(&mut rng, 3, 4, 1.0);
        let x2 = rand_tensor(&mut rng, 3, 4, 1.0);
        let mut tape = Tape::new();
        let a = two_layer(&mut tape, &params, &x1);
        let b = two_layer(&mut tape, &params, &x2);
        let ab = tape.add(a, b).unwrap();
        let joint = tape.backward(ab).unwrap();
        let ga = tape.backward(a).unwrap();
        let gb = tape.backward(b).unwrap();
        for id in 0..3 {
            let mut sum = ga.param(id).unwrap().clone();
            sum.add_assign(gb.param(id).unwrap());
            for (x, y) in sum.data().iter().zip(joint.param(id).unwrap().data()) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }
}
