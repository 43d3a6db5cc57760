//! Reverse-mode differentiation over batched 2-D values.
//!
//! A [`Tape`] records every operation of a forward computation. Parameters
//! enter the tape through [`Tape::param`] and are tracked by [`ParamId`];
//! everything else is a constant leaf. [`Tape::backward`] consumes the tape
//! and returns the gradient of a scalar (1x1) loss with respect to every
//! parameter that was recorded.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(u64);

impl ParamId {
    pub fn fresh() -> Self {
        ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// A trainable 2-D tensor. Biases and vectors are stored as `1 x n`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Param {
    #[serde(skip, default = "ParamId::fresh")]
    id: ParamId,
    pub name: String,
    pub value: Array2<f64>,
}

impl PartialEq for Param {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.value == other.value
    }
}

impl Param {
    pub fn new(name: impl Into<String>, value: Array2<f64>) -> Self {
        Param {
            id: ParamId::fresh(),
            name: name.into(),
            value,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    /// Copy of this parameter under a new identity.
    pub fn duplicate(&self) -> Self {
        Param::new(self.name.clone(), self.value.clone())
    }
}

/// Handle to a recorded value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    BroadcastRows(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Min(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Elu(Var),
    Exp(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Cols(Var, usize),
    SumCols(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Parameter gradients produced by one backward pass.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Array2<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.grads.get(&id)
    }

    /// Gradient for `param`, zero if the parameter was not on the loss path.
    pub fn get_or_zeros(&self, param: &Param) -> Array2<f64> {
        self.grads
            .get(&param.id())
            .cloned()
            .unwrap_or_else(|| Array2::zeros(param.value.raw_dim()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their joint L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm.is_finite() {
            let scale = max_norm / norm;
            for g in self.grads.values_mut() {
                g.mapv_inplace(|x| x * scale);
            }
        }
        norm
    }

    fn accumulate(&mut self, id: ParamId, grad: Array2<f64>) {
        match self.grads.get_mut(&id) {
            Some(existing) => *existing += &grad,
            None => {
                self.grads.insert(id, grad);
            }
        }
    }
}

#[inline]
pub(crate) fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1x1 var.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, p: &Param) -> Var {
        self.push(p.value.clone(), Op::Param(p.id()))
    }

    fn shape_eq(&self, context: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).dim(), self.value(b).dim());
        if sa != sb {
            return Err(Error::Shape {
                context,
                expected: sa.0 * sa.1,
                got: sb.0 * sb.1,
            });
        }
        Ok(())
    }

    /// `a (B x n) . b (n x m)`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ac, br) = (self.value(a).ncols(), self.value(b).nrows());
        if ac != br {
            return Err(Error::Shape {
                context: "matmul",
                expected: ac,
                got: br,
            });
        }
        let v = self.value(a).dot(self.value(b));
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (an, rn) = (self.value(a).ncols(), self.value(row).ncols());
        if an != rn || self.value(row).nrows() != 1 {
            return Err(Error::Shape {
                context: "add_row",
                expected: an,
                got: rn,
            });
        }
        let v = self.value(a) + self.value(row);
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    /// Repeats a `1 x n` row `rows` times.
    pub fn broadcast_rows(&mut self, row: Var, rows: usize) -> Var {
        let r = self.value(row);
        let v = r
            .broadcast((rows, r.ncols()))
            .expect("row broadcast")
            .to_owned();
        self.push(v, Op::BroadcastRows(row))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.shape_eq("add", a, b)?;
        let v = self.value(a) + self.value(b);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.shape_eq("sub", a, b)?;
        let v = self.value(a) - self.value(b);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.shape_eq("mul", a, b)?;
        let v = self.value(a) * self.value(b);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.shape_eq("min", a, b)?;
        let mut v = self.value(a).clone();
        Zip::from(&mut v)
            .and(self.value(b))
            .for_each(|x, &y| *x = x.min(y));
        Ok(self.push(v, Op::Min(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::AddScalar(a))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(elu);
        self.push(v, Op::Elu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    /// Columns `start..end` of `a`.
    pub fn cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let n = self.value(a).ncols();
        if start >= end || end > n {
            return Err(Error::Shape {
                context: "cols",
                expected: n,
                got: end,
            });
        }
        let v = self
            .value(a)
            .slice(ndarray::s![.., start..end])
            .to_owned();
        Ok(self.push(v, Op::Cols(a, start)))
    }

    /// Row sums as a `B x 1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::SumCols(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a).mean().unwrap_or(0.0);
        self.push(Array2::from_elem((1, 1), m), Op::Mean(a))
    }

    /// Gradient of the scalar `loss` with respect to every recorded parameter.
    ///
    /// A tape supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Tape("backward already ran on this tape"));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Tape("loss was not recorded on this tape"));
        }
        if self.nodes[loss.0].value.dim() != (1, 1) {
            return Err(Error::Tape("loss must be a 1x1 scalar"));
        }
        self.consumed = true;

        let n = loss.0 + 1;
        let mut adj: Vec<Option<Array2<f64>>> = vec![None; n];
        adj[loss.0] = Some(Array2::ones((1, 1)));
        let mut out = Gradients::default();

        fn acc(adj: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut adj[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match node.op {
                Op::Leaf => {}
                Op::Param(id) => out.accumulate(id, g),
                Op::MatMul(a, b) => {
                    // constant inputs need no adjoint; skipping it saves a full product
                    if !matches!(self.nodes[a.0].op, Op::Leaf) {
                        let ga = g.dot(&self.nodes[b.0].value.t());
                        acc(&mut adj, a, ga);
                    }
                    let gb = self.nodes[a.0].value.t().dot(&g);
                    acc(&mut adj, b, gb);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut adj, row, gr);
                    acc(&mut adj, a, g);
                }
                Op::BroadcastRows(row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut adj, row, gr);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, a, g.clone());
                    acc(&mut adj, b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, b, -&g);
                    acc(&mut adj, a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.nodes[b.0].value;
                    let gb = &g * &self.nodes[a.0].value;
                    acc(&mut adj, a, ga);
                    acc(&mut adj, b, gb);
                }
                Op::Min(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let mut ga = g.clone();
                    let mut gb = g;
                    Zip::from(&mut ga)
                        .and(&mut gb)
                        .and(va)
                        .and(vb)
                        .for_each(|ga, gb, &x, &y| {
                            if x <= y {
                                *gb = 0.0;
                            } else {
                                *ga = 0.0;
                            }
                        });
                    acc(&mut adj, a, ga);
                    acc(&mut adj, b, gb);
                }
                Op::Scale(a, c) => acc(&mut adj, a, g * c),
                Op::AddScalar(a) => acc(&mut adj, a, g),
                Op::Elu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&self.nodes[a.0].value)
                        .for_each(|g, &x| {
                            if x <= 0.0 {
                                *g *= x.exp();
                            }
                        });
                    acc(&mut adj, a, ga);
                }
                Op::Exp(a) => acc(&mut adj, a, g * &node.value),
                Op::Square(a) => {
                    let ga = g * &self.nodes[a.0].value * 2.0;
                    acc(&mut adj, a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&self.nodes[a.0].value)
                        .for_each(|g, &x| {
                            if x < lo || x > hi {
                                *g = 0.0;
                            }
                        });
                    acc(&mut adj, a, ga);
                }
                Op::Cols(a, start) => {
                    let src = &self.nodes[a.0].value;
                    let mut ga = Array2::zeros(src.raw_dim());
                    ga.slice_mut(ndarray::s![.., start..start + g.ncols()])
                        .assign(&g);
                    acc(&mut adj, a, ga);
                }
                Op::SumCols(a) => {
                    let dim = self.nodes[a.0].value.raw_dim();
                    let ga = g.broadcast(dim).expect("column broadcast").to_owned();
                    acc(&mut adj, a, ga);
                }
                Op::Sum(a) => {
                    let dim = self.nodes[a.0].value.raw_dim();
                    acc(&mut adj, a, Array2::from_elem(dim, g[[0, 0]]));
                }
                Op::Mean(a) => {
                    let dim = self.nodes[a.0].value.raw_dim();
                    let count = (dim[0] * dim[1]).max(1) as f64;
                    acc(&mut adj, a, Array2::from_elem(dim, g[[0, 0]] / count));
                }
            }
        }
        Ok(out)
    }
}
