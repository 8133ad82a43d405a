//! Reverse-mode automatic differentiation over tensor-valued nodes.
//!
//! Operations are recorded on a linear tape during the forward pass; parents
//! always precede children, so replaying adjoints in reverse index order
//! visits every node exactly once. Every objective in this crate is
//! differentiated through this tape, and the tape itself is validated against
//! central finite differences.

use super::tensor::{pairwise_sum, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// (m,n) + (1,n) row broadcast
    AddRow(Var, Var),
    /// (m,n) * (1,n) row broadcast
    MulRow(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Sqrt(Var),
    Tanh(Var),
    SumAll(Var),
    /// (m,n) -> (m,1)
    SumRows(Var),
    /// mean over rows [lo, hi) -> (1,n), pairwise-tree summation per column
    MeanRowsRange(Var, usize, usize),
    /// (m,n) -> (m,1), log-sum-exp over each row
    LogSumExpRows(Var),
    /// (m,n) -> (1,n), log-sum-exp over each column
    LogSumExpCols(Var),
    Reshape(Var),
    ConcatCols(Var, Var),
    /// stack k copies of the whole matrix
    TileAll(Var, usize),
    /// repeat each row t times
    RepeatEachRow(Var, usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    /// Record an input (parameter or constant).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a, b))
    }

    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (m, n) = self.value(a).shape();
        assert_eq!(self.value(b).shape(), (1, n), "add_row wants a (1,n) row");
        let mut out = self.value(a).clone();
        let row = self.value(b).data().to_vec();
        for r in 0..m {
            for c in 0..n {
                let v = out.get(r, c) + row[c];
                out.set(r, c, v);
            }
        }
        self.push(out, Op::AddRow(a, b))
    }

    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (m, n) = self.value(a).shape();
        assert_eq!(self.value(b).shape(), (1, n), "mul_row wants a (1,n) row");
        let mut out = self.value(a).clone();
        let row = self.value(b).data().to_vec();
        for r in 0..m {
            for c in 0..n {
                let v = out.get(r, c) * row[c];
                out.set(r, c, v);
            }
        }
        self.push(out, Op::MulRow(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| c * x);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = pairwise_sum(self.value(a).data());
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.value(a).shape();
        let mut out = Vec::with_capacity(m);
        for r in 0..m {
            out.push(pairwise_sum(&self.value(a).data()[r * n..(r + 1) * n]));
        }
        self.push(Tensor::new(m, 1, out), Op::SumRows(a))
    }

    /// Mean over rows [lo, hi). Pairwise per-column summation keeps the
    /// set-encoder permutation-invariant to ~1e-15.
    pub fn mean_rows_range(&mut self, a: Var, lo: usize, hi: usize) -> Var {
        let (m, n) = self.value(a).shape();
        assert!(lo < hi && hi <= m, "bad row range [{lo},{hi}) for {m} rows");
        let count = (hi - lo) as f64;
        let mut out = vec![0.0; n];
        let mut col = vec![0.0; hi - lo];
        for (c, slot) in out.iter_mut().enumerate() {
            for (i, r) in (lo..hi).enumerate() {
                col[i] = self.value(a).get(r, c);
            }
            *slot = pairwise_sum(&col) / count;
        }
        self.push(Tensor::new(1, n, out), Op::MeanRowsRange(a, lo, hi))
    }

    pub fn log_sum_exp_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.value(a).shape();
        let mut out = Vec::with_capacity(m);
        for r in 0..m {
            let row = &self.value(a).data()[r * n..(r + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|&x| (x - mx).exp()).sum();
            out.push(mx + s.ln());
        }
        self.push(Tensor::new(m, 1, out), Op::LogSumExpRows(a))
    }

    pub fn log_sum_exp_cols(&mut self, a: Var) -> Var {
        let (m, n) = self.value(a).shape();
        let mut out = Vec::with_capacity(n);
        for c in 0..n {
            let mut mx = f64::NEG_INFINITY;
            for r in 0..m {
                mx = mx.max(self.value(a).get(r, c));
            }
            let mut s = 0.0;
            for r in 0..m {
                s += (self.value(a).get(r, c) - mx).exp();
            }
            out.push(mx + s.ln());
        }
        self.push(Tensor::new(1, n, out), Op::LogSumExpCols(a))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.len(), rows * cols, "reshape element count mismatch");
        let v = Tensor::new(rows, cols, t.data().to_vec());
        self.push(v, Op::Reshape(a))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (m, na) = self.value(a).shape();
        let (mb, nb) = self.value(b).shape();
        assert_eq!(m, mb, "concat_cols row mismatch");
        let mut data = Vec::with_capacity(m * (na + nb));
        for r in 0..m {
            data.extend_from_slice(self.value(a).row(r));
            data.extend_from_slice(self.value(b).row(r));
        }
        self.push(Tensor::new(m, na + nb, data), Op::ConcatCols(a, b))
    }

    pub fn tile_all(&mut self, a: Var, k: usize) -> Var {
        let (m, n) = self.value(a).shape();
        let mut data = Vec::with_capacity(k * m * n);
        for _ in 0..k {
            data.extend_from_slice(self.value(a).data());
        }
        self.push(Tensor::new(k * m, n, data), Op::TileAll(a, k))
    }

    pub fn repeat_each_row(&mut self, a: Var, t: usize) -> Var {
        let (m, n) = self.value(a).shape();
        let mut data = Vec::with_capacity(m * t * n);
        for r in 0..m {
            for _ in 0..t {
                data.extend_from_slice(self.value(a).row(r));
            }
        }
        self.push(Tensor::new(m * t, n, data), Op::RepeatEachRow(a, t))
    }

    /// Adjoints of `output` with respect to every node. `output` must be 1x1.
    pub fn backward(&self, output: Var) -> Result<Grads> {
        if self.value(output).shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward from non-scalar output of shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[output.0] = Some(Tensor::scalar(1.0));

        for i in (0..=output.0).rev() {
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        Ok(Grads { adj })
    }

    fn bump(&self, adj: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        match &mut adj[v.0] {
            Some(t) => t.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                self.bump(adj, a, g.matmul(&val(b).transpose()));
                self.bump(adj, b, val(a).transpose().matmul(g));
            }
            Op::Add(a, b) => {
                self.bump(adj, a, g.clone());
                self.bump(adj, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.bump(adj, a, g.clone());
                self.bump(adj, b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                self.bump(adj, a, g.zip(val(b), |x, y| x * y));
                self.bump(adj, b, g.zip(val(a), |x, y| x * y));
            }
            Op::Div(a, b) => {
                let bv = val(b);
                self.bump(adj, a, g.zip(bv, |x, y| x / y));
                let av = val(a);
                let mut gb = g.zip(av, |x, y| x * y);
                let gb2 = gb.zip(bv, |x, y| -x / (y * y));
                gb = gb2;
                self.bump(adj, b, gb);
            }
            Op::AddRow(a, b) => {
                self.bump(adj, a, g.clone());
                let (m, n) = g.shape();
                let mut row = vec![0.0; n];
                for c in 0..n {
                    for r in 0..m {
                        row[c] += g.get(r, c);
                    }
                }
                self.bump(adj, b, Tensor::new(1, n, row));
            }
            Op::MulRow(a, b) => {
                let (m, n) = g.shape();
                let bv = val(b);
                let mut ga = g.clone();
                for r in 0..m {
                    for c in 0..n {
                        let v = ga.get(r, c) * bv.get(0, c);
                        ga.set(r, c, v);
                    }
                }
                self.bump(adj, a, ga);
                let av = val(a);
                let mut row = vec![0.0; n];
                for c in 0..n {
                    for r in 0..m {
                        row[c] += g.get(r, c) * av.get(r, c);
                    }
                }
                self.bump(adj, b, Tensor::new(1, n, row));
            }
            Op::Neg(a) => self.bump(adj, a, g.map(|x| -x)),
            Op::Scale(a, c) => self.bump(adj, a, g.map(|x| c * x)),
            Op::AddScalar(a) => self.bump(adj, a, g.clone()),
            Op::Relu(a) => {
                self.bump(adj, a, g.zip(val(a), |x, v| if v > 0.0 { x } else { 0.0 }))
            }
            Op::Softplus(a) => self.bump(adj, a, g.zip(val(a), |x, v| x * sigmoid(v))),
            Op::Exp(a) => self.bump(adj, a, g.zip(&self.nodes[i].value, |x, e| x * e)),
            Op::Ln(a) => self.bump(adj, a, g.zip(val(a), |x, v| x / v)),
            Op::Square(a) => self.bump(adj, a, g.zip(val(a), |x, v| 2.0 * v * x)),
            Op::Sqrt(a) => {
                self.bump(adj, a, g.zip(&self.nodes[i].value, |x, s| 0.5 * x / s))
            }
            Op::Tanh(a) => {
                self.bump(adj, a, g.zip(&self.nodes[i].value, |x, t| x * (1.0 - t * t)))
            }
            Op::SumAll(a) => {
                let s = g.item();
                self.bump(adj, a, val(a).map(|_| s));
            }
            Op::SumRows(a) => {
                let (m, n) = val(a).shape();
                let mut ga = Tensor::zeros(m, n);
                for r in 0..m {
                    for c in 0..n {
                        ga.set(r, c, g.get(r, 0));
                    }
                }
                self.bump(adj, a, ga);
            }
            Op::MeanRowsRange(a, lo, hi) => {
                let (m, n) = val(a).shape();
                let w = 1.0 / (hi - lo) as f64;
                let mut ga = Tensor::zeros(m, n);
                for r in lo..hi {
                    for c in 0..n {
                        ga.set(r, c, g.get(0, c) * w);
                    }
                }
                self.bump(adj, a, ga);
            }
            Op::LogSumExpRows(a) => {
                let (m, n) = val(a).shape();
                let out = &self.nodes[i].value;
                let mut ga = Tensor::zeros(m, n);
                for r in 0..m {
                    let lse = out.get(r, 0);
                    for c in 0..n {
                        ga.set(r, c, g.get(r, 0) * (val(a).get(r, c) - lse).exp());
                    }
                }
                self.bump(adj, a, ga);
            }
            Op::LogSumExpCols(a) => {
                let (m, n) = val(a).shape();
                let out = &self.nodes[i].value;
                let mut ga = Tensor::zeros(m, n);
                for c in 0..n {
                    let lse = out.get(0, c);
                    for r in 0..m {
                        ga.set(r, c, g.get(0, c) * (val(a).get(r, c) - lse).exp());
                    }
                }
                self.bump(adj, a, ga);
            }
            Op::Reshape(a) => {
                let (r, c) = val(a).shape();
                self.bump(adj, a, Tensor::new(r, c, g.data().to_vec()));
            }
            Op::ConcatCols(a, b) => {
                let (m, na) = val(a).shape();
                let (_, nb) = val(b).shape();
                let mut ga = Tensor::zeros(m, na);
                let mut gb = Tensor::zeros(m, nb);
                for r in 0..m {
                    for c in 0..na {
                        ga.set(r, c, g.get(r, c));
                    }
                    for c in 0..nb {
                        gb.set(r, c, g.get(r, na + c));
                    }
                }
                self.bump(adj, a, ga);
                self.bump(adj, b, gb);
            }
            Op::TileAll(a, k) => {
                let (m, n) = val(a).shape();
                let mut ga = Tensor::zeros(m, n);
                for rep in 0..k {
                    for r in 0..m {
                        for c in 0..n {
                            let v = ga.get(r, c) + g.get(rep * m + r, c);
                            ga.set(r, c, v);
                        }
                    }
                }
                self.bump(adj, a, ga);
            }
            Op::RepeatEachRow(a, t) => {
                let (m, n) = val(a).shape();
                let mut ga = Tensor::zeros(m, n);
                for r in 0..m {
                    for rep in 0..t {
                        for c in 0..n {
                            let v = ga.get(r, c) + g.get(r * t + rep, c);
                            ga.set(r, c, v);
                        }
                    }
                }
                self.bump(adj, a, ga);
            }
        }
    }

    /// Stable log-sum-exp of a (k,1) column, as a scalar node.
    pub fn log_sum_exp_col_vec(&mut self, a: Var) -> Var {
        let (k, one) = self.value(a).shape();
        assert_eq!(one, 1, "log_sum_exp_col_vec wants a column vector");
        let row = self.reshape(a, 1, k);
        let lse = self.log_sum_exp_rows(row);
        self.reshape(lse, 1, 1)
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Grads {
    adj: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of the output with respect to `v`. Nodes the output does not
    /// depend on get exact zeros.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        match &self.adj[v.0] {
            Some(t) => t.clone(),
            None => {
                let (r, c) = tape.value(v).shape();
                Tensor::zeros(r, c)
            }
        }
    }
}

/// Central-difference gradient check.
///
/// Returns max over coordinates of |analytic - numeric| / max(1, |numeric|).
pub fn finite_diff_check(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    params: &[f64],
    analytic: &[f64],
    eps: f64,
) -> Result<f64> {
    if eps <= 0.0 {
        return Err(Error::Domain("finite_diff_check: eps must be positive".into()));
    }
    assert_eq!(params.len(), analytic.len());
    let mut worst: f64 = 0.0;
    let mut p = params.to_vec();
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + eps;
        let fp = f(&p)?;
        p[i] = orig - eps;
        let fm = f(&p)?;
        p[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!(
                "finite_diff_check: non-finite objective at coordinate {i}"
            )));
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let rel = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}
