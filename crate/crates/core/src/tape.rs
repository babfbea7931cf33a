//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] is an append-only list of nodes. Each node holds its forward
//! value and the operation that produced it; [`Tape::backward`] walks the list
//! once in reverse and accumulates gradients additively. Scalars are `1x1`
//! matrices and vectors are single rows.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};
use crate::manifold::{inv_sinhc, sinhc};

/// Arguments at or below `1 + ARCOSH_GRAD_EPS` get a zero arcosh gradient.
pub const ARCOSH_GRAD_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Sqrt(Var),
    Recip(Var),
    Softplus(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    Dropout(Var, Array2<f64>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    ExpOrigin(Var, f64),
    LogOrigin(Var, f64),
    LorentzGram(Var, Var),
    SqEuclidDist(Var, Var),
    ArcoshClamped(Var),
    CrossEntropyRows(Var, Vec<usize>, Option<Array2<bool>>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when no path reaches it.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
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

/// `(t cosh t - sinh t) / t^3`, the derivative helper shared by the origin maps.
fn cosh_sinh_ratio(t: f64) -> f64 {
    if t < 1e-2 {
        let t2 = t * t;
        1.0 / 3.0 + t2 / 30.0 + t2 * t2 / 840.0
    } else {
        (t * t.cosh() - t.sinh()) / (t * t * t)
    }
}

fn softmax_row(row: ndarray::ArrayView1<f64>, mask: Option<ndarray::ArrayView1<bool>>, out: &mut [f64]) {
    let allowed = |j: usize| mask.is_none_or(|m| m[j]);
    let mut mx = f64::NEG_INFINITY;
    for (j, &x) in row.iter().enumerate() {
        if allowed(j) && x > mx {
            mx = x;
        }
    }
    let mut z = 0.0;
    for (j, &x) in row.iter().enumerate() {
        out[j] = if allowed(j) { (x - mx).exp() } else { 0.0 };
        z += out[j];
    }
    for o in out.iter_mut() {
        *o /= z;
    }
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

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    /// Copy of `v` cut from the gradient graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Value of a `1x1` node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn check(&self, cond: bool, what: &str, a: Var, b: Var) -> Result<()> {
        if cond {
            Ok(())
        } else {
            Err(Error::Shape {
                name: what.to_string(),
                expected: self.nodes[a.0].value.shape().to_vec(),
                found: self.nodes[b.0].value.shape().to_vec(),
            })
        }
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.nodes[a.0].value.mapv(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        self.check(av.ncols() == bv.nrows(), "matmul", a, b)?;
        let value = av.dot(bv);
        Ok(self.push(value, Op::MatMul(a, b), self.rg(&[a, b])))
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        self.check(av.ncols() == bv.ncols(), "matmul_bt", a, b)?;
        let value = av.dot(&bv.t());
        Ok(self.push(value, Op::MatMulBT(a, b), self.rg(&[a, b])))
    }

    /// Adds a `1 x n` bias row to every row of `a`.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        self.check(bv.nrows() == 1 && bv.ncols() == av.ncols(), "bias", a, bias)?;
        let value = av + bv;
        Ok(self.push(value, Op::AddRowBias(a, bias), self.rg(&[a, bias])))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        self.check(self.shape(a) == self.shape(b), what, a, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        Ok(self.push(value, Op::Add(a, b), self.rg(&[a, b])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        Ok(self.push(value, Op::Sub(a, b), self.rg(&[a, b])))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        Ok(self.push(value, Op::Mul(a, b), self.rg(&[a, b])))
    }

    /// `a * s` for a `1x1` node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.check(self.shape(s) == (1, 1), "scalar factor", a, s)?;
        let k = self.scalar_value(s);
        let value = &self.nodes[a.0].value * k;
        Ok(self.push(value, Op::MulScalar(a, s), self.rg(&[a, s])))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddConst(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Square root; the gradient at 0 is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0).sqrt(), Op::Sqrt(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / x, Op::Recip(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * std_normal_cdf(x), Op::Gelu(a))
    }

    /// Row-wise softmax; masked-out entries get probability 0. Every row
    /// needs at least one allowed entry.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<Array2<bool>>) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if let Some(m) = &mask {
            if m.dim() != av.dim() {
                return Err(Error::Shape {
                    name: "softmax mask".into(),
                    expected: av.shape().to_vec(),
                    found: m.shape().to_vec(),
                });
            }
            if m.rows().into_iter().any(|r| !r.iter().any(|&b| b)) {
                return Err(Error::contract("softmax row with every entry masked"));
            }
        }
        let mut value = Array2::zeros(av.dim());
        for (i, row) in av.rows().into_iter().enumerate() {
            let mrow = mask.as_ref().map(|m| m.row(i));
            softmax_row(row, mrow, value.row_mut(i).as_slice_mut().expect("contiguous row"));
        }
        Ok(self.push(value, Op::SoftmaxRows(a), self.rg(&[a])))
    }

    /// Multiplies by a fixed mask (already scaled by `1/(1-p)`).
    pub fn dropout(&mut self, a: Var, mask: Array2<f64>) -> Result<Var> {
        if mask.dim() != self.shape(a) {
            return Err(Error::Shape {
                name: "dropout mask".into(),
                expected: self.nodes[a.0].value.shape().to_vec(),
                found: mask.shape().to_vec(),
            });
        }
        let value = &self.nodes[a.0].value * &mask;
        Ok(self.push(value, Op::Dropout(a, mask), self.rg(&[a])))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat of zero parts"));
        }
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|v| self.nodes[v.0].value.view()).collect();
        let value = concatenate(Axis(1), &views).map_err(|e| Error::contract(format!("concat: {e}")))?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), self.rg(parts)))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (_, n) = self.shape(a);
        if start >= end || end > n {
            return Err(Error::contract(format!("column slice {start}..{end} of width {n}")));
        }
        let value = self.nodes[a.0].value.slice(s![.., start..end]).to_owned();
        Ok(self.push(value, Op::SliceCols(a, start, end), self.rg(&[a])))
    }

    /// Rows of `a` at `idx` (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, _) = self.shape(a);
        if let Some(bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::contract(format!("row {bad} out of {m}")));
        }
        let value = self.nodes[a.0].value.select(Axis(0), idx);
        Ok(self.push(value, Op::GatherRows(a, idx.to_vec()), self.rg(&[a])))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let value = Array2::from_elem((1, 1), v.sum() / v.len() as f64);
        let rg = self.rg(&[a]);
        self.push(value, Op::Mean(a), rg)
    }

    /// Row-wise origin exponential map, `m x d` tangents to `m x (d+1)` points.
    pub fn exp_origin(&mut self, a: Var, radius: f64) -> Var {
        let av = &self.nodes[a.0].value;
        let (m, d) = av.dim();
        let mut value = Array2::zeros((m, d + 1));
        for (row, mut out) in av.rows().into_iter().zip(value.rows_mut()) {
            let n = row.dot(&row).sqrt();
            let t = n / radius;
            out[0] = radius * t.cosh();
            let f = sinhc(t);
            for j in 0..d {
                out[j + 1] = f * row[j];
            }
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::ExpOrigin(a, radius), rg)
    }

    /// Row-wise origin logarithm map, `m x (d+1)` points to `m x d` tangents,
    /// evaluated as `(t / sinh t) * x_s` with `t = arcosh(max(1, x0/R))`.
    pub fn log_origin(&mut self, a: Var, radius: f64) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let (m, d1) = av.dim();
        if d1 < 2 {
            return Err(Error::contract("log_origin needs at least 2 ambient coordinates"));
        }
        let mut value = Array2::zeros((m, d1 - 1));
        for (row, mut out) in av.rows().into_iter().zip(value.rows_mut()) {
            let t = (row[0] / radius).max(1.0).acosh();
            let f = inv_sinhc(t);
            for j in 0..d1 - 1 {
                out[j] = f * row[j + 1];
            }
        }
        Ok(self.push(value, Op::LogOrigin(a, radius), self.rg(&[a])))
    }

    /// Pairwise Minkowski products `<a_i, b_j>_L`.
    pub fn lorentz_gram(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(self.shape(a).1 == self.shape(b).1, "lorentz_gram", a, b)?;
        let mut af = self.nodes[a.0].value.clone();
        af.column_mut(0).mapv_inplace(|x| -x);
        let value = af.dot(&self.nodes[b.0].value.t());
        Ok(self.push(value, Op::LorentzGram(a, b), self.rg(&[a, b])))
    }

    /// Pairwise squared Euclidean distances `|a_i - b_j|^2`.
    pub fn sq_euclid_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(self.shape(a).1 == self.shape(b).1, "sq_euclid_dist", a, b)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let an: Vec<f64> = av.rows().into_iter().map(|r| r.dot(&r)).collect();
        let bn: Vec<f64> = bv.rows().into_iter().map(|r| r.dot(&r)).collect();
        let mut value = av.dot(&bv.t());
        for ((i, j), x) in value.indexed_iter_mut() {
            *x = (an[i] + bn[j] - 2.0 * *x).max(0.0);
        }
        Ok(self.push(value, Op::SqEuclidDist(a, b), self.rg(&[a, b])))
    }

    /// `arcosh(max(1, u))` elementwise.
    pub fn arcosh_clamped(&mut self, a: Var) -> Var {
        self.unary(a, crate::manifold::arcosh_clamped, Op::ArcoshClamped(a))
    }

    /// Per-row `logsumexp_{j in mask_i} x_ij - x_{i, t_i}` as an `m x 1` column.
    /// The target must be inside the row's mask.
    pub fn cross_entropy_rows(&mut self, a: Var, targets: &[usize], mask: Option<Array2<bool>>) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let (m, n) = av.dim();
        if targets.len() != m {
            return Err(Error::contract(format!("{} targets for {m} rows", targets.len())));
        }
        if let Some(mk) = &mask {
            if mk.dim() != (m, n) {
                return Err(Error::Shape {
                    name: "cross-entropy mask".into(),
                    expected: vec![m, n],
                    found: mk.shape().to_vec(),
                });
            }
        }
        let mut value = Array2::zeros((m, 1));
        for (i, row) in av.rows().into_iter().enumerate() {
            let t = targets[i];
            if t >= n || mask.as_ref().is_some_and(|mk| !mk[[i, t]]) {
                return Err(Error::contract(format!("target {t} of row {i} is not a candidate")));
            }
            let allowed = |j: usize| mask.as_ref().is_none_or(|mk| mk[[i, j]]);
            let mx = (0..n).filter(|&j| allowed(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let others: f64 = (0..n).filter(|&j| j != t && allowed(j)).map(|j| (row[j] - mx).exp()).sum();
            value[[i, 0]] = if row[t] == mx {
                others.ln_1p()
            } else {
                mx - row[t] + ((row[t] - mx).exp() + others).ln()
            };
        }
        Ok(self.push(value, Op::CrossEntropyRows(a, targets.to_vec(), mask), self.rg(&[a])))
    }

    /// Reverse pass from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::contract("backward needs a 1x1 loss node"));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, delta: Array2<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, g.dot(&val(*b).t()));
                acc(*b, val(*a).t().dot(g));
            }
            Op::MatMulBT(a, b) => {
                acc(*a, g.dot(val(*b)));
                acc(*b, g.t().dot(val(*a)));
            }
            Op::AddRowBias(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                acc(*a, g * val(*b));
                acc(*b, g * val(*a));
            }
            Op::MulScalar(a, s) => {
                let k = val(*s)[[0, 0]];
                acc(*a, g * k);
                acc(*s, Array2::from_elem((1, 1), (g * val(*a)).sum()));
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::AddConst(a) => acc(*a, g.clone()),
            Op::Exp(a) => acc(*a, g * y),
            Op::Ln(a) => acc(*a, g / val(*a)),
            Op::Square(a) => acc(*a, g * &val(*a).mapv(|x| 2.0 * x)),
            Op::Sqrt(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(y).for_each(|d, &y| *d = if y > 0.0 { *d / (2.0 * y) } else { 0.0 });
                acc(*a, d);
            }
            Op::Recip(a) => acc(*a, -(g * &y.mapv(|r| r * r))),
            Op::Softplus(a) => acc(*a, g * &val(*a).mapv(sigmoid)),
            Op::Gelu(a) => acc(*a, g * &val(*a).mapv(|x| std_normal_cdf(x) + x * std_normal_pdf(x))),
            Op::SoftmaxRows(a) => {
                let mut d = g * y;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let s = drow.sum();
                    Zip::from(&mut drow).and(&yrow).for_each(|dv, &yv| *dv -= s * yv);
                }
                acc(*a, d);
            }
            Op::Dropout(a, mask) => acc(*a, g * mask),
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = val(*p).ncols();
                    acc(*p, g.slice(s![.., off..off + w]).to_owned());
                    off += w;
                }
            }
            Op::SliceCols(a, start, end) => {
                let mut d = Array2::zeros(val(*a).dim());
                d.slice_mut(s![.., *start..*end]).assign(g);
                acc(*a, d);
            }
            Op::GatherRows(a, idx) => {
                let mut d = Array2::zeros(val(*a).dim());
                for (k, &i) in idx.iter().enumerate() {
                    let mut row = d.row_mut(i);
                    row += &g.row(k);
                }
                acc(*a, d);
            }
            Op::Sum(a) => acc(*a, Array2::from_elem(val(*a).dim(), g[[0, 0]])),
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                acc(*a, Array2::from_elem(val(*a).dim(), g[[0, 0]] / n));
            }
            Op::ExpOrigin(a, r) => {
                let v = val(*a);
                let mut d = Array2::zeros(v.dim());
                for ((vrow, grow), mut drow) in v.rows().into_iter().zip(g.rows()).zip(d.rows_mut()) {
                    let t = vrow.dot(&vrow).sqrt() / r;
                    let gs = grow.slice(s![1..]);
                    let f = sinhc(t);
                    let gv = gs.dot(&vrow);
                    let h = cosh_sinh_ratio(t) / (r * r);
                    for j in 0..vrow.len() {
                        drow[j] = f * (grow[0] * vrow[j] / r + gs[j]) + gv * h * vrow[j];
                    }
                }
                acc(*a, d);
            }
            Op::LogOrigin(a, r) => {
                let x = val(*a);
                let mut d = Array2::zeros(x.dim());
                for ((xrow, grow), mut drow) in x.rows().into_iter().zip(g.rows()).zip(d.rows_mut()) {
                    let t = (xrow[0] / r).max(1.0).acosh();
                    let f = inv_sinhc(t);
                    let sc = sinhc(t);
                    let df = -cosh_sinh_ratio(t) / (r * sc * sc * sc);
                    let xs = xrow.slice(s![1..]);
                    drow[0] = df * grow.dot(&xs);
                    for j in 0..xs.len() {
                        drow[j + 1] = f * grow[j];
                    }
                }
                acc(*a, d);
            }
            Op::LorentzGram(a, b) => {
                let mut da = g.dot(val(*b));
                da.column_mut(0).mapv_inplace(|x| -x);
                acc(*a, da);
                let mut db = g.t().dot(val(*a));
                db.column_mut(0).mapv_inplace(|x| -x);
                acc(*b, db);
            }
            Op::SqEuclidDist(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let rs = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                let cs = g.sum_axis(Axis(0)).insert_axis(Axis(1));
                acc(*a, (av * &rs - &g.dot(bv)) * 2.0);
                acc(*b, (bv * &cs - &g.t().dot(av)) * 2.0);
            }
            Op::ArcoshClamped(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(*a)).for_each(|d, &u| {
                    *d = if u > 1.0 + ARCOSH_GRAD_EPS {
                        *d / ((u - 1.0) * (u + 1.0)).sqrt()
                    } else {
                        0.0
                    };
                });
                acc(*a, d);
            }
            Op::CrossEntropyRows(a, targets, mask) => {
                let x = val(*a);
                let mut d = Array2::zeros(x.dim());
                for (i, row) in x.rows().into_iter().enumerate() {
                    let mrow = mask.as_ref().map(|m| m.row(i));
                    let mut p = vec![0.0; row.len()];
                    softmax_row(row, mrow, &mut p);
                    p[targets[i]] -= 1.0;
                    let gi = g[[i, 0]];
                    for (dj, pj) in d.row_mut(i).iter_mut().zip(p) {
                        *dj = gi * pj;
                    }
                }
                acc(*a, d);
            }
        }
    }
}

/// Finite-difference gradient checking.
pub mod gradcheck {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Outcome of comparing analytic and central-difference gradients.
    #[derive(Debug, Clone, Copy, PartialEq)]
    pub struct GradCheckReport {
        pub checked: usize,
        pub max_rel_err: f64,
        pub max_abs_err: f64,
        pub failures: usize,
    }

    impl GradCheckReport {
        pub fn passed(&self) -> bool {
            self.failures == 0
        }

        pub fn merge(&mut self, other: &GradCheckReport) {
            self.checked += other.checked;
            self.failures += other.failures;
            self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
            self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        }
    }

    impl Default for GradCheckReport {
        fn default() -> Self {
            Self {
                checked: 0,
                max_rel_err: 0.0,
                max_abs_err: 0.0,
                failures: 0,
            }
        }
    }

    /// Tolerances: an entry passes when `|a - n| <= rel * max(|a|, |n|)` or
    /// `|a - n| <= abs`. The absolute floor covers entries whose true gradient
    /// is zero, where a relative error is undefined.
    #[derive(Debug, Clone, Copy, PartialEq)]
    pub struct Tolerance {
        pub step: f64,
        pub rel: f64,
        pub abs: f64,
    }

    impl Tolerance {
        pub const PRIMITIVE: Tolerance = Tolerance { step: 1e-5, rel: 1e-5, abs: 1e-8 };
        pub const PIPELINE: Tolerance = Tolerance { step: 1e-5, rel: 1e-4, abs: 1e-8 };
    }

    /// Compares one analytic entry against its numeric estimate.
    pub fn compare(analytic: f64, numeric: f64, tol: &Tolerance, report: &mut GradCheckReport) {
        let diff = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale > 0.0 { diff / scale } else { 0.0 };
        report.checked += 1;
        report.max_abs_err = report.max_abs_err.max(diff);
        if diff > tol.abs {
            report.max_rel_err = report.max_rel_err.max(rel);
        }
        if !(diff <= tol.abs || diff <= tol.rel * scale) {
            report.failures += 1;
        }
    }

    /// Checks `f` (which maps leaves to a scalar) at `inputs` against
    /// central differences of every input entry.
    pub fn check<F>(inputs: &[Array2<f64>], tol: &Tolerance, f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let eval = |xs: &[Array2<f64>]| -> Result<f64> {
            let mut t = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone())).collect();
            let out = f(&mut t, &vars)?;
            Ok(t.scalar_value(out))
        };
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
        let out = f(&mut t, &vars)?;
        let grads = t.backward(out)?;
        let mut report = GradCheckReport::default();
        let mut xs = inputs.to_vec();
        for (k, v) in vars.iter().enumerate() {
            let analytic = grads.get(*v).cloned().unwrap_or_else(|| Array2::zeros(inputs[k].dim()));
            for idx in 0..inputs[k].len() {
                let (r, c) = (idx / inputs[k].ncols(), idx % inputs[k].ncols());
                let x0 = xs[k][[r, c]];
                xs[k][[r, c]] = x0 + tol.step;
                let fp = eval(&xs)?;
                xs[k][[r, c]] = x0 - tol.step;
                let fm = eval(&xs)?;
                xs[k][[r, c]] = x0;
                compare(analytic[[r, c]], (fp - fm) / (2.0 * tol.step), tol, &mut report);
            }
        }
        Ok(report)
    }

    fn rand_mat(rng: &mut ChaCha8Rng, m: usize, n: usize, scale: f64) -> Array2<f64> {
        Array2::from_shape_fn((m, n), |_| rng.random_range(-1.0..1.0) * scale)
    }

    /// Reduces a matrix output to a scalar via fixed random weights.
    fn weighted_sum(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
        let (m, n) = t.shape(y);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = t.constant(rand_mat(&mut rng, m, n, 1.0));
        let p = t.mul(y, w)?;
        Ok(t.sum(p))
    }

    fn lorentz_rows(rng: &mut ChaCha8Rng, m: usize, n: usize, radius: f64) -> Array2<f64> {
        let mut t = Tape::new();
        let v = t.constant(rand_mat(rng, m, n, 1.0));
        let p = t.exp_origin(v, radius);
        t.value(p).clone()
    }

    /// Checks every differentiable primitive on random inputs drawn from
    /// `seed`, each reduced to a scalar by a fixed random weighting.
    pub fn primitive_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
        type Op = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let radius = 0.8f64.sqrt();
        let a = rand_mat(&mut r, 3, 4, 1.0);
        let b = rand_mat(&mut r, 4, 2, 1.0);
        let ab = a.dot(&b);
        let ab2 = rand_mat(&mut r, 3, 2, 1.0);
        let x = rand_mat(&mut r, 3, 5, 2.0);
        let pos = x.mapv(|v| v.abs() + 0.3);
        let mut mask = Array2::from_elem((3, 5), true);
        mask[[0, 1]] = false;
        mask[[2, 4]] = false;
        let drop = Array2::from_shape_fn((3, 5), |(i, j)| if (i + j) % 3 == 0 { 0.0 } else { 1.0 / 0.9 });
        let v = rand_mat(&mut r, 4, 3, 1.5);
        let p = lorentz_rows(&mut r, 4, 3, radius);
        let q = lorentz_rows(&mut r, 3, 3, radius);
        let (m1, m2) = (mask.clone(), mask);
        let cases: Vec<(&'static str, Vec<Array2<f64>>, Op)> = vec![
            ("matmul", vec![a.clone(), b], Box::new(|t, v| t.matmul(v[0], v[1]))),
            ("matmul_bt", vec![a, rand_mat(&mut r, 5, 4, 1.0)], Box::new(|t, v| t.matmul_bt(v[0], v[1]))),
            ("add_row_bias", vec![ab.clone(), rand_mat(&mut r, 1, 2, 1.0)], Box::new(|t, v| t.add_row_bias(v[0], v[1]))),
            ("add", vec![ab.clone(), ab2.clone()], Box::new(|t, v| t.add(v[0], v[1]))),
            ("sub", vec![ab.clone(), ab2.clone()], Box::new(|t, v| t.sub(v[0], v[1]))),
            ("mul", vec![ab.clone(), ab2], Box::new(|t, v| t.mul(v[0], v[1]))),
            ("mul_scalar", vec![ab.clone(), Array2::from_elem((1, 1), 0.7)], Box::new(|t, v| t.mul_scalar(v[0], v[1]))),
            ("scale", vec![ab.clone()], Box::new(|t, v| Ok(t.scale(v[0], -1.3)))),
            ("add_const", vec![ab], Box::new(|t, v| Ok(t.add_const(v[0], 2.0)))),
            ("exp", vec![x.clone()], Box::new(|t, v| Ok(t.exp(v[0])))),
            ("ln", vec![pos.clone()], Box::new(|t, v| Ok(t.ln(v[0])))),
            ("square", vec![x.clone()], Box::new(|t, v| Ok(t.square(v[0])))),
            ("sqrt", vec![pos.clone()], Box::new(|t, v| Ok(t.sqrt(v[0])))),
            ("recip", vec![pos], Box::new(|t, v| Ok(t.recip(v[0])))),
            ("softplus", vec![x.clone() * 5.0], Box::new(|t, v| Ok(t.softplus(v[0])))),
            ("gelu", vec![x.clone()], Box::new(|t, v| Ok(t.gelu(v[0])))),
            ("arcosh_clamped", vec![x.mapv(|v| 1.05 + v.abs())], Box::new(|t, v| Ok(t.arcosh_clamped(v[0])))),
            ("softmax_rows", vec![x.clone()], Box::new(|t, v| t.softmax_rows(v[0], None))),
            ("softmax_rows_masked", vec![x.clone()], Box::new(move |t, v| t.softmax_rows(v[0], Some(m1.clone())))),
            ("dropout", vec![x.clone()], Box::new(move |t, v| t.dropout(v[0], drop.clone()))),
            ("concat_cols", vec![x.clone(), rand_mat(&mut r, 3, 2, 1.0)], Box::new(|t, v| t.concat_cols(&[v[0], v[1], v[0]]))),
            ("slice_cols", vec![x.clone()], Box::new(|t, v| t.slice_cols(v[0], 1, 4))),
            ("gather_rows", vec![x.clone()], Box::new(|t, v| t.gather_rows(v[0], &[2, 0, 2]))),
            ("sum", vec![x.clone()], Box::new(|t, v| Ok(t.sum(v[0])))),
            ("mean", vec![x.clone()], Box::new(|t, v| Ok(t.mean(v[0])))),
            ("cross_entropy_rows", vec![x.clone()], Box::new(|t, v| t.cross_entropy_rows(v[0], &[0, 3, 2], None))),
            (
                "cross_entropy_rows_masked",
                vec![x],
                Box::new(move |t, v| t.cross_entropy_rows(v[0], &[0, 3, 2], Some(m2.clone()))),
            ),
            ("exp_origin", vec![v.clone()], Box::new(move |t, x| Ok(t.exp_origin(x[0], radius)))),
            ("exp_origin_small", vec![rand_mat(&mut r, 2, 3, 1e-3)], Box::new(move |t, x| Ok(t.exp_origin(x[0], radius)))),
            ("log_origin", vec![p.clone()], Box::new(move |t, x| t.log_origin(x[0], radius))),
            ("lorentz_gram", vec![p, q], Box::new(|t, x| t.lorentz_gram(x[0], x[1]))),
            ("sq_euclid_dist", vec![v, rand_mat(&mut r, 2, 3, 1.0)], Box::new(|t, x| t.sq_euclid_dist(x[0], x[1]))),
        ];
        let mut out = Vec::with_capacity(cases.len());
        for (i, (name, inputs, op)) in cases.into_iter().enumerate() {
            let rep = check(&inputs, &Tolerance::PRIMITIVE, |t, v| {
                let y = op(t, v)?;
                weighted_sum(t, y, seed.wrapping_add(i as u64))
            })?;
            out.push((name, rep));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{check, primitive_suite, Tolerance};
    use super::*;
    use crate::manifold::{distance_raw, Curvature};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, m: usize, n: usize, scale: f64) -> Array2<f64> {
        Array2::from_shape_fn((m, n), |_| rng.random_range(-1.0..1.0) * scale)
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    #[test]
    fn norm_squared_gradient_is_2x() {
        let mut t = Tape::new();
        let x = t.leaf(Array2::from_shape_vec((1, 3), vec![1.0, -2.0, 0.5]).unwrap());
        let sq = t.square(x);
        let l = t.sum(sq);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().as_slice().unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn primitive_suite_passes() {
        let suite = primitive_suite(5).unwrap();
        assert!(suite.len() >= 30);
        for (name, rep) in &suite {
            assert!(rep.passed() && rep.checked > 0, "{name}: {rep:?}");
        }
    }

    #[test]
    fn squared_distance_through_exp_origin() {
        let c = Curvature::new(0.8).unwrap();
        let r = c.radius();
        let mut g = rng();
        let target = {
            let mut t = Tape::new();
            let w = t.constant(rand_mat(&mut g, 1, 3, 1.0));
            let e = t.exp_origin(w, r);
            t.value(e).clone()
        };
        let v = rand_mat(&mut g, 1, 3, 1.0);
        let tgt = target.clone();
        let rep = check(std::slice::from_ref(&v), &Tolerance::PIPELINE, move |t, x| {
            let p = t.exp_origin(x[0], r);
            let q = t.constant(tgt.clone());
            let gram = t.lorentz_gram(p, q)?;
            let u = t.scale(gram, -1.0 / c.k());
            let d = t.arcosh_clamped(u);
            let d2 = t.square(d);
            Ok(t.sum(d2))
        })
        .unwrap();
        assert!(rep.passed(), "{rep:?}");

        let mut t = Tape::new();
        let x = t.leaf(v);
        let p = t.exp_origin(x, r);
        let q = t.constant(target.clone());
        let gram = t.lorentz_gram(p, q).unwrap();
        let u = t.scale(gram, -1.0 / c.k());
        let d = t.arcosh_clamped(u);
        let expect = distance_raw(t.value(p).row(0).as_slice().unwrap(), target.row(0).as_slice().unwrap(), c);
        assert!((t.scalar_value(d) - expect).abs() < 1e-12);
    }

    #[test]
    fn coincident_points_have_zero_distance_gradient() {
        let mut t = Tape::new();
        let u = t.leaf(Array2::from_elem((1, 1), 1.0));
        let d = t.arcosh_clamped(u);
        let l = t.sum(d);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(u).unwrap()[[0, 0]], 0.0);
    }

    #[test]
    fn exp_origin_values_on_manifold() {
        let mut t = Tape::new();
        let r = 0.8f64.sqrt();
        let v = t.constant(rand_mat(&mut rng(), 5, 4, 3.0));
        let p = t.exp_origin(v, r);
        for row in t.value(p).rows() {
            let q = -row[0] * row[0] + row.slice(s![1..]).dot(&row.slice(s![1..]));
            assert!((q + 0.8).abs() <= 1e-9 * row[0] * row[0]);
        }
        let back = t.log_origin(p, r).unwrap();
        let diff = t.value(back) - t.value(v);
        assert!(diff.iter().all(|x| x.abs() < 1e-9));
    }

    #[test]
    fn constants_get_no_gradient_and_shapes_are_checked() {
        let mut t = Tape::new();
        let a = t.leaf(Array2::ones((2, 3)));
        let b = t.constant(Array2::ones((3, 2)));
        let c = t.matmul(a, b).unwrap();
        let d = t.detach(c);
        let s1 = t.sum(c);
        let s2 = t.sum(d);
        let l = t.add(s1, s2).unwrap();
        let g = t.backward(l).unwrap();
        assert!(g.get(b).is_none());
        assert_eq!(g.get(a).unwrap(), &Array2::from_elem((2, 3), 2.0));
        assert!(t.matmul(a, a).is_err());
        assert!(t.backward(c).is_err());
        assert!(t.cross_entropy_rows(c, &[5, 0], None).is_err());
    }

    #[test]
    fn cross_entropy_matches_log_softmax() {
        let mut t = Tape::new();
        let x = t.constant(Array2::from_shape_vec((1, 3), vec![1.0, 2.0, 3.0]).unwrap());
        let l = t.cross_entropy_rows(x, &[2], None).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        assert!((t.scalar_value(l) - (z.ln() - 3.0)).abs() < 1e-14);
    }
}
