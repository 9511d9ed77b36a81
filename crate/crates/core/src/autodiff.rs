//! Minimal reverse-mode differentiation over small dense matrices.
//!
//! A [`Tape`] records a fixed graph of operations. Values are computed eagerly
//! when nodes are added; after changing a leaf with [`Tape::set_value`] the
//! graph is replayed with [`Tape::forward`]. [`Tape::backward`] walks the nodes
//! in reverse and accumulates adjoints additively, so fan-out is handled
//! without special cases.
//!
//! Only the operators needed by the abstraction loss exist. Nothing
//! broadcasts; every shape is checked when a node is created.

use rand::Rng;

use crate::abstraction::{aggregate_columns, column_jsd, ColumnAggregation, LogBase};

/// Stand-in for `ln 0` in the JSD gradient at exactly zero probabilities.
const LOG_FLOOR: f64 = 1e-12;
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },
    #[error("backward needs a scalar output, got shape {0:?}")]
    NotScalar((usize, usize)),
    #[error("tape changed since the last forward pass")]
    Stale,
    #[error("node is not a leaf")]
    NotLeaf,
    #[error("{0} needs at least one input")]
    NoInputs(&'static str),
    #[error("temperature must be positive and finite, got {0}")]
    Temperature(f64),
    #[error("loss is not finite: {0}")]
    NonFinite(f64),
}

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Kron(Var, Var),
    ColumnSoftmax(Var, f64),
    ColumnJsd(Var, Var, LogBase),
    AggregateColumns(Var, ColumnAggregation),
    RowMax(Var),
    Sum(Var),
    Add(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    SubFrom(f64, Var),
    MaxOf(Vec<Var>),
    WeightedSum(Vec<(f64, Var)>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
    /// Winning index per row (RowMax) or single winner (AggregateColumns/Max, MaxOf).
    argmax: Vec<usize>,
}

/// Column-wise softmax of `w / temperature`, stabilised by subtracting each
/// column's maximum.
pub fn column_softmax(w: &Matrix, temperature: f64) -> Matrix {
    let mut out = Matrix::zeros(w.rows(), w.cols());
    for j in 0..w.cols() {
        let col = w.col(j);
        let top = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = col.iter().map(|&x| ((x - top) / temperature).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (i, e) in exps.into_iter().enumerate() {
            out[(i, j)] = e / z;
        }
    }
    out
}

fn first_argmax(values: &[f64]) -> usize {
    let top = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values.iter().position(|&v| v == top).unwrap_or(0)
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Matrix>,
    stale: bool,
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, Vec::new())
    }

    /// Input that receives no gradient updates (its adjoint is still computed).
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Op::Constant, value, Vec::new())
    }

    /// Replaces the value of a leaf or constant. Call [`Tape::forward`] before
    /// reading downstream values or calling [`Tape::backward`].
    pub fn set_value(&mut self, v: Var, value: Matrix) -> Result<(), AutodiffError> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Leaf | Op::Constant) {
            return Err(AutodiffError::NotLeaf);
        }
        if node.value.shape() != value.shape() {
            return Err(AutodiffError::Shape { op: "set_value", lhs: node.value.shape(), rhs: value.shape() });
        }
        node.value = value;
        self.stale = true;
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(AutodiffError::Shape { op: "matmul", lhs: sa, rhs: sb });
        }
        Ok(self.record(Op::MatMul(a, b)))
    }

    pub fn kron(&mut self, a: Var, b: Var) -> Var {
        self.record(Op::Kron(a, b))
    }

    pub fn column_softmax(&mut self, a: Var, temperature: f64) -> Result<Var, AutodiffError> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(AutodiffError::Temperature(temperature));
        }
        Ok(self.record(Op::ColumnSoftmax(a, temperature)))
    }

    /// Row vector of per-column Jensen-Shannon distances.
    pub fn column_jsd(&mut self, a: Var, b: Var, base: LogBase) -> Result<Var, AutodiffError> {
        self.same_shape("column_jsd", a, b)?;
        Ok(self.record(Op::ColumnJsd(a, b, base)))
    }

    /// Reduces a `1 × k` row to a scalar.
    pub fn aggregate_columns(&mut self, a: Var, agg: ColumnAggregation) -> Result<Var, AutodiffError> {
        let s = self.shape(a);
        if s.0 != 1 || s.1 == 0 {
            return Err(AutodiffError::Shape { op: "aggregate_columns", lhs: s, rhs: (1, s.1) });
        }
        Ok(self.record(Op::AggregateColumns(a, agg)))
    }

    /// Column vector of row maxima.
    pub fn row_max(&mut self, a: Var) -> Var {
        self.record(Op::RowMax(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.record(Op::Sum(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("add", a, b)?;
        Ok(self.record(Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("hadamard", a, b)?;
        Ok(self.record(Op::Hadamard(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.record(Op::Scale(a, c))
    }

    /// `c - a`, elementwise.
    pub fn sub_from(&mut self, c: f64, a: Var) -> Var {
        self.record(Op::SubFrom(c, a))
    }

    /// Maximum of scalars; the gradient goes to the first maximiser.
    pub fn max_of(&mut self, xs: &[Var]) -> Result<Var, AutodiffError> {
        self.check_scalars("max_of", xs.iter().copied())?;
        Ok(self.record(Op::MaxOf(xs.to_vec())))
    }

    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Result<Var, AutodiffError> {
        self.check_scalars("weighted_sum", terms.iter().map(|t| t.1))?;
        Ok(self.record(Op::WeightedSum(terms.to_vec())))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AutodiffError::Shape { op, lhs: sa, rhs: sb });
        }
        Ok(())
    }

    fn check_scalars(&self, op: &'static str, xs: impl Iterator<Item = Var>) -> Result<(), AutodiffError> {
        let mut any = false;
        for x in xs {
            any = true;
            if self.shape(x) != (1, 1) {
                return Err(AutodiffError::Shape { op, lhs: self.shape(x), rhs: (1, 1) });
            }
        }
        if !any {
            return Err(AutodiffError::NoInputs(op));
        }
        Ok(())
    }

    fn push(&mut self, op: Op, value: Matrix, argmax: Vec<usize>) -> Var {
        self.nodes.push(Node { op, value, argmax });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Var {
        let (value, argmax) = self.evaluate(&op);
        self.push(op, value, argmax)
    }

    fn evaluate(&self, op: &Op) -> (Matrix, Vec<usize>) {
        let val = |v: &Var| &self.nodes[v.0].value;
        match op {
            Op::Leaf | Op::Constant => unreachable!("inputs are never re-evaluated"),
            Op::MatMul(a, b) => (val(a).matmul(val(b)).expect("shape checked"), Vec::new()),
            Op::Kron(a, b) => (val(a).kron(val(b)), Vec::new()),
            Op::ColumnSoftmax(a, t) => (column_softmax(val(a), *t), Vec::new()),
            Op::ColumnJsd(a, b, base) => {
                let (x, y) = (val(a), val(b));
                let row: Vec<f64> = (0..x.cols()).map(|j| column_jsd(&x.col(j), &y.col(j), *base)).collect();
                (Matrix::from_vec(1, row.len(), row).expect("row vector"), Vec::new())
            }
            Op::AggregateColumns(a, agg) => {
                let row = val(a).as_slice();
                let argmax = match agg {
                    ColumnAggregation::Max => vec![first_argmax(row)],
                    ColumnAggregation::Mean => Vec::new(),
                };
                (Matrix::scalar(aggregate_columns(row, *agg)), argmax)
            }
            Op::RowMax(a) => {
                let m = val(a);
                let argmax: Vec<usize> = (0..m.rows()).map(|i| first_argmax(m.row(i))).collect();
                let maxes: Vec<f64> = argmax.iter().enumerate().map(|(i, &j)| m[(i, j)]).collect();
                (Matrix::column(&maxes), argmax)
            }
            Op::Sum(a) => (Matrix::scalar(val(a).sum()), Vec::new()),
            Op::Add(a, b) => {
                let (x, y) = (val(a), val(b));
                let data = x.as_slice().iter().zip(y.as_slice()).map(|(p, q)| p + q).collect();
                (Matrix::from_vec(x.rows(), x.cols(), data).expect("same shape"), Vec::new())
            }
            Op::Hadamard(a, b) => {
                let (x, y) = (val(a), val(b));
                let data = x.as_slice().iter().zip(y.as_slice()).map(|(p, q)| p * q).collect();
                (Matrix::from_vec(x.rows(), x.cols(), data).expect("same shape"), Vec::new())
            }
            Op::Scale(a, c) => (val(a).map(|x| c * x), Vec::new()),
            Op::SubFrom(c, a) => (val(a).map(|x| c - x), Vec::new()),
            Op::MaxOf(xs) => {
                let vals: Vec<f64> = xs.iter().map(|x| val(x)[(0, 0)]).collect();
                let k = first_argmax(&vals);
                (Matrix::scalar(vals[k]), vec![k])
            }
            Op::WeightedSum(terms) => (Matrix::scalar(terms.iter().map(|(w, x)| w * val(x)[(0, 0)]).sum()), Vec::new()),
        }
    }

    /// Recomputes every derived node from the current inputs.
    pub fn forward(&mut self) {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf | Op::Constant) {
                continue;
            }
            let (value, argmax) = self.evaluate(&self.nodes[i].op);
            self.nodes[i].value = value;
            self.nodes[i].argmax = argmax;
        }
        self.stale = false;
    }

    /// Winners of every max-type node, in node order. Two evaluations with the
    /// same signature lie on the same smooth piece of the loss.
    pub fn argmax_signature(&self) -> Vec<usize> {
        self.nodes.iter().flat_map(|n| n.argmax.iter().copied()).collect()
    }

    /// Adjoint of `v` from the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> &Matrix {
        &self.grads[v.0]
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&mut self, output: Var) -> Result<(), AutodiffError> {
        if self.stale {
            return Err(AutodiffError::Stale);
        }
        let shape = self.shape(output);
        if shape != (1, 1) {
            return Err(AutodiffError::NotScalar(shape));
        }
        let mut grads: Vec<Matrix> = self.nodes.iter().map(|n| Matrix::zeros(n.value.rows(), n.value.cols())).collect();
        grads[output.0][(0, 0)] = 1.0;

        for i in (0..=output.0).rev() {
            let g = std::mem::replace(&mut grads[i], Matrix::zeros(0, 0));
            let node = &self.nodes[i];
            let val = |v: &Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf | Op::Constant => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul(&val(b).transpose()).expect("shapes");
                    let gb = val(a).transpose().matmul(&g).expect("shapes");
                    accumulate(&mut grads[a.0], &ga);
                    accumulate(&mut grads[b.0], &gb);
                }
                Op::Kron(a, b) => {
                    let (x, y) = (val(a), val(b));
                    let (mut ga, mut gb) = (Matrix::zeros(x.rows(), x.cols()), Matrix::zeros(y.rows(), y.cols()));
                    for r in 0..x.rows() {
                        for c in 0..x.cols() {
                            for k in 0..y.rows() {
                                for l in 0..y.cols() {
                                    let up = g[(r * y.rows() + k, c * y.cols() + l)];
                                    ga[(r, c)] += up * y[(k, l)];
                                    gb[(k, l)] += up * x[(r, c)];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[a.0], &ga);
                    accumulate(&mut grads[b.0], &gb);
                }
                Op::ColumnSoftmax(a, t) => {
                    let s = &node.value;
                    let mut ga = Matrix::zeros(s.rows(), s.cols());
                    for j in 0..s.cols() {
                        let dot: f64 = (0..s.rows()).map(|r| g[(r, j)] * s[(r, j)]).sum();
                        for r in 0..s.rows() {
                            ga[(r, j)] = s[(r, j)] * (g[(r, j)] - dot) / t;
                        }
                    }
                    accumulate(&mut grads[a.0], &ga);
                }
                Op::ColumnJsd(a, b, base) => {
                    let (x, y) = (val(a), val(b));
                    let (mut ga, mut gb) = (Matrix::zeros(x.rows(), x.cols()), Matrix::zeros(x.rows(), x.cols()));
                    for j in 0..x.cols() {
                        let d = node.value[(0, j)];
                        if d <= 0.0 || g[(0, j)] == 0.0 {
                            continue;
                        }
                        let ln_b = base.ln_base();
                        // d = sqrt(f / ln_b)  =>  dd/df = 1 / (2 d ln_b)
                        let scale = g[(0, j)] / (2.0 * d * ln_b);
                        // df/dp = ln(p / m) / 2 with m = (p + q) / 2
                        for r in 0..x.rows() {
                            let (p, q) = (x[(r, j)], y[(r, j)]);
                            ga[(r, j)] = scale * 0.5 * log_ratio_to_mean(p, q);
                            gb[(r, j)] = scale * 0.5 * log_ratio_to_mean(q, p);
                        }
                    }
                    accumulate(&mut grads[a.0], &ga);
                    accumulate(&mut grads[b.0], &gb);
                }
                Op::AggregateColumns(a, agg) => {
                    let k = val(a).cols();
                    let mut ga = Matrix::zeros(1, k);
                    match agg {
                        ColumnAggregation::Max => ga[(0, node.argmax[0])] = g[(0, 0)],
                        ColumnAggregation::Mean => {
                            for j in 0..k {
                                ga[(0, j)] = g[(0, 0)] / k as f64;
                            }
                        }
                    }
                    accumulate(&mut grads[a.0], &ga);
                }
                Op::RowMax(a) => {
                    let x = val(a);
                    let mut ga = Matrix::zeros(x.rows(), x.cols());
                    for (r, &c) in node.argmax.iter().enumerate() {
                        ga[(r, c)] = g[(r, 0)];
                    }
                    accumulate(&mut grads[a.0], &ga);
                }
                Op::Sum(a) => {
                    let x = val(a);
                    accumulate(&mut grads[a.0], &Matrix::filled(x.rows(), x.cols(), g[(0, 0)]));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], &g);
                    accumulate(&mut grads[b.0], &g);
                }
                Op::Hadamard(a, b) => {
                    let (x, y) = (val(a), val(b));
                    let ga = Matrix::from_vec(
                        g.rows(),
                        g.cols(),
                        g.as_slice().iter().zip(y.as_slice()).map(|(u, w)| u * w).collect(),
                    )
                    .expect("same shape");
                    let gb = Matrix::from_vec(
                        g.rows(),
                        g.cols(),
                        g.as_slice().iter().zip(x.as_slice()).map(|(u, w)| u * w).collect(),
                    )
                    .expect("same shape");
                    accumulate(&mut grads[a.0], &ga);
                    accumulate(&mut grads[b.0], &gb);
                }
                Op::Scale(a, c) => accumulate(&mut grads[a.0], &g.map(|u| c * u)),
                Op::SubFrom(_, a) => accumulate(&mut grads[a.0], &g.map(|u| -u)),
                Op::MaxOf(xs) => {
                    let winner = xs[node.argmax[0]];
                    grads[winner.0][(0, 0)] += g[(0, 0)];
                }
                Op::WeightedSum(terms) => {
                    for (w, x) in terms {
                        grads[x.0][(0, 0)] += w * g[(0, 0)];
                    }
                }
            }
            grads[i] = g;
        }
        self.grads = grads;
        Ok(())
    }
}

/// `ln(2p / (p + q))`, finite at `p = 0`.
fn log_ratio_to_mean(p: f64, q: f64) -> f64 {
    let s = p + q;
    if s <= 0.0 {
        0.0
    } else if p > 0.0 {
        ((p - q) / s).ln_1p()
    } else {
        LOG_FLOOR.ln() - (0.5 * s).ln()
    }
}

fn accumulate(into: &mut Matrix, add: &Matrix) {
    for (a, b) in into.as_mut_slice().iter_mut().zip(add.as_slice()) {
        *a += b;
    }
}

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub checked: usize,
    /// Coordinates whose perturbation crossed a max-node tie.
    pub skipped: Vec<Coordinate>,
    pub max_rel_error: f64,
    pub worst: Option<CoordinateCheck>,
    pub tol: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < self.tol
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Coordinate {
    pub leaf: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordinateCheck {
    pub at: Coordinate,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Denominator floor for relative errors: below this gradient magnitude the
/// comparison degrades gracefully to an absolute one.
pub const GRADCHECK_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR)
}

/// Compares the tape gradient of `loss` w.r.t. `leaves` with central
/// differences of step `h` at `samples` random coordinates. Coordinates whose
/// ±h perturbation changes any max-node winner are skipped, reported, and
/// replaced by fresh draws (up to ten times `samples` attempts).
pub fn gradcheck<R: Rng>(
    tape: &mut Tape,
    loss: Var,
    leaves: &[Var],
    samples: usize,
    h: f64,
    tol: f64,
    rng: &mut R,
) -> Result<GradcheckReport, AutodiffError> {
    tape.forward();
    let base_value = tape.scalar(loss);
    if !base_value.is_finite() {
        return Err(AutodiffError::NonFinite(base_value));
    }
    tape.backward(loss)?;
    let analytic: Vec<Matrix> = leaves.iter().map(|&l| tape.grad(l).clone()).collect();
    let signature = tape.argmax_signature();
    let sizes: Vec<usize> = leaves.iter().map(|&l| tape.value(l).as_slice().len()).collect();
    let total: usize = sizes.iter().sum();

    let mut report = GradcheckReport { checked: 0, skipped: Vec::new(), max_rel_error: 0.0, worst: None, tol };
    if total == 0 {
        return Ok(report);
    }
    let mut attempts = 0;
    while report.checked < samples && attempts < samples * 10 {
        attempts += 1;
        let mut flat = rng.gen_range(0..total);
        let leaf = sizes
            .iter()
            .position(|&s| {
                if flat < s {
                    true
                } else {
                    flat -= s;
                    false
                }
            })
            .expect("in range");
        let original = tape.value(leaves[leaf]).clone();
        let coord = Coordinate { leaf, row: flat / original.cols(), col: flat % original.cols() };

        let probe = |delta: f64, tape: &mut Tape| -> Result<(f64, Vec<usize>), AutodiffError> {
            let mut m = original.clone();
            m[(coord.row, coord.col)] += delta;
            tape.set_value(leaves[leaf], m)?;
            tape.forward();
            Ok((tape.scalar(loss), tape.argmax_signature()))
        };
        let (plus, sig_plus) = probe(h, tape)?;
        let (minus, sig_minus) = probe(-h, tape)?;
        tape.set_value(leaves[leaf], original)?;
        tape.forward();

        if sig_plus != signature || sig_minus != signature {
            report.skipped.push(coord);
            continue;
        }
        if !plus.is_finite() || !minus.is_finite() {
            return Err(AutodiffError::NonFinite(if plus.is_finite() { minus } else { plus }));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[leaf][(coord.row, coord.col)];
        let rel = relative_error(a, numeric);
        report.checked += 1;
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some(CoordinateCheck { at: coord, analytic: a, numeric, rel_error: rel });
        }
    }
    // leave the tape with fresh adjoints for the unperturbed point
    tape.backward(loss)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn softmax_columns_sum_to_one_so_gradient_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let w = tape.leaf(random_matrix(&mut rng, 3, 4));
        let s = tape.column_softmax(w, 0.3).unwrap();
        let total = tape.sum(s);
        tape.backward(total).unwrap();
        assert!(tape.grad(w).as_slice().iter().all(|g| g.abs() < 1e-9));
    }

    #[test]
    fn matmul_gradient_is_g_times_b_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let a = tape.leaf(random_matrix(&mut rng, 2, 3));
        let b = tape.constant(random_matrix(&mut rng, 3, 2));
        let g = random_matrix(&mut rng, 2, 2);
        let gv = tape.constant(g.clone());
        let ab = tape.matmul(a, b).unwrap();
        let prod = tape.hadamard(ab, gv).unwrap();
        let l = tape.sum(prod);
        tape.backward(l).unwrap();
        let expected = g.matmul(&tape.value(b).transpose()).unwrap();
        assert!(tape.grad(a).max_abs_diff(&expected).unwrap() < 1e-12);

        let report = gradcheck(&mut tape, l, &[a], 6, 1e-6, 1e-5, &mut rng).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn identity_loss_gives_unit_basis() {
        let mut tape = Tape::new();
        let w = tape.leaf(Matrix::filled(2, 3, 0.7));
        let mut mask = Matrix::zeros(2, 3);
        mask[(0, 0)] = 1.0;
        let m = tape.constant(mask.clone());
        let picked = tape.hadamard(w, m).unwrap();
        let l = tape.sum(picked);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w), &mask);
    }

    #[test]
    fn max_of_routes_to_first_winner() {
        let mut tape = Tape::new();
        let a = tape.leaf(Matrix::scalar(2.0));
        let b = tape.leaf(Matrix::scalar(2.0));
        let m = tape.max_of(&[a, b]).unwrap();
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(a)[(0, 0)], 1.0);
        assert_eq!(tape.grad(b)[(0, 0)], 0.0);
    }

    #[test]
    fn tied_max_coordinates_are_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let a = tape.leaf(Matrix::scalar(1.0));
        let b = tape.constant(Matrix::scalar(1.0));
        let m = tape.max_of(&[a, b]).unwrap();
        let report = gradcheck(&mut tape, m, &[a], 3, 1e-6, 1e-5, &mut rng).unwrap();
        assert_eq!(report.checked, 0);
        assert!(!report.skipped.is_empty());
        assert!(!report.passed());
    }

    #[test]
    fn jsd_and_kron_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let w1 = tape.leaf(random_matrix(&mut rng, 2, 2));
        let w2 = tape.leaf(random_matrix(&mut rng, 2, 3));
        let s1 = tape.column_softmax(w1, 0.5).unwrap();
        let s2 = tape.column_softmax(w2, 0.5).unwrap();
        let k = tape.kron(s1, s2);
        let target = tape.constant(column_softmax(&random_matrix(&mut rng, 4, 6), 1.0));
        for base in [LogBase::Two, LogBase::Natural] {
            let d = tape.column_jsd(k, target, base).unwrap();
            let agg = tape.aggregate_columns(d, ColumnAggregation::Mean).unwrap();
            let report = gradcheck(&mut tape, agg, &[w1, w2], 20, 1e-6, 1e-5, &mut rng).unwrap();
            assert!(report.passed(), "{report:?}");
        }
    }

    #[test]
    fn errors() {
        let mut tape = Tape::new();
        let a = tape.leaf(Matrix::zeros(2, 3));
        let b = tape.leaf(Matrix::zeros(2, 3));
        assert!(matches!(tape.matmul(a, b), Err(AutodiffError::Shape { .. })));
        assert!(matches!(tape.backward(a), Err(AutodiffError::NotScalar(_))));
        assert!(matches!(tape.column_softmax(a, 0.0), Err(AutodiffError::Temperature(_))));
        let s = tape.sum(a);
        tape.set_value(a, Matrix::filled(2, 3, 1.0)).unwrap();
        assert_eq!(tape.backward(s), Err(AutodiffError::Stale));
        tape.forward();
        assert_eq!(tape.scalar(s), 6.0);
        assert_eq!(tape.set_value(s, Matrix::scalar(0.0)), Err(AutodiffError::NotLeaf));
    }
}
