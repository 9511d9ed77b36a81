//! Gradient-based learning of abstraction matrices.
//!
//! Every abstracted variable `X'` owns a real weight matrix `W`. The learned
//! alpha is the column-wise softmax of `W / T`, and the loss is
//! `lambda * L1 + L2` where `L1` aggregates the diagram distances and `L2`
//! penalises rows that no column maps onto. Three strategies share the same
//! loss graph: joint (one graph over all of J), independent (one graph per
//! diagram with private copies, merged by vote) and sequential (diagrams one
//! after another, freezing what has been learned).

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::abstraction::{aggregate_columns, channel_column_jsds, AbstractionProblem, AlphaSet, ErrorConfig};
use crate::autodiff::{column_softmax, AutodiffError, Tape, Var};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss {value} at epoch {epoch} of stage {stage}")]
    NonFinite { stage: String, epoch: usize, value: f64 },
    #[error("weight matrix contains non-finite entries")]
    NonFiniteWeights,
    #[error("expected {expected} weight matrices, got {got}")]
    MissingWeights { expected: usize, got: usize },
    #[error("weight matrix for variable {var} has shape {got:?}, expected {expected:?}")]
    WeightShape { var: usize, expected: (usize, usize), got: (usize, usize) },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("every ensemble member failed: {0}")]
    AllMembersFailed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Joint,
    Independent,
    Sequential,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Joint, Method::Sequential, Method::Independent];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Joint => "joint",
            Method::Independent => "independent",
            Method::Sequential => "sequential",
        })
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "joint" => Ok(Method::Joint),
            "independent" => Ok(Method::Independent),
            "sequential" => Ok(Method::Sequential),
            other => Err(format!("unknown method '{other}' (expected joint, independent or sequential)")),
        }
    }
}

/// How per-diagram terms are combined into `L1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossAggregation {
    #[default]
    Sup,
    Mean,
}

impl fmt::Display for LossAggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossAggregation::Sup => "sup",
            LossAggregation::Mean => "mean",
        })
    }
}

impl FromStr for LossAggregation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sup" | "max" => Ok(LossAggregation::Sup),
            "mean" => Ok(LossAggregation::Mean),
            other => Err(format!("unknown loss aggregation '{other}' (expected sup or mean)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub temperature: f64,
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub ensemble: usize,
    pub seed: u64,
    pub loss_agg: LossAggregation,
    pub error: ErrorConfig,
    /// One weight per diagram. When absent the diagram weights from J are used.
    pub kappa: Option<Vec<f64>>,
    pub surjectivity: bool,
    pub adam: AdamParams,
    /// Half-width of the uniform initialisation interval.
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Joint,
            temperature: 0.1,
            lambda: 10.0,
            lr: 0.01,
            epochs: 500,
            ensemble: 10,
            seed: 0,
            loss_agg: LossAggregation::Sup,
            error: ErrorConfig::CALIBRATED,
            kappa: None,
            surjectivity: true,
            adam: AdamParams::default(),
            init_scale: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, problem: &AbstractionProblem) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.ensemble == 0 {
            return bad("ensemble size must be at least 1".into());
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return bad(format!("init scale must be non-negative, got {}", self.init_scale));
        }
        if problem.diagrams.is_empty() {
            return bad("the diagram set is empty".into());
        }
        if let Some(k) = &self.kappa {
            if k.len() != problem.diagrams.len() {
                return bad(format!("kappa has {} entries but J has {} diagrams", k.len(), problem.diagrams.len()));
            }
            if let Some(w) = k.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
                return bad(format!("kappa entries must be positive, got {w}"));
            }
        }
        Ok(())
    }

    /// Effective weight of every diagram.
    pub fn diagram_weights(&self, problem: &AbstractionProblem) -> Vec<f64> {
        match &self.kappa {
            Some(k) => k.clone(),
            None => problem.diagrams.iter().map(|d| d.spec.weight).collect(),
        }
    }
}

/// Column-wise softmax of `w / t`.
pub fn temper(w: &Matrix, t: f64) -> Result<Matrix, TrainError> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(TrainError::Config(format!("temperature must be positive, got {t}")));
    }
    if !w.is_finite() {
        return Err(TrainError::NonFiniteWeights);
    }
    Ok(column_softmax(w, t))
}

/// `Σ_matrices Σ_rows (1 - max_j m[i][j])`.
pub fn surjectivity_penalty(matrices: &[Matrix]) -> f64 {
    matrices
        .iter()
        .map(|m| (0..m.rows()).map(|i| 1.0 - m.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max)).sum::<f64>())
        .sum()
}

/// One-hot per column at the first maximal row.
pub fn round_matrix(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for j in 0..m.cols() {
        let col = m.col(j);
        let top = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let winners = col.iter().filter(|&&x| x == top).count();
        if winners > 1 {
            tracing::debug!(column = j, value = top, "rounding tie, taking the first row");
        }
        out[(col.iter().position(|&x| x == top).unwrap_or(0), j)] = 1.0;
    }
    out
}

/// Tempers and rounds every weight matrix.
pub fn round_solution(weights: &[Matrix], t: f64) -> Result<Vec<Matrix>, TrainError> {
    weights.iter().map(|w| temper(w, t).map(|s| round_matrix(&s))).collect()
}

/// Per-column vote over candidate matrices of the same shape: the winning
/// row is the one holding the largest entry of that column across all
/// candidates (earlier candidates and lower rows win ties).
pub fn majority_vote(candidates: &[Matrix]) -> Option<Matrix> {
    let first = candidates.first()?;
    let (rows, cols) = first.shape();
    if candidates.iter().any(|c| c.shape() != (rows, cols)) {
        return None;
    }
    let mut out = Matrix::zeros(rows, cols);
    for j in 0..cols {
        let mut best = (f64::NEG_INFINITY, 0);
        for c in candidates {
            for i in 0..rows {
                if c[(i, j)] > best.0 {
                    best = (c[(i, j)], i);
                }
            }
        }
        out[(best.1, j)] = 1.0;
    }
    Some(out)
}

fn aggregate_l1(terms: &[f64], agg: LossAggregation) -> f64 {
    match agg {
        LossAggregation::Sup => terms.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        LossAggregation::Mean => terms.iter().map(|t| t / terms.len() as f64).sum(),
    }
}

/// `L1` evaluated directly on given alphas over the whole of J.
pub fn l1_value(problem: &AbstractionProblem, alphas: &AlphaSet, cfg: &TrainConfig) -> f64 {
    let weights = cfg.diagram_weights(problem);
    let terms: Vec<f64> = problem
        .diagrams
        .iter()
        .zip(&weights)
        .map(|(d, w)| {
            let (upper, lower) = d.paths(alphas);
            w * aggregate_columns(&channel_column_jsds(&upper, &lower, cfg.error.log_base), cfg.error.col_agg)
        })
        .collect();
    aggregate_l1(&terms, cfg.loss_agg)
}

/// The loss as a differentiable graph over a subset of J.
#[derive(Debug, Clone)]
pub struct LossGraph {
    pub tape: Tape,
    /// Weight node per abstracted variable. `None` when the variable does not
    /// appear in the selected diagrams.
    pub weights: Vec<Option<Var>>,
    /// Which of `weights` are trainable leaves (the others are constants).
    pub trainable: Vec<bool>,
    pub tempered: Vec<Option<Var>>,
    /// Unweighted distance of each selected diagram.
    pub diagram_terms: Vec<Var>,
    pub l1: Var,
    pub l2: Var,
    pub loss: Var,
}

impl LossGraph {
    /// Builds the loss over `diagrams`. Variables with `trainable[x] == false`
    /// enter as constants.
    pub fn build(
        problem: &AbstractionProblem,
        weights: &[Matrix],
        cfg: &TrainConfig,
        diagrams: &[usize],
        trainable: &[bool],
    ) -> Result<Self, TrainError> {
        let n = problem.abstracted.len();
        if weights.len() != n || trainable.len() != n {
            return Err(TrainError::MissingWeights { expected: n, got: weights.len().min(trainable.len()) });
        }
        if diagrams.is_empty() {
            return Err(TrainError::Config("no diagrams selected".into()));
        }
        for (x, w) in weights.iter().enumerate() {
            let expected = problem.alpha_shape(x);
            if w.shape() != expected {
                return Err(TrainError::WeightShape { var: x, expected, got: w.shape() });
            }
            if !w.is_finite() {
                return Err(TrainError::NonFiniteWeights);
            }
        }
        let kappa = cfg.diagram_weights(problem);
        let mut used = vec![false; n];
        for &k in diagrams {
            for v in problem.diagrams[k].variables() {
                used[v] = true;
            }
        }

        let mut tape = Tape::new();
        let mut wvars = vec![None; n];
        let mut tvars = vec![None; n];
        for x in (0..n).filter(|&x| used[x]) {
            let w = if trainable[x] { tape.leaf(weights[x].clone()) } else { tape.constant(weights[x].clone()) };
            wvars[x] = Some(w);
            tvars[x] = Some(tape.column_softmax(w, cfg.temperature)?);
        }

        let mut diagram_terms = Vec::with_capacity(diagrams.len());
        let mut weighted = Vec::with_capacity(diagrams.len());
        for &k in diagrams {
            let d = &problem.diagrams[k];
            let kron = |tape: &mut Tape, vars: &[usize]| {
                let mut it = vars.iter().map(|&v| tvars[v].expect("used variable"));
                let first = it.next().expect("non-empty variable set");
                it.fold(first, |acc, m| tape.kron(acc, m))
            };
            let ay = kron(&mut tape, &d.target_vars);
            let ax = kron(&mut tape, &d.do_vars);
            let mu = tape.constant(d.mu.clone());
            let nu = tape.constant(d.nu.clone());
            let upper = tape.matmul(ay, mu)?;
            let lower = tape.matmul(nu, ax)?;
            let cols = tape.column_jsd(upper, lower, cfg.error.log_base)?;
            let term = tape.aggregate_columns(cols, cfg.error.col_agg)?;
            diagram_terms.push(term);
            weighted.push(tape.scale(term, kappa[k]));
        }
        let l1 = match cfg.loss_agg {
            LossAggregation::Sup => tape.max_of(&weighted)?,
            LossAggregation::Mean => {
                let share = 1.0 / weighted.len() as f64;
                tape.weighted_sum(&weighted.iter().map(|&t| (share, t)).collect::<Vec<_>>())?
            }
        };

        let mut penalties = Vec::new();
        for t in tvars.iter().flatten() {
            let maxes = tape.row_max(*t);
            let slack = tape.sub_from(1.0, maxes);
            penalties.push((1.0, tape.sum(slack)));
        }
        let l2 = tape.weighted_sum(&penalties)?;
        let loss = if cfg.surjectivity {
            tape.weighted_sum(&[(cfg.lambda, l1), (1.0, l2)])?
        } else {
            tape.weighted_sum(&[(cfg.lambda, l1)])?
        };
        let trainable = (0..n).map(|x| used[x] && trainable[x]).collect();
        Ok(Self { tape, weights: wvars, trainable, tempered: tvars, diagram_terms, l1, l2, loss })
    }

    pub fn loss_value(&self) -> f64 {
        self.tape.scalar(self.loss)
    }

    pub fn trainable_vars(&self) -> Vec<usize> {
        (0..self.weights.len()).filter(|&x| self.trainable[x]).collect()
    }
}

/// Loss over the whole of J with every weight trainable.
pub fn assemble_loss(
    problem: &AbstractionProblem,
    weights: &[Matrix],
    cfg: &TrainConfig,
) -> Result<LossGraph, TrainError> {
    let all: Vec<usize> = (0..problem.diagrams.len()).collect();
    LossGraph::build(problem, weights, cfg, &all, &vec![true; problem.abstracted.len()])
}

/// Adam with bias correction, one moment pair per parameter matrix.
#[derive(Debug, Clone)]
pub struct Adam {
    params: AdamParams,
    lr: f64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

impl Adam {
    pub fn new(params: AdamParams, lr: f64, shapes: &[(usize, usize)]) -> Self {
        let zeros = || shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect::<Vec<_>>();
        Self { params, lr, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[&Matrix]) {
        self.t += 1;
        let AdamParams { beta1, beta2, eps } = self.params;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (self.m[k].as_mut_slice(), self.v[k].as_mut_slice());
            for (i, (w, &gi)) in p.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                *w -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

/// Weights, their tempered alphas and the rounded hard alphas, one per
/// abstracted variable in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub weights: Vec<Matrix>,
    pub tempered: Vec<Matrix>,
    pub rounded: Vec<Matrix>,
}

impl Solution {
    pub fn from_weights(weights: Vec<Matrix>, t: f64) -> Result<Self, TrainError> {
        let tempered = weights.iter().map(|w| temper(w, t)).collect::<Result<Vec<_>, _>>()?;
        let rounded = tempered.iter().map(round_matrix).collect();
        Ok(Self { weights, tempered, rounded })
    }

    pub fn rounded_alphas(&self) -> AlphaSet {
        AlphaSet(self.rounded.clone())
    }

    pub fn tempered_alphas(&self) -> AlphaSet {
        AlphaSet(self.tempered.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub stage: String,
    pub epoch: usize,
    pub l1: f64,
    pub l2: f64,
    pub loss: f64,
    /// Mean unweighted diagram distance over the stage's diagrams.
    pub norm_jsd: f64,
    /// Penalty divided by the number of matrices in the stage.
    pub norm_penalty: f64,
    /// Rounded ℓ1 distance to the ground truth divided by the number of
    /// matrices in the stage.
    pub norm_l1: Option<f64>,
}

/// Writes trace rows as CSV with a fixed header.
pub fn write_trace_csv<W: std::io::Write>(rows: &[TraceRow], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    if rows.is_empty() {
        w.write_record(["stage", "epoch", "l1", "l2", "loss", "norm_jsd", "norm_penalty", "norm_l1"])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub solution: Solution,
    pub trace: Vec<TraceRow>,
    /// `L1` of the rounded solution over the whole of J.
    pub final_l1: f64,
    /// `L1` of the tempered solution over the whole of J.
    pub final_l1_tempered: f64,
    /// Diagrams that were actually optimised, in training order.
    pub trained_diagrams: Vec<usize>,
    /// Number of weight matrices created during training.
    pub instantiated: usize,
}

fn init_weights<R: Rng>(problem: &AbstractionProblem, x: usize, scale: f64, rng: &mut R) -> Matrix {
    let (r, c) = problem.alpha_shape(x);
    let data = (0..r * c).map(|_| if scale > 0.0 { rng.gen_range(-scale..=scale) } else { 0.0 }).collect();
    Matrix::from_vec(r, c, data).expect("shape from problem")
}

/// Initialisation stream of a member.
fn member_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Separate stream for the diagram order, so initial weights do not depend
/// on the method.
fn order_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Runs Adam on one loss graph, updating `weights` in place.
#[allow(clippy::too_many_arguments)]
fn train_stage(
    problem: &AbstractionProblem,
    cfg: &TrainConfig,
    diagrams: &[usize],
    weights: &mut [Matrix],
    trainable: &[bool],
    stage: &str,
    ground_truth: Option<&AlphaSet>,
    trace: &mut Vec<TraceRow>,
) -> Result<(), TrainError> {
    let mut graph = LossGraph::build(problem, weights, cfg, diagrams, trainable)?;
    let vars = graph.trainable_vars();
    let in_stage: Vec<usize> = (0..weights.len()).filter(|&x| graph.weights[x].is_some()).collect();
    let shapes: Vec<_> = vars.iter().map(|&x| weights[x].shape()).collect();
    let mut adam = Adam::new(cfg.adam, cfg.lr, &shapes);

    for epoch in 0..=cfg.epochs {
        let loss = graph.loss_value();
        if !loss.is_finite() {
            return Err(TrainError::NonFinite { stage: stage.to_string(), epoch, value: loss });
        }
        let tape = &graph.tape;
        let l2 = tape.scalar(graph.l2);
        let norm_jsd = graph.diagram_terms.iter().map(|&t| tape.scalar(t)).sum::<f64>() / diagrams.len() as f64;
        let norm_l1 = ground_truth.map(|gt| {
            in_stage
                .iter()
                .map(|&x| {
                    let hard = round_matrix(tape.value(graph.tempered[x].expect("in stage")));
                    hard.l1_distance(gt.get(x)).expect("ground truth shape")
                })
                .sum::<f64>()
                / in_stage.len() as f64
        });
        trace.push(TraceRow {
            stage: stage.to_string(),
            epoch,
            l1: tape.scalar(graph.l1),
            l2,
            loss,
            norm_jsd,
            norm_penalty: l2 / in_stage.len() as f64,
            norm_l1,
        });
        if epoch == cfg.epochs {
            break;
        }

        graph.tape.backward(graph.loss)?;
        let grads: Vec<Matrix> =
            vars.iter().map(|&x| graph.tape.grad(graph.weights[x].expect("trainable")).clone()).collect();
        {
            let mut selected: Vec<&mut Matrix> =
                weights.iter_mut().enumerate().filter(|(x, _)| vars.contains(x)).map(|(_, w)| w).collect();
            adam.step(&mut selected, &grads.iter().collect::<Vec<_>>());
        }
        for &x in &vars {
            graph.tape.set_value(graph.weights[x].expect("trainable"), weights[x].clone())?;
        }
        graph.tape.forward();
    }
    Ok(())
}

fn finish(
    problem: &AbstractionProblem,
    cfg: &TrainConfig,
    solution: Solution,
    trace: Vec<TraceRow>,
    trained_diagrams: Vec<usize>,
    instantiated: usize,
) -> TrainOutcome {
    let final_l1 = l1_value(problem, &solution.rounded_alphas(), cfg);
    let final_l1_tempered = l1_value(problem, &solution.tempered_alphas(), cfg);
    TrainOutcome { solution, trace, final_l1, final_l1_tempered, trained_diagrams, instantiated }
}

/// All weights shared across every diagram of J.
pub fn train_joint(
    problem: &AbstractionProblem,
    cfg: &TrainConfig,
    ground_truth: Option<&AlphaSet>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate(problem)?;
    let mut rng = member_rng(cfg.seed);
    let n = problem.abstracted.len();
    let mut weights: Vec<Matrix> = (0..n).map(|x| init_weights(problem, x, cfg.init_scale, &mut rng)).collect();
    let all: Vec<usize> = (0..problem.diagrams.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs + 1);
    train_stage(problem, cfg, &all, &mut weights, &vec![true; n], "joint", ground_truth, &mut trace)?;
    let instantiated =
        problem.diagrams.iter().flat_map(|d| d.variables()).collect::<std::collections::BTreeSet<_>>().len();
    let solution = Solution::from_weights(weights, cfg.temperature)?;
    Ok(finish(problem, cfg, solution, trace, all, instantiated))
}

/// Every diagram trained on private weight copies, then merged per variable
/// by [`majority_vote`] over the tempered candidates. The merged `weights`
/// and `tempered` fields hold entrywise means of the candidates; `rounded`
/// holds the vote.
pub fn train_independent(
    problem: &AbstractionProblem,
    cfg: &TrainConfig,
    ground_truth: Option<&AlphaSet>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate(problem)?;
    let mut rng = member_rng(cfg.seed);
    let n = problem.abstracted.len();
    let mut candidates: Vec<Vec<(Matrix, Matrix)>> = vec![Vec::new(); n];
    let mut trace = Vec::new();
    let mut instantiated = 0;
    for (k, d) in problem.diagrams.iter().enumerate() {
        let mut vars = d.variables();
        vars.sort_unstable();
        let mut weights: Vec<Matrix> =
            (0..n).map(|x| Matrix::zeros(problem.alpha_shape(x).0, problem.alpha_shape(x).1)).collect();
        for &x in &vars {
            weights[x] = init_weights(problem, x, cfg.init_scale, &mut rng);
        }
        instantiated += vars.len();
        train_stage(problem, cfg, &[k], &mut weights, &vec![true; n], &d.spec.label(), ground_truth, &mut trace)?;
        for &x in &vars {
            let t = temper(&weights[x], cfg.temperature)?;
            candidates[x].push((weights[x].clone(), t));
        }
    }

    let mut sol = Solution { weights: Vec::new(), tempered: Vec::new(), rounded: Vec::new() };
    for (x, cands) in candidates.into_iter().enumerate() {
        if cands.is_empty() {
            let w = init_weights(problem, x, cfg.init_scale, &mut rng);
            let t = temper(&w, cfg.temperature)?;
            sol.rounded.push(round_matrix(&t));
            sol.weights.push(w);
            sol.tempered.push(t);
            continue;
        }
        let share = 1.0 / cands.len() as f64;
        let mean = |pick: fn(&(Matrix, Matrix)) -> &Matrix| {
            let (r, c) = pick(&cands[0]).shape();
            let mut acc = Matrix::zeros(r, c);
            for cand in &cands {
                for (a, b) in acc.as_mut_slice().iter_mut().zip(pick(cand).as_slice()) {
                    *a += share * b;
                }
            }
            acc
        };
        sol.weights.push(mean(|c| &c.0));
        sol.tempered.push(mean(|c| &c.1));
        let tempered: Vec<Matrix> = cands.iter().map(|c| c.1.clone()).collect();
        sol.rounded.push(majority_vote(&tempered).expect("candidates share a shape"));
    }
    let all = (0..problem.diagrams.len()).collect();
    Ok(finish(problem, cfg, sol, trace, all, instantiated))
}

/// Diagrams trained one at a time in a seeded random order. Weights learned
/// in an earlier diagram enter later ones as constants, and a diagram whose
/// weights are all learned already is skipped.
pub fn train_sequential(
    problem: &AbstractionProblem,
    cfg: &TrainConfig,
    ground_truth: Option<&AlphaSet>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate(problem)?;
    let mut rng = member_rng(cfg.seed);
    let n = problem.abstracted.len();
    let mut order: Vec<usize> = (0..problem.diagrams.len()).collect();
    order.shuffle(&mut order_rng(cfg.seed));
    let mut weights: Vec<Matrix> = (0..n).map(|x| init_weights(problem, x, cfg.init_scale, &mut rng)).collect();
    let mut frozen = vec![false; n];
    let mut trace = Vec::new();
    let mut trained = Vec::new();
    let mut instantiated = 0;
    for k in order {
        let d = &problem.diagrams[k];
        let vars = d.variables();
        if vars.iter().all(|&x| frozen[x]) {
            tracing::debug!(diagram = %d.spec.label(), "skipping diagram with only frozen matrices");
            continue;
        }
        let trainable: Vec<bool> = frozen.iter().map(|f| !f).collect();
        train_stage(problem, cfg, &[k], &mut weights, &trainable, &d.spec.label(), ground_truth, &mut trace)?;
        for &x in &vars {
            if !frozen[x] {
                frozen[x] = true;
                instantiated += 1;
            }
        }
        trained.push(k);
    }
    let solution = Solution::from_weights(weights, cfg.temperature)?;
    Ok(finish(problem, cfg, solution, trace, trained, instantiated))
}

pub fn train(
    problem: &AbstractionProblem,
    cfg: &TrainConfig,
    ground_truth: Option<&AlphaSet>,
) -> Result<TrainOutcome, TrainError> {
    match cfg.method {
        Method::Joint => train_joint(problem, cfg, ground_truth),
        Method::Independent => train_independent(problem, cfg, ground_truth),
        Method::Sequential => train_sequential(problem, cfg, ground_truth),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberSummary {
    pub member: usize,
    pub seed: u64,
    pub final_l1: Option<f64>,
    pub final_l1_tempered: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleOutcome {
    pub best: TrainOutcome,
    pub best_member: usize,
    pub members: Vec<MemberSummary>,
}

pub fn write_members_csv<W: std::io::Write>(rows: &[MemberSummary], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["member", "seed", "final_l1", "final_l1_tempered", "error"])?;
    for m in rows {
        let num = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([
            m.member.to_string(),
            m.seed.to_string(),
            num(m.final_l1),
            num(m.final_l1_tempered),
            m.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Picks the member with the smallest key, compared lexicographically
/// (lowest index on full ties). `None` marks a failed member.
pub fn select_best(keys: &[Option<(f64, f64)>]) -> Option<usize> {
    keys.iter()
        .enumerate()
        .filter_map(|(i, k)| k.map(|k| (i, k)))
        .min_by(|a, b| a.1 .0.total_cmp(&b.1 .0).then(a.1 .1.total_cmp(&b.1 .1)).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
}

/// Trains `cfg.ensemble` members with seeds `seed, seed + 1, ...` in
/// parallel and keeps the one whose rounded solution has the smallest `L1`,
/// breaking ties by the `L1` of the tempered solution.
pub fn ensemble_run(
    problem: &AbstractionProblem,
    cfg: &TrainConfig,
    ground_truth: Option<&AlphaSet>,
) -> Result<EnsembleOutcome, TrainError> {
    cfg.validate(problem)?;
    let results: Vec<Result<TrainOutcome, TrainError>> = (0..cfg.ensemble)
        .into_par_iter()
        .map(|i| {
            let member = TrainConfig { seed: cfg.seed.wrapping_add(i as u64), ..cfg.clone() };
            train(problem, &member, ground_truth)
        })
        .collect();
    let members: Vec<MemberSummary> = results
        .iter()
        .enumerate()
        .map(|(i, r)| MemberSummary {
            member: i,
            seed: cfg.seed.wrapping_add(i as u64),
            final_l1: r.as_ref().ok().map(|o| o.final_l1),
            final_l1_tempered: r.as_ref().ok().map(|o| o.final_l1_tempered),
            error: r.as_ref().err().map(|e| e.to_string()),
        })
        .collect();
    let scores: Vec<Option<(f64, f64)>> = members
        .iter()
        .map(|m| m.final_l1.zip(m.final_l1_tempered).filter(|(a, b)| a.is_finite() && b.is_finite()))
        .collect();
    let Some(best_member) = select_best(&scores) else {
        let reasons: Vec<String> = members.iter().filter_map(|m| m.error.clone()).collect();
        return Err(TrainError::AllMembersFailed(reasons.join("; ")));
    };
    let best = results.into_iter().nth(best_member).expect("index in range").expect("selected member succeeded");
    Ok(EnsembleOutcome { best, best_member, members })
}
