//! Built-in scenarios, evaluation metrics and experiment protocols.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::OnceLock;
use std::time::Instant;

use rayon::prelude::*;

use crate::abstraction::{diagram_errors, AbstractionDef, AbstractionProblem, AlphaSet, DiagramSpec, ErrorConfig};
use crate::enumeration::{exhaustive_search, EnumerationError, SearchConfig};
use crate::learning::{ensemble_run, surjectivity_penalty, Method, TrainConfig, TrainError};
use crate::matrix::Matrix;
use crate::scm::{Scm, ScmDef};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("unknown scenario '{0}' (expected basic, collapsing, extended or v_structure)")]
    UnknownScenario(String),
    #[error("matrix {index} has shape {got:?}, ground truth has {expected:?}")]
    Shape { index: usize, expected: (usize, usize), got: (usize, usize) },
    #[error("expected {expected} matrices, got {got}")]
    Count { expected: usize, got: usize },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Enumeration(#[from] EnumerationError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScenarioName {
    Basic,
    Collapsing,
    Extended,
    VStructure,
}

impl ScenarioName {
    pub const ALL: [ScenarioName; 4] =
        [ScenarioName::Basic, ScenarioName::Collapsing, ScenarioName::Extended, ScenarioName::VStructure];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioName::Basic => "basic",
            ScenarioName::Collapsing => "collapsing",
            ScenarioName::Extended => "extended",
            ScenarioName::VStructure => "v_structure",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ScenarioName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioName {
    type Err = ExperimentError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "basic" => Ok(ScenarioName::Basic),
            "collapsing" => Ok(ScenarioName::Collapsing),
            "extended" => Ok(ScenarioName::Extended),
            "v_structure" | "v-structure" | "vstructure" => Ok(ScenarioName::VStructure),
            other => Err(ExperimentError::UnknownScenario(other.to_string())),
        }
    }
}

/// Model files describing one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioDefs {
    pub base: ScmDef,
    pub abstracted: ScmDef,
    pub abstraction: AbstractionDef,
    pub diagrams: Vec<DiagramSpec>,
}

fn abstraction(relevant: &[&str], map: &[(&str, &str)]) -> AbstractionDef {
    AbstractionDef {
        relevant: relevant.iter().map(|s| s.to_string()).collect(),
        map: map.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
        alphas: None,
    }
}

pub fn builtin_defs(name: ScenarioName) -> ScenarioDefs {
    let mut base = ScmDef::default();
    let mut abs = ScmDef::default();
    match name {
        ScenarioName::Basic => {
            base.push("S", 2, &[], &[&[0.8], &[0.2]]).push("T", 2, &["S"], &[&[1.0, 0.2], &[0.0, 0.8]]).push(
                "C",
                2,
                &["T"],
                &[&[0.9, 0.6], &[0.1, 0.4]],
            );
            abs.push("S'", 2, &[], &[&[0.8], &[0.2]]).push("C'", 2, &["S'"], &[&[0.9, 0.66], &[0.1, 0.34]]);
            ScenarioDefs {
                base,
                abstracted: abs,
                abstraction: abstraction(&["S", "C"], &[("S", "S'"), ("C", "C'")]),
                diagrams: vec![DiagramSpec::new(&["S'"], &["C'"])],
            }
        }
        ScenarioName::Collapsing => {
            base.push("E", 2, &[], &[&[0.45], &[0.55]])
                .push("S", 2, &["E"], &[&[0.9, 0.7], &[0.1, 0.3]])
                .push("T", 2, &["S"], &[&[0.95, 0.2], &[0.05, 0.8]])
                .push("C", 2, &["T"], &[&[0.9, 0.6], &[0.1, 0.4]]);
            abs.push("S'", 2, &[], &[&[0.8], &[0.2]]).push("T'", 2, &["S'"], &[&[1.0, 0.2], &[0.0, 0.8]]).push(
                "C'",
                2,
                &["T'"],
                &[&[0.9, 0.6], &[0.1, 0.4]],
            );
            ScenarioDefs {
                base,
                abstracted: abs,
                abstraction: abstraction(&["E", "S", "T", "C"], &[("E", "S'"), ("S", "S'"), ("T", "T'"), ("C", "C'")]),
                diagrams: chain_diagrams(),
            }
        }
        ScenarioName::Extended => {
            base.push("S", 4, &[], &[&[0.25], &[0.25], &[0.25], &[0.25]])
                .push("T", 3, &["S"], &[&[0.6, 0.55, 0.1, 0.1], &[0.3, 0.25, 0.4, 0.4], &[0.1, 0.2, 0.5, 0.5]])
                .push("C", 2, &["T"], &[&[0.7, 0.7, 0.4], &[0.3, 0.3, 0.6]]);
            abs.push("S'", 3, &[], &[&[0.25], &[0.5], &[0.25]])
                .push("T'", 2, &["S'"], &[&[0.9, 0.8, 0.5], &[0.1, 0.2, 0.5]])
                .push("C'", 2, &["T'"], &[&[0.7, 0.4], &[0.3, 0.6]]);
            ScenarioDefs {
                base,
                abstracted: abs,
                abstraction: abstraction(&["S", "T", "C"], &[("S", "S'"), ("T", "T'"), ("C", "C'")]),
                diagrams: chain_diagrams(),
            }
        }
        ScenarioName::VStructure => {
            base.push("S", 2, &[], &[&[0.8], &[0.2]])
                .push("G", 2, &[], &[&[0.7], &[0.3]])
                .push("C", 2, &["S", "G"], &[&[0.15, 0.85, 0.65, 0.75], &[0.85, 0.15, 0.35, 0.25]])
                .push("H", 2, &["C"], &[&[1.0, 0.2], &[0.0, 0.8]])
                .push("F", 2, &["C", "H"], &[&[0.42, 0.75, 0.65, 0.33], &[0.58, 0.25, 0.35, 0.67]]);
            abs.push("S'", 2, &[], &[&[0.8], &[0.2]]).push("C'", 2, &["S'"], &[&[0.9, 0.66], &[0.1, 0.34]]).push(
                "F'",
                2,
                &["C'"],
                &[&[0.8, 0.5], &[0.2, 0.5]],
            );
            ScenarioDefs {
                base,
                abstracted: abs,
                abstraction: abstraction(&["S", "C", "H", "F"], &[("S", "S'"), ("C", "C'"), ("H", "F'"), ("F", "F'")]),
                diagrams: vec![
                    DiagramSpec::new(&["S'"], &["C'"]),
                    DiagramSpec::new(&["C'"], &["F'"]),
                    DiagramSpec::new(&["S'"], &["F'"]),
                ],
            }
        }
    }
}

fn chain_diagrams() -> Vec<DiagramSpec> {
    vec![DiagramSpec::new(&["S'"], &["C'"]), DiagramSpec::new(&["T'"], &["C'"]), DiagramSpec::new(&["S'"], &["T'"])]
}

/// Builds the problem for a built-in scenario. Pure: no caching involved.
pub fn builtin_problem(name: ScenarioName) -> AbstractionProblem {
    let defs = builtin_defs(name);
    let base = Scm::from_def(&defs.base).expect("built-in base model is valid");
    let abstracted = Scm::from_def(&defs.abstracted).expect("built-in abstracted model is valid");
    AbstractionProblem::new(base, abstracted, &defs.abstraction, defs.diagrams).expect("built-in problem is valid")
}

/// Optimum found by exhaustive search under the calibrated error.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub alphas: AlphaSet,
    pub error: f64,
    pub space_size: u64,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: ScenarioName,
    pub problem: AbstractionProblem,
    pub ground_truth: GroundTruth,
}

static GROUND_TRUTHS: [OnceLock<GroundTruth>; 4] = [const { OnceLock::new() }; 4];

pub fn ground_truth_for(problem: &AbstractionProblem, error: ErrorConfig) -> Result<GroundTruth, EnumerationError> {
    let res = exhaustive_search(problem, SearchConfig { error, ..SearchConfig::default() })?;
    Ok(GroundTruth { alphas: res.best, error: res.best_error, space_size: res.space_size })
}

/// Problem plus its enumerated optimum; the optimum is computed once per
/// process.
pub fn builtin_scenario(name: ScenarioName) -> Scenario {
    let problem = builtin_problem(name);
    let ground_truth = GROUND_TRUTHS[name.slot()]
        .get_or_init(|| ground_truth_for(&problem, ErrorConfig::CALIBRATED).expect("built-in spaces are small"))
        .clone();
    Scenario { name, problem, ground_truth }
}

/// `Σ_matrices Σ_ij |a_ij - b_ij|`.
pub fn l1_distance(solution: &[Matrix], truth: &AlphaSet) -> Result<f64, ExperimentError> {
    if solution.len() != truth.0.len() {
        return Err(ExperimentError::Count { expected: truth.0.len(), got: solution.len() });
    }
    let mut total = 0.0;
    for (index, (a, b)) in solution.iter().zip(truth.matrices()).enumerate() {
        total += a.l1_distance(b).ok_or(ExperimentError::Shape { index, expected: b.shape(), got: a.shape() })?;
    }
    Ok(total)
}

/// End-of-training metrics of a rounded solution.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub per_diagram: Vec<f64>,
    /// Sum of diagram distances over J.
    pub jsd_loss: f64,
    pub overall_error: f64,
    pub penalty: f64,
    pub l1_distance: Option<f64>,
    /// Whether some matrix has a row without any mass.
    pub zero_row: bool,
}

impl EvalMetrics {
    /// Normalised variants: sums divided by the number of diagrams trained or
    /// matrices instantiated during training.
    pub fn normalized(&self, trained_diagrams: usize, instantiated: usize) -> (f64, f64, Option<f64>) {
        let d = trained_diagrams.max(1) as f64;
        let m = instantiated.max(1) as f64;
        (self.jsd_loss / d, self.penalty / m, self.l1_distance.map(|l| l / m))
    }
}

pub fn evaluate(
    problem: &AbstractionProblem,
    rounded: &AlphaSet,
    truth: Option<&AlphaSet>,
    error: ErrorConfig,
) -> Result<EvalMetrics, ExperimentError> {
    let per_diagram = diagram_errors(problem, rounded, error);
    Ok(EvalMetrics {
        jsd_loss: per_diagram.iter().sum(),
        overall_error: per_diagram.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        per_diagram,
        penalty: surjectivity_penalty(rounded.matrices()),
        l1_distance: truth.map(|t| l1_distance(rounded.matrices(), t)).transpose()?,
        zero_row: rounded.matrices().iter().any(Matrix::has_zero_row),
    })
}

/// Shared settings of the experiment protocols.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub train: TrainConfig,
    pub repetitions: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self { train: TrainConfig::default(), repetitions: 10 }
    }
}

impl ProtocolConfig {
    /// Seed of repetition `r`. Repetitions are spaced by the ensemble size so
    /// no two members across repetitions share a seed.
    pub fn repetition_seed(&self, r: usize) -> u64 {
        self.train.seed.wrapping_add((r as u64).wrapping_mul(self.train.ensemble as u64))
    }
}

/// Result of one ensemble run, evaluated on its rounded solution.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub repetition: usize,
    pub seed: u64,
    pub metrics: EvalMetrics,
    pub final_l1: f64,
    pub seconds: f64,
    /// The selected member's rounded matrices.
    pub rounded: Vec<Matrix>,
}

fn run_once(scenario: &Scenario, cfg: &TrainConfig, repetition: usize) -> Result<RunRecord, ExperimentError> {
    let start = Instant::now();
    let out = ensemble_run(&scenario.problem, cfg, Some(&scenario.ground_truth.alphas))?;
    let mut seconds = start.elapsed().as_secs_f64();
    if cfg.method == Method::Independent {
        seconds /= scenario.problem.diagrams.len() as f64;
    }
    let metrics = evaluate(
        &scenario.problem,
        &out.best.solution.rounded_alphas(),
        Some(&scenario.ground_truth.alphas),
        cfg.error,
    )?;
    Ok(RunRecord {
        repetition,
        seed: cfg.seed,
        metrics,
        final_l1: out.best.final_l1,
        seconds: (seconds * 1e3).round() / 1e3,
        rounded: out.best.solution.rounded,
    })
}

/// Runs every repetition of one arm. Repetitions run in parallel; the output
/// is in repetition order.
pub fn run_repetitions(scenario: &Scenario, proto: &ProtocolConfig) -> Result<Vec<RunRecord>, ExperimentError> {
    (0..proto.repetitions)
        .into_par_iter()
        .map(|r| {
            let cfg = TrainConfig { seed: proto.repetition_seed(r), ..proto.train.clone() };
            run_once(scenario, &cfg, r)
        })
        .collect()
}

/// A CSV table with a fixed header.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), ExperimentError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

fn num(x: f64) -> String {
    format!("{x}")
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

/// Every method, `repetitions` ensemble runs each.
pub fn run_comparison(scenario: &Scenario, proto: &ProtocolConfig) -> Result<Table, ExperimentError> {
    let mut table = Table::new(&[
        "scenario",
        "method",
        "repetition",
        "seed",
        "l1_distance",
        "jsd_loss",
        "surjectivity_penalty",
        "overall_error",
        "wall_clock_s",
    ]);
    for method in Method::ALL {
        let arm = ProtocolConfig { train: TrainConfig { method, ..proto.train.clone() }, ..proto.clone() };
        for rec in run_repetitions(scenario, &arm)? {
            table.rows.push(vec![
                scenario.name.to_string(),
                method.to_string(),
                rec.repetition.to_string(),
                rec.seed.to_string(),
                opt(rec.metrics.l1_distance),
                num(rec.metrics.jsd_loss),
                num(rec.metrics.penalty),
                num(rec.metrics.overall_error),
                format!("{:.3}", rec.seconds),
            ]);
        }
    }
    Ok(table)
}

/// Weights used by the weighting study on three-diagram scenarios.
pub const WEIGHTING_KAPPA: [f64; 3] = [2.4, 0.3, 0.3];

/// Unweighted runs against runs with `kappa` (defaults to
/// [`WEIGHTING_KAPPA`]); one column per diagram distance.
pub fn run_weighting(
    scenario: &Scenario,
    proto: &ProtocolConfig,
    kappa: Option<Vec<f64>>,
) -> Result<Table, ExperimentError> {
    let kappa = kappa.unwrap_or_else(|| WEIGHTING_KAPPA.to_vec());
    let mut header: Vec<String> =
        ["scenario", "arm", "repetition", "seed", "kappa"].iter().map(|s| s.to_string()).collect();
    header.extend(scenario.problem.diagrams.iter().map(|d| d.spec.label()));
    header.extend(["jsd_loss".to_string(), "l1_distance".to_string()]);
    let mut table = Table { header, rows: Vec::new() };
    for (arm, k) in [("unweighted", None), ("weighted", Some(kappa))] {
        let kappa_text =
            k.as_ref().map(|k| k.iter().map(|x| num(*x)).collect::<Vec<_>>().join(" ")).unwrap_or_default();
        let cfg = ProtocolConfig { train: TrainConfig { kappa: k, ..proto.train.clone() }, ..proto.clone() };
        for rec in run_repetitions(scenario, &cfg)? {
            let mut row = vec![
                scenario.name.to_string(),
                arm.to_string(),
                rec.repetition.to_string(),
                rec.seed.to_string(),
                kappa_text.clone(),
            ];
            row.extend(rec.metrics.per_diagram.iter().map(|e| num(*e)));
            row.push(num(rec.metrics.jsd_loss));
            row.push(opt(rec.metrics.l1_distance));
            table.rows.push(row);
        }
    }
    Ok(table)
}

/// Surjectivity penalty on and off at the same seeds.
pub fn run_ablation(scenario: &Scenario, proto: &ProtocolConfig) -> Result<Table, ExperimentError> {
    let mut table = Table::new(&[
        "scenario",
        "arm",
        "repetition",
        "seed",
        "l1_distance",
        "jsd_loss",
        "surjectivity_penalty",
        "overall_error",
        "zero_row",
    ]);
    for (arm, surjectivity) in [("penalty", true), ("no_penalty", false)] {
        let cfg = ProtocolConfig { train: TrainConfig { surjectivity, ..proto.train.clone() }, ..proto.clone() };
        for rec in run_repetitions(scenario, &cfg)? {
            table.rows.push(vec![
                scenario.name.to_string(),
                arm.to_string(),
                rec.repetition.to_string(),
                rec.seed.to_string(),
                opt(rec.metrics.l1_distance),
                num(rec.metrics.jsd_loss),
                num(rec.metrics.penalty),
                num(rec.metrics.overall_error),
                rec.metrics.zero_row.to_string(),
            ]);
        }
    }
    Ok(table)
}

pub const SENSITIVITY_TEMPERATURES: [f64; 5] = [0.01, 0.05, 0.1, 0.5, 1.0];
pub const SENSITIVITY_LAMBDAS: [f64; 5] = [1.0, 5.0, 10.0, 20.0, 50.0];

/// The 5 × 5 grid of temperature and lambda, `repetitions` rows per cell.
pub fn run_sensitivity(scenario: &Scenario, proto: &ProtocolConfig) -> Result<Table, ExperimentError> {
    let mut table =
        Table::new(&["scenario", "temperature", "lambda", "repetition", "seed", "l1_distance", "overall_error"]);
    for t in SENSITIVITY_TEMPERATURES {
        for lambda in SENSITIVITY_LAMBDAS {
            let cfg = ProtocolConfig {
                train: TrainConfig { temperature: t, lambda, ..proto.train.clone() },
                ..proto.clone()
            };
            for rec in run_repetitions(scenario, &cfg)? {
                table.rows.push(vec![
                    scenario.name.to_string(),
                    num(t),
                    num(lambda),
                    rec.repetition.to_string(),
                    rec.seed.to_string(),
                    opt(rec.metrics.l1_distance),
                    num(rec.metrics.overall_error),
                ]);
            }
        }
    }
    Ok(table)
}

/// Median of a non-empty sample (mean of the two middle values when even).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}
