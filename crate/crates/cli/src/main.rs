//! `abx`: learn and evaluate causal abstractions from the command line.

mod io;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use abx_core::abstraction::{
    diagram_errors, AbstractionDef, AbstractionProblem, AlphaSet, ColumnAggregation, ErrorConfig, LogBase,
};
use abx_core::autodiff::gradcheck;
use abx_core::enumeration::{exhaustive_search, EnumerationError, SearchConfig, DEFAULT_CAP};
use abx_core::experiments::{
    builtin_defs, builtin_scenario, evaluate, run_ablation, run_comparison, run_sensitivity, run_weighting,
    ExperimentError, ProtocolConfig, Scenario, ScenarioName, Table,
};
use abx_core::learning::{
    assemble_loss, ensemble_run, write_members_csv, write_trace_csv, LossAggregation, Method, TrainConfig, TrainError,
};
use abx_core::matrix::Matrix;
use abx_core::scm::{validate_scm, Scm, ScmDef};
use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use serde_json::json;

use crate::io::{create_dir, create_file, write_json, Inputs, RunManifest};

/// Process exit status of a failed command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Violation = 1,
    Usage = 2,
    Input = 3,
    CapExceeded = 4,
    NonFinite = 5,
    Other = 6,
}

#[derive(Debug)]
pub struct CliError {
    pub exit: Exit,
    pub message: String,
}

impl CliError {
    pub fn new(exit: Exit, message: impl Into<String>) -> Self {
        Self { exit, message: message.into() }
    }
    pub fn input(message: impl Into<String>) -> Self {
        Self::new(Exit::Input, message)
    }
    pub fn violation(message: impl Into<String>) -> Self {
        Self::new(Exit::Violation, message)
    }
    pub fn other(message: impl Into<String>) -> Self {
        Self::new(Exit::Other, message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let exit = match e {
            TrainError::NonFinite { .. } | TrainError::NonFiniteWeights | TrainError::AllMembersFailed(_) => {
                Exit::NonFinite
            }
            TrainError::Config(_) => Exit::Usage,
            _ => Exit::Other,
        };
        Self::new(exit, e.to_string())
    }
}

impl From<EnumerationError> for CliError {
    fn from(e: EnumerationError) -> Self {
        let exit = match e {
            EnumerationError::CapExceeded { .. } | EnumerationError::Overflow { .. } => Exit::CapExceeded,
            _ => Exit::Violation,
        };
        Self::new(exit, e.to_string())
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Train(t) => t.into(),
            ExperimentError::Enumeration(x) => x.into(),
            ExperimentError::Io(_) | ExperimentError::Csv(_) => Self::input(e.to_string()),
            ExperimentError::UnknownScenario(_) => Self::new(Exit::Usage, e.to_string()),
            _ => Self::other(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "abx", version, about = "Learn causal abstractions between finite discrete SCMs")]
struct Cli {
    /// Worker threads for parallel sections.
    #[arg(long, global = true, env = "ABX_JOBS", default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
struct ProblemArgs {
    /// Base SCM (JSON).
    #[arg(long)]
    base: PathBuf,
    /// Abstracted SCM (JSON).
    #[arg(long = "abs")]
    abs: PathBuf,
    /// Relevant set and variable map (JSON).
    #[arg(long)]
    map: PathBuf,
    /// Diagram set J (JSON list of {"do": [...], "target": [...]}).
    #[arg(long = "J")]
    j: PathBuf,
}

#[derive(clap::Args, Debug, Clone)]
struct ErrorArgs {
    /// Column reduction of the diagram distance.
    #[arg(long, default_value = "max")]
    col_agg: ColumnAggregation,
    /// Logarithm base of the Jensen-Shannon distance.
    #[arg(long, default_value = "natural")]
    log_base: LogBase,
}

impl ErrorArgs {
    fn config(&self) -> ErrorConfig {
        ErrorConfig { col_agg: self.col_agg, log_base: self.log_base }
    }
}

#[derive(clap::Args, Debug, Clone)]
struct TrainArgs {
    /// Softmax temperature.
    #[arg(long = "T", default_value_t = 0.1)]
    temperature: f64,
    #[arg(long, default_value_t = 10.0)]
    lambda: f64,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 500)]
    epochs: usize,
    #[arg(long, default_value_t = 10)]
    ensemble: usize,
    /// Random seed; a random one is drawn and logged when absent.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated weight per diagram.
    #[arg(long, value_delimiter = ',')]
    kappa: Option<Vec<f64>>,
    #[arg(long, default_value = "sup")]
    loss_agg: LossAggregation,
    /// Drop the surjectivity penalty from the loss.
    #[arg(long)]
    no_surjectivity: bool,
}

impl TrainArgs {
    fn config(&self, method: Method, error: ErrorConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            method,
            temperature: self.temperature,
            lambda: self.lambda,
            lr: self.lr,
            epochs: self.epochs,
            ensemble: self.ensemble,
            seed,
            loss_agg: self.loss_agg,
            error,
            kappa: self.kappa.clone(),
            surjectivity: !self.no_surjectivity,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Experiment {
    Compare,
    Weighting,
    Ablation,
    Sensitivity,
}

impl Experiment {
    fn name(self) -> &'static str {
        match self {
            Experiment::Compare => "compare",
            Experiment::Weighting => "weighting",
            Experiment::Ablation => "ablation",
            Experiment::Sensitivity => "sensitivity",
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check an SCM file, and optionally an abstraction file against it.
    Validate {
        #[arg(long)]
        scm: PathBuf,
        /// Abstraction file; needs --abs for the abstracted model.
        #[arg(long, requires = "abs")]
        abstraction: Option<PathBuf>,
        #[arg(long = "abs")]
        abs: Option<PathBuf>,
    },
    /// Exhaustive search for the optimal hard abstraction.
    Enumerate {
        #[command(flatten)]
        problem: ProblemArgs,
        #[command(flatten)]
        error: ErrorArgs,
        /// Write every candidate's score to this CSV.
        #[arg(long)]
        scores: Option<PathBuf>,
        /// Refuse solution spaces larger than this.
        #[arg(long, default_value_t = DEFAULT_CAP)]
        cap: u64,
    },
    /// Train abstraction matrices by gradient descent.
    Learn {
        #[arg(long, value_enum, default_value = "joint")]
        method: MethodArg,
        #[command(flatten)]
        problem: ProblemArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        error: ErrorArgs,
        /// Ground-truth file (as written by `scenario --emit`) for the ℓ1 trace column.
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score given alphas on every diagram.
    Eval {
        /// Abstraction file with an `alphas` object.
        #[arg(long)]
        alphas: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long = "abs")]
        abs: PathBuf,
        #[arg(long = "J")]
        j: PathBuf,
        #[command(flatten)]
        error: ErrorArgs,
    },
    /// Write a built-in scenario as model files.
    Scenario {
        name: String,
        #[arg(long)]
        emit: PathBuf,
    },
    /// Run an experiment protocol and write its CSV.
    Experiment {
        #[arg(value_enum)]
        which: Experiment,
        /// Scenario name; defaults depend on the experiment.
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long, default_value_t = 10)]
        repetitions: usize,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare the loss gradient with central finite differences.
    Gradcheck {
        /// Built-in scenario; all four when absent.
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long, default_value_t = 50)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-6)]
        h: f64,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Joint,
    Independent,
    Sequential,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Joint => Method::Joint,
            MethodArg::Independent => Method::Independent,
            MethodArg::Sequential => Method::Sequential,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_env("ABX_LOG").unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs.max(1)).build_global() {
        tracing::warn!("could not size the thread pool: {e}");
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit as u8)
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Validate { scm, abstraction, abs } => validate(&scm, abstraction.as_deref(), abs.as_deref()),
        Command::Enumerate { problem, error, scores, cap } => {
            enumerate(&problem, error.config(), scores.as_deref(), cap)
        }
        Command::Learn { method, problem, train, error, ground_truth, out } => {
            learn(method.into(), &problem, &train, error.config(), ground_truth.as_deref(), &out)
        }
        Command::Eval { alphas, base, abs, j, error } => eval(&alphas, &base, &abs, &j, error.config()),
        Command::Scenario { name, emit } => emit_scenario(&parse_scenario(&name)?, &emit),
        Command::Experiment { which, scenario, repetitions, train, out } => {
            experiment(which, scenario.as_deref(), repetitions, &train, &out)
        }
        Command::Gradcheck { scenario, samples, seed, h, tol } => {
            run_gradcheck(scenario.as_deref(), samples, seed, h, tol)
        }
    }
}

fn parse_scenario(name: &str) -> Result<ScenarioName, CliError> {
    name.parse().map_err(|e: ExperimentError| CliError::new(Exit::Usage, e.to_string()))
}

fn resolve_seed(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let s = rand::thread_rng().gen::<u32>() as u64;
        tracing::warn!(seed = s, "no --seed given, drew a random one");
        eprintln!("using random seed {s}");
        s
    })
}

fn print_json(value: &serde_json::Value) -> Result<(), CliError> {
    println!("{}", serde_json::to_string_pretty(value).map_err(|e| CliError::other(e.to_string()))?);
    Ok(())
}

fn validate(scm: &Path, abstraction: Option<&Path>, abs: Option<&Path>) -> Result<(), CliError> {
    let mut inputs = Inputs::default();
    let def: ScmDef = inputs.read_json(scm)?;
    let report = validate_scm(&def);
    println!("{}: {report}", scm.display());
    if !report.is_ok() {
        return Err(CliError::violation(format!("{} violation(s) in {}", report.violations.len(), scm.display())));
    }
    let (Some(abstraction), Some(abs)) = (abstraction, abs) else {
        return Ok(());
    };
    let abs_def: ScmDef = inputs.read_json(abs)?;
    let abs_report = validate_scm(&abs_def);
    println!("{}: {abs_report}", abs.display());
    if !abs_report.is_ok() {
        return Err(CliError::violation(format!("{} violation(s) in {}", abs_report.violations.len(), abs.display())));
    }
    let map: AbstractionDef = inputs.read_json(abstraction)?;
    let base = Scm::from_def(&def).map_err(|e| CliError::violation(e.to_string()))?;
    let high = Scm::from_def(&abs_def).map_err(|e| CliError::violation(e.to_string()))?;
    let problem = AbstractionProblem::new(base, high, &map, Vec::new())
        .map_err(|e| CliError::violation(format!("{}: {e}", abstraction.display())))?;
    if let Some(alphas) = &map.alphas {
        problem.alpha_set(alphas).map_err(|e| CliError::violation(format!("{}: {e}", abstraction.display())))?;
    }
    println!("{}: ok", abstraction.display());
    Ok(())
}

fn named(problem: &AbstractionProblem, alphas: &AlphaSet) -> BTreeMap<String, Matrix> {
    alphas.to_named(problem)
}

fn per_diagram_json(problem: &AbstractionProblem, errors: &[f64]) -> serde_json::Value {
    let entries: serde_json::Map<String, serde_json::Value> =
        problem.diagrams.iter().zip(errors).map(|(d, e)| (d.spec.label(), json!(e))).collect();
    serde_json::Value::Object(entries)
}

fn enumerate(args: &ProblemArgs, error: ErrorConfig, scores: Option<&Path>, cap: u64) -> Result<(), CliError> {
    let mut inputs = Inputs::default();
    let (problem, _) = inputs.problem(&args.base, &args.abs, &args.map, &args.j)?;
    let result = exhaustive_search(&problem, SearchConfig { error, cap, keep_scores: scores.is_some() })?;
    let per_diagram = diagram_errors(&problem, &result.best, error);
    if let (Some(path), Some(all)) = (scores, &result.scores) {
        let mut header = vec!["index".to_string()];
        header.extend(problem.diagrams.iter().map(|d| d.spec.label()));
        header.push("overall".into());
        let rows = all
            .iter()
            .map(|s| {
                let mut row = vec![s.index.to_string()];
                row.extend(s.per_diagram.iter().map(|e| e.to_string()));
                row.push(s.overall.to_string());
                row
            })
            .collect();
        Table { header, rows }.write_csv(create_file(path)?)?;
        let manifest = RunManifest::new("enumerate", json!({ "error": error, "cap": cap }), &inputs, None);
        manifest.write(&path.with_extension("manifest.json"), &[path.to_path_buf()])?;
    }
    print_json(&json!({
        "space_size": result.space_size,
        "optimum": result.best_error,
        "best_index": result.best_index,
        "per_diagram": per_diagram_json(&problem, &per_diagram),
        "alphas": named(&problem, &result.best),
        "error": error,
    }))
}

#[derive(serde::Deserialize)]
struct GroundTruthFile {
    alphas: BTreeMap<String, Matrix>,
}

fn learn(
    method: Method,
    args: &ProblemArgs,
    train: &TrainArgs,
    error: ErrorConfig,
    ground_truth: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let mut inputs = Inputs::default();
    let (problem, mut def) = inputs.problem(&args.base, &args.abs, &args.map, &args.j)?;
    let truth = match ground_truth {
        Some(p) => {
            let file: GroundTruthFile = inputs.read_json(p)?;
            Some(problem.alpha_set(&file.alphas).map_err(|e| CliError::violation(format!("{}: {e}", p.display())))?)
        }
        None => None,
    };
    let seed = resolve_seed(train.seed);
    let cfg = train.config(method, error, seed);
    cfg.validate(&problem)?;
    let outcome = ensemble_run(&problem, &cfg, truth.as_ref())?;
    let best = &outcome.best;

    create_dir(out)?;
    let alphas_path = out.join("alphas.json");
    let solution_path = out.join("solution.json");
    let trace_path = out.join("trace.csv");
    let members_path = out.join("members.csv");
    def.alphas = Some(named(&problem, &best.solution.rounded_alphas()));
    write_json(&alphas_path, &def)?;
    let metrics = evaluate(&problem, &best.solution.rounded_alphas(), truth.as_ref(), error)?;
    write_json(
        &solution_path,
        &json!({
            "method": method,
            "best_member": outcome.best_member,
            "final_l1": best.final_l1,
            "final_l1_tempered": best.final_l1_tempered,
            "overall_error": metrics.overall_error,
            "per_diagram": per_diagram_json(&problem, &metrics.per_diagram),
            "penalty": metrics.penalty,
            "l1_distance": metrics.l1_distance,
            "weights": named(&problem, &AlphaSet(best.solution.weights.clone())),
            "tempered": named(&problem, &best.solution.tempered_alphas()),
            "rounded": named(&problem, &best.solution.rounded_alphas()),
        }),
    )?;
    write_trace_csv(&best.trace, create_file(&trace_path)?).map_err(|e| CliError::input(e.to_string()))?;
    write_members_csv(&outcome.members, create_file(&members_path)?).map_err(|e| CliError::input(e.to_string()))?;
    let manifest = RunManifest::new(
        "learn",
        serde_json::to_value(&cfg).map_err(|e| CliError::other(e.to_string()))?,
        &inputs,
        Some(seed),
    );
    manifest.write(&out.join("manifest.json"), &[alphas_path, solution_path, trace_path, members_path])?;
    println!(
        "{method}: overall error {} (member {} of {}, rounded L1 {})",
        metrics.overall_error, outcome.best_member, cfg.ensemble, best.final_l1
    );
    Ok(())
}

fn eval(alphas: &Path, base: &Path, abs: &Path, j: &Path, error: ErrorConfig) -> Result<(), CliError> {
    let mut inputs = Inputs::default();
    let (problem, def) = inputs.problem(base, abs, alphas, j)?;
    let named = def.alphas.ok_or_else(|| CliError::violation(format!("{} has no alphas", alphas.display())))?;
    let set = problem.alpha_set(&named).map_err(|e| CliError::violation(e.to_string()))?;
    let metrics = evaluate(&problem, &set, None, error)?;
    print_json(&json!({
        "per_diagram": per_diagram_json(&problem, &metrics.per_diagram),
        "overall": metrics.overall_error,
        "jsd_loss": metrics.jsd_loss,
        "penalty": metrics.penalty,
        "hard": set.is_hard(),
        "error": error,
    }))
}

fn emit_scenario(name: &ScenarioName, dir: &Path) -> Result<(), CliError> {
    let defs = builtin_defs(*name);
    let scenario = builtin_scenario(*name);
    create_dir(dir)?;
    let files = [
        ("base.json", serde_json::to_value(&defs.base)),
        ("abstracted.json", serde_json::to_value(&defs.abstracted)),
        ("abstraction.json", serde_json::to_value(&defs.abstraction)),
        ("j.json", serde_json::to_value(&defs.diagrams)),
    ];
    let mut written = Vec::new();
    for (file, value) in files {
        let path = dir.join(file);
        write_json(&path, &value.map_err(|e| CliError::other(e.to_string()))?)?;
        written.push(path);
    }
    let gt = dir.join("ground_truth.json");
    write_json(
        &gt,
        &json!({
            "error": scenario.ground_truth.error,
            "space_size": scenario.ground_truth.space_size,
            "config": ErrorConfig::CALIBRATED,
            "alphas": named(&scenario.problem, &scenario.ground_truth.alphas),
        }),
    )?;
    written.push(gt);
    for p in &written {
        println!("{}", p.display());
    }
    Ok(())
}

fn experiment(
    which: Experiment,
    scenario: Option<&str>,
    repetitions: usize,
    train: &TrainArgs,
    out: &Path,
) -> Result<(), CliError> {
    let names: Vec<ScenarioName> = match (scenario, which) {
        (Some(s), _) => vec![parse_scenario(s)?],
        (None, Experiment::Compare) => ScenarioName::ALL.to_vec(),
        (None, Experiment::Weighting | Experiment::Ablation) => vec![ScenarioName::VStructure],
        (None, Experiment::Sensitivity) => vec![ScenarioName::Extended],
    };
    let seed = resolve_seed(train.seed);
    create_dir(out)?;
    for name in names {
        let scenario: Scenario = builtin_scenario(name);
        let proto = ProtocolConfig { train: train.config(Method::Joint, ErrorConfig::CALIBRATED, seed), repetitions };
        proto.train.validate(&scenario.problem)?;
        let table = match which {
            Experiment::Compare => run_comparison(&scenario, &proto)?,
            Experiment::Weighting => run_weighting(
                &scenario,
                &ProtocolConfig { train: TrainConfig { kappa: None, ..proto.train.clone() }, ..proto.clone() },
                train.kappa.clone(),
            )?,
            Experiment::Ablation => run_ablation(&scenario, &proto)?,
            Experiment::Sensitivity => run_sensitivity(&scenario, &proto)?,
        };
        let path = out.join(format!("{}_{}.csv", which.name(), name));
        table.write_csv(create_file(&path)?)?;
        let config = json!({ "experiment": which.name(), "scenario": name.as_str(), "repetitions": repetitions, "train": proto.train });
        RunManifest::new("experiment", config, &Inputs::default(), Some(seed))
            .write(&out.join(format!("{}_{}.manifest.json", which.name(), name)), std::slice::from_ref(&path))?;
        println!("{}", path.display());
    }
    Ok(())
}

fn run_gradcheck(scenario: Option<&str>, samples: usize, seed: u64, h: f64, tol: f64) -> Result<(), CliError> {
    let names = match scenario {
        Some(s) => vec![parse_scenario(s)?],
        None => ScenarioName::ALL.to_vec(),
    };
    let mut failed = Vec::new();
    for name in names {
        let problem = abx_core::experiments::builtin_problem(name);
        let mut rng = seeded_rng(seed);
        let weights: Vec<Matrix> = (0..problem.abstracted.len())
            .map(|x| {
                let (r, c) = problem.alpha_shape(x);
                Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-0.5..=0.5)).collect()).expect("shape")
            })
            .collect();
        let mut graph = assemble_loss(&problem, &weights, &TrainConfig::default())?;
        let leaves: Vec<_> = graph.weights.iter().flatten().copied().collect();
        let report = gradcheck(&mut graph.tape, graph.loss, &leaves, samples, h, tol, &mut rng)
            .map_err(|e| CliError::new(Exit::NonFinite, e.to_string()))?;
        println!(
            "{name}: checked {} skipped {} max relative error {:e} -> {}",
            report.checked,
            report.skipped.len(),
            report.max_rel_error,
            if report.passed() { "ok" } else { "FAIL" }
        );
        if !report.passed() {
            failed.push(name.to_string());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::violation(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn seeded_rng(seed: u64) -> rand::rngs::StdRng {
    rand::rngs::StdRng::seed_from_u64(seed)
}
