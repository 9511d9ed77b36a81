//! Learning causal abstractions between finite discrete structural causal
//! models.
//!
//! The crate is organised bottom-up:
//!
//! * [`matrix`] and [`scm`]: dense matrices, finite domains and SCMs.
//! * [`inference`]: exact marginals and interventional channels.
//! * [`abstraction`]: abstraction problems, diagrams and the JSD-based error.
//! * [`enumeration`]: exhaustive search over hard surjective abstractions.
//! * [`autodiff`]: a small reverse-mode tape.
//! * [`learning`]: joint, independent and sequential training.
//! * [`experiments`]: built-in scenarios and experiment protocols.

pub mod abstraction;
pub mod autodiff;
pub mod enumeration;
pub mod experiments;
pub mod inference;
pub mod learning;
pub mod matrix;
pub mod scm;

pub use abstraction::{
    AbstractionDef, AbstractionError, AbstractionProblem, AlphaSet, ColumnAggregation, DiagramSpec, ErrorConfig,
    LogBase,
};
pub use enumeration::{exhaustive_search, EnumerationError, SearchConfig, SearchResult};
pub use experiments::{builtin_problem, builtin_scenario, ExperimentError, Scenario, ScenarioName};
pub use inference::{interventional_matrix, marginal, InferenceError, Intervention};
pub use learning::{ensemble_run, train, Method, Solution, TrainConfig, TrainError};
pub use matrix::Matrix;
pub use scm::{Scm, ScmDef, ScmError};

/// Any error raised by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Scm(#[from] ScmError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Abstraction(#[from] AbstractionError),
    #[error(transparent)]
    Enumeration(#[from] EnumerationError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
}
