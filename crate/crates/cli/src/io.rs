use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use abx_core::abstraction::{AbstractionDef, AbstractionProblem, DiagramSpec, ErrorConfig};
use abx_core::scm::{Scm, ScmDef};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Reads files and remembers their digests for the manifest.
#[derive(Debug, Default)]
pub struct Inputs {
    pub digests: BTreeMap<String, String>,
}

impl Inputs {
    pub fn read_json<T: DeserializeOwned>(&mut self, path: &Path) -> Result<T, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
        self.digests.insert(path.display().to_string(), hex::encode(Sha256::digest(&bytes)));
        serde_json::from_slice(&bytes).map_err(|e| CliError::input(format!("cannot parse {}: {e}", path.display())))
    }

    pub fn scm(&mut self, path: &Path) -> Result<Scm, CliError> {
        let def: ScmDef = self.read_json(path)?;
        Scm::from_def(&def).map_err(|e| CliError::violation(format!("{}: {e}", path.display())))
    }

    pub fn problem(
        &mut self,
        base: &Path,
        abs: &Path,
        map: &Path,
        j: &Path,
    ) -> Result<(AbstractionProblem, AbstractionDef), CliError> {
        let base = self.scm(base)?;
        let abstracted = self.scm(abs)?;
        let def: AbstractionDef = self.read_json(map)?;
        let diagrams: Vec<DiagramSpec> = self.read_json(j)?;
        let problem = AbstractionProblem::new(base, abstracted, &def, diagrams)
            .map_err(|e| CliError::violation(format!("invalid abstraction problem: {e}")))?;
        Ok((problem, def))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::other(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::input(format!("cannot write {}: {e}", path.display())))
}

pub fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::input(format!("cannot create {}: {e}", dir.display())))
}

pub fn create_file(path: &Path) -> Result<fs::File, CliError> {
    fs::File::create(path).map_err(|e| CliError::input(format!("cannot write {}: {e}", path.display())))
}

/// Everything needed to rerun a command and get the same outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub calibrated: ErrorConfig,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, inputs: &Inputs, seed: Option<u64>) -> Self {
        Self {
            tool: "abx",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            config,
            inputs: inputs.digests.clone(),
            seed,
            calibrated: ErrorConfig::CALIBRATED,
            outputs: Vec::new(),
        }
    }

    pub fn write(mut self, path: &Path, outputs: &[PathBuf]) -> Result<(), CliError> {
        self.outputs = outputs.iter().map(|p| p.display().to_string()).collect();
        write_json(path, &self)
    }
}
