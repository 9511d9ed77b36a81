//! Finite discrete structural causal models in their stochastic-matrix form.
//!
//! Exogenous noise is not modelled explicitly: each endogenous variable carries
//! one column-stochastic mechanism `P(X | parents)` whose columns are indexed by
//! [`JointIndexer`] over the declared parent list. Root nodes carry a single
//! column holding their marginal.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;

/// Tolerance on entry bounds and column sums.
pub const STOCHASTIC_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScmError {
    #[error("domain `{0}` must have at least one label")]
    EmptyDomain(String),
    #[error("domain `{domain}` repeats label `{label}`")]
    DuplicateLabel { domain: String, label: String },
    #[error("value {value} out of range for variable `{variable}` of size {size}")]
    OutOfRange { variable: String, value: usize, size: usize },
    #[error("joint index {index} out of range for joint size {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("tuple has {got} values but {expected} domains were given")]
    Arity { expected: usize, got: usize },
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("matrix is not column-stochastic: {0}")]
    NotStochastic(String),
    #[error("matrix shape {got:?} does not match domains {expected:?}")]
    Shape { expected: (usize, usize), got: (usize, usize) },
    #[error("invalid SCM:\n{0}")]
    Invalid(ValidationReport),
}

/// Ordered, labelled outcome set of one variable.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FiniteDomain {
    name: String,
    labels: Vec<String>,
}

impl FiniteDomain {
    pub fn new(name: impl Into<String>, labels: Vec<String>) -> Result<Self, ScmError> {
        let name = name.into();
        if labels.is_empty() {
            return Err(ScmError::EmptyDomain(name));
        }
        let mut seen = HashSet::new();
        for l in &labels {
            if !seen.insert(l.as_str()) {
                return Err(ScmError::DuplicateLabel { domain: name, label: l.clone() });
            }
        }
        Ok(Self { name, labels })
    }

    /// Domain labelled `0..size`.
    pub fn with_size(name: impl Into<String>, size: usize) -> Result<Self, ScmError> {
        Self::new(name, (0..size).map(|i| i.to_string()).collect())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }
}

/// Bijection between outcome tuples and `0..Π sizes`.
///
/// Row-major: the last listed domain varies fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct JointIndexer {
    names: Vec<String>,
    sizes: Vec<usize>,
}

impl JointIndexer {
    pub fn new(domains: &[FiniteDomain]) -> Self {
        Self {
            names: domains.iter().map(|d| d.name.clone()).collect(),
            sizes: domains.iter().map(FiniteDomain::size).collect(),
        }
    }

    /// Unnamed indexer over plain sizes.
    pub fn from_sizes(sizes: &[usize]) -> Self {
        Self { names: (0..sizes.len()).map(|i| format!("#{i}")).collect(), sizes: sizes.to_vec() }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Number of joint outcomes; 1 for the empty list.
    pub fn len(&self) -> usize {
        self.sizes.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, values: &[usize]) -> Result<usize, ScmError> {
        if values.len() != self.sizes.len() {
            return Err(ScmError::Arity { expected: self.sizes.len(), got: values.len() });
        }
        let mut idx = 0;
        for ((&v, &size), name) in values.iter().zip(&self.sizes).zip(&self.names) {
            if v >= size {
                return Err(ScmError::OutOfRange { variable: name.clone(), value: v, size });
            }
            idx = idx * size + v;
        }
        Ok(idx)
    }

    pub fn decode(&self, index: usize) -> Result<Vec<usize>, ScmError> {
        let size = self.len();
        if index >= size {
            return Err(ScmError::IndexOutOfRange { index, size });
        }
        let mut out = vec![0; self.sizes.len()];
        let mut rest = index;
        for (slot, &s) in out.iter_mut().zip(&self.sizes).rev() {
            *slot = rest % s;
            rest /= s;
        }
        Ok(out)
    }
}

/// Column-stochastic matrix with row and column joint-domain descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticMatrix {
    rows: Vec<FiniteDomain>,
    cols: Vec<FiniteDomain>,
    data: Matrix,
}

impl StochasticMatrix {
    pub fn new(rows: Vec<FiniteDomain>, cols: Vec<FiniteDomain>, data: Matrix) -> Result<Self, ScmError> {
        let expected = (rows.iter().map(FiniteDomain::size).product(), cols.iter().map(FiniteDomain::size).product());
        if data.shape() != expected {
            return Err(ScmError::Shape { expected, got: data.shape() });
        }
        if let Some(problem) = stochasticity_problem(&data) {
            return Err(ScmError::NotStochastic(problem.1));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> &[FiniteDomain] {
        &self.rows
    }

    pub fn cols(&self) -> &[FiniteDomain] {
        &self.cols
    }

    pub fn matrix(&self) -> &Matrix {
        &self.data
    }

    pub fn into_matrix(self) -> Matrix {
        self.data
    }

    /// Rescales every column to sum to one. Only ever applied on request.
    pub fn renormalized(data: &Matrix) -> Matrix {
        let sums = data.column_sums();
        let mut out = data.clone();
        for i in 0..out.rows() {
            for (j, s) in sums.iter().enumerate() {
                if *s > 0.0 {
                    out[(i, j)] /= s;
                }
            }
        }
        out
    }
}

/// Returns the first stochasticity defect, if any, as (kind, description).
pub(crate) fn stochasticity_problem(m: &Matrix) -> Option<(ViolationKind, String)> {
    for j in 0..m.cols() {
        let col = m.col(j);
        if let Some((i, x)) = col
            .iter()
            .enumerate()
            .find(|(_, &x)| !x.is_finite() || !(-STOCHASTIC_TOL..=1.0 + STOCHASTIC_TOL).contains(&x))
        {
            return Some((ViolationKind::EntryRange, format!("entry ({i},{j}) = {x} outside [0,1]")));
        }
        let s: f64 = col.iter().sum();
        if (s - 1.0).abs() > STOCHASTIC_TOL {
            return Some((ViolationKind::ColumnSum, format!("column {j} sums to {s}")));
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    Cycle,
    Shape,
    ColumnSum,
    EntryRange,
    UnknownVariable,
    DuplicateVariable,
    MissingMechanism,
    Domain,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ViolationKind::Cycle => "cycle",
            ViolationKind::Shape => "shape",
            ViolationKind::ColumnSum => "column-sum",
            ViolationKind::EntryRange => "entry-range",
            ViolationKind::UnknownVariable => "unknown-variable",
            ViolationKind::DuplicateVariable => "duplicate-variable",
            ViolationKind::MissingMechanism => "missing-mechanism",
            ViolationKind::Domain => "domain",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub variable: String,
    pub kind: ViolationKind,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    /// Present when the parent relation is acyclic and every name resolves.
    pub topological_order: Option<Vec<String>>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, variable: &str, kind: ViolationKind, detail: impl Into<String>) {
        self.violations.push(Violation { variable: variable.to_string(), kind, detail: detail.into() });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return write!(f, "ok");
        }
        for v in &self.violations {
            writeln!(f, "{}: {}: {}", v.variable, v.kind, v.detail)?;
        }
        Ok(())
    }
}

/// Variable entry of the SCM JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableDef {
    pub name: String,
    pub labels: Vec<String>,
}

/// The SCM JSON file, as written on disk. May be invalid; see [`validate_scm`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScmDef {
    pub variables: Vec<VariableDef>,
    #[serde(default)]
    pub parents: BTreeMap<String, Vec<String>>,
    pub mechanisms: BTreeMap<String, Vec<Vec<f64>>>,
}

impl ScmDef {
    /// Appends a variable with labels `0..size`, its parents and its mechanism rows.
    pub fn push(&mut self, name: &str, size: usize, parents: &[&str], mechanism: &[&[f64]]) -> &mut Self {
        self.variables.push(VariableDef { name: name.to_string(), labels: (0..size).map(|i| i.to_string()).collect() });
        if !parents.is_empty() {
            self.parents.insert(name.to_string(), parents.iter().map(|p| p.to_string()).collect());
        }
        self.mechanisms.insert(name.to_string(), mechanism.iter().map(|r| r.to_vec()).collect());
        self
    }
}

/// Checks acyclicity, mechanism shapes and column stochasticity.
pub fn validate_scm(def: &ScmDef) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut sizes = Vec::with_capacity(def.variables.len());
    for (i, v) in def.variables.iter().enumerate() {
        if index.insert(v.name.as_str(), i).is_some() {
            report.push(&v.name, ViolationKind::DuplicateVariable, "declared more than once");
        }
        if let Err(e) = FiniteDomain::new(v.name.clone(), v.labels.clone()) {
            report.push(&v.name, ViolationKind::Domain, e.to_string());
        }
        sizes.push(v.labels.len());
    }
    for name in def.parents.keys().chain(def.mechanisms.keys()) {
        if !index.contains_key(name.as_str()) {
            report.push(name, ViolationKind::UnknownVariable, "not declared in `variables`");
        }
    }

    let mut resolved = true;
    let parents: Vec<Vec<usize>> = def
        .variables
        .iter()
        .map(|v| {
            def.parents
                .get(&v.name)
                .map(|ps| {
                    ps.iter()
                        .filter_map(|p| match index.get(p.as_str()) {
                            Some(&i) => Some(i),
                            None => {
                                resolved = false;
                                report.push(&v.name, ViolationKind::UnknownVariable, format!("unknown parent `{p}`"));
                                None
                            }
                        })
                        .collect()
                })
                .unwrap_or_default()
        })
        .collect();

    match topological_order(&parents) {
        Ok(order) => {
            if resolved {
                report.topological_order = Some(order.iter().map(|&i| def.variables[i].name.clone()).collect());
            }
        }
        Err(cyclic) => {
            for i in cyclic {
                report.push(&def.variables[i].name, ViolationKind::Cycle, "variable lies on a directed cycle");
            }
        }
    }

    for (i, v) in def.variables.iter().enumerate() {
        let Some(rows) = def.mechanisms.get(&v.name) else {
            report.push(&v.name, ViolationKind::MissingMechanism, "no mechanism given");
            continue;
        };
        let expected = (sizes[i], parents[i].iter().map(|&p| sizes[p]).product::<usize>());
        let m = match Matrix::from_rows(rows) {
            Ok(m) => m,
            Err(e) => {
                report.push(&v.name, ViolationKind::Shape, e.to_string());
                continue;
            }
        };
        if m.shape() != expected {
            report.push(&v.name, ViolationKind::Shape, format!("expected {expected:?}, got {:?}", m.shape()));
            continue;
        }
        if let Some((kind, detail)) = stochasticity_problem(&m) {
            report.push(&v.name, kind, detail);
        }
    }
    if !report.is_ok() {
        report.topological_order = None;
    }
    report
}

/// Kahn's algorithm, breaking ties by declaration order. On failure returns the
/// variables that could not be ordered.
fn topological_order(parents: &[Vec<usize>]) -> Result<Vec<usize>, Vec<usize>> {
    let n = parents.len();
    let mut indegree: Vec<usize> = parents.iter().map(Vec::len).collect();
    let mut children = vec![Vec::new(); n];
    for (c, ps) in parents.iter().enumerate() {
        for &p in ps {
            children[p].push(c);
        }
    }
    let mut placed = vec![false; n];
    let mut order = Vec::with_capacity(n);
    while order.len() < n {
        let Some(next) = (0..n).find(|&i| !placed[i] && indegree[i] == 0) else {
            return Err((0..n).filter(|&i| !placed[i]).collect());
        };
        placed[next] = true;
        order.push(next);
        for &c in &children[next] {
            indegree[c] -= 1;
        }
    }
    Ok(order)
}

/// A validated SCM. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Scm {
    variables: Vec<FiniteDomain>,
    parents: Vec<Vec<usize>>,
    mechanisms: Vec<Matrix>,
    order: Vec<usize>,
}

impl Scm {
    pub fn from_def(def: &ScmDef) -> Result<Self, ScmError> {
        let report = validate_scm(def);
        if !report.is_ok() {
            return Err(ScmError::Invalid(report));
        }
        let index: HashMap<&str, usize> = def.variables.iter().enumerate().map(|(i, v)| (v.name.as_str(), i)).collect();
        let variables = def
            .variables
            .iter()
            .map(|v| FiniteDomain::new(v.name.clone(), v.labels.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let parents = def
            .variables
            .iter()
            .map(|v| {
                def.parents.get(&v.name).map_or_else(Vec::new, |ps| ps.iter().map(|p| index[p.as_str()]).collect())
            })
            .collect();
        let mechanisms = def
            .variables
            .iter()
            .map(|v| Matrix::from_rows(&def.mechanisms[&v.name]).expect("shape checked by validation"))
            .collect();
        let order = report
            .topological_order
            .expect("valid report carries an order")
            .iter()
            .map(|n| index[n.as_str()])
            .collect();
        Ok(Self { variables, parents, mechanisms, order })
    }

    pub fn to_def(&self) -> ScmDef {
        let mut def = ScmDef::default();
        for (i, d) in self.variables.iter().enumerate() {
            def.variables.push(VariableDef { name: d.name.clone(), labels: d.labels.clone() });
            if !self.parents[i].is_empty() {
                def.parents
                    .insert(d.name.clone(), self.parents[i].iter().map(|&p| self.variables[p].name.clone()).collect());
            }
            def.mechanisms.insert(d.name.clone(), self.mechanisms[i].to_rows());
        }
        def
    }

    pub fn len(&self) -> usize {
        self.variables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variables.is_empty()
    }

    pub fn variables(&self) -> &[FiniteDomain] {
        &self.variables
    }

    pub fn domain(&self, var: usize) -> &FiniteDomain {
        &self.variables[var]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|d| d.name == name)
    }

    pub fn require(&self, name: &str) -> Result<usize, ScmError> {
        self.index_of(name).ok_or_else(|| ScmError::UnknownVariable(name.to_string()))
    }

    pub fn parents(&self, var: usize) -> &[usize] {
        &self.parents[var]
    }

    /// Raw mechanism matrix; columns indexed over the parent list.
    pub fn mechanism(&self, var: usize) -> &Matrix {
        &self.mechanisms[var]
    }

    pub fn mechanism_matrix(&self, var: usize) -> StochasticMatrix {
        StochasticMatrix {
            rows: vec![self.variables[var].clone()],
            cols: self.parents[var].iter().map(|&p| self.variables[p].clone()).collect(),
            data: self.mechanisms[var].clone(),
        }
    }

    /// Every variable appears after all of its parents.
    pub fn topological_order(&self) -> &[usize] {
        &self.order
    }

    pub fn domains_of(&self, vars: &[usize]) -> Vec<FiniteDomain> {
        vars.iter().map(|&v| self.variables[v].clone()).collect()
    }

    /// Replaces a variable's mechanism by a parentless one. Used by the
    /// do-operator; the caller guarantees `marginal` is a stochastic column.
    pub(crate) fn with_root_marginal(&self, var: usize, marginal: Matrix) -> Scm {
        let mut out = self.clone();
        out.parents[var].clear();
        out.mechanisms[var] = marginal;
        let parents = out.parents.clone();
        out.order = topological_order(&parents).expect("removing edges keeps the graph acyclic");
        out
    }
}
