//! The do-operator and exact interventional distributions.
//!
//! Marginals are computed by variable elimination: variables are absorbed in
//! topological order into a factor over the current frontier, and summed out
//! as soon as no target or pending child needs them.

use std::collections::{BTreeMap, HashSet};

use crate::matrix::Matrix;
use crate::scm::{JointIndexer, Scm, ScmError, StochasticMatrix};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InferenceError {
    #[error(transparent)]
    Scm(#[from] ScmError),
    #[error("target list is empty")]
    EmptyTargets,
    #[error("do list is empty")]
    EmptyDo,
    #[error("variable `{0}` listed twice")]
    Duplicate(String),
    #[error("variable `{0}` is both intervened on and a target")]
    Overlap(String),
}

/// `do(X1 = x1, ..., Xk = xk)`, values given as outcome indices.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Intervention {
    assignments: BTreeMap<String, usize>,
}

impl Intervention {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(mut self, variable: impl Into<String>, value: usize) -> Self {
        self.assignments.insert(variable.into(), value);
        self
    }

    pub fn assignments(&self) -> &BTreeMap<String, usize> {
        &self.assignments
    }
}

/// Truncates the mechanisms of every intervened variable to a point mass.
/// Other mechanisms are left untouched.
pub fn apply_intervention(scm: &Scm, iv: &Intervention) -> Result<Scm, InferenceError> {
    let resolved = iv
        .assignments
        .iter()
        .map(|(name, &value)| Ok((scm.require(name)?, value)))
        .collect::<Result<Vec<_>, InferenceError>>()?;
    apply_by_index(scm, &resolved)
}

pub(crate) fn apply_by_index(scm: &Scm, assignments: &[(usize, usize)]) -> Result<Scm, InferenceError> {
    let mut out = scm.clone();
    for &(var, value) in assignments {
        let d = scm.domain(var);
        if value >= d.size() {
            return Err(ScmError::OutOfRange { variable: d.name().to_string(), value, size: d.size() }.into());
        }
        let mut point = Matrix::zeros(d.size(), 1);
        point[(value, 0)] = 1.0;
        out = out.with_root_marginal(var, point);
    }
    Ok(out)
}

/// Exact joint marginal over `targets`, indexed by [`JointIndexer`] in the
/// order given.
pub fn marginal(scm: &Scm, targets: &[&str]) -> Result<Vec<f64>, InferenceError> {
    let vars = resolve(scm, targets)?;
    marginal_by_index(scm, &vars)
}

pub(crate) fn marginal_by_index(scm: &Scm, targets: &[usize]) -> Result<Vec<f64>, InferenceError> {
    if targets.is_empty() {
        return Err(InferenceError::EmptyTargets);
    }
    check_distinct(scm, targets)?;

    let relevant = ancestors(scm, targets);
    let is_target: Vec<bool> = (0..scm.len()).map(|v| targets.contains(&v)).collect();
    let mut pending_children = vec![0usize; scm.len()];
    for &v in scm.topological_order() {
        if relevant[v] {
            for &p in scm.parents(v) {
                pending_children[p] += 1;
            }
        }
    }

    let mut factor = Factor::unit();
    for &v in scm.topological_order() {
        if !relevant[v] {
            continue;
        }
        factor = factor.absorb(scm, v);
        for &p in scm.parents(v) {
            pending_children[p] -= 1;
        }
        let done: Vec<usize> =
            factor.vars.iter().copied().filter(|&u| !is_target[u] && pending_children[u] == 0).collect();
        for u in done {
            factor = factor.sum_out(u);
        }
    }
    Ok(factor.arranged(targets))
}

/// `P(targets | do(do_vars))` as a column-stochastic matrix; column `j` is the
/// target marginal under the intervention decoded from `j`.
pub fn interventional_matrix(
    scm: &Scm,
    do_vars: &[&str],
    target_vars: &[&str],
) -> Result<StochasticMatrix, InferenceError> {
    let dv = resolve(scm, do_vars)?;
    let tv = resolve(scm, target_vars)?;
    let m = interventional_by_index(scm, &dv, &tv)?;
    Ok(StochasticMatrix::new(scm.domains_of(&tv), scm.domains_of(&dv), m)?)
}

pub(crate) fn interventional_by_index(
    scm: &Scm,
    do_vars: &[usize],
    target_vars: &[usize],
) -> Result<Matrix, InferenceError> {
    if do_vars.is_empty() {
        return Err(InferenceError::EmptyDo);
    }
    if target_vars.is_empty() {
        return Err(InferenceError::EmptyTargets);
    }
    check_distinct(scm, do_vars)?;
    check_distinct(scm, target_vars)?;
    if let Some(&v) = do_vars.iter().find(|v| target_vars.contains(v)) {
        return Err(InferenceError::Overlap(scm.domain(v).name().to_string()));
    }
    let do_index = JointIndexer::new(&scm.domains_of(do_vars));
    let rows: usize = target_vars.iter().map(|&v| scm.domain(v).size()).product();
    let mut out = Matrix::zeros(rows, do_index.len());
    for j in 0..do_index.len() {
        let values = do_index.decode(j)?;
        let assignments: Vec<(usize, usize)> = do_vars.iter().copied().zip(values).collect();
        let truncated = apply_by_index(scm, &assignments)?;
        for (i, p) in marginal_by_index(&truncated, target_vars)?.into_iter().enumerate() {
            out[(i, j)] = p;
        }
    }
    Ok(out)
}

fn resolve(scm: &Scm, names: &[&str]) -> Result<Vec<usize>, InferenceError> {
    names.iter().map(|n| scm.require(n).map_err(Into::into)).collect()
}

fn check_distinct(scm: &Scm, vars: &[usize]) -> Result<(), InferenceError> {
    let mut seen = HashSet::new();
    for &v in vars {
        if !seen.insert(v) {
            return Err(InferenceError::Duplicate(scm.domain(v).name().to_string()));
        }
    }
    Ok(())
}

fn ancestors(scm: &Scm, targets: &[usize]) -> Vec<bool> {
    let mut mark = vec![false; scm.len()];
    let mut stack = targets.to_vec();
    while let Some(v) = stack.pop() {
        if !mark[v] {
            mark[v] = true;
            stack.extend_from_slice(scm.parents(v));
        }
    }
    mark
}

/// Non-negative table over a list of variables, last variable fastest.
struct Factor {
    vars: Vec<usize>,
    sizes: Vec<usize>,
    table: Vec<f64>,
}

impl Factor {
    fn unit() -> Self {
        Self { vars: Vec::new(), sizes: Vec::new(), table: vec![1.0] }
    }

    fn position(&self, var: usize) -> usize {
        self.vars.iter().position(|&v| v == var).expect("variable in factor")
    }

    /// Multiplies in `P(var | parents)`, appending `var` as the fastest axis.
    fn absorb(self, scm: &Scm, var: usize) -> Factor {
        let mech = scm.mechanism(var);
        let card = scm.domain(var).size();
        let parent_pos: Vec<usize> = scm.parents(var).iter().map(|&p| self.position(p)).collect();
        let parent_sizes: Vec<usize> = scm.parents(var).iter().map(|&p| scm.domain(p).size()).collect();
        let indexer = JointIndexer::from_sizes(&self.sizes);

        let mut table = Vec::with_capacity(self.table.len() * card);
        for (idx, &w) in self.table.iter().enumerate() {
            let values = indexer.decode(idx).expect("index within table");
            let col = parent_pos.iter().zip(&parent_sizes).fold(0, |acc, (&pos, &s)| acc * s + values[pos]);
            for x in 0..card {
                table.push(w * mech[(x, col)]);
            }
        }
        let mut vars = self.vars;
        let mut sizes = self.sizes;
        vars.push(var);
        sizes.push(card);
        Factor { vars, sizes, table }
    }

    fn sum_out(self, var: usize) -> Factor {
        let pos = self.position(var);
        let indexer = JointIndexer::from_sizes(&self.sizes);
        let mut sizes = self.sizes.clone();
        sizes.remove(pos);
        let out_index = JointIndexer::from_sizes(&sizes);
        let mut table = vec![0.0; out_index.len()];
        for (idx, &w) in self.table.iter().enumerate() {
            let mut values = indexer.decode(idx).expect("index within table");
            values.remove(pos);
            table[out_index.index(&values).expect("reduced tuple in range")] += w;
        }
        let mut vars = self.vars;
        vars.remove(pos);
        Factor { vars, sizes, table }
    }

    /// Table re-indexed with `order` as the axis order. `order` must be a
    /// permutation of the factor's variables.
    fn arranged(&self, order: &[usize]) -> Vec<f64> {
        let perm: Vec<usize> = order.iter().map(|&v| self.position(v)).collect();
        let out_sizes: Vec<usize> = perm.iter().map(|&p| self.sizes[p]).collect();
        let indexer = JointIndexer::from_sizes(&self.sizes);
        let out_index = JointIndexer::from_sizes(&out_sizes);
        let mut out = vec![0.0; self.table.len()];
        for (idx, &w) in self.table.iter().enumerate() {
            let values = indexer.decode(idx).expect("index within table");
            let permuted: Vec<usize> = perm.iter().map(|&p| values[p]).collect();
            out[out_index.index(&permuted).expect("permuted tuple in range")] = w;
        }
        out
    }
}
