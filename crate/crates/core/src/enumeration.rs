//! Exhaustive search over hard surjective alpha collections.
//!
//! Candidates are ranked in mixed radix over the abstracted variables (first
//! variable slowest); within a variable, surjections are listed by
//! [`SurjectionIterator`] in lexicographic order of their image tuples.

use rayon::prelude::*;

use crate::abstraction::{sup, AbstractionProblem, AlphaSet, ErrorConfig};
use crate::matrix::Matrix;

pub const DEFAULT_CAP: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EnumerationError {
    #[error("surjection count for ({m}, {n}) does not fit in 64 bits")]
    Overflow { m: usize, n: usize },
    #[error("solution space has {size} candidates, above the cap of {cap}")]
    CapExceeded { size: u64, cap: u64 },
    #[error("solution space is empty: no surjection from {m} onto {n} outcomes")]
    EmptySpace { m: usize, n: usize },
    #[error("the diagram set is empty")]
    EmptyDiagrams,
}

/// `n! · S(m, n)`, the number of surjections from an m-set onto an n-set.
pub fn count_surjections(m: usize, n: usize) -> Result<u64, EnumerationError> {
    if n == 0 || m < n {
        return Ok(u64::from(m == 0 && n == 0));
    }
    // surj(m, n) = n · (surj(m-1, n) + surj(m-1, n-1)), row by row over m.
    let overflow = EnumerationError::Overflow { m, n };
    let mut row = vec![0u64; n + 1];
    row[0] = 1;
    for _ in 1..=m {
        let mut next = vec![0u64; n + 1];
        for k in 1..=n {
            let inner = row[k].checked_add(row[k - 1]).ok_or(overflow.clone())?;
            next[k] = (k as u64).checked_mul(inner).ok_or(overflow.clone())?;
        }
        row = next;
    }
    Ok(row[n])
}

/// Iterates surjective maps `{0..m} → {0..n}` as image tuples, in
/// lexicographic order (first position slowest).
#[derive(Debug, Clone)]
pub struct SurjectionIterator {
    n: usize,
    cursor: Option<Vec<usize>>,
}

impl SurjectionIterator {
    pub fn new(m: usize, n: usize) -> Self {
        let cursor = (n >= 1 && m >= n).then(|| vec![0; m]);
        Self { n, cursor }
    }

    fn advance(cursor: &mut [usize], n: usize) -> bool {
        for slot in cursor.iter_mut().rev() {
            *slot += 1;
            if *slot < n {
                return true;
            }
            *slot = 0;
        }
        false
    }

    fn is_surjective(f: &[usize], n: usize) -> bool {
        let mut hit = vec![false; n];
        for &v in f {
            hit[v] = true;
        }
        hit.into_iter().all(|h| h)
    }
}

impl Iterator for SurjectionIterator {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        loop {
            let current = self.cursor.clone()?;
            if !Self::advance(self.cursor.as_mut().expect("checked above"), self.n) {
                self.cursor = None;
            }
            if Self::is_surjective(&current, self.n) {
                return Some(current);
            }
            self.cursor.as_ref()?;
        }
    }
}

/// Hard `n × m` matrix with a 1 at `(f[j], j)`.
pub fn map_to_matrix(f: &[usize], n: usize) -> Matrix {
    let mut out = Matrix::zeros(n, f.len());
    for (j, &i) in f.iter().enumerate() {
        out[(i, j)] = 1.0;
    }
    out
}

/// Every hard surjective matrix of shape `n × m`, in iteration order.
pub fn surjective_matrices(m: usize, n: usize) -> Vec<Matrix> {
    SurjectionIterator::new(m, n).map(|f| map_to_matrix(&f, n)).collect()
}

/// Product over abstracted variables of the per-variable surjection counts.
pub fn solution_space_size(problem: &AbstractionProblem) -> Result<u64, EnumerationError> {
    (0..problem.abstracted.len()).try_fold(1u64, |acc, x| {
        let (n, m) = problem.alpha_shape(x);
        acc.checked_mul(count_surjections(m, n)?).ok_or(EnumerationError::Overflow { m, n })
    })
}

/// The full candidate space of a problem, addressable by rank.
#[derive(Debug, Clone)]
pub struct CandidateSpace {
    per_variable: Vec<Vec<Matrix>>,
    size: u64,
}

impl CandidateSpace {
    pub fn new(problem: &AbstractionProblem, cap: u64) -> Result<Self, EnumerationError> {
        let size = solution_space_size(problem)?;
        if size > cap {
            return Err(EnumerationError::CapExceeded { size, cap });
        }
        let mut per_variable = Vec::with_capacity(problem.abstracted.len());
        for x in 0..problem.abstracted.len() {
            let (n, m) = problem.alpha_shape(x);
            let ms = surjective_matrices(m, n);
            if ms.is_empty() {
                return Err(EnumerationError::EmptySpace { m, n });
            }
            per_variable.push(ms);
        }
        Ok(Self { per_variable, size })
    }

    pub fn len(&self) -> u64 {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn candidate(&self, rank: u64) -> AlphaSet {
        let mut rest = rank;
        let mut picks = vec![0usize; self.per_variable.len()];
        for (slot, options) in picks.iter_mut().zip(&self.per_variable).rev() {
            let k = options.len() as u64;
            *slot = (rest % k) as usize;
            rest /= k;
        }
        AlphaSet(picks.iter().zip(&self.per_variable).map(|(&i, opts)| opts[i].clone()).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateScore {
    pub index: u64,
    pub per_diagram: Vec<f64>,
    pub overall: f64,
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub best: AlphaSet,
    pub best_error: f64,
    pub best_index: u64,
    pub space_size: u64,
    pub scores: Option<Vec<CandidateScore>>,
}

#[derive(Debug, Clone, Copy)]
pub struct SearchConfig {
    pub error: ErrorConfig,
    pub cap: u64,
    pub keep_scores: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { error: ErrorConfig::CALIBRATED, cap: DEFAULT_CAP, keep_scores: false }
    }
}

/// Scores one candidate; the same path as [`crate::abstraction::overall_error`].
pub fn score_candidate(problem: &AbstractionProblem, alphas: &AlphaSet, cfg: ErrorConfig) -> (Vec<f64>, f64) {
    let per_diagram = crate::abstraction::diagram_errors(problem, alphas, cfg);
    let overall = sup(&per_diagram);
    (per_diagram, overall)
}

/// Evaluates every candidate and returns the minimizer, the first in rank
/// order on ties. Candidates are scored on the current rayon pool; the
/// reduction is by `(error, rank)` so the result does not depend on scheduling.
pub fn exhaustive_search(problem: &AbstractionProblem, cfg: SearchConfig) -> Result<SearchResult, EnumerationError> {
    if problem.diagrams.is_empty() {
        return Err(EnumerationError::EmptyDiagrams);
    }
    let space = CandidateSpace::new(problem, cfg.cap)?;
    let scores: Vec<CandidateScore> = (0..space.len())
        .into_par_iter()
        .map(|rank| {
            let (per_diagram, overall) = score_candidate(problem, &space.candidate(rank), cfg.error);
            CandidateScore { index: rank, per_diagram, overall }
        })
        .collect();
    let (best_index, best_error) = scores
        .iter()
        .map(|s| (s.index, s.overall))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .expect("non-empty space");
    Ok(SearchResult {
        best: space.candidate(best_index),
        best_error,
        best_index,
        space_size: space.len(),
        scores: cfg.keep_scores.then_some(scores),
    })
}
