//! Independent reference implementations used as test oracles. Nothing here
//! calls into the inference, abstraction or enumeration modules.

#![allow(dead_code)]

use std::collections::HashMap;

use abx_core::scm::ScmDef;

/// `P(targets | do(do_vars = x))` by summing the full joint of the truncated
/// factorisation. Columns follow `do_vars` (last variable fastest), rows
/// follow `targets`.
pub fn brute_interventional(def: &ScmDef, do_vars: &[&str], targets: &[&str]) -> Vec<Vec<f64>> {
    let names: Vec<&str> = def.variables.iter().map(|v| v.name.as_str()).collect();
    let sizes: Vec<usize> = def.variables.iter().map(|v| v.labels.len()).collect();
    let pos: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (*n, i)).collect();
    let radix = |vars: &[&str]| vars.iter().map(|v| sizes[pos[v]]).product::<usize>();
    let encode =
        |vars: &[&str], assignment: &[usize]| vars.iter().fold(0, |acc, v| acc * sizes[pos[v]] + assignment[pos[v]]);
    let (rows, cols) = (radix(targets), radix(do_vars));
    let mut out = vec![vec![0.0; cols]; rows];
    let total: usize = sizes.iter().product();
    for code in 0..total {
        let mut assignment = vec![0; sizes.len()];
        let mut rest = code;
        for i in (0..sizes.len()).rev() {
            assignment[i] = rest % sizes[i];
            rest /= sizes[i];
        }
        let col = encode(do_vars, &assignment);
        let mut p = 1.0;
        for (i, name) in names.iter().enumerate() {
            if do_vars.contains(name) {
                continue;
            }
            let parents: Vec<&str> =
                def.parents.get(*name).map(|ps| ps.iter().map(String::as_str).collect()).unwrap_or_default();
            let pcol = encode(&parents, &assignment);
            p *= def.mechanisms[*name][assignment[i]][pcol];
        }
        out[encode(targets, &assignment)][col] += p;
    }
    out
}

pub fn brute_marginal(def: &ScmDef, targets: &[&str]) -> Vec<f64> {
    // an empty intervention: one column
    let names: Vec<&str> = def.variables.iter().map(|v| v.name.as_str()).collect();
    let sizes: Vec<usize> = def.variables.iter().map(|v| v.labels.len()).collect();
    let pos: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (*n, i)).collect();
    let rows: usize = targets.iter().map(|v| sizes[pos[v]]).product();
    let mut out = vec![0.0; rows];
    let total: usize = sizes.iter().product();
    for code in 0..total {
        let mut a = vec![0; sizes.len()];
        let mut rest = code;
        for i in (0..sizes.len()).rev() {
            a[i] = rest % sizes[i];
            rest /= sizes[i];
        }
        let mut p = 1.0;
        for (i, name) in names.iter().enumerate() {
            let parents = def.parents.get(*name).cloned().unwrap_or_default();
            let pcol = parents.iter().fold(0, |acc, v| acc * sizes[pos[v.as_str()]] + a[pos[v.as_str()]]);
            p *= def.mechanisms[*name][a[i]][pcol];
        }
        let row = targets.iter().fold(0, |acc, v| acc * sizes[pos[v]] + a[pos[v]]);
        out[row] += p;
    }
    out
}

/// Textbook Jensen-Shannon distance in nats.
pub fn textbook_jsd(p: &[f64], q: &[f64]) -> f64 {
    let kl = |a: &[f64], m: &[f64]| -> f64 {
        a.iter().zip(m).filter(|(x, _)| **x > 0.0).map(|(x, y)| x * (x / y).ln()).sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    (0.5 * kl(p, &m) + 0.5 * kl(q, &m)).max(0.0).sqrt()
}

pub fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            out[i][j] = (0..k).map(|t| a[i][t] * b[t][j]).sum();
        }
    }
    out
}

pub fn kron(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (br, bc) = (b.len(), b[0].len());
    let mut out = vec![vec![0.0; a[0].len() * bc]; a.len() * br];
    for (i, row) in a.iter().enumerate() {
        for (j, x) in row.iter().enumerate() {
            for k in 0..br {
                for l in 0..bc {
                    out[i * br + k][j * bc + l] = x * b[k][l];
                }
            }
        }
    }
    out
}

/// Every hard surjective `n × m` matrix, by filtering all `n^m` functions.
pub fn all_surjections(m: usize, n: usize) -> Vec<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    for code in 0..n.pow(m as u32) {
        let mut f = vec![0; m];
        let mut rest = code;
        for slot in f.iter_mut().rev() {
            *slot = rest % n;
            rest /= n;
        }
        if (0..n).all(|v| f.contains(&v)) {
            let mut mat = vec![vec![0.0; m]; n];
            for (j, &v) in f.iter().enumerate() {
                mat[v][j] = 1.0;
            }
            out.push(mat);
        }
    }
    out
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
