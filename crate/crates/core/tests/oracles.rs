mod common;

use abx_core::abstraction::{AlphaSet, ErrorConfig};
use abx_core::enumeration::{exhaustive_search, score_candidate, SearchConfig};
use abx_core::experiments::{builtin_defs, builtin_problem, builtin_scenario, ScenarioName};
use abx_core::inference::{interventional_matrix, marginal};
use abx_core::matrix::Matrix;
use abx_core::scm::{Scm, ScmDef};
use common::*;

const TOL: f64 = 1e-12;

fn names(def: &ScmDef) -> Vec<String> {
    def.variables.iter().map(|v| v.name.clone()).collect()
}

/// Base variables mapped onto each listed abstracted variable, listed in the
/// order of the abstracted model and then the base model.
fn preimage_names(
    def: &ScmDef,
    abs: &ScmDef,
    map: &std::collections::BTreeMap<String, String>,
    high: &[String],
) -> Vec<String> {
    let mut ordered: Vec<&String> = high.iter().collect();
    let pos = |n: &String| abs.variables.iter().position(|v| &v.name == n).unwrap();
    ordered.sort_by_key(|n| pos(n));
    ordered.into_iter().flat_map(|h| names(def).into_iter().filter(move |b| map.get(b) == Some(h))).collect()
}

#[test]
fn basic_marginal_of_c_matches_hand_computation() {
    let defs = builtin_defs(ScenarioName::Basic);
    let oracle = brute_marginal(&defs.base, &["C"]);
    // P(T=0) = 0.8 + 0.2 * 0.2 = 0.84, P(C=0) = 0.84 * 0.9 + 0.16 * 0.6
    assert!((oracle[0] - 0.852).abs() < TOL && (oracle[1] - 0.148).abs() < TOL);
    let lib = marginal(&Scm::from_def(&defs.base).unwrap(), &["C"]).unwrap();
    assert!((lib[0] - 0.852).abs() < TOL && (lib[1] - 0.148).abs() < TOL);
}

#[test]
fn marginals_of_every_variable_match_joint_enumeration() {
    for name in ScenarioName::ALL {
        let defs = builtin_defs(name);
        for def in [&defs.base, &defs.abstracted] {
            let scm = Scm::from_def(def).unwrap();
            for v in names(def) {
                let lib = marginal(&scm, &[v.as_str()]).unwrap();
                let oracle = brute_marginal(def, &[v.as_str()]);
                for (a, b) in lib.iter().zip(&oracle) {
                    assert!((a - b).abs() < TOL, "{name:?} {v}: {lib:?} vs {oracle:?}");
                }
            }
        }
    }
}

#[test]
fn diagram_channels_match_truncated_factorisation() {
    for name in ScenarioName::ALL {
        let defs = builtin_defs(name);
        let problem = builtin_problem(name);
        assert_eq!(problem.diagrams.len(), defs.diagrams.len());
        for (d, spec) in problem.diagrams.iter().zip(&defs.diagrams) {
            let low_do = preimage_names(&defs.base, &defs.abstracted, &defs.abstraction.map, &spec.high_do);
            let low_tgt = preimage_names(&defs.base, &defs.abstracted, &defs.abstraction.map, &spec.high_target);
            let ld: Vec<&str> = low_do.iter().map(String::as_str).collect();
            let lt: Vec<&str> = low_tgt.iter().map(String::as_str).collect();
            let hd: Vec<&str> = spec.high_do.iter().map(String::as_str).collect();
            let ht: Vec<&str> = spec.high_target.iter().map(String::as_str).collect();
            let mu = brute_interventional(&defs.base, &ld, &lt);
            let nu = brute_interventional(&defs.abstracted, &hd, &ht);
            assert!(max_abs_diff(&d.mu.to_rows(), &mu) < TOL, "{name:?} {} mu", spec.label());
            assert!(max_abs_diff(&d.nu.to_rows(), &nu) < TOL, "{name:?} {} nu", spec.label());
        }
    }
}

#[test]
fn v_structure_intervention_on_s_over_h_and_f() {
    let defs = builtin_defs(ScenarioName::VStructure);
    let scm = Scm::from_def(&defs.base).unwrap();
    let lib = interventional_matrix(&scm, &["S"], &["H", "F"]).unwrap();
    let oracle = brute_interventional(&defs.base, &["S"], &["H", "F"]);
    assert_eq!(lib.matrix().shape(), (4, 2));
    assert!(max_abs_diff(&lib.matrix().to_rows(), &oracle) < TOL);
    // do(S = 0): P(C=0) = 0.7 * 0.15 + 0.3 * 0.85 = 0.36
    let pc0 = 0.36;
    let h0 = pc0 * 1.0 + (1.0 - pc0) * 0.2;
    assert!((oracle[0][0] + oracle[1][0] - h0).abs() < TOL);
}

#[test]
fn chain_channels_compose() {
    // In a chain S -> T -> C, P(C | do S) = P(C | do T) P(T | do S).
    for name in [ScenarioName::Basic, ScenarioName::Extended] {
        let defs = builtin_defs(name);
        let scm = Scm::from_def(&defs.base).unwrap();
        let sc = interventional_matrix(&scm, &["S"], &["C"]).unwrap();
        let tc = interventional_matrix(&scm, &["T"], &["C"]).unwrap();
        let st = interventional_matrix(&scm, &["S"], &["T"]).unwrap();
        let composed = tc.matrix().matmul(st.matrix()).unwrap();
        assert!(max_abs_diff(&composed.to_rows(), &sc.matrix().to_rows()) < TOL);
    }
}

#[test]
fn multi_variable_do_agrees_with_oracle() {
    let defs = builtin_defs(ScenarioName::VStructure);
    let scm = Scm::from_def(&defs.base).unwrap();
    let lib = interventional_matrix(&scm, &["C", "H"], &["F"]).unwrap();
    let oracle = brute_interventional(&defs.base, &["C", "H"], &["F"]);
    assert!(max_abs_diff(&lib.matrix().to_rows(), &oracle) < TOL);
    // F's mechanism is exactly this channel
    assert!(max_abs_diff(&oracle, &defs.base.mechanisms["F"]) < TOL);
}

/// `(mu, nu, do variables, target variables)` of one diagram.
type Channel = (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<usize>, Vec<usize>);

/// Worst column JSD over every diagram, from the oracle channels.
fn oracle_error(channels: &[Channel], alphas: &[Vec<Vec<f64>>]) -> f64 {
    let for_set = |vars: &[usize]| vars.iter().skip(1).fold(alphas[vars[0]].clone(), |acc, &v| kron(&acc, &alphas[v]));
    channels
        .iter()
        .map(|(mu, nu, dv, tv)| {
            let upper = matmul(&for_set(tv), mu);
            let lower = matmul(nu, &for_set(dv));
            (0..upper[0].len())
                .map(|j| {
                    let p: Vec<f64> = upper.iter().map(|r| r[j]).collect();
                    let q: Vec<f64> = lower.iter().map(|r| r[j]).collect();
                    textbook_jsd(&p, &q)
                })
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

#[test]
fn naive_enumeration_matches_exhaustive_search() {
    let expected_sizes = [
        (ScenarioName::Basic, 4),
        (ScenarioName::Collapsing, 56),
        (ScenarioName::Extended, 432),
        (ScenarioName::VStructure, 56),
    ];
    for (name, size) in expected_sizes {
        let defs = builtin_defs(name);
        let problem = builtin_problem(name);
        let channels: Vec<_> = defs
            .diagrams
            .iter()
            .zip(&problem.diagrams)
            .map(|(spec, d)| {
                let ld = preimage_names(&defs.base, &defs.abstracted, &defs.abstraction.map, &spec.high_do);
                let lt = preimage_names(&defs.base, &defs.abstracted, &defs.abstraction.map, &spec.high_target);
                let ld: Vec<&str> = ld.iter().map(String::as_str).collect();
                let lt: Vec<&str> = lt.iter().map(String::as_str).collect();
                let hd: Vec<&str> = spec.high_do.iter().map(String::as_str).collect();
                let ht: Vec<&str> = spec.high_target.iter().map(String::as_str).collect();
                (
                    brute_interventional(&defs.base, &ld, &lt),
                    brute_interventional(&defs.abstracted, &hd, &ht),
                    d.do_vars.clone(),
                    d.target_vars.clone(),
                )
            })
            .collect();
        let per_var: Vec<Vec<Vec<Vec<f64>>>> = defs
            .abstracted
            .variables
            .iter()
            .map(|v| {
                let m: usize = defs
                    .base
                    .variables
                    .iter()
                    .filter(|b| defs.abstraction.map.get(&b.name) == Some(&v.name))
                    .map(|b| b.labels.len())
                    .product();
                all_surjections(m, v.labels.len())
            })
            .collect();
        let mut best = f64::INFINITY;
        let mut count = 0;
        let mut idx = vec![0; per_var.len()];
        loop {
            let alphas: Vec<_> = idx.iter().zip(&per_var).map(|(&i, c)| c[i].clone()).collect();
            let oracle = oracle_error(&channels, &alphas);
            let lib_set = AlphaSet(alphas.iter().map(|a| Matrix::from_rows(a).unwrap()).collect());
            let (_, lib) = score_candidate(&problem, &lib_set, ErrorConfig::CALIBRATED);
            // compared as divergences: the square root turns ~1e-17 round-off
            // at a perfect match into ~1e-8
            assert!((oracle * oracle - lib * lib).abs() < 1e-12, "{name:?}: oracle {oracle} vs library {lib}");
            best = best.min(oracle);
            count += 1;
            let mut k = idx.len();
            loop {
                if k == 0 {
                    break;
                }
                k -= 1;
                idx[k] += 1;
                if idx[k] < per_var[k].len() {
                    break;
                }
                idx[k] = 0;
                if k == 0 {
                    k = usize::MAX;
                    break;
                }
            }
            if k == usize::MAX {
                break;
            }
        }
        assert_eq!(count, size, "{name:?}");
        let search = exhaustive_search(&problem, SearchConfig::default()).unwrap();
        assert_eq!(search.space_size, size as u64);
        assert!((search.best_error.powi(2) - best * best).abs() < 1e-12, "{name:?}: {} vs {best}", search.best_error);
    }
}

#[test]
fn frozen_ground_truth_optima() {
    let basic = builtin_scenario(ScenarioName::Basic).ground_truth;
    assert!(basic.error.abs() < 1e-9);
    assert_eq!(basic.alphas.0[0].to_rows(), vec![vec![1.0, 0.0], vec![0.0, 1.0]]);

    let collapsing = builtin_scenario(ScenarioName::Collapsing).ground_truth;
    assert!((collapsing.error - 0.13285).abs() < 1e-5, "{}", collapsing.error);

    let extended = builtin_scenario(ScenarioName::Extended).ground_truth;
    assert!(extended.error.abs() < 1e-9, "{}", extended.error);
    assert_eq!(extended.space_size, 432);

    let vs = builtin_scenario(ScenarioName::VStructure).ground_truth;
    assert!((vs.error - 0.213823).abs() < 1e-6, "{}", vs.error);
    // S' is the label swap
    assert_eq!(vs.alphas.0[0].to_rows(), vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
}
