use abx_core::abstraction::overall_error;
use abx_core::experiments::{builtin_problem, builtin_scenario, ScenarioName};
use abx_core::learning::{assemble_loss, ensemble_run, train, LossAggregation, Method, TrainConfig};
use abx_core::matrix::Matrix;
use abx_core::{AbstractionProblem, DiagramSpec};

fn quick(method: Method, seed: u64) -> TrainConfig {
    TrainConfig { method, seed, epochs: 60, ensemble: 4, ..TrainConfig::default() }
}

fn hard_weights(alphas: &[Matrix]) -> Vec<Matrix> {
    alphas.iter().map(|a| a.map(|x| 1000.0 * x)).collect()
}

#[test]
fn optimal_hard_weights_give_near_zero_loss_on_exact_scenarios() {
    for name in [ScenarioName::Basic, ScenarioName::Extended] {
        let s = builtin_scenario(name);
        let graph = assemble_loss(&s.problem, &hard_weights(s.ground_truth.alphas.matrices()), &TrainConfig::default())
            .unwrap();
        assert!(graph.loss_value().abs() < 1e-9, "{name:?}: {}", graph.loss_value());
    }
}

#[test]
fn tape_l1_equals_overall_error_on_hard_solutions() {
    for name in ScenarioName::ALL {
        let s = builtin_scenario(name);
        let graph = assemble_loss(&s.problem, &hard_weights(s.ground_truth.alphas.matrices()), &TrainConfig::default())
            .unwrap();
        let expected = overall_error(&s.problem, &s.ground_truth.alphas, TrainConfig::default().error).unwrap();
        assert_eq!(graph.tape.scalar(graph.l1), expected, "{name:?}");
        assert_eq!(graph.tape.scalar(graph.l2), 0.0);
    }
}

#[test]
fn zero_lambda_leaves_only_the_penalty() {
    let problem = builtin_problem(ScenarioName::VStructure);
    let weights: Vec<Matrix> = (0..problem.abstracted.len())
        .map(|x| {
            let (r, c) = problem.alpha_shape(x);
            Matrix::from_vec(r, c, (0..r * c).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap()
        })
        .collect();
    let cfg = TrainConfig { lambda: 0.0, ..TrainConfig::default() };
    let graph = assemble_loss(&problem, &weights, &cfg).unwrap();
    assert_eq!(graph.loss_value(), graph.tape.scalar(graph.l2));
    assert!(graph.tape.scalar(graph.l2) > 0.0);
}

#[test]
fn uniform_kappa_matches_absent_kappa() {
    let problem = builtin_problem(ScenarioName::Collapsing);
    for agg in [LossAggregation::Sup, LossAggregation::Mean] {
        let plain = TrainConfig { loss_agg: agg, epochs: 40, ..TrainConfig::default() };
        let ones = TrainConfig { kappa: Some(vec![1.0; 3]), ..plain.clone() };
        let a = train(&problem, &plain, None).unwrap();
        let b = train(&problem, &ones, None).unwrap();
        assert_eq!(a.solution, b.solution);
        assert_eq!(a.trace, b.trace);
    }
}

fn single_diagram_v_structure() -> AbstractionProblem {
    let p = builtin_problem(ScenarioName::VStructure);
    let (def, _) = p.to_defs();
    AbstractionProblem::new(p.base.clone(), p.abstracted.clone(), &def, vec![DiagramSpec::new(&["S'"], &["C'"])])
        .unwrap()
}

#[test]
fn single_diagram_methods_coincide() {
    for problem in [builtin_problem(ScenarioName::Basic), single_diagram_v_structure()] {
        for seed in 0..3 {
            let joint = train(&problem, &quick(Method::Joint, seed), None).unwrap();
            for method in [Method::Sequential, Method::Independent] {
                let other = train(&problem, &quick(method, seed), None).unwrap();
                assert_eq!(joint.solution.rounded, other.solution.rounded, "{method}");
                assert_eq!(joint.solution.weights, other.solution.weights, "{method}");
            }
        }
    }
}

#[test]
fn sequential_skips_fully_frozen_diagrams() {
    for name in [ScenarioName::Collapsing, ScenarioName::Extended, ScenarioName::VStructure] {
        let problem = builtin_problem(name);
        for seed in 0..5 {
            let out = train(&problem, &quick(Method::Sequential, seed), None).unwrap();
            assert!(out.trained_diagrams.len() <= 2, "{name:?} seed {seed}: {:?}", out.trained_diagrams);
            let stages: std::collections::BTreeSet<_> = out.trace.iter().map(|r| r.stage.clone()).collect();
            assert_eq!(stages.len(), out.trained_diagrams.len());
        }
    }
}

#[test]
fn training_is_deterministic() {
    let problem = builtin_problem(ScenarioName::Extended);
    for method in Method::ALL {
        let a = train(&problem, &quick(method, 11), None).unwrap();
        let b = train(&problem, &quick(method, 11), None).unwrap();
        assert_eq!(a, b, "{method}");
    }
}

#[test]
fn single_member_ensemble_equals_plain_training() {
    let problem = builtin_problem(ScenarioName::VStructure);
    for method in Method::ALL {
        let cfg = TrainConfig { ensemble: 1, ..quick(method, 5) };
        let ens = ensemble_run(&problem, &cfg, None).unwrap();
        assert_eq!(ens.best_member, 0);
        assert_eq!(ens.best, train(&problem, &cfg, None).unwrap());
    }
}

#[test]
fn ensemble_result_does_not_depend_on_thread_count() {
    let problem = builtin_problem(ScenarioName::Extended);
    let cfg = TrainConfig { ensemble: 6, epochs: 80, ..TrainConfig::default() };
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| ensemble_run(&problem, &cfg, None).unwrap())
    };
    let one = run(1);
    let four = run(4);
    assert_eq!(one.best, four.best);
    assert_eq!(one.best_member, four.best_member);
    assert_eq!(one.members, four.members);
}

#[test]
fn training_lowers_the_objective() {
    for name in ScenarioName::ALL {
        let problem = builtin_problem(name);
        let improved = (0..10)
            .filter(|&seed| {
                let out = train(&problem, &TrainConfig { seed, ..TrainConfig::default() }, None).unwrap();
                let first = out.trace.first().unwrap();
                let last = out.trace.last().unwrap();
                last.loss <= first.loss
            })
            .count();
        assert!(improved >= 9, "{name:?}: {improved}/10");
    }
}

#[test]
fn trace_has_one_row_per_epoch_and_stage() {
    let problem = builtin_problem(ScenarioName::Collapsing);
    let out = train(&problem, &TrainConfig { epochs: 0, ..TrainConfig::default() }, None).unwrap();
    assert_eq!(out.trace.len(), 1);
    assert_eq!(out.trace[0].stage, "joint");
    let out = train(&problem, &quick(Method::Independent, 0), None).unwrap();
    assert_eq!(out.trace.len(), 3 * 61);
}

#[test]
fn invalid_configurations_are_rejected() {
    let problem = builtin_problem(ScenarioName::Basic);
    let bad = [
        TrainConfig { temperature: 0.0, ..TrainConfig::default() },
        TrainConfig { lr: -1.0, ..TrainConfig::default() },
        TrainConfig { lambda: f64::NAN, ..TrainConfig::default() },
        TrainConfig { ensemble: 0, ..TrainConfig::default() },
        TrainConfig { kappa: Some(vec![1.0, 1.0]), ..TrainConfig::default() },
        TrainConfig { kappa: Some(vec![-1.0]), ..TrainConfig::default() },
    ];
    for cfg in bad {
        assert!(train(&problem, &cfg, None).is_err(), "{cfg:?}");
    }
}
