mod common;

use std::fs;

use approx::assert_abs_diff_eq;
use causal_recourse::classifier::{
    train_logistic, ClassifierModel, FeatureSubset, Label, LinearClassifier, TrainConfig,
};
use causal_recourse::datasets::{build_scm, generate_dataset, BuiltinScm, LabelRule, Split};
use causal_recourse::experiment::{run_simulation, ExperimentConfig};
use causal_recourse::metric::{residual_radius, Block, Lp, ProductMetric, Pseudometric};
use causal_recourse::recourse::{
    linear_plain_solution, linear_robust_solution, modified_classifier, recourse_cost_immutable,
    solve_bruteforce, ActionKind, CostSpec, GridSpec, LinearSetting, RecourseProblem,
};
use causal_recourse::scm::{Intervention, LinearScm, Mechanism};
use common::{dot, lp_norm, random_linear, random_weights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn linear_generation_is_the_matrix_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let n = rng.random_range(2..=5);
        let mut m = random_linear(&mut rng, n, false);
        // zero intercepts so that v = S u exactly
        m.intercept = vec![0.0; n];
        let scm = {
            let mechanisms = (0..n)
                .map(|i| {
                    Mechanism::linear(
                        0.0,
                        (0..i)
                            .filter(|&j| m.coef[i][j] != 0.0)
                            .map(|j| (j, m.coef[i][j]))
                            .collect(),
                    )
                })
                .collect();
            causal_recourse::scm::StructuralCausalModel::new(
                "zero",
                m.scm.variables().to_vec(),
                mechanisms,
                m.scm.noise().to_vec(),
            )
            .unwrap()
        };
        let s = m.s();
        for _ in 0..100 {
            let u: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let v = scm.generate(&u).unwrap();
            for i in 0..n {
                let su: f64 = (0..n).map(|j| s[i][j] * u[j]).sum();
                assert!((v[i] - su).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn loan_twin_of_twin_is_the_instance() {
    let scm = build_scm(BuiltinScm::Loan);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for (v, _) in scm.sample(200, &mut rng) {
        let g = v[0];
        let flipped = scm
            .counterfactual(&v, &Intervention::hard(0, 1.0 - g))
            .unwrap();
        let back = scm
            .counterfactual(&flipped, &Intervention::hard(0, g))
            .unwrap();
        for (a, b) in back.iter().zip(v.iter()) {
            assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }
}

#[test]
fn modified_classifier_gives_robust_recourse() {
    let scm = build_scm(BuiltinScm::Lin);
    let lin = LinearScm::new(scm.clone()).unwrap();
    let cont = [1, 2];
    let s_x = lin.restricted(&cont, &cont);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..20 {
        let model = LinearClassifier::new(
            random_weights(&mut rng, 3, 0.3, 2.0),
            rng.random_range(-1.0..1.0),
        );
        let v = scm.sample(1, &mut rng).remove(0).0.into_vec();
        let delta = rng.random_range(0.1..1.0);
        let target = modified_classifier(&model, delta, &s_x, &cont, Lp::TWO);
        let setting = LinearSetting {
            model: &model,
            scm: &lin,
            protected: 0,
        };
        let robust = linear_robust_solution(setting, &v, Lp::TWO, Lp::TWO, delta).unwrap();
        let plain = linear_plain_solution(
            LinearSetting {
                model: &target,
                ..setting
            },
            &v,
            Lp::TWO,
            ActionKind::Additive,
        )
        .unwrap();
        assert_abs_diff_eq!(robust.cost, plain.cost, epsilon = 1e-6);
    }
    // ‖w_X S_X‖₂ = ‖(0, 1)‖₂ for w = (1, 1, 1)
    let ones = LinearClassifier::new(vec![1.0; 3], 0.0);
    assert_abs_diff_eq!(
        modified_classifier(&ones, 1.0, &s_x, &cont, Lp::TWO).b,
        1.0,
        epsilon = 1e-12
    );
}

#[test]
fn brute_force_is_within_one_step_of_closed_form() {
    let scm = build_scm(BuiltinScm::Lin);
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    // |S_X| columns (1,−1) and (0,1)
    let col_sum = 2f64.sqrt() + 1.0;
    for _ in 0..50 {
        let model = LinearClassifier::new(
            random_weights(&mut rng, 3, 0.3, 2.0),
            rng.random_range(-1.0..1.0),
        );
        let v = scm.sample(1, &mut rng).remove(0).0.into_vec();
        let closed = if dot(&model.w, &v) >= model.b {
            0.0
        } else {
            recourse_cost_immutable(&model, &v, Lp::TWO, &[1, 2]).unwrap()
        };
        let cm: ClassifierModel = model.into();
        let problem = RecourseProblem::new(&scm, &cm, CostSpec::lp(Lp::TWO));
        let grid = GridSpec::uniform(2, 2.2 * closed + 0.1, 201);
        let sol = solve_bruteforce(&problem, &v, &grid).unwrap();
        assert!(cm.is_favorable_unchecked(&sol.counterfactual));
        assert!(sol.cost >= closed - 1e-9);
        assert!(sol.cost - closed <= 2.0 * grid.step(0) * col_sum);
    }
}

#[test]
fn loan_logistic_solutions_validate() {
    let scm = build_scm(BuiltinScm::Loan);
    let data = generate_dataset(&scm, 2000, LabelRule::LoanBernoulli, 25).unwrap();
    let (x, y) = data.part(Split::Train);
    let (model, _) = train_logistic(&x, &y, &TrainConfig::default()).unwrap();
    let cm: ClassifierModel = model.into();
    let (test, _) = data.part(Split::Test);
    let negatives: Vec<_> = test
        .iter()
        .filter(|v| cm.predict(v).unwrap() == Label::Unfavorable)
        .take(100)
        .collect();
    assert!(negatives.len() >= 50);
    let std = data.train_std();
    let actionable = scm.actionable_indices();
    let continuous: Vec<f64> = actionable.iter().map(|&i| std[i]).collect();
    let problem = RecourseProblem::new(&scm, &cm, CostSpec::lp(Lp::TWO));
    let grid = GridSpec::from_std(&continuous, 5.0, 41);
    let mut solved = 0;
    for v in negatives {
        if let Ok(sol) = solve_bruteforce(&problem, v, &grid) {
            let cf = scm.counterfactual(v, &sol.action).unwrap();
            assert!(cm.is_favorable_unchecked(&cf));
            assert_abs_diff_eq!(Lp::TWO.distance(&cf, v), sol.cost, epsilon = 1e-9);
            solved += 1;
        }
    }
    assert!(solved > 0);
}

#[test]
fn fixed_fair_model_has_zero_sigmas() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fair.toml");
    fs::write(
        &path,
        LinearClassifier::new(vec![1.0, 0.0, 1.0], 0.5).to_toml(),
    )
    .unwrap();
    let cfg = ExperimentConfig {
        scms: vec!["lin".into()],
        label_kinds: vec!["linear_aware".into()],
        classifiers: vec![format!("model:{}", path.display())],
        n: 400,
        n_samples: 200,
        ..ExperimentConfig::default()
    };
    let out = run_simulation(&cfg).unwrap();
    assert_eq!(out.cells.len(), 3);
    for r in out.rows() {
        assert!(r.fair_recourse_possible);
        assert!(r.n_instances > 0);
        assert_eq!(r.n_excluded_unfair, 0);
        for s in [r.sigma_r, r.sigma_ar, r.sigma_fr] {
            assert!(s.abs() <= 1e-9, "{}: {s}", r.cell_name());
        }
    }
}

#[test]
fn smoke_config_rows_are_finite() {
    let cfg = ExperimentConfig {
        n_samples: 200,
        n: 400,
        ..ExperimentConfig::default()
    };
    let start = std::time::Instant::now();
    let out = run_simulation(&cfg).unwrap();
    assert!(start.elapsed().as_secs() < 60);
    for r in out.rows().filter(|r| r.n_instances > 0) {
        assert!(r.sigma_r.is_finite() && r.sigma_ar.is_finite() && r.sigma_fr.is_finite());
    }
}

// LIN SCM, Δ = 1, GLM on (A, X), linear aware labels.
#[test]
fn glm_aware_row_has_zero_fair_robust_column() {
    let cfg = ExperimentConfig {
        scms: vec!["lin".into()],
        label_kinds: vec!["linear_aware".into()],
        classifiers: vec!["glm".into()],
        feature_subsets: vec!["aware".into()],
        deltas: vec![1.0],
        ..ExperimentConfig::default()
    };
    let out = run_simulation(&cfg).unwrap();
    let row = out.rows().next().unwrap();
    assert!(row.sigma_fr.abs() <= 1e-9);
    assert!(row.sigma_r > 0.0);
    assert!(row.sigma_ar > 0.0);
    let (x, y) = generate_dataset(
        &build_scm(BuiltinScm::Lin),
        400,
        LabelRule::GroundTruth("linear_aware".parse().unwrap()),
        0,
    )
    .unwrap()
    .part(Split::Train);
    let (unaware, _) = train_logistic(
        &x,
        &y,
        &TrainConfig {
            features: FeatureSubset::NonProtected,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    assert_eq!(unaware.w[0], 0.0);
}

#[test]
fn builtin_structural_equations() {
    let lin = LinearScm::new(build_scm(BuiltinScm::Lin)).unwrap();
    // X2 := A − X1 + U2
    assert_eq!(lin.s_inv()[(2, 1)], 1.0);
    let s_inv_x2: Vec<f64> = (0..3).map(|j| lin.s_inv()[(2, j)]).collect();
    assert_eq!(s_inv_x2, vec![-1.0, 1.0, 1.0]);
    // X1 := 2A² + U1
    let anm = build_scm(BuiltinScm::Anm);
    for a in [0.0, 1.0] {
        let v = anm.generate(&[a, 0.25, 0.0]).unwrap();
        assert_eq!(v[1], 2.0 * a * a + 0.25);
    }
}

#[test]
fn product_metric_and_radius_values() {
    // discrete A, L2 on X, combined by L2
    let m = ProductMetric::new(
        vec![
            Block {
                indices: vec![0],
                metric: Pseudometric::Discrete,
            },
            Block {
                indices: vec![1, 2],
                metric: Pseudometric::lq(Lp::TWO),
            },
        ],
        Lp::TWO,
    )
    .unwrap();
    assert_eq!(m.distance(&[0.0, 1.0, 1.0], &[1.0, 1.0, 1.0]).unwrap(), 1.0);
    // Δ_θ = sqrt(Δ² − d²)
    assert_abs_diff_eq!(
        residual_radius(Lp::TWO, &[0.6], 1.0).unwrap(),
        0.8,
        epsilon = 1e-12
    );
    assert_abs_diff_eq!(
        residual_radius(Lp::Infinity, &[1.0], 1.0).unwrap(),
        1.0,
        epsilon = 1e-9
    );
    // p = 1 pairs with the max norm
    assert_eq!(Lp::ONE.conjugate(), Lp::Infinity);
    assert_eq!(
        lp_norm(&[1.0, -2.0], f64::INFINITY),
        Lp::Infinity.norm(&[1.0, -2.0])
    );
}
