//! Fair robust recourse: AFRR along a shrinking radius sequence and its
//! zero-radius limit, whose constraint set is the twin set.

use serde::{Deserialize, Serialize};

use super::closed_form::{linear_afrr_solution, LinearSetting};
use super::{solve_afrr, Afrr, GridSpec, RecourseProblem, RecourseSolution, Validity};
use crate::metric::Lp;
use crate::{Error, Result};

pub const DEFAULT_DELTAS: [f64; 4] = [1.0, 0.5, 0.1, 0.01];

/// Agreement threshold between successive radii, in cost and action distance.
const CONVERGENCE_TOL: f64 = 1e-3;
/// Extra factor-10 reductions tried past the given sequence.
const MAX_EXTENSIONS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaroReport {
    /// The zero-radius solution.
    pub solution: RecourseSolution,
    /// `(Δ, cost)` per solved radius, NaN where the grid had no valid action.
    pub trajectory: Vec<(f64, f64)>,
}

fn check_deltas(deltas: &[f64]) -> Result<()> {
    if deltas.is_empty() || deltas.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
        return Err(Error::Config("radius sequence must be positive".into()));
    }
    if deltas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Config("radius sequence must be decreasing".into()));
    }
    Ok(())
}

fn action_distance(a: &RecourseSolution, b: &RecourseSolution, n: usize) -> f64 {
    Lp::TWO.distance(&a.dense_action(n), &b.dense_action(n))
}

fn run<F>(deltas: &[f64], n: usize, mut solve: F) -> Result<Afrr<FaroReport>>
where
    F: FnMut(f64) -> Result<Afrr<RecourseSolution>>,
{
    check_deltas(deltas)?;
    let mut limit = match solve(0.0)? {
        Afrr::Defined(s) => s,
        Afrr::CounterfactuallyUnfair => return Ok(Afrr::CounterfactuallyUnfair),
    };
    limit.validity = Validity::Faro;
    let mut trajectory = Vec::new();
    let mut any_feasible = false;
    let mut close = false;
    let mut prev: Option<RecourseSolution> = None;
    let extended = deltas
        .iter()
        .copied()
        .chain((1..=MAX_EXTENSIONS).map(|k| deltas[deltas.len() - 1] / 10f64.powi(k as i32)));
    for (step, d) in extended.enumerate() {
        if step >= deltas.len() && close {
            break;
        }
        match solve(d) {
            Ok(Afrr::Defined(s)) => {
                any_feasible = true;
                close = prev.as_ref().is_some_and(|p| {
                    (s.cost - p.cost).abs() < CONVERGENCE_TOL
                        && action_distance(&s, p, n) < CONVERGENCE_TOL
                });
                trajectory.push((d, s.cost));
                prev = Some(s);
            }
            Ok(Afrr::CounterfactuallyUnfair) => return Ok(Afrr::CounterfactuallyUnfair),
            Err(Error::InfeasibleWithinGrid { .. }) => {
                close = false;
                prev = None;
                trajectory.push((d, f64::NAN));
            }
            Err(e) => return Err(e),
        }
    }
    trajectory.push((0.0, limit.cost));
    if !any_feasible {
        return Err(Error::NoRecourse(
            "AFRR has no valid action at any radius".into(),
        ));
    }
    if !close {
        return Err(Error::NonConvergent { trajectory });
    }
    Ok(Afrr::Defined(FaroReport {
        solution: limit,
        trajectory,
    }))
}

/// FARO by grid search. `problem.perturbation` supplies the metric; its radius
/// is replaced by each element of `deltas`.
pub fn solve_faro(
    problem: &RecourseProblem<'_>,
    v: &[f64],
    grid: &GridSpec,
    deltas: &[f64],
) -> Result<Afrr<FaroReport>> {
    let spec = problem
        .perturbation
        .clone()
        .ok_or_else(|| Error::Config("FARO needs a perturbation spec".into()))?;
    if spec.categorical.is_empty() {
        return Err(Error::Config(
            "FARO needs the protected variable in the perturbation".into(),
        ));
    }
    run(deltas, problem.scm.len(), |d| {
        let mut p = problem.clone();
        p.perturbation = Some(spec.with_radius(d)?);
        solve_afrr(&p, v, grid)
    })
}

/// FARO from the AFRR closed form.
pub fn faro_linear(
    setting: LinearSetting<'_>,
    v: &[f64],
    p: Lp,
    q: Lp,
    deltas: &[f64],
) -> Result<Afrr<FaroReport>> {
    run(deltas, v.len(), |d| {
        linear_afrr_solution(setting, v, p, q, d)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{ClassifierModel, LinearClassifier};
    use crate::datasets::{build_scm, BuiltinScm};
    use crate::metric::{PerturbationSpec, Pseudometric};
    use crate::recourse::{recourse_cost_immutable, CostSpec};
    use crate::scm::LinearScm;

    const V: [f64; 3] = [1.0, 3.0, 0.0];

    #[test]
    fn linear_limit_is_worst_twin_cost() {
        let scm = LinearScm::new(build_scm(BuiltinScm::Lin)).unwrap();
        let model = LinearClassifier::new(vec![-1.0, -1.0, -1.0], 0.0);
        let setting = LinearSetting {
            model: &model,
            scm: &scm,
            protected: 0,
        };
        let report = faro_linear(setting, &V, Lp::TWO, Lp::TWO, &DEFAULT_DELTAS)
            .unwrap()
            .defined()
            .unwrap();
        assert!((report.solution.cost - 4.0 / 2f64.sqrt()).abs() < 1e-9);
        assert!((report.trajectory[0].1 - 5.0 / 2f64.sqrt()).abs() < 1e-9);
        assert_eq!(report.solution.validity, Validity::Faro);
        for twin in scm.twins(&V, 0).unwrap() {
            let cf = scm
                .counterfactual(&twin.instance, &report.solution.action)
                .unwrap();
            assert!(model.decision_unchecked(&cf) >= -1e-9);
        }
    }

    #[test]
    fn fair_classifier_faro_equals_plain() {
        let scm = LinearScm::new(build_scm(BuiltinScm::Lin)).unwrap();
        let model = LinearClassifier::new(vec![-1.0, 0.0, -1.0], 0.0);
        let v = [1.0, 1.0, 0.5];
        let setting = LinearSetting {
            model: &model,
            scm: &scm,
            protected: 0,
        };
        let report = faro_linear(setting, &v, Lp::TWO, Lp::TWO, &DEFAULT_DELTAS)
            .unwrap()
            .defined()
            .unwrap();
        let plain = recourse_cost_immutable(&model, &v, Lp::TWO, &[1, 2]).unwrap();
        assert!((report.solution.cost - plain).abs() < 1e-9);
    }

    #[test]
    fn grid_faro_converges() {
        let scm = build_scm(BuiltinScm::Lin);
        let m: ClassifierModel = LinearClassifier::new(vec![-1.0, -1.0, -1.0], 0.0).into();
        let spec =
            PerturbationSpec::for_scm(&scm, Pseudometric::Zero, Lp::TWO, Lp::TWO, 1.0).unwrap();
        let problem = RecourseProblem::new(&scm, &m, CostSpec::lp(Lp::TWO))
            .with_perturbation(spec)
            .with_samples(500, 3);
        let grid = GridSpec::uniform(2, 5.0, 201);
        let report = solve_faro(&problem, &V, &grid, &DEFAULT_DELTAS)
            .unwrap()
            .defined()
            .unwrap();
        assert!((report.solution.cost - 4.0 / 2f64.sqrt()).abs() <= 4.0 * grid.step(0));
    }

    #[test]
    fn bad_sequences_rejected() {
        assert!(check_deltas(&[0.5, 1.0]).is_err());
        assert!(check_deltas(&[]).is_err());
        assert!(check_deltas(&[1.0, 0.0]).is_err());
    }
}
