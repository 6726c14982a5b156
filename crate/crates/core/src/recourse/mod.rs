//! Recourse costs and solvers: closed forms for linear models over linear SCMs,
//! a brute-force grid solver for everything else, and the fair-robust variants.

mod bruteforce;
mod closed_form;
mod faro;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierModel;
use crate::metric::{Lp, PerturbationSpec};
use crate::scm::{Instance, Intervention, StructuralCausalModel};
use crate::{Error, Result};

pub(crate) use bruteforce::{center_anchor, Prepared};
pub use bruteforce::{solve_afrr, solve_bruteforce};
pub use closed_form::{
    afrr_cost, conjugate, fair_recourse_possible, linear_afrr_solution, linear_afrr_solution_for,
    linear_plain_solution, linear_robust_solution, modified_classifier, optimal_action_linear,
    recourse_cost_immutable, recourse_cost_mutable, robust_extra_cost, robust_recourse_cost,
    twin_costs_linear, twin_shift_weight, unfair_area_contains, unfair_band_halfwidth, weight_norm,
    weighted_cost_bounds, LinearSetting,
};
pub use faro::{faro_linear, solve_faro, FaroReport, DEFAULT_DELTAS};

/// `cost(v, a) = ‖v − CF(v, a)‖` under a single or weighted `L_p` norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CostSpec {
    Lp {
        p: Lp,
    },
    /// `Σ αᵢ ‖·‖_{pᵢ}` with `Σ αᵢ = 1`.
    WeightedLp {
        terms: Vec<(f64, Lp)>,
    },
}

impl CostSpec {
    pub fn lp(p: Lp) -> Self {
        CostSpec::Lp { p }
    }

    pub fn weighted(terms: Vec<(f64, Lp)>) -> Result<Self> {
        if terms.is_empty() || terms.iter().any(|(a, _)| !(*a > 0.0)) {
            return Err(Error::InvalidMetric("weights must be positive".into()));
        }
        let total: f64 = terms.iter().map(|(a, _)| a).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidMetric(format!(
                "weights sum to {total}, not 1"
            )));
        }
        Ok(CostSpec::WeightedLp { terms })
    }

    #[inline]
    pub fn norm(&self, x: &[f64]) -> f64 {
        match self {
            CostSpec::Lp { p } => p.norm(x),
            CostSpec::WeightedLp { terms } => terms.iter().map(|(a, p)| a * p.norm(x)).sum(),
        }
    }

    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        self.norm(&diff)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    /// `do(X = x + η)` on the chosen continuous variables.
    Hard,
    /// `X := f(pa) + U + δ`.
    Additive,
}

/// Variables an action may touch. Categorical ones are always set by hard
/// intervention to one of their levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSpace {
    pub indices: Vec<usize>,
    pub kind: ActionKind,
}

impl ActionSpace {
    pub fn actionable(scm: &StructuralCausalModel, kind: ActionKind) -> Self {
        Self {
            indices: scm.actionable_indices(),
            kind,
        }
    }
}

/// Per-axis action grid: continuous axes are `points` offsets over
/// `[−half_width, half_width]` (zero always included); categorical axes are
/// the variable's levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub half_width: Vec<f64>,
    pub points: usize,
}

impl GridSpec {
    pub fn uniform(axes: usize, half_width: f64, points: usize) -> Self {
        Self {
            half_width: vec![half_width; axes],
            points,
        }
    }

    /// `±sigmas·σ` per axis.
    pub fn from_std(std: &[f64], sigmas: f64, points: usize) -> Self {
        Self {
            half_width: std.iter().map(|s| s * sigmas).collect(),
            points,
        }
    }

    pub fn step(&self, axis: usize) -> f64 {
        2.0 * self.half_width[axis] / (self.points.max(2) - 1) as f64
    }

    pub(crate) fn offsets(&self, axis: usize) -> Vec<f64> {
        let h = self.half_width[axis];
        let k = self.points.max(2);
        let mut out: Vec<f64> = (0..k)
            .map(|i| -h + 2.0 * h * i as f64 / (k - 1) as f64)
            .collect();
        if k % 2 == 1 {
            out[k / 2] = 0.0;
        } else {
            let pos = out.partition_point(|x| *x < 0.0);
            out.insert(pos, 0.0);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Validity {
    Plain,
    Robust { delta: f64 },
    Afrr { delta: f64 },
    Faro,
}

impl fmt::Display for Validity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Validity::Plain => f.write_str("plain"),
            Validity::Robust { delta } => write!(f, "robust(delta={delta})"),
            Validity::Afrr { delta } => write!(f, "afrr(delta={delta})"),
            Validity::Faro => f.write_str("faro"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    ClosedForm,
    BruteForce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverChoice {
    Auto,
    ClosedForm,
    BruteForce,
}

impl FromStr for SolverChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(SolverChoice::Auto),
            "closed_form" | "closed-form" => Ok(SolverChoice::ClosedForm),
            "brute_force" | "brute-force" | "bruteforce" => Ok(SolverChoice::BruteForce),
            other => Err(Error::Unknown {
                kind: "solver",
                name: other.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecourseSolution {
    pub action: Intervention,
    pub counterfactual: Instance,
    pub cost: f64,
    pub validity: Validity,
    pub solver: SolverKind,
}

impl RecourseSolution {
    /// Dense `(hard values, shifts)` of the action over `n` variables, with hard
    /// slots as NaN when absent. Used to compare actions.
    pub fn dense_action(&self, n: usize) -> Vec<f64> {
        let (hard, shift) = self.action.dense(n);
        hard.iter().map(|h| h.unwrap_or(0.0)).chain(shift).collect()
    }
}

/// AFRR is only defined outside the unfair area.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Afrr<T> {
    Defined(T),
    /// The instance and some twin are labelled differently.
    CounterfactuallyUnfair,
}

impl<T> Afrr<T> {
    pub fn defined(self) -> Option<T> {
        match self {
            Afrr::Defined(t) => Some(t),
            Afrr::CounterfactuallyUnfair => None,
        }
    }

    pub fn map<U>(self, f: impl FnOnce(T) -> U) -> Afrr<U> {
        match self {
            Afrr::Defined(t) => Afrr::Defined(f(t)),
            Afrr::CounterfactuallyUnfair => Afrr::CounterfactuallyUnfair,
        }
    }
}

/// Everything a solver needs. With a perturbation the action must keep every
/// sampled perturbation point favorable; the objective is then the worst cost
/// over the perturbation's centers (the twins in `Θ_Δ`).
#[derive(Debug, Clone)]
pub struct RecourseProblem<'a> {
    pub scm: &'a StructuralCausalModel,
    pub model: &'a ClassifierModel,
    pub cost: CostSpec,
    pub actions: ActionSpace,
    pub protected: Option<usize>,
    pub perturbation: Option<PerturbationSpec>,
    /// Perturbation draws per categorical value tuple.
    pub n_samples: usize,
    pub seed: u64,
}

impl<'a> RecourseProblem<'a> {
    pub fn new(scm: &'a StructuralCausalModel, model: &'a ClassifierModel, cost: CostSpec) -> Self {
        Self {
            scm,
            model,
            cost,
            actions: ActionSpace::actionable(scm, ActionKind::Additive),
            protected: scm.protected_index(),
            perturbation: None,
            n_samples: 2000,
            seed: 0,
        }
    }

    pub fn with_perturbation(mut self, spec: PerturbationSpec) -> Self {
        self.perturbation = Some(spec);
        self
    }

    pub fn with_actions(mut self, actions: ActionSpace) -> Self {
        self.actions = actions;
        self
    }

    pub fn with_samples(mut self, n_samples: usize, seed: u64) -> Self {
        self.n_samples = n_samples;
        self.seed = seed;
        self
    }

    pub fn validity(&self) -> Validity {
        match &self.perturbation {
            None => Validity::Plain,
            Some(s) if s.categorical.is_empty() => Validity::Robust { delta: s.radius },
            Some(s) => Validity::Afrr { delta: s.radius },
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let n = self.scm.len();
        if self.model.dim() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: self.model.dim(),
            });
        }
        for &i in &self.actions.indices {
            if i >= n {
                return Err(Error::InvalidIndex { index: i, len: n });
            }
            if !self.scm.variable(i).actionable {
                return Err(Error::InvalidIntervention(format!(
                    "`{}` is not actionable",
                    self.scm.variable(i).name
                )));
            }
            if let Some(spec) = &self.perturbation {
                if spec.categorical.contains(&i) {
                    return Err(Error::InvalidIntervention(format!(
                        "`{}` is both acted on and perturbed",
                        self.scm.variable(i).name
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_offsets_include_zero() {
        let g = GridSpec::uniform(1, 1.0, 5);
        assert_eq!(g.offsets(0), vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        let g = GridSpec::uniform(1, 1.0, 4);
        let o = g.offsets(0);
        assert_eq!(o.len(), 5);
        assert!(o.contains(&0.0));
        assert!((GridSpec::uniform(1, 5.0, 201).step(0) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn weighted_cost_validation() {
        assert!(CostSpec::weighted(vec![(0.5, Lp::ONE), (0.5, Lp::TWO)]).is_ok());
        assert!(CostSpec::weighted(vec![(0.5, Lp::ONE), (0.6, Lp::TWO)]).is_err());
        let c = CostSpec::weighted(vec![(0.5, Lp::ONE), (0.5, Lp::TWO)]).unwrap();
        assert!((c.norm(&[3.0, 4.0]) - 6.0).abs() < 1e-12);
    }
}
