//! Closed forms for a linear classifier over a linear SCM with an immutable
//! protected variable. Distances use the continuous weights `w_X` only.

use nalgebra::DMatrix;

use super::{ActionKind, Afrr, RecourseSolution, SolverKind, Validity};
use crate::classifier::LinearClassifier;
use crate::metric::{Lp, PerturbationSpec};
use crate::scm::{Instance, Intervention, LinearScm};
use crate::{Error, Result};

pub fn conjugate(p: f64) -> Result<Lp> {
    Ok(Lp::new(p)?.conjugate())
}

/// `‖w_X‖_{p*}` over the given continuous indices.
pub fn weight_norm(w: &[f64], continuous: &[usize], p: Lp) -> f64 {
    p.conjugate().norm_iter(continuous.iter().map(|&i| w[i]))
}

fn check_dim(model: &LinearClassifier, v: &[f64]) -> Result<()> {
    if model.dim() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: v.len(),
        });
    }
    Ok(())
}

/// `|w·v − b| / ‖w_X‖_{p*}`: the `L_p` distance from `v` to the decision
/// boundary moving only continuous coordinates.
pub fn recourse_cost_immutable(
    model: &LinearClassifier,
    v: &[f64],
    p: Lp,
    continuous: &[usize],
) -> Result<f64> {
    check_dim(model, v)?;
    let g = model.decision_unchecked(v);
    let norm = weight_norm(&model.w, continuous, p);
    if norm == 0.0 {
        return if g == 0.0 {
            Ok(0.0)
        } else {
            Err(Error::NoRecourse("continuous weights are all zero".into()))
        };
    }
    Ok(g.abs() / norm)
}

/// Cost when the categorical variable at `protected` may also be changed:
/// `min_{a'} (|a − a'|^p + |w·v − b + w_A(a' − a)|^p / ‖w_X‖_{p*}^p)^{1/p}`.
pub fn recourse_cost_mutable(
    model: &LinearClassifier,
    v: &[f64],
    p: Lp,
    protected: usize,
    levels: &[i64],
    continuous: &[usize],
) -> Result<f64> {
    check_dim(model, v)?;
    if levels.is_empty() {
        return Err(Error::InvalidScm("empty level set".into()));
    }
    let g = model.decision_unchecked(v);
    let norm = weight_norm(&model.w, continuous, p);
    let a = v[protected];
    let mut best = f64::INFINITY;
    for &level in levels {
        let step = level as f64 - a;
        let ga = g + model.w[protected] * step;
        let dist = if ga == 0.0 {
            0.0
        } else if norm == 0.0 {
            continue;
        } else {
            ga.abs() / norm
        };
        best = best.min(p.norm(&[step, dist]));
    }
    if best.is_finite() {
        Ok(best)
    } else {
        Err(Error::NoRecourse("no level reaches the boundary".into()))
    }
}

/// The minimum-`L_p` displacement `η` (dense, zero off `continuous`) that moves
/// `v` onto the boundary, and the matching hard or additive action.
pub fn optimal_action_linear(
    model: &LinearClassifier,
    scm: &LinearScm,
    v: &[f64],
    p: Lp,
    kind: ActionKind,
) -> Result<(Intervention, Vec<f64>)> {
    let continuous = scm.continuous_indices();
    let r = recourse_cost_immutable(model, v, p, &continuous)?;
    let g = model.decision_unchecked(v);
    let mut eta = vec![0.0; v.len()];
    if g != 0.0 {
        match p.conjugate() {
            // p = 1: move the single coordinate with the largest |w_i|.
            Lp::Infinity => {
                let mut k = continuous[0];
                for &i in &continuous {
                    if model.w[i].abs() > model.w[k].abs() {
                        k = i;
                    }
                }
                eta[k] = -g / model.w[k];
            }
            Lp::Finite(q) => {
                let norm = weight_norm(&model.w, &continuous, p);
                for &i in &continuous {
                    let wi = model.w[i];
                    if wi != 0.0 {
                        let sign = (g * wi).signum();
                        eta[i] = if q == 1.0 {
                            -r * sign
                        } else {
                            -r * wi.abs().powf(q - 1.0) * sign / norm.powf(q - 1.0)
                        };
                    }
                }
            }
        }
    }
    let action = match kind {
        ActionKind::Hard => Intervention::Hard {
            indices: continuous.clone(),
            values: continuous.iter().map(|&i| v[i] + eta[i]).collect(),
        },
        ActionKind::Additive => {
            let delta = scm.s_inv() * nalgebra::DVector::from_column_slice(&eta);
            Intervention::Additive {
                indices: continuous.clone(),
                shifts: continuous.iter().map(|&i| delta[i]).collect(),
            }
        }
    };
    Ok((action, eta))
}

/// `(Σ αᵢ r_{pᵢ}, r_{p_min})` for a weighted cost.
pub fn weighted_cost_bounds(
    model: &LinearClassifier,
    v: &[f64],
    terms: &[(f64, Lp)],
    continuous: &[usize],
) -> Result<(f64, f64)> {
    let mut lower = 0.0;
    let mut smallest: Option<(Lp, f64)> = None;
    for &(alpha, p) in terms {
        let r = recourse_cost_immutable(model, v, p, continuous)?;
        lower += alpha * r;
        if smallest.is_none_or(|(q, _)| p.value() < q.value()) {
            smallest = Some((p, r));
        }
    }
    let upper = smallest.map_or(0.0, |(_, r)| r);
    Ok((lower, upper))
}

/// `w·S_{*,A}`: how much one unit change of the protected variable moves the
/// decision value of every counterfactual.
pub fn twin_shift_weight(model: &LinearClassifier, scm: &LinearScm, protected: usize) -> f64 {
    let col = scm.column(protected);
    model.w.iter().zip(&col).map(|(w, s)| w * s).sum()
}

fn protected_levels(scm: &LinearScm, protected: usize) -> Result<Vec<f64>> {
    Ok(scm
        .variable(protected)
        .levels()
        .ok_or_else(|| Error::NotCategorical(scm.variable(protected).name.clone()))?
        .iter()
        .map(|&l| l as f64)
        .collect())
}

/// Symmetric half-width `max |(a' − a) w·S_{*,A}| / ‖w_X‖_{p*}` of the band
/// around the boundary that contains every counterfactually unfair instance.
pub fn unfair_band_halfwidth(
    model: &LinearClassifier,
    scm: &LinearScm,
    p: Lp,
    protected: usize,
) -> Result<f64> {
    let levels = protected_levels(scm, protected)?;
    let span = levels.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - levels.iter().cloned().fold(f64::INFINITY, f64::min);
    let norm = weight_norm(&model.w, &scm.continuous_indices(), p);
    Ok((span * twin_shift_weight(model, scm, protected)).abs() / norm)
}

/// `v` lies in the unfair area iff some twin, obtained by the linear shift
/// `(a' − a) S_{*,A}`, falls on the other side of the boundary.
pub fn unfair_area_contains(
    model: &LinearClassifier,
    scm: &LinearScm,
    v: &[f64],
    protected: usize,
) -> Result<bool> {
    check_dim(model, v)?;
    let g = model.decision_unchecked(v);
    let c = twin_shift_weight(model, scm, protected);
    let own = g >= 0.0;
    Ok(protected_levels(scm, protected)?
        .into_iter()
        .any(|level| (g + (level - v[protected]) * c >= 0.0) != own))
}

/// Fair recourse under an immutable protected variable requires `w·S_{*,A} = 0`.
pub fn fair_recourse_possible(model: &LinearClassifier, scm: &LinearScm, protected: usize) -> bool {
    twin_shift_weight(model, scm, protected).abs() <= 1e-12
}

/// `‖w_Xᵀ S_X‖_{q*}`: worst decision change per unit of `L_q` perturbation.
fn perturbation_gain(model: &LinearClassifier, scm: &LinearScm, q: Lp) -> f64 {
    let cont = scm.continuous_indices();
    let s_x = scm.restricted(&cont, &cont);
    gain(model, &s_x, &cont, q)
}

fn gain(model: &LinearClassifier, s_x: &DMatrix<f64>, continuous: &[usize], q: Lp) -> f64 {
    let row: Vec<f64> = (0..continuous.len())
        .map(|c| {
            continuous
                .iter()
                .enumerate()
                .map(|(r, &i)| model.w[i] * s_x[(r, c)])
                .sum()
        })
        .collect();
    q.conjugate().norm(&row)
}

/// Extra cost of robustness to an `L_q` perturbation of radius `Δ`:
/// `Δ ‖w_Xᵀ S_X‖_{q*} / ‖w_X‖_{p*}`.
pub fn robust_extra_cost(
    model: &LinearClassifier,
    scm: &LinearScm,
    p: Lp,
    q: Lp,
    delta: f64,
) -> f64 {
    let norm = weight_norm(&model.w, &scm.continuous_indices(), p);
    delta * perturbation_gain(model, scm, q) / norm
}

pub fn robust_recourse_cost(
    model: &LinearClassifier,
    scm: &LinearScm,
    v: &[f64],
    p: Lp,
    q: Lp,
    delta: f64,
) -> Result<f64> {
    Ok(
        recourse_cost_immutable(model, v, p, &scm.continuous_indices())?
            + robust_extra_cost(model, scm, p, q, delta),
    )
}

/// `max_a (|w·v̈_a − b| + Δ ‖w_Xᵀ S_X‖_{q*}) / ‖w_X‖_{p*}`, undefined inside
/// the unfair area.
pub fn afrr_cost(
    model: &LinearClassifier,
    scm: &LinearScm,
    v: &[f64],
    p: Lp,
    q: Lp,
    delta: f64,
    protected: usize,
) -> Result<Afrr<f64>> {
    if unfair_area_contains(model, scm, v, protected)? {
        return Ok(Afrr::CounterfactuallyUnfair);
    }
    let norm = weight_norm(&model.w, &scm.continuous_indices(), p);
    if norm == 0.0 {
        return Err(Error::NoRecourse("continuous weights are all zero".into()));
    }
    let g = model.decision_unchecked(v);
    let c = twin_shift_weight(model, scm, protected);
    let worst = protected_levels(scm, protected)?
        .into_iter()
        .map(|level| (g + (level - v[protected]) * c).abs())
        .fold(0.0, f64::max);
    Ok(Afrr::Defined(
        (worst + delta * perturbation_gain(model, scm, q)) / norm,
    ))
}

/// Plain recourse cost of every twin in level order: zero for favorable twins,
/// else `|g + (a' − a) w·S_{*,A}| / ‖w_X‖_{p*}`. Costs come out bitwise equal
/// when `w·S_{*,A} = 0`.
pub fn twin_costs_linear(
    model: &LinearClassifier,
    scm: &LinearScm,
    v: &[f64],
    p: Lp,
    protected: usize,
) -> Result<Vec<f64>> {
    check_dim(model, v)?;
    let norm = weight_norm(&model.w, &scm.continuous_indices(), p);
    let g = model.decision_unchecked(v);
    let c = twin_shift_weight(model, scm, protected);
    protected_levels(scm, protected)?
        .into_iter()
        .map(|level| {
            let ga = g + (level - v[protected]) * c;
            match (ga >= 0.0, norm == 0.0) {
                (true, _) => Ok(0.0),
                (false, true) => Err(Error::NoRecourse("continuous weights are all zero".into())),
                (false, false) => Ok(ga.abs() / norm),
            }
        })
        .collect()
}

/// `(w, b + Δ ‖w_Xᵀ S‖_{q*})`: recourse against it is robust recourse against
/// the original.
pub fn modified_classifier(
    model: &LinearClassifier,
    delta: f64,
    s_block: &DMatrix<f64>,
    continuous: &[usize],
    q: Lp,
) -> LinearClassifier {
    let mut out = model.clone();
    out.b += delta * gain(model, s_block, continuous, q);
    out
}

/// Linear model, linear SCM and the continuous variables they act on.
#[derive(Debug, Clone, Copy)]
pub struct LinearSetting<'a> {
    pub model: &'a LinearClassifier,
    pub scm: &'a LinearScm,
    pub protected: usize,
}

fn solution(
    scm: &LinearScm,
    v: &[f64],
    target: &LinearClassifier,
    p: Lp,
    kind: ActionKind,
    validity: Validity,
) -> Result<RecourseSolution> {
    if target.decision_unchecked(v) >= 0.0 {
        return Ok(RecourseSolution {
            action: Intervention::empty(),
            counterfactual: Instance::from(v),
            cost: 0.0,
            validity,
            solver: SolverKind::ClosedForm,
        });
    }
    let (action, eta) = optimal_action_linear(target, scm, v, p, kind)?;
    let landing: Vec<f64> = v.iter().zip(&eta).map(|(x, e)| x + e).collect();
    Ok(RecourseSolution {
        action,
        counterfactual: Instance::new(landing),
        cost: p.norm(&eta),
        validity,
        solver: SolverKind::ClosedForm,
    })
}

/// Minimum-cost action onto the boundary (`w·x − b ≥ 0`).
pub fn linear_plain_solution(
    setting: LinearSetting<'_>,
    v: &[f64],
    p: Lp,
    kind: ActionKind,
) -> Result<RecourseSolution> {
    check_dim(setting.model, v)?;
    solution(setting.scm, v, setting.model, p, kind, Validity::Plain)
}

/// Robust recourse: plain recourse against the modified classifier.
pub fn linear_robust_solution(
    setting: LinearSetting<'_>,
    v: &[f64],
    p: Lp,
    q: Lp,
    delta: f64,
) -> Result<RecourseSolution> {
    check_dim(setting.model, v)?;
    let cont = setting.scm.continuous_indices();
    let s_x = setting.scm.restricted(&cont, &cont);
    let target = modified_classifier(setting.model, delta, &s_x, &cont, q);
    solution(
        setting.scm,
        v,
        &target,
        p,
        ActionKind::Additive,
        Validity::Robust { delta },
    )
}

/// AFRR: one additive action robust around every twin. The binding twin is the
/// one with the smallest decision value.
pub fn linear_afrr_solution(
    setting: LinearSetting<'_>,
    v: &[f64],
    p: Lp,
    q: Lp,
    delta: f64,
) -> Result<Afrr<RecourseSolution>> {
    let LinearSetting {
        model,
        scm,
        protected,
    } = setting;
    check_dim(model, v)?;
    if unfair_area_contains(model, scm, v, protected)? {
        return Ok(Afrr::CounterfactuallyUnfair);
    }
    let g = model.decision_unchecked(v);
    let c = twin_shift_weight(model, scm, protected);
    let min_twin = protected_levels(scm, protected)?
        .into_iter()
        .map(|level| g + (level - v[protected]) * c)
        .fold(f64::INFINITY, f64::min);
    let mut target = model.clone();
    target.b += g - min_twin + delta * perturbation_gain(model, scm, q);
    let mut sol = solution(
        scm,
        v,
        &target,
        p,
        ActionKind::Additive,
        Validity::Afrr { delta },
    )?;
    if delta == 0.0 {
        sol.validity = Validity::Faro;
    }
    Ok(Afrr::Defined(sol))
}

/// AFRR for any perturbation over the categorical variables of a linear SCM:
/// every `θ ∈ Θ_Δ` contributes its twin's decision value and residual radius.
pub fn linear_afrr_solution_for(
    setting: LinearSetting<'_>,
    v: &[f64],
    p: Lp,
    spec: &PerturbationSpec,
) -> Result<Afrr<RecourseSolution>> {
    let LinearSetting { model, scm, .. } = setting;
    check_dim(model, v)?;
    let g = model.decision_unchecked(v);
    let own = g >= 0.0;
    let k = perturbation_gain(model, scm, spec.continuous_q);
    let mut need = f64::NEG_INFINITY;
    for theta in spec.levels_in_ball(scm, v)? {
        let mut cf = v.to_vec();
        for (&i, &t) in spec.categorical.iter().zip(&theta) {
            cf = scm.counterfactual_hard(&cf, i, t)?.into_vec();
        }
        let g_theta = model.decision_unchecked(&cf);
        if (g_theta >= 0.0) != own {
            return Ok(Afrr::CounterfactuallyUnfair);
        }
        need = need.max(g - g_theta + spec.residual_radius(&theta, v)? * k);
    }
    let mut target = model.clone();
    target.b += need.max(0.0);
    let validity = if spec.radius == 0.0 {
        Validity::Faro
    } else {
        Validity::Afrr { delta: spec.radius }
    };
    solution(scm, v, &target, p, ActionKind::Additive, validity).map(Afrr::Defined)
}
