//! Browser demo: recourse, counterfactual perturbations and unfair-area
//! geometry for the two-feature SCMs, returned as JSON strings.

use causal_recourse::classifier::LinearClassifier;
use causal_recourse::datasets::scm_by_name;
use causal_recourse::experiment::{solve_single, Mode, ProtectedMetric, SingleQuery};
use causal_recourse::metric::{sample_counterfactual_perturbation, Lp, PerturbationSpec};
use causal_recourse::recourse::{
    fair_recourse_possible, robust_extra_cost, twin_shift_weight, unfair_band_halfwidth, Afrr,
};
use causal_recourse::scm::LinearScm;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Perturbation draws per level; kept small for interactive use.
const DEMO_SAMPLES: usize = 400;

#[derive(Serialize)]
struct TwinView {
    level: i64,
    instance: Vec<f64>,
    cost: Option<f64>,
    /// The twin moved by the same action.
    counterfactual: Vec<f64>,
}

#[derive(Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
enum Explanation {
    Ok {
        cost: f64,
        validity: String,
        solver: String,
        counterfactual: Vec<f64>,
        shifts: Vec<f64>,
        twins: Vec<TwinView>,
        trajectory: Option<Vec<(f64, f64)>>,
    },
    CounterfactuallyUnfair,
    Infeasible {
        reason: String,
    },
}

#[derive(Serialize)]
struct Geometry {
    /// `w·S_{*,A}`; `None` for nonlinear SCMs.
    twin_shift: Option<f64>,
    band_halfwidth: Option<f64>,
    fair_recourse_possible: Option<bool>,
    /// Robust extra cost per unit radius.
    robust_slope: Option<f64>,
}

fn lp(p: f64) -> Result<Lp, String> {
    Lp::new(p).map_err(|e| e.to_string())
}

fn model(weights: &[f64], bias: f64) -> LinearClassifier {
    LinearClassifier::new(weights.to_vec(), bias)
}

/// Recourse for `instance` under `w·v ≥ b`, as JSON.
pub fn explain_json(
    scm: &str,
    weights: &[f64],
    bias: f64,
    instance: &[f64],
    mode: &str,
    delta: f64,
    p: f64,
) -> Result<String, String> {
    let scm = scm_by_name(scm).map_err(|e| e.to_string())?;
    let mut q = SingleQuery::new(scm, model(weights, bias).into(), instance.to_vec());
    q.mode = mode.parse::<Mode>().map_err(|e| e.to_string())?;
    q.delta = delta;
    q.p = lp(p)?;
    q.n_samples = DEMO_SAMPLES;
    let out = match solve_single(&q) {
        Ok(Afrr::Defined(r)) => {
            let twins = r
                .twins
                .iter()
                .map(|t| {
                    let cf = q
                        .scm
                        .counterfactual(&t.instance, &r.solution.action)
                        .map_err(|e| e.to_string())?;
                    Ok(TwinView {
                        level: t.level,
                        instance: t.instance.to_vec(),
                        cost: t.cost,
                        counterfactual: cf.to_vec(),
                    })
                })
                .collect::<Result<_, String>>()?;
            Explanation::Ok {
                cost: r.solution.cost,
                validity: r.solution.validity.to_string(),
                solver: format!("{:?}", r.solution.solver),
                counterfactual: r.solution.counterfactual.to_vec(),
                shifts: r.solution.action.dense(q.scm.len()).1,
                twins,
                trajectory: r.trajectory,
            }
        }
        Ok(Afrr::CounterfactuallyUnfair) => Explanation::CounterfactuallyUnfair,
        Err(
            e @ (causal_recourse::Error::InfeasibleWithinGrid { .. }
            | causal_recourse::Error::NoRecourse(_)
            | causal_recourse::Error::NonConvergent { .. }),
        ) => Explanation::Infeasible {
            reason: e.to_string(),
        },
        Err(e) => return Err(e.to_string()),
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

/// Sampled counterfactual perturbation of `instance`, as a JSON list of points.
pub fn perturbation_json(
    scm: &str,
    instance: &[f64],
    delta: f64,
    protected_metric: &str,
    q: f64,
    n: usize,
    seed: u64,
) -> Result<String, String> {
    let scm = scm_by_name(scm).map_err(|e| e.to_string())?;
    let metric: ProtectedMetric = protected_metric
        .parse()
        .map_err(|e: causal_recourse::Error| e.to_string())?;
    let spec = PerturbationSpec::for_scm(&scm, metric.pseudometric(), lp(q)?, Lp::TWO, delta)
        .map_err(|e| e.to_string())?;
    let points = sample_counterfactual_perturbation(&scm, instance, &spec, n, seed)
        .map_err(|e| e.to_string())?;
    let points: Vec<Vec<f64>> = points.into_iter().map(|p| p.to_vec()).collect();
    serde_json::to_string(&points).map_err(|e| e.to_string())
}

/// Unfair band and robustness slope of a linear classifier, as JSON.
pub fn geometry_json(scm: &str, weights: &[f64], bias: f64, p: f64) -> Result<String, String> {
    let base = scm_by_name(scm).map_err(|e| e.to_string())?;
    let protected = base.protected_index().unwrap_or(0);
    let m = model(weights, bias);
    if m.dim() != base.len() {
        return Err(format!("expected {} weights, got {}", base.len(), m.dim()));
    }
    let p = lp(p)?;
    let g = match LinearScm::new(base) {
        Ok(lin) => Geometry {
            twin_shift: Some(twin_shift_weight(&m, &lin, protected)),
            band_halfwidth: Some(
                unfair_band_halfwidth(&m, &lin, p, protected).map_err(|e| e.to_string())?,
            ),
            fair_recourse_possible: Some(fair_recourse_possible(&m, &lin, protected)),
            robust_slope: Some(robust_extra_cost(&m, &lin, p, Lp::TWO, 1.0)),
        },
        Err(_) => Geometry {
            twin_shift: None,
            band_halfwidth: None,
            fair_recourse_possible: None,
            robust_slope: None,
        },
    };
    serde_json::to_string(&g).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn explain(
    scm: &str,
    weights: &[f64],
    bias: f64,
    instance: &[f64],
    mode: &str,
    delta: f64,
    p: f64,
) -> Result<String, JsError> {
    explain_json(scm, weights, bias, instance, mode, delta, p).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn perturbation(
    scm: &str,
    instance: &[f64],
    delta: f64,
    protected_metric: &str,
    q: f64,
    n: usize,
    seed: u64,
) -> Result<String, JsError> {
    perturbation_json(scm, instance, delta, protected_metric, q, n, seed)
        .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn geometry(scm: &str, weights: &[f64], bias: f64, p: f64) -> Result<String, JsError> {
    geometry_json(scm, weights, bias, p).map_err(|e| JsError::new(&e))
}
