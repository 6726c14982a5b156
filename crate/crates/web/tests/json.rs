use causal_recourse_web::{explain_json, geometry_json, perturbation_json};
use serde_json::Value;

const W: [f64; 3] = [-1.0, -1.0, -1.0];

fn parse(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

#[test]
fn explain_running_example() {
    let v = parse(&explain_json("lin", &W, 0.0, &[1.0, 3.0, 0.0], "plain", 1.0, 2.0).unwrap());
    assert_eq!(v["status"], "ok");
    assert!((v["cost"].as_f64().unwrap() - 8f64.sqrt()).abs() < 1e-9);
    let twins = v["twins"].as_array().unwrap();
    assert_eq!(twins.len(), 2);
    // The twin at a=0 moved by the same action lands past the boundary.
    let cf: Vec<f64> = serde_json::from_value(twins[0]["counterfactual"].clone()).unwrap();
    assert!(-cf.iter().sum::<f64>() >= 0.0);

    let v = parse(&explain_json("lin", &W, 0.0, &[1.0, 3.0, 0.0], "faro", 1.0, 2.0).unwrap());
    assert!((v["cost"].as_f64().unwrap() - 8f64.sqrt()).abs() < 1e-9);
}

#[test]
fn explain_reports_unfair_and_errors() {
    let v = parse(&explain_json("lin", &W, 0.0, &[1.0, 0.0, -0.5], "afrr", 1.0, 2.0).unwrap());
    assert_eq!(v["status"], "counterfactually_unfair");
    assert!(explain_json("lin", &W, 0.0, &[1.0, 3.0], "plain", 1.0, 2.0).is_err());
    assert!(explain_json("lin", &W, 0.0, &[1.0, 3.0, 0.0], "nope", 1.0, 2.0).is_err());
}

#[test]
fn explain_nonlinear_scm_uses_the_grid() {
    let v = parse(&explain_json("anm", &W, 0.0, &[1.0, 1.0, 0.5], "plain", 1.0, 2.0).unwrap());
    assert_eq!(v["status"], "ok");
    assert_eq!(v["solver"], "BruteForce");
}

#[test]
fn perturbation_points_cover_both_twins() {
    let pts: Vec<Vec<f64>> = serde_json::from_str(
        &perturbation_json("lin", &[1.0, 3.0, 0.0], 0.5, "zero", 2.0, 100, 1).unwrap(),
    )
    .unwrap();
    assert!(pts.iter().any(|p| p[0] == 0.0));
    assert!(pts.iter().any(|p| p[0] == 1.0));
    let pts: Vec<Vec<f64>> = serde_json::from_str(
        &perturbation_json("lin", &[1.0, 3.0, 0.0], 0.5, "discrete", 2.0, 100, 1).unwrap(),
    )
    .unwrap();
    assert!(pts.iter().all(|p| p[0] == 1.0));
}

#[test]
fn geometry_of_running_example() {
    let g = parse(&geometry_json("lin", &W, 0.0, 2.0).unwrap());
    assert!((g["twin_shift"].as_f64().unwrap() + 2.0).abs() < 1e-12);
    assert!((g["band_halfwidth"].as_f64().unwrap() - 2f64.sqrt()).abs() < 1e-12);
    assert_eq!(g["fair_recourse_possible"], false);
    let g = parse(&geometry_json("lin", &[1.0, 0.0, 1.0], 0.0, 2.0).unwrap());
    assert_eq!(g["fair_recourse_possible"], true);
    let g = parse(&geometry_json("anm", &W, 0.0, 2.0).unwrap());
    assert!(g["band_halfwidth"].is_null());
}
