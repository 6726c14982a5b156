use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn recourse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_recourse"))
        .args(args)
        .env_remove("RECOURSE_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn json_line(out: &Output) -> serde_json::Value {
    let stdout = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(stdout.lines().next().expect("one line")).expect("json")
}

#[test]
fn plain_running_example() {
    let out = recourse(&[
        "solve",
        "--scm",
        "lin",
        "--model",
        "linear_aware",
        "--instance",
        "1,3,0",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let v = json_line(&out);
    assert!((v["cost"].as_f64().unwrap() - 8f64.sqrt()).abs() < 1e-9);
    assert_eq!(v["validity"], "plain");
    let twins = v["twins"].as_array().unwrap();
    assert!((twins[0]["cost"].as_f64().unwrap() - 2f64.sqrt()).abs() < 1e-9);
    assert!(String::from_utf8_lossy(&out.stdout).contains("counterfactual"));
}

#[test]
fn faro_trajectory_shrinks_to_worst_twin() {
    let out = recourse(&[
        "solve",
        "--instance",
        "1,3,0",
        "--mode",
        "faro",
        "--delta",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let v = json_line(&out);
    let traj = v["trajectory"].as_array().unwrap();
    assert!((traj[0][1].as_f64().unwrap() - 5.0 / 2f64.sqrt()).abs() < 1e-9);
    assert!((v["cost"].as_f64().unwrap() - 8f64.sqrt()).abs() < 1e-9);
    assert_eq!(v["validity"], "faro");
}

#[test]
fn robust_and_afrr_costs() {
    let v = json_line(&recourse(&[
        "solve",
        "--instance",
        "1,3,0",
        "--mode",
        "robust",
    ]));
    assert!((v["cost"].as_f64().unwrap() - 5.0 / 2f64.sqrt()).abs() < 1e-9);
    let v = json_line(&recourse(&[
        "solve",
        "--instance",
        "1,3,0",
        "--mode",
        "afrr",
    ]));
    assert!((v["cost"].as_f64().unwrap() - 5.0 / 2f64.sqrt()).abs() < 1e-9);
}

#[test]
fn exit_codes() {
    let out = recourse(&["solve", "--instance", "1,3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("expected 3"));
    assert_eq!(
        recourse(&["solve", "--instance", "1,3,0", "--mode", "best"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        recourse(&["solve", "--instance", "1,3,0", "--p", "0.5"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(recourse(&["solve", "--bogus"]).status.code(), Some(2));

    let out = recourse(&["solve", "--instance", "1,0,-0.5", "--mode", "afrr"]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(json_line(&out)["status"], "counterfactually_unfair");

    // A grid of three points cannot reach the boundary.
    let out = recourse(&[
        "solve",
        "--instance",
        "1,3,0",
        "--solver",
        "brute-force",
        "--grid-points",
        "3",
    ]);
    let far = recourse(&[
        "solve",
        "--instance",
        "1,30,0",
        "--solver",
        "brute-force",
        "--grid-points",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(far.status.code(), Some(3));
    assert_eq!(json_line(&far)["status"], "infeasible");
}

#[test]
fn model_file_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fair.toml");
    fs::write(
        &path,
        "kind = \"linear\"\nweights = [1.0, 0.0, 1.0]\nbias = 3.0\n",
    )
    .unwrap();
    let out = recourse(&[
        "solve",
        "--model",
        path.to_str().unwrap(),
        "--instance",
        "1,3,0",
        "--mode",
        "robust",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let v = json_line(&out);
    let twins = v["twins"].as_array().unwrap();
    assert_eq!(twins[0]["cost"], twins[1]["cost"]);
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file() && p.file_name().unwrap() != "timings.csv")
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn simulate_writes_reproducible_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("smoke.toml");
    fs::write(
        &cfg,
        "scms = [\"lin\"]\nlabel_kinds = [\"linear_aware\"]\nclassifiers = [\"glm\"]\n\
         n = 400\nn_samples = 200\ndeltas = [1.0, 0.1]\n",
    )
    .unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let res = recourse(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--output-dir",
            out.to_str().unwrap(),
            "--jobs",
            "1",
        ]);
        assert_eq!(
            res.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&res.stderr)
        );
    }
    let files = read_dir_sorted(&a);
    assert_eq!(files, read_dir_sorted(&b));
    let names: Vec<&str> = files.iter().map(|(n, _)| n.as_str()).collect();
    assert!(names.contains(&"results.csv"));
    assert!(names.contains(&"config_used.toml"));
    assert!(names.contains(&"costs_lin_linear_aware_glm_aware_d1.csv"));
    assert!(names.contains(&"ratios_lin_linear_aware_glm_unaware_d0.1.csv"));
    assert!(a.join("timings.csv").exists());
    assert!(a.join("models/lin_linear_aware_glm_aware.toml").exists());

    let results = fs::read_to_string(a.join("results.csv")).unwrap();
    let mut lines = results.lines();
    assert!(lines
        .next()
        .unwrap()
        .starts_with("scm,label_kind,classifier,feature_subset,delta,sigma_R"));
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        let sigma_fr: f64 = cols[7].parse().unwrap();
        assert!(sigma_fr.abs() <= 1e-9, "{line}");
    }
}

#[test]
fn output_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("smoke.toml");
    fs::write(
        &cfg,
        "scms = [\"lin\"]\nlabel_kinds = [\"linear_unaware\"]\nclassifiers = [\"svm\"]\n\
         feature_subsets = [\"unaware\"]\nn = 200\nn_samples = 100\ndeltas = [0.5]\n",
    )
    .unwrap();
    let out = dir.path().join("env_out");
    let res = Command::new(env!("CARGO_BIN_EXE_recourse"))
        .args(["simulate", "--config", cfg.to_str().unwrap()])
        .env("RECOURSE_OUTPUT_DIR", &out)
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(0));
    assert!(out.join("results.csv").exists());
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "deltas = [0.1, 1.0]\n").unwrap();
    let res = recourse(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn generate_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lin.csv");
    let res = recourse(&[
        "generate",
        "--scm",
        "lin",
        "--n",
        "50",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(0));
    let text = fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), "a,x1,x2,y,split");
    assert_eq!(text.lines().count(), 51);
}
