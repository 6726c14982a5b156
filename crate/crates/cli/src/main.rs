use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use causal_recourse::classifier::{ClassifierModel, LabelKind, LinearClassifier};
use causal_recourse::datasets::{generate_dataset, scm_by_name, write_csv, LabelRule};
use causal_recourse::experiment::{
    run_case_study_loan, run_simulation, solve_single, ExperimentConfig, Mode, ProtectedMetric,
    SingleQuery, SingleReport, OUTPUT_DIR_ENV,
};
use causal_recourse::metric::Lp;
use causal_recourse::recourse::{Afrr, SolverChoice};
use causal_recourse::Error;
use clap::{Parser, Subcommand};

const EXIT_USAGE: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;
const EXIT_UNFAIR: u8 = 4;

#[derive(Parser)]
#[command(name = "recourse", version, about = "Causal algorithmic recourse")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Recourse for one instance.
    Solve(SolveArgs),
    /// Run the simulation matrix.
    Simulate(RunArgs),
    /// Run the loan case study.
    CaseStudy(RunArgs),
    /// Sample a labelled dataset to CSV.
    Generate(GenerateArgs),
}

#[derive(clap::Args)]
struct SolveArgs {
    /// Built-in SCM: lin, anm or loan.
    #[arg(long, default_value = "lin")]
    scm: String,
    /// `linear_aware`, `linear_unaware`, or a path to a model TOML file.
    #[arg(long, default_value = "linear_aware")]
    model: String,
    /// Comma-separated values, protected variable first.
    #[arg(long, allow_hyphen_values = true)]
    instance: String,
    #[arg(long, default_value = "plain")]
    mode: String,
    #[arg(long, default_value_t = 1.0)]
    delta: f64,
    /// Cost norm; `inf` for the max norm.
    #[arg(long, default_value = "2", value_parser = parse_lp)]
    p: Lp,
    /// Perturbation norm.
    #[arg(long, default_value = "2", value_parser = parse_lp)]
    q: Lp,
    /// auto, closed-form or brute-force.
    #[arg(long, default_value = "auto")]
    solver: String,
    /// zero or discrete.
    #[arg(long, default_value = "zero")]
    protected_metric: String,
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 201)]
    grid_points: usize,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Experiment TOML; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = OUTPUT_DIR_ENV)]
    output_dir: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(clap::Args)]
struct GenerateArgs {
    #[arg(long, default_value = "lin")]
    scm: String,
    /// Ground-truth label kind; ignored for loan.
    #[arg(long, default_value = "linear_aware")]
    labels: String,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_lp(s: &str) -> Result<Lp, String> {
    let p: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    Lp::new(p).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Solve(args) => return solve(args),
        Command::Simulate(args) => simulate(args, false),
        Command::CaseStudy(args) => simulate(args, true),
        Command::Generate(args) => generate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = matches!(
                e.downcast_ref::<Error>(),
                Some(Error::Config(_) | Error::Unknown { .. } | Error::DimensionMismatch { .. })
            );
            ExitCode::from(if usage { EXIT_USAGE } else { 1 })
        }
    }
}

fn load_model(spec: &str) -> Result<ClassifierModel, Error> {
    if let Ok(kind) = spec.parse::<LabelKind>() {
        return kind
            .as_linear()
            .map(Into::into)
            .ok_or_else(|| Error::Unknown {
                kind: "built-in model",
                name: spec.to_string(),
            });
    }
    let text = fs::read_to_string(spec).map_err(|_| Error::Unknown {
        kind: "model",
        name: spec.to_string(),
    })?;
    Ok(LinearClassifier::from_toml(&text)?.into())
}

fn parse_instance(s: &str, expected: usize) -> Result<Vec<f64>, String> {
    let values = s
        .split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| format!("`{x}` is not a number"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if values.len() != expected {
        return Err(format!(
            "--instance has {} values, expected {expected}",
            values.len()
        ));
    }
    Ok(values)
}

fn build_query(args: &SolveArgs) -> Result<SingleQuery, String> {
    let scm = scm_by_name(&args.scm).map_err(|e| e.to_string())?;
    let model = load_model(&args.model).map_err(|e| e.to_string())?;
    let instance = parse_instance(&args.instance, scm.len())?;
    let mut q = SingleQuery::new(scm, model, instance);
    q.mode = args.mode.parse::<Mode>().map_err(|e| e.to_string())?;
    q.delta = args.delta;
    q.p = args.p;
    q.q = args.q;
    q.solver = args
        .solver
        .parse::<SolverChoice>()
        .map_err(|e| e.to_string())?;
    q.protected_metric = args
        .protected_metric
        .parse::<ProtectedMetric>()
        .map_err(|e| e.to_string())?;
    q.n_samples = args.samples;
    q.seed = args.seed;
    q.grid_points = args.grid_points;
    Ok(q)
}

fn solve(args: SolveArgs) -> ExitCode {
    let query = match build_query(&args) {
        Ok(q) => q,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match solve_single(&query) {
        Ok(Afrr::Defined(report)) => {
            print_report(&query, &report);
            ExitCode::SUCCESS
        }
        Ok(Afrr::CounterfactuallyUnfair) => {
            println!(
                "{}",
                serde_json::json!({ "mode": query.mode, "status": "counterfactually_unfair" })
            );
            eprintln!(
                "AFRR is undefined: the instance and one of its twins are labelled differently"
            );
            ExitCode::from(EXIT_UNFAIR)
        }
        Err(
            e @ (Error::InfeasibleWithinGrid { .. }
            | Error::NoRecourse(_)
            | Error::NonConvergent { .. }),
        ) => {
            println!(
                "{}",
                serde_json::json!({ "mode": query.mode, "status": "infeasible", "reason": e.to_string() })
            );
            eprintln!("error: {e}");
            ExitCode::from(EXIT_INFEASIBLE)
        }
        Err(e) => {
            eprintln!("error: {e}");
            let usage = matches!(
                e,
                Error::DimensionMismatch { .. }
                    | Error::InvalidLevel { .. }
                    | Error::Config(_)
                    | Error::UnsupportedNorm(_)
            );
            ExitCode::from(if usage { EXIT_USAGE } else { 1 })
        }
    }
}

fn print_report(query: &SingleQuery, report: &SingleReport) {
    let n = query.scm.len();
    let line = serde_json::json!({
        "mode": report.mode,
        "status": "ok",
        "cost": report.solution.cost,
        "validity": report.solution.validity.to_string(),
        "solver": report.solution.solver,
        "action": report.solution.action,
        "counterfactual": report.solution.counterfactual,
        "twins": report.twins,
        "trajectory": report.trajectory,
    });
    println!("{line}");

    let names: Vec<&str> = query
        .scm
        .variables()
        .iter()
        .map(|v| v.name.as_str())
        .collect();
    let fmt_vec = |x: &[f64]| {
        names
            .iter()
            .zip(x)
            .map(|(name, v)| format!("{name}={v:.4}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    println!();
    println!("instance        {}", fmt_vec(&query.instance));
    let (hard, shift) = report.solution.action.dense(n);
    let mut parts = Vec::new();
    for i in 0..n {
        if let Some(h) = hard[i] {
            parts.push(format!("{} := {h:.4}", names[i]));
        }
        if shift[i] != 0.0 {
            parts.push(format!("{} += {:.4}", names[i], shift[i]));
        }
    }
    println!(
        "action          {}",
        if parts.is_empty() {
            "none".to_string()
        } else {
            parts.join(", ")
        }
    );
    println!(
        "counterfactual  {}",
        fmt_vec(&report.solution.counterfactual)
    );
    println!("cost            {:.4}", report.solution.cost);
    println!("validity        {}", report.solution.validity);
    for t in &report.twins {
        let cost = t
            .cost
            .map_or_else(|| "infeasible".to_string(), |c| format!("{c:.4}"));
        println!(
            "twin {}={:<8} cost {}",
            names[query.scm.protected_index().unwrap_or(0)],
            t.level,
            cost
        );
    }
    if let Some(traj) = &report.trajectory {
        for (d, c) in traj {
            println!("  delta {d:<8} cost {c:.4}");
        }
    }
}

fn simulate(args: RunArgs, case_study: bool) -> anyhow::Result<()> {
    let mut cfg = match &args.config {
        Some(path) => {
            ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if args.output_dir.is_some() {
        cfg.output_dir = args.output_dir;
    }
    if let Some(jobs) = args.jobs {
        cfg.jobs = jobs;
    }
    let out = if case_study {
        run_case_study_loan(&cfg)?
    } else {
        run_simulation(&cfg)?
    };
    println!(
        "{:<6} {:<18} {:<10} {:<8} {:>6} {:>8} {:>8} {:>8} {:>5} {:>6} {:>6}",
        "scm",
        "labels",
        "model",
        "subset",
        "delta",
        "sigma_R",
        "sigma_AR",
        "sigma_FR",
        "n",
        "unfair",
        "infeas"
    );
    for r in out.rows() {
        println!(
            "{:<6} {:<18} {:<10} {:<8} {:>6} {:>8.4} {:>8.4} {:>8.4} {:>5} {:>6} {:>6}",
            r.scm,
            r.label_kind,
            r.classifier,
            r.feature_subset,
            r.delta,
            r.sigma_r,
            r.sigma_ar,
            r.sigma_fr,
            r.n_instances,
            r.n_excluded_unfair,
            r.n_infeasible
        );
    }
    if let Some(dir) = &cfg.output_dir {
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn generate(args: GenerateArgs) -> anyhow::Result<()> {
    let scm = scm_by_name(&args.scm)?;
    let rule = if args.scm == "loan" {
        LabelRule::LoanBernoulli
    } else {
        LabelRule::GroundTruth(args.labels.parse()?)
    };
    let data = generate_dataset(&scm, args.n, rule, args.seed)?;
    write_csv(&args.out, &data).with_context(|| format!("writing {}", args.out.display()))?;
    println!("wrote {} rows to {}", data.len(), args.out.display());
    Ok(())
}
