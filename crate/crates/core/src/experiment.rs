//! Simulation harness: train classifiers on the built-in SCMs, solve plain,
//! robust and fair robust recourse for every negatively classified test
//! instance and its twins, and aggregate the twin-gap metrics per cell.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{
    train_model, ClassifierModel, FeatureSubset, Label, LabelKind, LinearClassifier, ModelKind,
    TrainConfig,
};
use crate::datasets::{column_std, generate_dataset, scm_by_name, Dataset, LabelRule, Split};
use crate::fairness::{cost_ratio_distribution, sigma_relative, CostKind, OrbitCosts};
use crate::metric::{perturbation_draws, Lp, PerturbationDraw, PerturbationSpec, Pseudometric};
use crate::recourse::{
    center_anchor, fair_recourse_possible, faro_linear, linear_afrr_solution_for,
    linear_plain_solution, linear_robust_solution, solve_afrr, solve_bruteforce, solve_faro,
    ActionKind, Afrr, CostSpec, GridSpec, LinearSetting, Prepared, RecourseProblem,
    RecourseSolution, SolverChoice, Validity, DEFAULT_DELTAS,
};
use crate::scm::{Instance, LinearScm, StructuralCausalModel, Twin};
use crate::{Error, Result};

/// Environment variable the CLI reads for the default output directory.
pub const OUTPUT_DIR_ENV: &str = "RECOURSE_OUTPUT_DIR";

/// Samples drawn to size the action grid when no training data is at hand.
const GRID_STD_SAMPLES: usize = 10_000;

/// Twin decision values closer than this count as equal.
const DECISION_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtectedMetric {
    /// Every level pair at distance 0: the protected variable is protected.
    Zero,
    /// Distance 1 between distinct levels.
    Discrete,
}

impl ProtectedMetric {
    pub fn pseudometric(self) -> Pseudometric {
        match self {
            ProtectedMetric::Zero => Pseudometric::Zero,
            ProtectedMetric::Discrete => Pseudometric::Discrete,
        }
    }
}

impl FromStr for ProtectedMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(ProtectedMetric::Zero),
            "discrete" => Ok(ProtectedMetric::Discrete),
            other => Err(Error::Unknown {
                kind: "protected metric",
                name: other.to_string(),
            }),
        }
    }
}

/// Experiment configuration, read from a flat TOML file. Every key is
/// optional; missing keys take the values of [`ExperimentConfig::default`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Built-in SCM names: `lin`, `anm`, `loan`.
    pub scms: Vec<String>,
    /// Ground-truth label kinds for `lin` and `anm`; `loan` always uses its
    /// Bernoulli labels.
    pub label_kinds: Vec<String>,
    /// `glm`, `svm`, or `model:<path>` for a fixed linear model in TOML.
    pub classifiers: Vec<String>,
    /// `aware` and/or `unaware`; ignored for fixed models.
    pub feature_subsets: Vec<String>,
    pub deltas: Vec<f64>,
    /// Cost norm.
    pub p: Lp,
    /// Norm of the continuous perturbation block.
    pub q: Lp,
    /// Norm combining the per-block distances.
    pub product_norm: Lp,
    pub protected_metric: ProtectedMetric,
    pub n: usize,
    /// Perturbation draws per categorical level.
    pub n_samples: usize,
    pub seed: u64,
    pub grid_points: usize,
    /// Grid half-width in training standard deviations.
    pub grid_sigmas: f64,
    pub max_grid_candidates: usize,
    pub solver: SolverChoice,
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    /// Solve at most this many negatives per cell.
    pub max_instances: Option<usize>,
    pub output_dir: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scms: vec!["lin".into(), "anm".into()],
            label_kinds: LabelKind::ALL
                .iter()
                .map(|k| k.name().to_string())
                .collect(),
            classifiers: vec!["glm".into(), "svm".into()],
            feature_subsets: vec!["aware".into(), "unaware".into()],
            deltas: vec![1.0, 0.5, 0.1],
            p: Lp::TWO,
            q: Lp::TWO,
            product_norm: Lp::TWO,
            protected_metric: ProtectedMetric::Zero,
            n: 2000,
            n_samples: 2000,
            seed: 0,
            grid_points: 201,
            grid_sigmas: 5.0,
            max_grid_candidates: 100_000,
            solver: SolverChoice::Auto,
            learning_rate: 0.1,
            epochs: 500,
            l2: 1e-4,
            max_instances: None,
            output_dir: None,
            jobs: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Check every field before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.plan()?;
        if self.deltas.is_empty() || self.deltas.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
            return Err(Error::Config("deltas must be positive".into()));
        }
        if self.deltas.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config("deltas must be strictly descending".into()));
        }
        if self.n_samples < 100 {
            return Err(Error::Config(format!("n_samples {} < 100", self.n_samples)));
        }
        if self.n < 10 {
            return Err(Error::Config(format!("n {} < 10", self.n)));
        }
        if self.grid_points < 3 || !(self.grid_sigmas > 0.0) || self.max_grid_candidates < 3 {
            return Err(Error::Config(
                "grid must have at least 3 points and positive width".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || self.epochs == 0 || !(self.l2 >= 0.0) {
            return Err(Error::Config("invalid training hyperparameters".into()));
        }
        if self.max_instances == Some(0) {
            return Err(Error::Config("max_instances must be positive".into()));
        }
        Ok(())
    }

    fn train_config(&self, features: FeatureSubset, protected: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            l2: self.l2,
            seed: self.seed,
            features,
            protected,
        }
    }

    fn plan(&self) -> Result<Vec<ScmPlan>> {
        if self.scms.is_empty() || self.classifiers.is_empty() {
            return Err(Error::Config("no SCMs or classifiers configured".into()));
        }
        let kinds = self
            .label_kinds
            .iter()
            .map(|k| k.parse())
            .collect::<Result<Vec<LabelKind>>>()?;
        let subsets = self
            .feature_subsets
            .iter()
            .map(|s| parse_subset(s))
            .collect::<Result<Vec<_>>>()?;
        let classifiers = self
            .classifiers
            .iter()
            .map(|c| ClassifierSpec::parse(c))
            .collect::<Result<Vec<_>>>()?;
        if subsets.is_empty()
            && classifiers
                .iter()
                .any(|c| matches!(c, ClassifierSpec::Train(_)))
        {
            return Err(Error::Config("no feature subsets configured".into()));
        }
        let mut plans = Vec::new();
        for name in &self.scms {
            let scm = scm_by_name(name)?;
            let protected = scm
                .protected_index()
                .ok_or_else(|| Error::InvalidScm(format!("`{name}` has no protected variable")))?;
            let rules = if name == "loan" {
                vec![LabelRule::LoanBernoulli]
            } else {
                if kinds.is_empty() {
                    return Err(Error::Config("no label kinds configured".into()));
                }
                kinds.iter().map(|&k| LabelRule::GroundTruth(k)).collect()
            };
            for c in &classifiers {
                if let ClassifierSpec::Fixed { model, .. } = c {
                    if model.dim() != scm.len() {
                        return Err(Error::DimensionMismatch {
                            expected: scm.len(),
                            got: model.dim(),
                        });
                    }
                }
            }
            plans.push(ScmPlan {
                name: name.clone(),
                scm,
                protected,
                rules,
                classifiers: classifiers.clone(),
                subsets: subsets.clone(),
            });
        }
        Ok(plans)
    }
}

fn parse_subset(s: &str) -> Result<FeatureSubset> {
    match s {
        "aware" | "all" => Ok(FeatureSubset::All),
        "unaware" | "non_protected" => Ok(FeatureSubset::NonProtected),
        other => Err(Error::Unknown {
            kind: "feature subset",
            name: other.to_string(),
        }),
    }
}

#[derive(Debug, Clone)]
enum ClassifierSpec {
    Train(ModelKind),
    Fixed {
        name: String,
        model: LinearClassifier,
    },
}

impl ClassifierSpec {
    fn parse(s: &str) -> Result<Self> {
        match s.strip_prefix("model:") {
            Some(path) => {
                let path = Path::new(path);
                let model = LinearClassifier::from_toml(&fs::read_to_string(path)?)?;
                let name = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("model")
                    .to_string();
                Ok(ClassifierSpec::Fixed { name, model })
            }
            None => Ok(ClassifierSpec::Train(s.parse()?)),
        }
    }
}

struct ScmPlan {
    name: String,
    scm: StructuralCausalModel,
    protected: usize,
    rules: Vec<LabelRule>,
    classifiers: Vec<ClassifierSpec>,
    subsets: Vec<FeatureSubset>,
}

/// One line of `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub scm: String,
    pub label_kind: String,
    pub classifier: String,
    pub feature_subset: String,
    pub delta: f64,
    pub sigma_r: f64,
    pub sigma_ar: f64,
    pub sigma_fr: f64,
    pub n_instances: usize,
    pub n_excluded_unfair: usize,
    pub n_infeasible: usize,
    /// Every evaluated twin pair has equal decision values.
    pub fair_recourse_possible: bool,
    /// Seconds spent on the classifier this row belongs to, all radii included.
    pub wall_time: f64,
}

impl ResultRow {
    pub fn cell_name(&self) -> String {
        format!(
            "{}_{}_{}_{}_d{}",
            self.scm, self.label_kind, self.classifier, self.feature_subset, self.delta
        )
    }
}

/// Costs of one orbit member in one cell. `None` where no valid action was found.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub instance: usize,
    pub twin_level: i64,
    pub r: Option<f64>,
    pub r_robust: Option<f64>,
    /// Fair robust cost at the cell's radius.
    pub r_faro: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub instance: usize,
    pub ratio: f64,
    pub kind: CostKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellOutput {
    pub row: ResultRow,
    pub costs: Vec<CostRow>,
    pub ratios: Vec<RatioRow>,
}

/// Trained or fixed model for one (SCM, labels, classifier, subset) group.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelRecord {
    pub scm: String,
    pub label_kind: String,
    pub classifier: String,
    pub feature_subset: String,
    pub model: LinearClassifier,
    pub test_accuracy: f64,
    pub n_negative: usize,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationOutput {
    pub cells: Vec<CellOutput>,
    pub models: Vec<ModelRecord>,
}

impl SimulationOutput {
    pub fn rows(&self) -> impl Iterator<Item = &ResultRow> {
        self.cells.iter().map(|c| &c.row)
    }
}

/// Run every configured cell and, when `output_dir` is set, write
/// `results.csv`, `timings.csv`, `costs_<cell>.csv`, `ratios_<cell>.csv`,
/// `config_used.toml` and `models/*.toml`.
pub fn run_simulation(cfg: &ExperimentConfig) -> Result<SimulationOutput> {
    cfg.validate()?;
    let out = with_pool(cfg.jobs, || simulate(cfg))??;
    if let Some(dir) = &cfg.output_dir {
        write_outputs(dir, cfg, &out)?;
    }
    Ok(out)
}

/// The loan case study: the simulation pipeline on the loan SCM alone.
pub fn run_case_study_loan(cfg: &ExperimentConfig) -> Result<SimulationOutput> {
    let mut cfg = cfg.clone();
    cfg.scms = vec!["loan".into()];
    run_simulation(&cfg)
}

#[cfg(feature = "parallel")]
fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    Ok(pool.install(f))
}

#[cfg(not(feature = "parallel"))]
fn with_pool<T: Send>(_jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    Ok(f())
}

fn simulate(cfg: &ExperimentConfig) -> Result<SimulationOutput> {
    let mut cells = Vec::new();
    let mut models = Vec::new();
    for plan in cfg.plan()? {
        for &rule in &plan.rules {
            let data = generate_dataset(&plan.scm, cfg.n, rule, cfg.seed)?;
            let label = rule.to_string();
            for c in &plan.classifiers {
                let variants: Vec<(String, String, Option<FeatureSubset>)> = match c {
                    ClassifierSpec::Train(kind) => plan
                        .subsets
                        .iter()
                        .map(|s| (kind.name().to_string(), s.name().to_string(), Some(*s)))
                        .collect(),
                    ClassifierSpec::Fixed { name, .. } => {
                        vec![(name.clone(), "fixed".to_string(), None)]
                    }
                };
                for (clf_name, subset_name, subset) in variants {
                    let start = Instant::now();
                    let linear = match (c, subset) {
                        (ClassifierSpec::Train(kind), Some(s)) => {
                            let (x, y) = data.part(Split::Train);
                            train_model(*kind, &x, &y, &cfg.train_config(s, plan.protected))?.0
                        }
                        (ClassifierSpec::Fixed { model, .. }, _) => model.clone(),
                        (ClassifierSpec::Train(_), None) => unreachable!(),
                    };
                    let model = ClassifierModel::Linear(linear.clone());
                    let group = Group {
                        cfg,
                        scm: &plan.scm,
                        protected: plan.protected,
                        model: &model,
                        data: &data,
                    };
                    let (group_cells, accuracy, n_negative) = group.run()?;
                    let wall_time = start.elapsed().as_secs_f64();
                    for (delta, cell) in cfg.deltas.iter().zip(group_cells) {
                        let row = ResultRow {
                            scm: plan.name.clone(),
                            label_kind: label.clone(),
                            classifier: clf_name.clone(),
                            feature_subset: subset_name.clone(),
                            delta: *delta,
                            wall_time,
                            ..cell.row
                        };
                        cells.push(CellOutput { row, ..cell });
                    }
                    models.push(ModelRecord {
                        scm: plan.name.clone(),
                        label_kind: label.clone(),
                        classifier: clf_name,
                        feature_subset: subset_name,
                        model: linear,
                        test_accuracy: accuracy,
                        n_negative,
                        wall_time,
                    });
                }
            }
        }
    }
    Ok(SimulationOutput { cells, models })
}

/// Per-instance costs: one entry per orbit member, and per radius for the
/// robust variants.
#[derive(Debug, Clone)]
struct Outcome {
    index: usize,
    unfair: bool,
    /// Largest `|h(v̈) − h(v)|` decision-value gap over the orbit.
    decision_gap: f64,
    levels: Vec<i64>,
    own: usize,
    plain: Vec<Option<f64>>,
    robust: Vec<Vec<Option<f64>>>,
    fair: Vec<Vec<Option<f64>>>,
}

/// How a group's recourse problems are solved.
enum Engine {
    Closed(LinearScm),
    Grid(GridSpec),
}

struct Group<'a> {
    cfg: &'a ExperimentConfig,
    scm: &'a StructuralCausalModel,
    protected: usize,
    model: &'a ClassifierModel,
    data: &'a Dataset,
}

impl Group<'_> {
    /// Cells per radius, test accuracy and the number of negatives.
    fn run(&self) -> Result<(Vec<CellOutput>, f64, usize)> {
        let cfg = self.cfg;
        let offset = self
            .data
            .split
            .iter()
            .filter(|s| **s == Split::Train)
            .count();
        let (x, y) = self.data.part(Split::Test);
        let predicted: Vec<Label> = x
            .iter()
            .map(|v| self.model.predict(v))
            .collect::<Result<_>>()?;
        let accuracy =
            predicted.iter().zip(&y).filter(|(p, t)| p == t).count() as f64 / x.len().max(1) as f64;
        let mut negatives: Vec<(usize, &Instance)> = x
            .iter()
            .enumerate()
            .filter(|(i, _)| predicted[*i] == Label::Unfavorable)
            .map(|(i, v)| (offset + i, v))
            .collect();
        let n_negative = negatives.len();
        if let Some(k) = cfg.max_instances {
            negatives.truncate(k);
        }

        let engine = choose_engine(
            cfg.solver,
            self.scm,
            self.model,
            || {
                let (train, _) = self.data.part(Split::Train);
                column_std(&train)
            },
            cfg,
        )?;
        let outcomes = map_instances(&negatives, |&(index, v)| self.outcome(&engine, index, v))?;

        let all_fair = match (&engine, self.model.as_linear()) {
            (Engine::Closed(lin), Some(m)) => fair_recourse_possible(m, lin, self.protected),
            _ => outcomes.iter().all(|o| o.decision_gap <= DECISION_TOL),
        };
        let cells = (0..cfg.deltas.len())
            .map(|d| aggregate(&outcomes, d, all_fair))
            .collect();
        Ok((cells, accuracy, n_negative))
    }

    fn outcome(&self, engine: &Engine, index: usize, v: &[f64]) -> Result<Outcome> {
        let cfg = self.cfg;
        let twins = self.scm.twins(v, self.protected)?;
        let own_level = v[self.protected].round() as i64;
        let own = twins
            .iter()
            .position(|t| t.level == own_level)
            .ok_or_else(|| Error::InvalidLevel {
                variable: self.scm.variable(self.protected).name.clone(),
                value: v[self.protected],
            })?;
        let g = self.model.decision_unchecked(v);
        let decision_gap = twins
            .iter()
            .map(|t| (self.model.decision_unchecked(&t.instance) - g).abs())
            .fold(0.0, f64::max);
        let unfair = twins
            .iter()
            .any(|t| self.model.is_favorable_unchecked(&t.instance) != (g >= 0.0));
        let mut out = Outcome {
            index,
            unfair,
            decision_gap,
            levels: twins.iter().map(|t| t.level).collect(),
            own,
            plain: Vec::new(),
            robust: Vec::new(),
            fair: Vec::new(),
        };
        if unfair {
            return Ok(out);
        }
        let seed = cfg.seed.wrapping_add(index as u64);
        let specs = cfg
            .deltas
            .iter()
            .map(|&d| {
                PerturbationSpec::for_scm(
                    self.scm,
                    cfg.protected_metric.pseudometric(),
                    cfg.q,
                    cfg.product_norm,
                    d,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let (plain, robust, fair) = match engine {
            Engine::Closed(lin) => self.closed_orbit(lin, &twins, own, &specs)?,
            Engine::Grid(grid) => self.grid_orbit(grid, &twins, own, &specs, seed)?,
        };
        out.plain = plain;
        out.robust = robust;
        out.fair = fair;
        Ok(out)
    }

    /// Members whose fair robust problem is solved; the rest share the first
    /// member's cost. With a zero protected metric every twin has the same
    /// counterfactual perturbation, so one solve covers the orbit.
    fn fair_sources(&self, twins: &[Twin], own: usize) -> Vec<usize> {
        match self.cfg.protected_metric {
            ProtectedMetric::Zero => vec![own],
            ProtectedMetric::Discrete => (0..twins.len()).collect(),
        }
    }

    fn spread(&self, twins: &[Twin], solved: Vec<Option<f64>>) -> Vec<Option<f64>> {
        match self.cfg.protected_metric {
            ProtectedMetric::Zero => vec![solved[0]; twins.len()],
            ProtectedMetric::Discrete => solved,
        }
    }

    #[allow(clippy::type_complexity)]
    fn closed_orbit(
        &self,
        lin: &LinearScm,
        twins: &[Twin],
        own: usize,
        specs: &[PerturbationSpec],
    ) -> Result<(
        Vec<Option<f64>>,
        Vec<Vec<Option<f64>>>,
        Vec<Vec<Option<f64>>>,
    )> {
        let cfg = self.cfg;
        let model = self
            .model
            .as_linear()
            .ok_or_else(|| Error::Config("closed forms need a linear model".into()))?;
        let setting = LinearSetting {
            model,
            scm: lin,
            protected: self.protected,
        };
        let plain = twins
            .iter()
            .map(|t| {
                feasible(linear_plain_solution(
                    setting,
                    &t.instance,
                    cfg.p,
                    ActionKind::Additive,
                ))
                .map(|s| s.map(|s| s.cost))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut robust = Vec::with_capacity(specs.len());
        let mut fair = Vec::with_capacity(specs.len());
        for spec in specs {
            robust.push(
                twins
                    .iter()
                    .map(|t| {
                        feasible(linear_robust_solution(
                            setting,
                            &t.instance,
                            cfg.p,
                            spec.continuous_q,
                            spec.radius,
                        ))
                        .map(|s| s.map(|s| s.cost))
                    })
                    .collect::<Result<Vec<_>>>()?,
            );
            let solved = self
                .fair_sources(twins, own)
                .into_iter()
                .map(|k| {
                    feasible(linear_afrr_solution_for(
                        setting,
                        &twins[k].instance,
                        cfg.p,
                        spec,
                    ))
                    .map(|s| s.and_then(Afrr::defined).map(|s| s.cost))
                })
                .collect::<Result<Vec<_>>>()?;
            fair.push(self.spread(twins, solved));
        }
        Ok((plain, robust, fair))
    }

    #[allow(clippy::type_complexity)]
    fn grid_orbit(
        &self,
        grid: &GridSpec,
        twins: &[Twin],
        own: usize,
        specs: &[PerturbationSpec],
        seed: u64,
    ) -> Result<(
        Vec<Option<f64>>,
        Vec<Vec<Option<f64>>>,
        Vec<Vec<Option<f64>>>,
    )> {
        let cfg = self.cfg;
        let n = self.scm.len();
        let problem = RecourseProblem::new(self.scm, self.model, CostSpec::lp(cfg.p))
            .with_samples(cfg.n_samples, seed);
        let acp: Vec<PerturbationSpec> = specs
            .iter()
            .map(|s| PerturbationSpec::acp(self.scm, s.continuous_q, s.radius))
            .collect::<Result<_>>()?;

        // The robust feasible set shrinks from the plain one, so the plain
        // solution's rank is a valid start for every robust search.
        let mut plain = Vec::with_capacity(twins.len());
        let mut robust = vec![Vec::with_capacity(twins.len()); specs.len()];
        for t in twins {
            let prepared = Prepared::new(&problem, &t.instance, grid, None)?;
            let base = feasible(prepared.solve(&center_anchor(n), 0, Validity::Plain))?;
            plain.push(base.as_ref().map(|(_, s)| s.cost));
            for (d, spec) in acp.iter().enumerate() {
                robust[d].push(match &base {
                    None => None,
                    Some((rank, _)) => {
                        let anchors =
                            perturbation_draws(self.scm, &t.instance, spec, cfg.n_samples, seed)?;
                        feasible(prepared.solve(
                            &anchors,
                            *rank,
                            Validity::Robust { delta: spec.radius },
                        ))?
                        .map(|(_, s)| s.cost)
                    }
                });
            }
        }

        // Fair robust: one ranking per distinct set of objective centers, started
        // at the rank of the action valid on those centers alone.
        let sources = self.fair_sources(twins, own);
        let mut fair = vec![Vec::with_capacity(sources.len()); specs.len()];
        for k in sources {
            let v = &twins[k].instance;
            let mut cache: Vec<(Vec<Vec<f64>>, Prepared<'_, '_>, Option<usize>)> = Vec::new();
            for (d, spec) in specs.iter().enumerate() {
                let thetas = spec.levels_in_ball(self.scm, v)?;
                let slot = match cache.iter().position(|(t, _, _)| *t == thetas) {
                    Some(i) => i,
                    None => {
                        let prepared = Prepared::new(&problem, v, grid, Some(spec))?;
                        let centers = theta_centers(&thetas, spec, n);
                        let start = feasible(prepared.solve(&centers, 0, Validity::Faro))?
                            .map(|(rank, _)| rank);
                        cache.push((thetas, prepared, start));
                        cache.len() - 1
                    }
                };
                let (_, prepared, start) = &cache[slot];
                fair[d].push(match start {
                    None => None,
                    Some(rank) => {
                        let anchors = perturbation_draws(self.scm, v, spec, cfg.n_samples, seed)?;
                        feasible(prepared.solve(
                            &anchors,
                            *rank,
                            Validity::Afrr { delta: spec.radius },
                        ))?
                        .map(|(_, s)| s.cost)
                    }
                });
            }
        }
        let fair = fair
            .into_iter()
            .map(|solved| self.spread(twins, solved))
            .collect();
        Ok((plain, robust, fair))
    }
}

fn theta_centers(thetas: &[Vec<f64>], spec: &PerturbationSpec, n: usize) -> Vec<PerturbationDraw> {
    thetas
        .iter()
        .map(|theta| {
            let mut hard = vec![None; n];
            for (k, &i) in spec.categorical.iter().enumerate() {
                hard[i] = Some(theta[k]);
            }
            PerturbationDraw {
                hard,
                shift: vec![0.0; n],
            }
        })
        .collect()
}

/// Turn "no valid action" outcomes into `None`, keep real errors.
fn feasible<T>(r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(t) => Ok(Some(t)),
        Err(Error::InfeasibleWithinGrid { .. } | Error::NoRecourse(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

#[cfg(feature = "parallel")]
fn map_instances<T: Sync, U: Send>(
    items: &[T],
    f: impl Fn(&T) -> Result<U> + Sync + Send,
) -> Result<Vec<U>> {
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_instances<T, U>(items: &[T], f: impl Fn(&T) -> Result<U>) -> Result<Vec<U>> {
    items.iter().map(f).collect()
}

/// Whether the linear closed forms apply: linear model, linear SCM, and an
/// action space covering every continuous variable.
fn closed_form_applies(scm: &StructuralCausalModel, model: &ClassifierModel) -> Option<LinearScm> {
    model.as_linear()?;
    let mut actionable = scm.actionable_indices();
    actionable.sort_unstable();
    if actionable != scm.continuous_indices() {
        return None;
    }
    LinearScm::new(scm.clone()).ok()
}

fn choose_engine(
    solver: SolverChoice,
    scm: &StructuralCausalModel,
    model: &ClassifierModel,
    std: impl FnOnce() -> Vec<f64>,
    cfg: &ExperimentConfig,
) -> Result<Engine> {
    if solver != SolverChoice::BruteForce {
        if let Some(lin) = closed_form_applies(scm, model) {
            return Ok(Engine::Closed(lin));
        }
        if solver == SolverChoice::ClosedForm {
            return Err(Error::Config(
                "closed forms need a linear model, a linear SCM and actionable continuous variables"
                    .into(),
            ));
        }
    }
    Ok(Engine::Grid(grid_for(
        scm,
        &std(),
        cfg.grid_sigmas,
        cfg.grid_points,
        cfg.max_grid_candidates,
    )))
}

/// Grid over the actionable variables, `±sigmas·std` wide. The per-axis point
/// count drops to the largest odd value keeping the grid under `max_candidates`.
pub fn grid_for(
    scm: &StructuralCausalModel,
    std: &[f64],
    sigmas: f64,
    points: usize,
    max_candidates: usize,
) -> GridSpec {
    let actionable = scm.actionable_indices();
    let categorical: usize = actionable
        .iter()
        .filter_map(|&i| scm.variable(i).levels().map(<[i64]>::len))
        .product();
    let continuous = actionable
        .iter()
        .filter(|&&i| !scm.variable(i).is_categorical())
        .count() as u32;
    let budget = (max_candidates / categorical.max(1)).max(1);
    let mut k = points;
    while k > 3 && (k + 1).checked_pow(continuous).is_none_or(|t| t > budget) {
        k -= 1;
    }
    if k.is_multiple_of(2) {
        k -= 1;
    }
    GridSpec::from_std(
        &actionable.iter().map(|&i| std[i]).collect::<Vec<_>>(),
        sigmas,
        k,
    )
}

fn aggregate(outcomes: &[Outcome], d: usize, fair_possible: bool) -> CellOutput {
    let mut costs = Vec::new();
    let mut orbits: [Vec<OrbitCosts>; 3] = Default::default();
    let (mut n_unfair, mut n_infeasible) = (0, 0);
    for o in outcomes {
        if o.unfair {
            n_unfair += 1;
            continue;
        }
        let columns = [&o.plain, &o.robust[d], &o.fair[d]];
        for (m, &level) in o.levels.iter().enumerate() {
            costs.push(CostRow {
                instance: o.index,
                twin_level: level,
                r: columns[0][m],
                r_robust: columns[1][m],
                r_faro: columns[2][m],
            });
        }
        if columns.iter().any(|c| c.iter().any(Option::is_none)) {
            n_infeasible += 1;
            continue;
        }
        for (slot, c) in orbits.iter_mut().zip(columns) {
            slot.push(OrbitCosts {
                instance: o.index,
                own: o.own,
                levels: o.levels.clone(),
                costs: c.iter().map(|x| x.unwrap_or(f64::NAN)).collect(),
            });
        }
    }
    let sigma = |orbits: &[OrbitCosts]| {
        if orbits.is_empty() {
            f64::NAN
        } else {
            sigma_relative(orbits).unwrap_or(f64::NAN)
        }
    };
    let mut ratios = Vec::new();
    for (kind, o) in [CostKind::Plain, CostKind::Robust, CostKind::FairRobust]
        .into_iter()
        .zip(&orbits)
    {
        ratios.extend(
            cost_ratio_distribution(o)
                .0
                .into_iter()
                .map(|(instance, ratio)| RatioRow {
                    instance,
                    ratio,
                    kind,
                }),
        );
    }
    CellOutput {
        row: ResultRow {
            scm: String::new(),
            label_kind: String::new(),
            classifier: String::new(),
            feature_subset: String::new(),
            delta: f64::NAN,
            sigma_r: sigma(&orbits[0]),
            sigma_ar: sigma(&orbits[1]),
            sigma_fr: sigma(&orbits[2]),
            n_instances: orbits[0].len(),
            n_excluded_unfair: n_unfair,
            n_infeasible,
            fair_recourse_possible: fair_possible,
            wall_time: 0.0,
        },
        costs,
        ratios,
    }
}

pub const RESULTS_HEADER: [&str; 12] = [
    "scm",
    "label_kind",
    "classifier",
    "feature_subset",
    "delta",
    "sigma_R",
    "sigma_AR",
    "sigma_FR",
    "n_instances",
    "n_excluded_unfair",
    "n_infeasible",
    "fair_recourse_possible",
];

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |x| x.to_string())
}

fn write_outputs(dir: &Path, cfg: &ExperimentConfig, out: &SimulationOutput) -> Result<()> {
    fs::create_dir_all(dir.join("models"))?;
    let csv_err = |e: csv::Error| Error::Csv(e.into());

    let mut w = csv::Writer::from_path(dir.join("results.csv")).map_err(csv_err)?;
    w.write_record(RESULTS_HEADER).map_err(csv_err)?;
    for r in out.rows() {
        w.write_record([
            r.scm.clone(),
            r.label_kind.clone(),
            r.classifier.clone(),
            r.feature_subset.clone(),
            r.delta.to_string(),
            r.sigma_r.to_string(),
            r.sigma_ar.to_string(),
            r.sigma_fr.to_string(),
            r.n_instances.to_string(),
            r.n_excluded_unfair.to_string(),
            r.n_infeasible.to_string(),
            r.fair_recourse_possible.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("timings.csv")).map_err(csv_err)?;
    w.write_record([
        "scm",
        "label_kind",
        "classifier",
        "feature_subset",
        "test_accuracy",
        "n_negative",
        "wall_time",
    ])
    .map_err(csv_err)?;
    for m in &out.models {
        w.write_record([
            m.scm.clone(),
            m.label_kind.clone(),
            m.classifier.clone(),
            m.feature_subset.clone(),
            m.test_accuracy.to_string(),
            m.n_negative.to_string(),
            format!("{:.3}", m.wall_time),
        ])
        .map_err(csv_err)?;
        fs::write(
            dir.join("models").join(format!(
                "{}_{}_{}_{}.toml",
                m.scm, m.label_kind, m.classifier, m.feature_subset
            )),
            m.model.to_toml(),
        )?;
    }
    w.flush()?;

    for cell in &out.cells {
        let name = cell.row.cell_name();
        let mut w =
            csv::Writer::from_path(dir.join(format!("costs_{name}.csv"))).map_err(csv_err)?;
        w.write_record(["instance", "twin_level", "r", "r_robust", "r_faro"])
            .map_err(csv_err)?;
        for c in &cell.costs {
            w.write_record([
                c.instance.to_string(),
                c.twin_level.to_string(),
                opt(c.r),
                opt(c.r_robust),
                opt(c.r_faro),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        let mut w =
            csv::Writer::from_path(dir.join(format!("ratios_{name}.csv"))).map_err(csv_err)?;
        w.write_record(["instance", "ratio", "kind"])
            .map_err(csv_err)?;
        for r in &cell.ratios {
            w.write_record([
                r.instance.to_string(),
                r.ratio.to_string(),
                r.kind.name().to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
    }
    // The echo omits its own location so reruns elsewhere compare equal.
    let echo = ExperimentConfig {
        output_dir: None,
        ..cfg.clone()
    };
    fs::write(dir.join("config_used.toml"), echo.to_toml()?)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Plain,
    Robust,
    Afrr,
    Faro,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Plain => "plain",
            Mode::Robust => "robust",
            Mode::Afrr => "afrr",
            Mode::Faro => "faro",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Mode::Plain),
            "robust" => Ok(Mode::Robust),
            "afrr" => Ok(Mode::Afrr),
            "faro" => Ok(Mode::Faro),
            other => Err(Error::Unknown {
                kind: "mode",
                name: other.to_string(),
            }),
        }
    }
}

/// A single-instance recourse query.
#[derive(Debug, Clone)]
pub struct SingleQuery {
    pub scm: StructuralCausalModel,
    pub model: ClassifierModel,
    pub instance: Vec<f64>,
    pub mode: Mode,
    /// Radius for robust and AFRR; scales the FARO radius sequence.
    pub delta: f64,
    pub p: Lp,
    pub q: Lp,
    pub product_norm: Lp,
    pub protected_metric: ProtectedMetric,
    pub solver: SolverChoice,
    pub n_samples: usize,
    pub seed: u64,
    pub grid_points: usize,
    pub grid_sigmas: f64,
    pub max_grid_candidates: usize,
}

impl SingleQuery {
    pub fn new(scm: StructuralCausalModel, model: ClassifierModel, instance: Vec<f64>) -> Self {
        let d = ExperimentConfig::default();
        Self {
            scm,
            model,
            instance,
            mode: Mode::Plain,
            delta: 1.0,
            p: d.p,
            q: d.q,
            product_norm: d.product_norm,
            protected_metric: d.protected_metric,
            solver: d.solver,
            n_samples: d.n_samples,
            seed: d.seed,
            grid_points: d.grid_points,
            grid_sigmas: d.grid_sigmas,
            max_grid_candidates: d.max_grid_candidates,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinCost {
    pub level: i64,
    pub instance: Instance,
    /// Cost of the same query posed for the twin; `None` when infeasible.
    pub cost: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleReport {
    pub mode: Mode,
    pub solution: RecourseSolution,
    pub twins: Vec<TwinCost>,
    /// `(Δ, cost)` along the FARO radius sequence.
    pub trajectory: Option<Vec<(f64, f64)>>,
}

/// Solve one query for the instance and, for the twin cost table, for each twin.
pub fn solve_single(query: &SingleQuery) -> Result<Afrr<SingleReport>> {
    let scm = &query.scm;
    scm.validate_instance(&query.instance)?;
    if query.model.dim() != scm.len() {
        return Err(Error::DimensionMismatch {
            expected: scm.len(),
            got: query.model.dim(),
        });
    }
    if !(query.delta >= 0.0) || !query.delta.is_finite() {
        return Err(Error::Config("delta must be nonnegative".into()));
    }
    let protected = scm
        .protected_index()
        .ok_or_else(|| Error::InvalidScm("no protected variable".into()))?;
    let engine = choose_engine(
        query.solver,
        scm,
        &query.model,
        || {
            let mut rng = ChaCha8Rng::seed_from_u64(query.seed);
            let x: Vec<Instance> = scm
                .sample(GRID_STD_SAMPLES, &mut rng)
                .into_iter()
                .map(|(v, _)| v)
                .collect();
            column_std(&x)
        },
        &ExperimentConfig {
            grid_points: query.grid_points,
            grid_sigmas: query.grid_sigmas,
            max_grid_candidates: query.max_grid_candidates,
            ..ExperimentConfig::default()
        },
    )?;
    let main = match solve_mode(query, &engine, protected, &query.instance)? {
        Afrr::Defined(r) => r,
        Afrr::CounterfactuallyUnfair => return Ok(Afrr::CounterfactuallyUnfair),
    };
    let mut twins = Vec::new();
    for t in scm.twins(&query.instance, protected)? {
        let cost = if t.instance[..] == query.instance[..] {
            Some(main.0.cost)
        } else {
            match feasible(solve_mode(query, &engine, protected, &t.instance)) {
                Ok(Some(Afrr::Defined((s, _)))) => Some(s.cost),
                Ok(_) | Err(Error::NonConvergent { .. }) => None,
                Err(e) => return Err(e),
            }
        };
        twins.push(TwinCost {
            level: t.level,
            instance: t.instance,
            cost,
        });
    }
    Ok(Afrr::Defined(SingleReport {
        mode: query.mode,
        solution: main.0,
        twins,
        trajectory: main.1,
    }))
}

type ModeResult = Afrr<(RecourseSolution, Option<Vec<(f64, f64)>>)>;

fn solve_mode(
    query: &SingleQuery,
    engine: &Engine,
    protected: usize,
    v: &[f64],
) -> Result<ModeResult> {
    let scm = &query.scm;
    let spec = |delta: f64| {
        PerturbationSpec::for_scm(
            scm,
            query.protected_metric.pseudometric(),
            query.q,
            query.product_norm,
            delta,
        )
    };
    let faro_deltas: Vec<f64> = DEFAULT_DELTAS.iter().map(|d| d * query.delta).collect();
    match engine {
        Engine::Closed(lin) => {
            let model = query
                .model
                .as_linear()
                .expect("closed engine implies a linear model");
            let setting = LinearSetting {
                model,
                scm: lin,
                protected,
            };
            Ok(match query.mode {
                Mode::Plain => Afrr::Defined((
                    linear_plain_solution(setting, v, query.p, ActionKind::Additive)?,
                    None,
                )),
                Mode::Robust => Afrr::Defined((
                    linear_robust_solution(setting, v, query.p, query.q, query.delta)?,
                    None,
                )),
                Mode::Afrr => linear_afrr_solution_for(setting, v, query.p, &spec(query.delta)?)?
                    .map(|s| (s, None)),
                Mode::Faro => {
                    if query.protected_metric != ProtectedMetric::Zero {
                        return Err(Error::Config("FARO needs the zero protected metric".into()));
                    }
                    faro_linear(setting, v, query.p, query.q, &faro_deltas)?
                        .map(|r| (r.solution, Some(r.trajectory)))
                }
            })
        }
        Engine::Grid(grid) => {
            let problem = RecourseProblem::new(scm, &query.model, CostSpec::lp(query.p))
                .with_samples(query.n_samples, query.seed);
            Ok(match query.mode {
                Mode::Plain => Afrr::Defined((solve_bruteforce(&problem, v, grid)?, None)),
                Mode::Robust => {
                    let p = problem.with_perturbation(PerturbationSpec::acp(
                        scm,
                        query.q,
                        query.delta,
                    )?);
                    Afrr::Defined((solve_bruteforce(&p, v, grid)?, None))
                }
                Mode::Afrr => solve_afrr(&problem.with_perturbation(spec(query.delta)?), v, grid)?
                    .map(|s| (s, None)),
                Mode::Faro => solve_faro(
                    &problem.with_perturbation(spec(query.delta)?),
                    v,
                    grid,
                    &faro_deltas,
                )?
                .map(|r| (r.solution, Some(r.trajectory))),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{build_scm, BuiltinScm};

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            scms: vec!["lin".into()],
            label_kinds: vec!["linear_aware".into()],
            classifiers: vec!["glm".into()],
            feature_subsets: vec!["aware".into()],
            n: 300,
            n_samples: 200,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn config_round_trip_and_validation() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
        assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), cfg);
        assert!(ExperimentConfig::from_toml_str("deltas = [0.1, 0.5]").is_err());
        assert!(ExperimentConfig::from_toml_str("n_samples = 50").is_err());
        assert!(ExperimentConfig::from_toml_str("scms = [\"nope\"]").is_err());
        assert!(ExperimentConfig::from_toml_str("colour = 1").is_err());
        let cfg =
            ExperimentConfig::from_toml_str("p = 1\nq = inf\nprotected_metric = \"discrete\"")
                .unwrap();
        assert_eq!(cfg.p, Lp::ONE);
        assert_eq!(cfg.q, Lp::Infinity);
    }

    #[test]
    fn grid_respects_candidate_budget() {
        let loan = build_scm(BuiltinScm::Loan);
        let g = grid_for(&loan, &[1.0; 7], 5.0, 201, 100_000);
        assert_eq!(g.half_width.len(), 3);
        assert!(g.points % 2 == 1);
        assert!((g.points + 1).pow(3) <= 100_000);
        let anm = build_scm(BuiltinScm::Anm);
        assert_eq!(grid_for(&anm, &[1.0; 3], 5.0, 201, 100_000).points, 201);
    }

    #[test]
    fn small_linear_run_has_fair_robust_zero() {
        let out = run_simulation(&small()).unwrap();
        assert_eq!(out.cells.len(), 3);
        for c in &out.cells {
            assert!(c.row.n_instances > 0);
            assert!(c.row.sigma_fr.abs() <= 1e-12);
            assert!(c.row.sigma_r > 0.0 && c.row.sigma_ar > 0.0);
            assert!(!c.row.fair_recourse_possible);
        }
    }

    #[test]
    fn grid_engine_agrees_with_closed_forms() {
        let mut cfg = small();
        cfg.max_instances = Some(5);
        cfg.deltas = vec![0.5];
        let closed = run_simulation(&cfg).unwrap();
        cfg.solver = SolverChoice::BruteForce;
        let grid = run_simulation(&cfg).unwrap();
        let (a, b) = (&closed.cells[0], &grid.cells[0]);
        assert_eq!(a.costs.len(), b.costs.len());
        // Robust grid costs sit on sampled constraints, so they may undercut the
        // exact value by less than the sampling gap; bound both ways loosely.
        for (x, y) in a.costs.iter().zip(&b.costs) {
            assert!((x.r.unwrap() - y.r.unwrap()).abs() < 0.2);
            assert!((x.r_robust.unwrap() - y.r_robust.unwrap()).abs() < 0.2);
            assert!((x.r_faro.unwrap() - y.r_faro.unwrap()).abs() < 0.2);
        }
        assert!(b.row.sigma_fr.abs() <= 1e-12);
    }

    #[test]
    fn running_example_single_queries() {
        let scm = build_scm(BuiltinScm::Lin);
        let model = LinearClassifier::new(vec![-1.0, -1.0, -1.0], 0.0);
        let mut q = SingleQuery::new(scm, model.into(), vec![1.0, 3.0, 0.0]);
        let plain = solve_single(&q).unwrap().defined().unwrap();
        assert!((plain.solution.cost - 4.0 / 2f64.sqrt()).abs() < 1e-9);
        assert_eq!(plain.twins.len(), 2);
        q.mode = Mode::Faro;
        let faro = solve_single(&q).unwrap().defined().unwrap();
        assert!((faro.solution.cost - 4.0 / 2f64.sqrt()).abs() < 1e-9);
        let traj = faro.trajectory.unwrap();
        assert!((traj[0].1 - 5.0 / 2f64.sqrt()).abs() < 1e-9);
        assert!(faro
            .twins
            .iter()
            .all(|t| (t.cost.unwrap() - faro.solution.cost).abs() < 1e-9));
    }

    #[test]
    fn unfair_instance_is_flagged() {
        let scm = build_scm(BuiltinScm::Lin);
        let model = LinearClassifier::new(vec![-1.0, -1.0, -1.0], 0.0);
        let mut q = SingleQuery::new(scm, model.into(), vec![1.0, 0.0, -0.5]);
        q.mode = Mode::Afrr;
        assert_eq!(solve_single(&q).unwrap(), Afrr::CounterfactuallyUnfair);
    }
}
