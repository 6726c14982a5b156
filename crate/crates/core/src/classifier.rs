//! Linear and opaque binary classifiers, training, and ground-truth labels.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::scm::{Instance, StructuralCausalModel};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Favorable,
    Unfavorable,
}

impl Label {
    /// `sign(x)` with `sign(0) = +1`.
    pub fn from_decision(x: f64) -> Self {
        if x >= 0.0 {
            Label::Favorable
        } else {
            Label::Unfavorable
        }
    }

    pub fn as_i8(self) -> i8 {
        match self {
            Label::Favorable => 1,
            Label::Unfavorable => -1,
        }
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.as_i8())
    }
}

/// The four synthetic labelling rules. Favorable iff the inequality holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    /// `A + X1 + X2 < 0`
    LinearAware,
    /// `X1 + X2 < 0`
    LinearUnaware,
    /// `(A + X1 + X2)^2 < 2`
    NonlinearAware,
    /// `(X1 + X2)^2 < 2`
    NonlinearUnaware,
}

impl LabelKind {
    pub const ALL: [LabelKind; 4] = [
        LabelKind::LinearAware,
        LabelKind::LinearUnaware,
        LabelKind::NonlinearAware,
        LabelKind::NonlinearUnaware,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LabelKind::LinearAware => "linear_aware",
            LabelKind::LinearUnaware => "linear_unaware",
            LabelKind::NonlinearAware => "nonlinear_aware",
            LabelKind::NonlinearUnaware => "nonlinear_unaware",
        }
    }

    /// The rule as a linear classifier, when it is one.
    pub fn as_linear(self) -> Option<LinearClassifier> {
        match self {
            LabelKind::LinearAware => Some(LinearClassifier::new(vec![-1.0, -1.0, -1.0], 0.0)),
            LabelKind::LinearUnaware => Some(LinearClassifier::new(vec![0.0, -1.0, -1.0], 0.0)),
            _ => None,
        }
    }
}

impl fmt::Display for LabelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LabelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LabelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "label kind",
                name: s.to_string(),
            })
    }
}

/// Ground-truth label of a three-variable `(A, X1, X2)` instance.
pub fn ground_truth_label(kind: LabelKind, v: &[f64]) -> Result<Label> {
    if v.len() != 3 {
        return Err(Error::DimensionMismatch {
            expected: 3,
            got: v.len(),
        });
    }
    let (a, s) = (v[0], v[1] + v[2]);
    let holds = match kind {
        LabelKind::LinearAware => a + s < 0.0,
        LabelKind::LinearUnaware => s < 0.0,
        LabelKind::NonlinearAware => (a + s).powi(2) < 2.0,
        LabelKind::NonlinearUnaware => s * s < 2.0,
    };
    Ok(if holds {
        Label::Favorable
    } else {
        Label::Unfavorable
    })
}

/// `h(v) = sign(w·v − b)`, one weight per SCM variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub w: Vec<f64>,
    pub b: f64,
    /// Variable names aligned with `w`; empty when unnamed.
    #[serde(default)]
    pub variables: Vec<String>,
}

impl LinearClassifier {
    pub fn new(w: Vec<f64>, b: f64) -> Self {
        Self {
            w,
            b,
            variables: Vec::new(),
        }
    }

    pub fn with_variables(mut self, names: Vec<String>) -> Self {
        self.variables = names;
        self
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    /// `w·v − b` without a length check.
    #[inline]
    pub fn decision_unchecked(&self, v: &[f64]) -> f64 {
        self.w.iter().zip(v).map(|(w, x)| w * x).sum::<f64>() - self.b
    }

    pub fn decision(&self, v: &[f64]) -> Result<f64> {
        self.check(v)?;
        Ok(self.decision_unchecked(v))
    }

    pub fn predict(&self, v: &[f64]) -> Result<Label> {
        Ok(Label::from_decision(self.decision(v)?))
    }

    fn check(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.w.len() {
            return Err(Error::DimensionMismatch {
                expected: self.w.len(),
                got: v.len(),
            });
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        let file = ModelFile {
            kind: "linear".into(),
            weights: self.w.clone(),
            bias: self.b,
            variables: self.variables.clone(),
        };
        toml::to_string(&file).expect("model serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: ModelFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if file.kind != "linear" {
            return Err(Error::Unknown {
                kind: "model kind",
                name: file.kind,
            });
        }
        if !file.variables.is_empty() && file.variables.len() != file.weights.len() {
            return Err(Error::Config(format!(
                "{} variable names for {} weights",
                file.variables.len(),
                file.weights.len()
            )));
        }
        Ok(LinearClassifier {
            w: file.weights,
            b: file.bias,
            variables: file.variables,
        })
    }
}

/// On-disk model format.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    kind: String,
    weights: Vec<f64>,
    bias: f64,
    #[serde(default)]
    variables: Vec<String>,
}

pub type DecisionFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Any model given by a real-valued decision function, labelled by its sign.
#[derive(Clone)]
pub struct OpaqueModel {
    pub name: String,
    pub dim: usize,
    f: DecisionFn,
}

impl OpaqueModel {
    pub fn new<F>(name: impl Into<String>, dim: usize, f: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            dim,
            f: Arc::new(f),
        }
    }
}

impl fmt::Debug for OpaqueModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OpaqueModel")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone)]
pub enum ClassifierModel {
    Linear(LinearClassifier),
    Opaque(OpaqueModel),
}

impl From<LinearClassifier> for ClassifierModel {
    fn from(m: LinearClassifier) -> Self {
        ClassifierModel::Linear(m)
    }
}

impl ClassifierModel {
    pub fn dim(&self) -> usize {
        match self {
            ClassifierModel::Linear(m) => m.dim(),
            ClassifierModel::Opaque(m) => m.dim,
        }
    }

    pub fn as_linear(&self) -> Option<&LinearClassifier> {
        match self {
            ClassifierModel::Linear(m) => Some(m),
            ClassifierModel::Opaque(_) => None,
        }
    }

    #[inline]
    pub fn decision_unchecked(&self, v: &[f64]) -> f64 {
        match self {
            ClassifierModel::Linear(m) => m.decision_unchecked(v),
            ClassifierModel::Opaque(m) => (m.f)(v),
        }
    }

    #[inline]
    pub fn is_favorable_unchecked(&self, v: &[f64]) -> bool {
        self.decision_unchecked(v) >= 0.0
    }

    pub fn predict(&self, v: &[f64]) -> Result<Label> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: v.len(),
            });
        }
        Ok(Label::from_decision(self.decision_unchecked(v)))
    }
}

/// True iff every counterfactual twin of `v` receives the label of `v`.
pub fn counterfactually_fair(
    model: &ClassifierModel,
    scm: &StructuralCausalModel,
    v: &[f64],
    protected: usize,
) -> Result<bool> {
    let own = model.predict(v)?;
    for twin in scm.twins(v, protected)? {
        if model.predict(&twin.instance)? != own {
            return Ok(false);
        }
    }
    Ok(true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSubset {
    /// All features ("aware").
    All,
    /// Everything but the protected feature ("unaware").
    NonProtected,
}

impl FeatureSubset {
    pub fn name(self) -> &'static str {
        match self {
            FeatureSubset::All => "aware",
            FeatureSubset::NonProtected => "unaware",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Glm,
    Svm,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Glm => "glm",
            ModelKind::Svm => "svm",
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "glm" | "lr" | "logistic" => Ok(ModelKind::Glm),
            "svm" => Ok(ModelKind::Svm),
            other => Err(Error::Unknown {
                kind: "classifier",
                name: other.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    pub seed: u64,
    pub features: FeatureSubset,
    /// Column excluded under [`FeatureSubset::NonProtected`].
    pub protected: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 500,
            l2: 1e-4,
            seed: 0,
            features: FeatureSubset::All,
            protected: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub accuracy: f64,
    pub loss: f64,
}

pub fn train_logistic(
    x: &[Instance],
    y: &[Label],
    cfg: &TrainConfig,
) -> Result<(LinearClassifier, TrainReport)> {
    train(x, y, cfg, ModelKind::Glm)
}

pub fn train_linear_svm(
    x: &[Instance],
    y: &[Label],
    cfg: &TrainConfig,
) -> Result<(LinearClassifier, TrainReport)> {
    train(x, y, cfg, ModelKind::Svm)
}

pub fn train_model(
    kind: ModelKind,
    x: &[Instance],
    y: &[Label],
    cfg: &TrainConfig,
) -> Result<(LinearClassifier, TrainReport)> {
    train(x, y, cfg, kind)
}

/// Full-batch gradient descent on standardized features; weights are mapped
/// back to raw feature space on return.
fn train(
    x: &[Instance],
    y: &[Label],
    cfg: &TrainConfig,
    kind: ModelKind,
) -> Result<(LinearClassifier, TrainReport)> {
    if !(cfg.learning_rate > 0.0) || cfg.epochs == 0 {
        return Err(Error::Training(
            "learning rate and epochs must be positive".into(),
        ));
    }
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Training(format!(
            "{} instances for {} labels",
            x.len(),
            y.len()
        )));
    }
    if y.iter().all(|l| *l == y[0]) {
        return Err(Error::Training("only one class present".into()));
    }
    let dim = x[0].len();
    if let Some(bad) = x.iter().find(|v| v.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: bad.len(),
        });
    }
    let n = x.len() as f64;
    let cols: Vec<usize> = (0..dim)
        .filter(|&j| !(cfg.features == FeatureSubset::NonProtected && j == cfg.protected))
        .collect();
    let mean: Vec<f64> = cols
        .iter()
        .map(|&j| x.iter().map(|v| v[j]).sum::<f64>() / n)
        .collect();
    let scale: Vec<f64> = cols
        .iter()
        .zip(&mean)
        .map(|(&j, m)| {
            let sd = (x.iter().map(|v| (v[j] - m).powi(2)).sum::<f64>() / n).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                0.0
            }
        })
        .collect();
    let z: Vec<Vec<f64>> = x
        .iter()
        .map(|v| {
            cols.iter()
                .enumerate()
                .map(|(k, &j)| {
                    if scale[k] > 0.0 {
                        (v[j] - mean[k]) / scale[k]
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let t: Vec<f64> = y.iter().map(|l| l.as_f64()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Normal::new(0.0, 0.01).expect("valid normal");
    let mut w: Vec<f64> = (0..cols.len()).map(|_| init.sample(&mut rng)).collect();
    let mut c = 0.0;
    let mut grad = vec![0.0; cols.len()];
    let mut loss = f64::NAN;
    for _ in 0..cfg.epochs {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut gc = 0.0;
        let mut total = 0.0;
        for (zi, &ti) in z.iter().zip(&t) {
            let s = zi.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + c;
            let m = ti * s;
            let (l, dl) = match kind {
                // log(1 + e^{-m}) and its derivative in m
                ModelKind::Glm => {
                    let l = if m > 0.0 {
                        (-m).exp().ln_1p()
                    } else {
                        -m + m.exp().ln_1p()
                    };
                    (l, -1.0 / (1.0 + m.exp()))
                }
                ModelKind::Svm => {
                    if m < 1.0 {
                        (1.0 - m, -1.0)
                    } else {
                        (0.0, 0.0)
                    }
                }
            };
            total += l;
            let g = dl * ti;
            for (gk, zk) in grad.iter_mut().zip(zi) {
                *gk += g * zk;
            }
            gc += g;
        }
        let reg = 0.5 * cfg.l2 * w.iter().map(|v| v * v).sum::<f64>();
        loss = total / n + reg;
        if !loss.is_finite() {
            return Err(Error::Training("loss is not finite".into()));
        }
        for (wk, gk) in w.iter_mut().zip(&grad) {
            *wk -= cfg.learning_rate * (gk / n + cfg.l2 * *wk);
        }
        c -= cfg.learning_rate * gc / n;
    }

    let mut raw = vec![0.0; dim];
    let mut b = -c;
    for (k, &j) in cols.iter().enumerate() {
        if scale[k] > 0.0 {
            raw[j] = w[k] / scale[k];
            b += w[k] * mean[k] / scale[k];
        }
    }
    let model = LinearClassifier::new(raw, b);
    let correct = x
        .iter()
        .zip(y)
        .filter(|(v, l)| Label::from_decision(model.decision_unchecked(v)) == **l)
        .count();
    Ok((
        model,
        TrainReport {
            accuracy: correct as f64 / n,
            loss,
        },
    ))
}
