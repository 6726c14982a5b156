//! Built-in SCMs, dataset generation with ground-truth labels, and CSV I/O.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{ground_truth_label, Label, LabelKind};
use crate::scm::{Instance, Mechanism, NoiseDist, StructuralCausalModel, VariableSpec};
use crate::{CsvError, Error, Result};

/// Fraction of every generated dataset assigned to the training split.
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinScm {
    Lin,
    Anm,
    Loan,
}

impl BuiltinScm {
    pub const ALL: [BuiltinScm; 3] = [BuiltinScm::Lin, BuiltinScm::Anm, BuiltinScm::Loan];

    pub fn name(self) -> &'static str {
        match self {
            BuiltinScm::Lin => "lin",
            BuiltinScm::Anm => "anm",
            BuiltinScm::Loan => "loan",
        }
    }
}

impl fmt::Display for BuiltinScm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BuiltinScm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lin" => Ok(BuiltinScm::Lin),
            "anm" => Ok(BuiltinScm::Anm),
            "loan" => Ok(BuiltinScm::Loan),
            other => Err(Error::Unknown {
                kind: "scm",
                name: other.to_string(),
            }),
        }
    }
}

/// Look up a built-in SCM by name.
pub fn scm_by_name(name: &str) -> Result<StructuralCausalModel> {
    Ok(build_scm(name.parse()?))
}

fn standard_normal() -> NoiseDist {
    NoiseDist::Normal { mean: 0.0, sd: 1.0 }
}

fn protected_binary(name: &str) -> VariableSpec {
    VariableSpec::categorical(name, vec![0, 1]).protected()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn build_scm(which: BuiltinScm) -> StructuralCausalModel {
    match which {
        BuiltinScm::Lin => StructuralCausalModel::new(
            "lin",
            vec![
                protected_binary("a"),
                VariableSpec::continuous("x1"),
                VariableSpec::continuous("x2"),
            ],
            vec![
                Mechanism::linear(0.0, vec![]),
                Mechanism::linear(0.0, vec![(0, 2.0)]),
                Mechanism::linear(0.0, vec![(0, 1.0), (1, -1.0)]),
            ],
            vec![
                NoiseDist::Bernoulli { p: 0.5 },
                standard_normal(),
                standard_normal(),
            ],
        ),
        BuiltinScm::Anm => StructuralCausalModel::new(
            "anm",
            vec![
                protected_binary("a"),
                VariableSpec::continuous("x1"),
                VariableSpec::continuous("x2"),
            ],
            vec![
                Mechanism::linear(0.0, vec![]),
                Mechanism::additive(vec![0], |v| 2.0 * v[0] * v[0]),
                Mechanism::additive(vec![0, 1], |v| v[0] * v[1]),
            ],
            vec![
                NoiseDist::Bernoulli { p: 0.5 },
                standard_normal(),
                standard_normal(),
            ],
        ),
        BuiltinScm::Loan => loan_scm(),
    }
    .expect("built-in SCMs are well formed")
}

// Variable order of the loan SCM.
const G: usize = 0;
const AGE: usize = 1;
const EDU: usize = 2;
const LOAN: usize = 3;
const DUR: usize = 4;
const INC: usize = 5;
const SAV: usize = 6;

fn loan_scm() -> Result<StructuralCausalModel> {
    let edu_logit = |v: &[f64]| -1.0 + 0.5 * v[G] + sigmoid(0.1 * v[AGE]);
    StructuralCausalModel::new(
        "loan",
        vec![
            protected_binary("gender"),
            VariableSpec::continuous("age").actionable(false),
            VariableSpec::continuous("education"),
            VariableSpec::continuous("loan_amount").actionable(false),
            VariableSpec::continuous("duration").actionable(false),
            VariableSpec::continuous("income"),
            VariableSpec::continuous("savings"),
        ],
        vec![
            Mechanism::linear(0.0, vec![]),
            Mechanism::linear(-35.0, vec![]),
            Mechanism::invertible(
                vec![G, AGE],
                move |v, u| -0.5 + sigmoid(edu_logit(v) + u),
                move |v, e| {
                    let p = e + 0.5;
                    (p / (1.0 - p)).ln() - edu_logit(v)
                },
            ),
            Mechanism::additive(vec![G, AGE], |v| {
                1.0 + 0.01 * (v[AGE] - 5.0) * (5.0 - v[AGE]) + v[G]
            }),
            Mechanism::linear(-1.0, vec![(AGE, 0.1), (G, 2.0), (LOAN, 1.0)]),
            Mechanism::additive(vec![G, AGE, EDU], |v| {
                -4.0 + 0.1 * (v[AGE] + 35.0) + 2.0 * v[G] + v[G] * v[EDU]
            }),
            Mechanism::additive(vec![INC], |v| {
                let income = v[INC];
                -4.0 + if income > 0.0 { 1.5 * income } else { 0.0 }
            }),
        ],
        vec![
            NoiseDist::Bernoulli { p: 0.5 },
            NoiseDist::Gamma {
                shape: 10.0,
                scale: 3.5,
            },
            NoiseDist::Normal { mean: 0.0, sd: 0.5 },
            NoiseDist::Normal { mean: 0.0, sd: 2.0 },
            NoiseDist::Normal { mean: 0.0, sd: 3.0 },
            NoiseDist::Normal { mean: 0.0, sd: 2.0 },
            NoiseDist::Normal { mean: 0.0, sd: 5.0 },
        ],
    )
}

/// Probability of the favorable label in the loan scenario.
pub fn loan_approval_probability(v: &[f64]) -> f64 {
    let (l, d, i, s) = (v[LOAN], v[DUR], v[INC], v[SAV]);
    sigmoid(0.3 * (-l - d + i + s + i * s))
}

/// How labels are attached to sampled instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRule {
    GroundTruth(LabelKind),
    /// Bernoulli draw from [`loan_approval_probability`].
    LoanBernoulli,
}

impl fmt::Display for LabelRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelRule::GroundTruth(kind) => write!(f, "{kind}"),
            LabelRule::LoanBernoulli => f.write_str("loan_bernoulli"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Split of index `i` among `n` i.i.d. samples: the first 80% train.
pub fn split_of(i: usize, n: usize) -> Split {
    if i < train_len(n) {
        Split::Train
    } else {
        Split::Test
    }
}

fn train_len(n: usize) -> usize {
    (n as f64 * TRAIN_FRACTION).round() as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub scm: String,
    pub seed: u64,
    pub label_rule: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub instances: Vec<Instance>,
    pub labels: Vec<Label>,
    pub split: Vec<Split>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.instances.first().map_or(0, |v| v.len())
    }

    /// Instances and labels of one split, in file order.
    pub fn part(&self, which: Split) -> (Vec<Instance>, Vec<Label>) {
        self.instances
            .iter()
            .zip(&self.labels)
            .zip(&self.split)
            .filter(|(_, s)| **s == which)
            .map(|((v, y), _)| (v.clone(), *y))
            .unzip()
    }

    /// Per-column standard deviation over the training split.
    pub fn train_std(&self) -> Vec<f64> {
        let (x, _) = self.part(Split::Train);
        column_std(&x)
    }
}

pub(crate) fn column_std(x: &[Instance]) -> Vec<f64> {
    let dim = x.first().map_or(0, |v| v.len());
    let n = x.len() as f64;
    (0..dim)
        .map(|j| {
            let mean = x.iter().map(|v| v[j]).sum::<f64>() / n;
            (x.iter().map(|v| (v[j] - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt()
        })
        .collect()
}

/// Sample `n` instances, label them, and split 80/20.
pub fn generate_dataset(
    scm: &StructuralCausalModel,
    n: usize,
    rule: LabelRule,
    seed: u64,
) -> Result<Dataset> {
    if n < 10 {
        return Err(Error::Config(format!("dataset size {n} < 10")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = scm.sample(n, &mut rng);
    let mut labels = Vec::with_capacity(n);
    for (v, _) in &draws {
        labels.push(match rule {
            LabelRule::GroundTruth(kind) => ground_truth_label(kind, v)?,
            LabelRule::LoanBernoulli => {
                if rng.random::<f64>() < loan_approval_probability(v) {
                    Label::Favorable
                } else {
                    Label::Unfavorable
                }
            }
        });
    }
    Ok(Dataset {
        instances: draws.into_iter().map(|(v, _)| v).collect(),
        labels,
        split: (0..n).map(|i| split_of(i, n)).collect(),
        provenance: Provenance {
            scm: scm.name().to_string(),
            seed,
            label_rule: rule.to_string(),
        },
    })
}

/// `a,x1,...,xn,y,split` for instances with `dim` columns (protected column first).
pub fn csv_header(dim: usize) -> Vec<String> {
    let mut h = vec!["a".to_string()];
    h.extend((1..dim).map(|i| format!("x{i}")));
    h.push("y".into());
    h.push("split".into());
    h
}

pub fn write_csv_to<W: Write>(writer: W, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(csv_header(data.dim()))
        .map_err(CsvError::from)?;
    for ((v, y), s) in data.instances.iter().zip(&data.labels).zip(&data.split) {
        let mut row: Vec<String> = v.iter().map(|x| format!("{x:.16e}")).collect();
        row.push(y.as_i8().to_string());
        row.push(s.as_str().to_string());
        w.write_record(&row).map_err(CsvError::from)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv(path: &Path, data: &Dataset) -> Result<()> {
    write_csv_to(std::fs::File::create(path)?, data)
}

pub fn read_csv_from<R: Read>(reader: R) -> Result<Dataset> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = r.records();
    let header = match records.next() {
        Some(h) => h.map_err(CsvError::from)?,
        None => {
            return Err(CsvError::MalformedHeader {
                expected: "a,x1,...,y,split".into(),
                found: String::new(),
            }
            .into())
        }
    };
    let found: Vec<String> = header.iter().map(str::to_string).collect();
    let expected = csv_header(found.len().saturating_sub(2).max(1));
    if found.len() < 3 || found != expected {
        return Err(CsvError::MalformedHeader {
            expected: expected.join(","),
            found: found.join(","),
        }
        .into());
    }
    let width = found.len();
    let dim = width - 2;
    let mut instances = Vec::new();
    let mut labels = Vec::new();
    let mut split = Vec::new();
    for (k, rec) in records.enumerate() {
        let row = k + 1;
        let rec = rec.map_err(CsvError::from)?;
        if rec.len() != width {
            return Err(CsvError::Arity {
                row,
                expected: width,
                found: rec.len(),
            }
            .into());
        }
        let mut v = Vec::with_capacity(dim);
        for (j, cell) in rec.iter().take(dim).enumerate() {
            v.push(
                cell.trim()
                    .parse::<f64>()
                    .map_err(|_| CsvError::NonNumeric {
                        row,
                        column: found[j].clone(),
                        cell: cell.to_string(),
                    })?,
            );
        }
        let y = match rec[dim].trim() {
            "1" | "+1" => Label::Favorable,
            "-1" => Label::Unfavorable,
            other => {
                return Err(CsvError::InvalidLabel {
                    row,
                    label: other.to_string(),
                }
                .into())
            }
        };
        let s = match rec[dim + 1].trim() {
            "train" => Split::Train,
            "test" => Split::Test,
            other => {
                return Err(CsvError::InvalidSplit {
                    row,
                    split: other.to_string(),
                }
                .into())
            }
        };
        instances.push(Instance::new(v));
        labels.push(y);
        split.push(s);
    }
    Ok(Dataset {
        instances,
        labels,
        split,
        provenance: Provenance {
            scm: "csv".into(),
            seed: 0,
            label_rule: "file".into(),
        },
    })
}

pub fn read_csv(path: &Path) -> Result<Dataset> {
    read_csv_from(std::fs::File::open(path)?)
}
