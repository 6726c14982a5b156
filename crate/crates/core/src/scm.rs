//! Structural causal models with additive (or explicitly invertible) noise.
//!
//! A model is a list of variables in a fixed order, one structural equation per
//! variable and one exogenous distribution per variable. Counterfactuals follow
//! abduction, action, prediction: recover the noise of a factual instance, modify the
//! equations, and regenerate.

use std::fmt;
use std::ops::Deref;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result, TOLERANCE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum VariableKind {
    /// Finite ordered integer levels.
    Categorical {
        levels: Vec<i64>,
    },
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    pub kind: VariableKind,
    pub actionable: bool,
    pub protected: bool,
}

impl VariableSpec {
    pub fn continuous(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: VariableKind::Continuous,
            actionable: true,
            protected: false,
        }
    }

    pub fn categorical(name: impl Into<String>, levels: Vec<i64>) -> Self {
        Self {
            name: name.into(),
            kind: VariableKind::Categorical { levels },
            actionable: false,
            protected: false,
        }
    }

    pub fn actionable(mut self, actionable: bool) -> Self {
        self.actionable = actionable;
        self
    }

    /// Marks the variable protected. Protected variables are never actionable.
    pub fn protected(mut self) -> Self {
        self.protected = true;
        self.actionable = false;
        self
    }

    pub fn levels(&self) -> Option<&[i64]> {
        match &self.kind {
            VariableKind::Categorical { levels } => Some(levels),
            VariableKind::Continuous => None,
        }
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self.kind, VariableKind::Categorical { .. })
    }
}

/// Deterministic part of an additive equation, evaluated on the full value vector.
pub type MechanismFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
/// Noise-aware map `(values, x) -> y` used by invertible mechanisms.
pub type NoiseFn = Arc<dyn Fn(&[f64], f64) -> f64 + Send + Sync>;

/// Structural equation `V_i := ...` of one variable.
#[derive(Clone)]
pub enum Mechanism {
    /// `V_i := intercept + Σ c_j V_j + U_i`
    Linear {
        intercept: f64,
        coefficients: Vec<(usize, f64)>,
    },
    /// `V_i := f(V_pa(i)) + U_i`
    Additive { parents: Vec<usize>, f: MechanismFn },
    /// `V_i := g(V_pa(i), U_i)` with `inverse(V_pa(i), V_i) = U_i`.
    Invertible {
        parents: Vec<usize>,
        forward: NoiseFn,
        inverse: NoiseFn,
    },
    /// Result of a hard intervention: `V_i := θ`.
    Constant(f64),
}

impl Mechanism {
    pub fn linear(intercept: f64, coefficients: Vec<(usize, f64)>) -> Self {
        Mechanism::Linear {
            intercept,
            coefficients,
        }
    }

    pub fn additive<F>(parents: Vec<usize>, f: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Mechanism::Additive {
            parents,
            f: Arc::new(f),
        }
    }

    pub fn invertible<F, G>(parents: Vec<usize>, forward: F, inverse: G) -> Self
    where
        F: Fn(&[f64], f64) -> f64 + Send + Sync + 'static,
        G: Fn(&[f64], f64) -> f64 + Send + Sync + 'static,
    {
        Mechanism::Invertible {
            parents,
            forward: Arc::new(forward),
            inverse: Arc::new(inverse),
        }
    }

    pub fn parents(&self) -> Vec<usize> {
        match self {
            Mechanism::Linear { coefficients, .. } => {
                coefficients.iter().map(|&(j, _)| j).collect()
            }
            Mechanism::Additive { parents, .. } | Mechanism::Invertible { parents, .. } => {
                parents.clone()
            }
            Mechanism::Constant(_) => Vec::new(),
        }
    }

    #[inline]
    fn forward(&self, values: &[f64], noise: f64) -> f64 {
        match self {
            Mechanism::Linear {
                intercept,
                coefficients,
            } => {
                intercept
                    + coefficients
                        .iter()
                        .map(|&(j, c)| c * values[j])
                        .sum::<f64>()
                    + noise
            }
            Mechanism::Additive { f, .. } => f(values) + noise,
            Mechanism::Invertible { forward, .. } => forward(values, noise),
            Mechanism::Constant(theta) => *theta,
        }
    }

    #[inline]
    fn inverse(&self, values: &[f64], value: f64) -> f64 {
        match self {
            Mechanism::Linear {
                intercept,
                coefficients,
            } => {
                value
                    - intercept
                    - coefficients
                        .iter()
                        .map(|&(j, c)| c * values[j])
                        .sum::<f64>()
            }
            Mechanism::Additive { f, .. } => value - f(values),
            Mechanism::Invertible { inverse, .. } => inverse(values, value),
            // noise of a fixed variable is not identifiable
            Mechanism::Constant(_) => 0.0,
        }
    }
}

impl fmt::Debug for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mechanism::Linear {
                intercept,
                coefficients,
            } => f
                .debug_struct("Linear")
                .field("intercept", intercept)
                .field("coefficients", coefficients)
                .finish(),
            Mechanism::Additive { parents, .. } => f
                .debug_struct("Additive")
                .field("parents", parents)
                .finish(),
            Mechanism::Invertible { parents, .. } => f
                .debug_struct("Invertible")
                .field("parents", parents)
                .finish(),
            Mechanism::Constant(theta) => f.debug_tuple("Constant").field(theta).finish(),
        }
    }
}

/// Exogenous distribution of one variable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum NoiseDist {
    Normal {
        mean: f64,
        sd: f64,
    },
    /// Takes value 1 with probability `p`, else 0.
    Bernoulli {
        p: f64,
    },
    Gamma {
        shape: f64,
        scale: f64,
    },
    Constant {
        value: f64,
    },
}

impl NoiseDist {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            NoiseDist::Normal { mean, sd } => Normal::new(mean, sd)
                .expect("validated at construction")
                .sample(rng),
            NoiseDist::Bernoulli { p } => {
                if Bernoulli::new(p)
                    .expect("validated at construction")
                    .sample(rng)
                {
                    1.0
                } else {
                    0.0
                }
            }
            NoiseDist::Gamma { shape, scale } => Gamma::new(shape, scale)
                .expect("validated at construction")
                .sample(rng),
            NoiseDist::Constant { value } => value,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            NoiseDist::Normal { mean, sd } => mean.is_finite() && sd.is_finite() && sd >= 0.0,
            NoiseDist::Bernoulli { p } => (0.0..=1.0).contains(&p),
            NoiseDist::Gamma { shape, scale } => shape > 0.0 && scale > 0.0,
            NoiseDist::Constant { value } => value.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidScm(format!(
                "invalid noise distribution {self:?}"
            )))
        }
    }
}

/// A point in endogenous space, one value per variable in model order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance(Vec<f64>);

impl Instance {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Instance {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for Instance {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

impl From<&[f64]> for Instance {
    fn from(values: &[f64]) -> Self {
        Self(values.to_vec())
    }
}

/// Hard, additive, or middle (hard on categorical, additive on continuous) action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Intervention {
    Hard {
        indices: Vec<usize>,
        values: Vec<f64>,
    },
    Additive {
        indices: Vec<usize>,
        shifts: Vec<f64>,
    },
    Middle {
        categorical: Vec<usize>,
        values: Vec<f64>,
        continuous: Vec<usize>,
        shifts: Vec<f64>,
    },
}

impl Intervention {
    pub fn empty() -> Self {
        Intervention::Additive {
            indices: Vec::new(),
            shifts: Vec::new(),
        }
    }

    pub fn hard(index: usize, value: f64) -> Self {
        Intervention::Hard {
            indices: vec![index],
            values: vec![value],
        }
    }

    /// Additive intervention from a dense shift vector; zero entries are dropped.
    pub fn additive_dense(shifts: &[f64]) -> Self {
        let (indices, shifts) = shifts
            .iter()
            .enumerate()
            .filter(|(_, s)| **s != 0.0)
            .map(|(i, s)| (i, *s))
            .unzip();
        Intervention::Additive { indices, shifts }
    }

    pub fn is_empty(&self) -> bool {
        match self {
            Intervention::Hard { indices, .. } | Intervention::Additive { indices, .. } => {
                indices.is_empty()
            }
            Intervention::Middle {
                categorical,
                continuous,
                ..
            } => categorical.is_empty() && continuous.is_empty(),
        }
    }

    /// Hard-set values and additive shifts as dense per-variable vectors.
    pub fn dense(&self, len: usize) -> (Vec<Option<f64>>, Vec<f64>) {
        let mut hard = vec![None; len];
        let mut shift = vec![0.0; len];
        match self {
            Intervention::Hard { indices, values } => {
                for (&i, &v) in indices.iter().zip(values) {
                    hard[i] = Some(v);
                }
            }
            Intervention::Additive { indices, shifts } => {
                for (&i, &s) in indices.iter().zip(shifts) {
                    shift[i] += s;
                }
            }
            Intervention::Middle {
                categorical,
                values,
                continuous,
                shifts,
            } => {
                for (&i, &v) in categorical.iter().zip(values) {
                    hard[i] = Some(v);
                }
                for (&i, &s) in continuous.iter().zip(shifts) {
                    shift[i] += s;
                }
            }
        }
        (hard, shift)
    }
}

#[derive(Debug, Clone)]
struct Equation {
    mechanism: Mechanism,
    shift: f64,
}

/// Acyclic structural causal model with invertible noise.
#[derive(Debug, Clone)]
pub struct StructuralCausalModel {
    name: String,
    variables: Vec<VariableSpec>,
    equations: Vec<Equation>,
    noise: Vec<NoiseDist>,
    order: Vec<usize>,
}

impl StructuralCausalModel {
    pub fn new(
        name: impl Into<String>,
        variables: Vec<VariableSpec>,
        mechanisms: Vec<Mechanism>,
        noise: Vec<NoiseDist>,
    ) -> Result<Self> {
        let n = variables.len();
        if mechanisms.len() != n || noise.len() != n {
            return Err(Error::InvalidScm(format!(
                "{} variables but {} equations and {} noise distributions",
                n,
                mechanisms.len(),
                noise.len()
            )));
        }
        for var in &variables {
            if let Some(levels) = var.levels() {
                if levels.is_empty() || levels.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::InvalidScm(format!(
                        "levels of `{}` must be non-empty and strictly increasing",
                        var.name
                    )));
                }
            }
            if var.protected && !var.is_categorical() {
                return Err(Error::InvalidScm(format!(
                    "protected variable `{}` must be categorical",
                    var.name
                )));
            }
        }
        for d in &noise {
            d.validate()?;
        }
        let equations: Vec<Equation> = mechanisms
            .into_iter()
            .map(|mechanism| Equation {
                mechanism,
                shift: 0.0,
            })
            .collect();
        let order = topological_order(&equations)?;
        Ok(Self {
            name: name.into(),
            variables,
            equations,
            noise,
            order,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.variables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variables.is_empty()
    }

    pub fn variables(&self) -> &[VariableSpec] {
        &self.variables
    }

    pub fn variable(&self, i: usize) -> &VariableSpec {
        &self.variables[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }

    pub fn noise(&self) -> &[NoiseDist] {
        &self.noise
    }

    pub fn parents(&self, i: usize) -> Vec<usize> {
        self.equations[i].mechanism.parents()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn mechanism(&self, i: usize) -> &Mechanism {
        &self.equations[i].mechanism
    }

    /// Constant shift appended to equation `i` by additive interventions.
    pub fn shift(&self, i: usize) -> f64 {
        self.equations[i].shift
    }

    pub fn protected_index(&self) -> Option<usize> {
        self.variables.iter().position(|v| v.protected)
    }

    pub fn categorical_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.variables[i].is_categorical())
            .collect()
    }

    pub fn continuous_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| !self.variables[i].is_categorical())
            .collect()
    }

    pub fn actionable_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.variables[i].actionable)
            .collect()
    }

    /// Descendants of `i` (excluding `i`) in the causal graph.
    pub fn descendants(&self, i: usize) -> Vec<usize> {
        let mut reached = vec![false; self.len()];
        reached[i] = true;
        for &j in &self.order {
            if self.parents(j).iter().any(|&p| reached[p]) {
                reached[j] = true;
            }
        }
        reached[i] = false;
        (0..self.len()).filter(|&j| reached[j]).collect()
    }

    pub fn validate_instance(&self, v: &[f64]) -> Result<()> {
        self.check_len(v.len())?;
        for (var, &x) in self.variables.iter().zip(v) {
            if let Some(levels) = var.levels() {
                if !is_level(levels, x) {
                    return Err(Error::InvalidLevel {
                        variable: var.name.clone(),
                        value: x,
                    });
                }
            } else if !x.is_finite() {
                return Err(Error::InvalidScm(format!(
                    "non-finite value {x} for `{}`",
                    var.name
                )));
            }
        }
        Ok(())
    }

    fn check_len(&self, got: usize) -> Result<()> {
        if got != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got,
            });
        }
        Ok(())
    }

    /// Push noise through the structural equations in topological order.
    pub fn generate(&self, u: &[f64]) -> Result<Instance> {
        self.check_len(u.len())?;
        let mut out = vec![0.0; self.len()];
        self.generate_into(u, None, &mut out);
        Ok(Instance(out))
    }

    /// Unchecked generation with optional extra per-variable shifts (an additive
    /// intervention applied on the fly). Lengths must match the model.
    #[inline]
    pub fn generate_into(&self, u: &[f64], shift: Option<&[f64]>, out: &mut [f64]) {
        for &i in &self.order {
            let eq = &self.equations[i];
            let mut x = eq.mechanism.forward(out, u[i]);
            if !matches!(eq.mechanism, Mechanism::Constant(_)) {
                x += eq.shift;
                if let Some(s) = shift {
                    x += s[i];
                }
            }
            out[i] = x;
        }
    }

    /// Generation under a transient intervention given in dense form.
    #[inline]
    pub(crate) fn generate_with(
        &self,
        u: &[f64],
        hard: &[Option<f64>],
        shift: &[f64],
        out: &mut [f64],
    ) {
        for &i in &self.order {
            out[i] = match hard[i] {
                Some(theta) => theta,
                None => {
                    let eq = &self.equations[i];
                    let x = eq.mechanism.forward(out, u[i]);
                    if matches!(eq.mechanism, Mechanism::Constant(_)) {
                        x
                    } else {
                        x + eq.shift + shift[i]
                    }
                }
            };
        }
    }

    /// Recover the exogenous noise of `v`.
    pub fn abduct(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.validate_instance(v)?;
        Ok(self.abduct_unchecked(v))
    }

    #[inline]
    pub(crate) fn abduct_unchecked(&self, v: &[f64]) -> Vec<f64> {
        self.equations
            .iter()
            .zip(v)
            .map(|(eq, &x)| eq.mechanism.inverse(v, x - eq.shift))
            .collect()
    }

    pub fn validate_intervention(&self, iv: &Intervention) -> Result<()> {
        let n = self.len();
        let check_index = |i: usize| {
            if i >= n {
                Err(Error::InvalidIndex { index: i, len: n })
            } else {
                Ok(())
            }
        };
        let check_hard = |indices: &[usize], values: &[f64]| -> Result<()> {
            if indices.len() != values.len() {
                return Err(Error::InvalidIntervention(
                    "index and value lists differ in length".into(),
                ));
            }
            for (&i, &x) in indices.iter().zip(values) {
                check_index(i)?;
                if let Some(levels) = self.variables[i].levels() {
                    if !is_level(levels, x) {
                        return Err(Error::InvalidLevel {
                            variable: self.variables[i].name.clone(),
                            value: x,
                        });
                    }
                } else if !x.is_finite() {
                    return Err(Error::InvalidIntervention(format!("non-finite value {x}")));
                }
            }
            Ok(())
        };
        let check_shift = |indices: &[usize], shifts: &[f64]| -> Result<()> {
            if indices.len() != shifts.len() {
                return Err(Error::InvalidIntervention(
                    "index and shift lists differ in length".into(),
                ));
            }
            for (&i, &s) in indices.iter().zip(shifts) {
                check_index(i)?;
                if !s.is_finite() {
                    return Err(Error::InvalidIntervention(format!("non-finite shift {s}")));
                }
            }
            Ok(())
        };
        match iv {
            Intervention::Hard { indices, values } => check_hard(indices, values),
            Intervention::Additive { indices, shifts } => check_shift(indices, shifts),
            Intervention::Middle {
                categorical,
                values,
                continuous,
                shifts,
            } => {
                check_hard(categorical, values)?;
                check_shift(continuous, shifts)?;
                if categorical.iter().any(|i| continuous.contains(i)) {
                    return Err(Error::InvalidIntervention(
                        "categorical and continuous index sets overlap".into(),
                    ));
                }
                if let Some(&i) = categorical
                    .iter()
                    .find(|&&i| !self.variables[i].is_categorical())
                {
                    return Err(Error::InvalidIntervention(format!(
                        "`{}` is not categorical",
                        self.variables[i].name
                    )));
                }
                if let Some(&i) = continuous
                    .iter()
                    .find(|&&i| self.variables[i].is_categorical())
                {
                    return Err(Error::InvalidIntervention(format!(
                        "`{}` is not continuous",
                        self.variables[i].name
                    )));
                }
                Ok(())
            }
        }
    }

    /// The intervened model: hard targets become constants (severing their parents),
    /// additive targets get a shift appended to their equation.
    pub fn apply_intervention(&self, iv: &Intervention) -> Result<StructuralCausalModel> {
        self.validate_intervention(iv)?;
        let (hard, shift) = iv.dense(self.len());
        let mut out = self.clone();
        for (i, eq) in out.equations.iter_mut().enumerate() {
            if let Some(theta) = hard[i] {
                eq.mechanism = Mechanism::Constant(theta);
                eq.shift = 0.0;
            } else {
                eq.shift += shift[i];
            }
        }
        out.order = topological_order(&out.equations)?;
        Ok(out)
    }

    /// Abduction, action, prediction.
    pub fn counterfactual(&self, v: &[f64], iv: &Intervention) -> Result<Instance> {
        self.validate_intervention(iv)?;
        let u = self.abduct(v)?;
        Ok(self.counterfactual_from_noise(&u, iv))
    }

    /// Counterfactual from already-abducted noise; the intervention must be valid.
    pub(crate) fn counterfactual_from_noise(&self, u: &[f64], iv: &Intervention) -> Instance {
        let (hard, shift) = iv.dense(self.len());
        let mut out = vec![0.0; self.len()];
        self.generate_with(u, &hard, &shift, &mut out);
        Instance(out)
    }

    /// Counterfactual twins of `v`: one per level of the categorical variable at `index`,
    /// in level order.
    pub fn twins(&self, v: &[f64], index: usize) -> Result<Vec<Twin>> {
        if index >= self.len() {
            return Err(Error::InvalidIndex {
                index,
                len: self.len(),
            });
        }
        let levels = self.variables[index]
            .levels()
            .ok_or_else(|| Error::NotCategorical(self.variables[index].name.clone()))?
            .to_vec();
        let u = self.abduct(v)?;
        Ok(levels
            .into_iter()
            .map(|level| Twin {
                level,
                instance: self
                    .counterfactual_from_noise(&u, &Intervention::hard(index, level as f64)),
            })
            .collect())
    }

    /// i.i.d. draws `(v, u)` with `v = generate(u)`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<(Instance, Vec<f64>)> {
        (0..n)
            .map(|_| {
                let u: Vec<f64> = self.noise.iter().map(|d| d.sample(rng)).collect();
                let mut v = vec![0.0; self.len()];
                self.generate_into(&u, None, &mut v);
                (Instance(v), u)
            })
            .collect()
    }
}

/// Counterfactual of an instance under `do(A = level)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Twin {
    pub level: i64,
    pub instance: Instance,
}

pub(crate) fn is_level(levels: &[i64], x: f64) -> bool {
    x.fract() == 0.0 && levels.binary_search(&(x as i64)).is_ok()
}

/// Kahn's algorithm, always releasing the lowest ready index first.
fn topological_order(equations: &[Equation]) -> Result<Vec<usize>> {
    let n = equations.len();
    let parents: Vec<Vec<usize>> = equations.iter().map(|e| e.mechanism.parents()).collect();
    for (i, ps) in parents.iter().enumerate() {
        if let Some(&p) = ps.iter().find(|&&p| p >= n || p == i) {
            return Err(Error::InvalidScm(format!(
                "equation {i} reads invalid parent {p}"
            )));
        }
    }
    let mut indegree: Vec<usize> = parents.iter().map(|ps| ps.len()).collect();
    let mut children = vec![Vec::new(); n];
    for (i, ps) in parents.iter().enumerate() {
        for &p in ps {
            children[p].push(i);
        }
    }
    let mut ready: std::collections::BTreeSet<usize> =
        (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &c in &children[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.insert(c);
            }
        }
    }
    if order.len() != n {
        return Err(Error::InvalidScm("causal graph has a cycle".into()));
    }
    Ok(order)
}

/// Linear SCM `v = S (u + c)` with its inter-space matrix `S` and inverse.
#[derive(Debug, Clone)]
pub struct LinearScm {
    base: StructuralCausalModel,
    s: DMatrix<f64>,
    s_inv: DMatrix<f64>,
}

impl LinearScm {
    pub fn new(base: StructuralCausalModel) -> Result<Self> {
        let n = base.len();
        let mut s_inv = DMatrix::<f64>::identity(n, n);
        for (i, eq) in base.equations.iter().enumerate() {
            match &eq.mechanism {
                Mechanism::Linear { coefficients, .. } if eq.shift == 0.0 => {
                    for &(j, c) in coefficients {
                        s_inv[(i, j)] -= c;
                    }
                }
                other => {
                    return Err(Error::NotLinear(format!(
                        "equation of `{}` is {other:?}",
                        base.variables[i].name
                    )))
                }
            }
        }
        // Column j of S is the response of v to a unit noise at j, by substitution.
        let mut s = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            for &i in &base.order {
                let Mechanism::Linear { coefficients, .. } = &base.equations[i].mechanism else {
                    unreachable!("checked above")
                };
                let from_parents: f64 = coefficients.iter().map(|&(k, c)| c * s[(k, j)]).sum();
                s[(i, j)] = from_parents + if i == j { 1.0 } else { 0.0 };
            }
        }
        Ok(Self { base, s, s_inv })
    }

    pub fn base(&self) -> &StructuralCausalModel {
        &self.base
    }

    /// Maps exogenous noise to endogenous values (up to intercepts).
    pub fn s(&self) -> &DMatrix<f64> {
        &self.s
    }

    pub fn s_inv(&self) -> &DMatrix<f64> {
        &self.s_inv
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.s.column(j).iter().copied().collect()
    }

    /// Sub-matrix of `S` on the given rows and columns.
    pub fn restricted(&self, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), cols.len(), |r, c| self.s[(rows[r], cols[c])])
    }

    /// Counterfactual under the additive intervention `δ` (dense): `v + S δ`.
    pub fn counterfactual_additive(&self, v: &[f64], delta: &[f64]) -> Result<Instance> {
        self.base.check_len(v.len())?;
        self.base.check_len(delta.len())?;
        Ok(Instance(
            (0..v.len())
                .map(|i| v[i] + (0..v.len()).map(|j| self.s[(i, j)] * delta[j]).sum::<f64>())
                .collect(),
        ))
    }

    /// Counterfactual under `do(V_i = θ)`: `v + (θ − v_i) S_{*,i}`.
    ///
    /// For a root variable `v_i = S⁻¹(v)_i` (zero intercept), so this is also
    /// `v + (θ − S⁻¹(v)_i) S_{*,i}`; for non-roots only the `v_i` form is correct.
    pub fn counterfactual_hard(&self, v: &[f64], i: usize, theta: f64) -> Result<Instance> {
        self.base.check_len(v.len())?;
        if i >= v.len() {
            return Err(Error::InvalidIndex {
                index: i,
                len: v.len(),
            });
        }
        let step = theta - v[i];
        Ok(Instance(
            (0..v.len()).map(|k| v[k] + step * self.s[(k, i)]).collect(),
        ))
    }

    /// Twins by the linear shift `v + (a' − a) S_{*,A}`.
    pub fn twins(&self, v: &[f64], protected: usize) -> Result<Vec<Twin>> {
        self.base.validate_instance(v)?;
        let levels = self.base.variables[protected]
            .levels()
            .ok_or_else(|| Error::NotCategorical(self.base.variables[protected].name.clone()))?;
        let a = v[protected];
        Ok(levels
            .iter()
            .map(|&level| Twin {
                level,
                instance: if level as f64 == a {
                    Instance(v.to_vec())
                } else {
                    Instance(
                        (0..v.len())
                            .map(|k| v[k] + (level as f64 - a) * self.s[(k, protected)])
                            .collect(),
                    )
                },
            })
            .collect())
    }

    /// Max abs entry of `S · S⁻¹ − I`.
    pub fn inverse_residual(&self) -> f64 {
        let n = self.s.nrows();
        (&self.s * &self.s_inv - DMatrix::<f64>::identity(n, n))
            .iter()
            .fold(0.0, |m, x| m.max(x.abs()))
    }
}

impl Deref for LinearScm {
    type Target = StructuralCausalModel;

    fn deref(&self) -> &StructuralCausalModel {
        &self.base
    }
}

/// True when `a` and `b` agree componentwise within [`TOLERANCE`].
pub fn approx_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= TOLERANCE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{build_scm, BuiltinScm};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lin() -> StructuralCausalModel {
        build_scm(BuiltinScm::Lin)
    }

    #[test]
    fn abduct_running_example() {
        let u = lin().abduct(&[1.0, 3.0, 0.0]).unwrap();
        assert!(approx_eq(&u, &[1.0, 1.0, 2.0]));
        let lin_scm = LinearScm::new(lin()).unwrap();
        let via_matrix: Vec<f64> = (lin_scm.s_inv()
            * nalgebra::DVector::from_vec(vec![1.0, 3.0, 0.0]))
        .iter()
        .copied()
        .collect();
        assert!(approx_eq(&u, &via_matrix));
    }

    #[test]
    fn generate_running_example_and_zero_noise() {
        let scm = lin();
        assert_eq!(
            scm.generate(&[1.0, 1.0, 2.0]).unwrap().as_slice(),
            &[1.0, 3.0, 0.0]
        );
        let v = scm.generate(&[0.0; 3]).unwrap();
        assert_eq!(v.as_slice(), &[0.0; 3]);
        assert!(approx_eq(&scm.abduct(&v).unwrap(), &[0.0; 3]));
    }

    #[test]
    fn abduct_rejects_bad_input() {
        let scm = lin();
        assert!(matches!(
            scm.abduct(&[1.0, 2.0]),
            Err(Error::DimensionMismatch {
                expected: 3,
                got: 2
            })
        ));
        assert!(matches!(
            scm.abduct(&[0.5, 2.0, 1.0]),
            Err(Error::InvalidLevel { .. })
        ));
        assert!(matches!(
            scm.generate(&[0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn hard_intervention_replaces_equation() {
        let scm = lin();
        let iv = Intervention::hard(0, 0.0);
        let m = scm.apply_intervention(&iv).unwrap();
        assert!(matches!(m.mechanism(0), Mechanism::Constant(t) if *t == 0.0));
        assert!(m.parents(0).is_empty());
        // X1 and X2 unchanged: u=(5,1,2) with A forced to 0 gives X1=1, X2=0-1+2
        assert_eq!(
            m.generate(&[5.0, 1.0, 2.0]).unwrap().as_slice(),
            &[0.0, 1.0, 1.0]
        );
    }

    #[test]
    fn empty_additive_leaves_model_unchanged() {
        let scm = lin();
        let m = scm.apply_intervention(&Intervention::empty()).unwrap();
        let u = [1.0, -0.3, 0.7];
        assert_eq!(m.generate(&u).unwrap(), scm.generate(&u).unwrap());
    }

    #[test]
    fn middle_intervention_applies_both_clauses() {
        let scm = lin();
        let iv = Intervention::Middle {
            categorical: vec![0],
            values: vec![1.0],
            continuous: vec![1],
            shifts: vec![0.5],
        };
        let m = scm.apply_intervention(&iv).unwrap();
        // A:=1, X1:=2A+U1+0.5, X2 unchanged
        let v = m.generate(&[0.0, 1.0, 2.0]).unwrap();
        assert!(approx_eq(&v, &[1.0, 3.5, 1.0 - 3.5 + 2.0]));
        assert_eq!(m.shift(1), 0.5);
        assert_eq!(m.shift(2), 0.0);
    }

    #[test]
    fn middle_intervention_role_checks() {
        let scm = lin();
        let wrong_role = Intervention::Middle {
            categorical: vec![1],
            values: vec![1.0],
            continuous: vec![],
            shifts: vec![],
        };
        assert!(scm.validate_intervention(&wrong_role).is_err());
        let overlap = Intervention::Middle {
            categorical: vec![0],
            values: vec![1.0],
            continuous: vec![0],
            shifts: vec![0.1],
        };
        assert!(scm.validate_intervention(&overlap).is_err());
        let bad_level = Intervention::hard(0, 2.0);
        assert!(matches!(
            scm.apply_intervention(&bad_level),
            Err(Error::InvalidLevel { .. })
        ));
        assert!(matches!(
            scm.apply_intervention(&Intervention::hard(7, 0.0)),
            Err(Error::InvalidIndex { .. })
        ));
    }

    #[test]
    fn counterfactual_examples() {
        let scm = lin();
        let v = [1.0, 3.0, 0.0];
        let add = Intervention::Additive {
            indices: vec![1],
            shifts: vec![1.0],
        };
        assert!(approx_eq(
            &scm.counterfactual(&v, &add).unwrap(),
            &[1.0, 4.0, -1.0]
        ));
        assert!(approx_eq(
            &scm.counterfactual(&v, &Intervention::empty()).unwrap(),
            &v
        ));
        assert!(approx_eq(
            &scm.counterfactual(&v, &Intervention::hard(0, 0.0)).unwrap(),
            &[0.0, 1.0, 1.0]
        ));
    }

    #[test]
    fn counterfactual_matches_intervened_model() {
        let scm = build_scm(BuiltinScm::Anm);
        let v = scm.generate(&[1.0, 0.3, -0.2]).unwrap();
        let iv = Intervention::Additive {
            indices: vec![1, 2],
            shifts: vec![0.4, -1.0],
        };
        let direct = scm.counterfactual(&v, &iv).unwrap();
        let via = scm
            .apply_intervention(&iv)
            .unwrap()
            .generate(&scm.abduct(&v).unwrap())
            .unwrap();
        assert!(approx_eq(&direct, &via));
    }

    #[test]
    fn linear_closed_forms_running_example() {
        let l = LinearScm::new(lin()).unwrap();
        assert_eq!(l.column(0), vec![1.0, 2.0, -1.0]);
        assert_eq!(l.column(1), vec![0.0, 1.0, -1.0]);
        assert_eq!(l.column(2), vec![0.0, 0.0, 1.0]);
        let v = [1.0, 3.0, 0.0];
        assert!(approx_eq(
            &l.counterfactual_additive(&v, &[0.0, 1.0, 0.0]).unwrap(),
            &[1.0, 4.0, -1.0]
        ));
        assert!(approx_eq(
            &l.counterfactual_additive(&v, &[0.0; 3]).unwrap(),
            &v
        ));
        assert!(approx_eq(
            &l.counterfactual_hard(&v, 0, 0.0).unwrap(),
            &[0.0, 1.0, 1.0]
        ));
        // θ equal to the abducted value of a root leaves v unchanged
        assert!(approx_eq(&l.counterfactual_hard(&v, 0, 1.0).unwrap(), &v));
        // non-root target
        assert!(approx_eq(
            &l.counterfactual_hard(&v, 1, 0.0).unwrap(),
            &[1.0, 0.0, 3.0]
        ));
        assert!(l.inverse_residual() < 1e-12);
        for i in 0..3 {
            assert_eq!(l.s()[(i, i)], 1.0);
            assert_eq!(l.s_inv()[(i, i)], 1.0);
        }
    }

    #[test]
    fn linear_rejects_nonlinear() {
        assert!(matches!(
            LinearScm::new(build_scm(BuiltinScm::Anm)),
            Err(Error::NotLinear(_))
        ));
    }

    #[test]
    fn twins_examples() {
        let scm = lin();
        let twins = scm.twins(&[1.0, 3.0, 0.0], 0).unwrap();
        assert_eq!(twins.len(), 2);
        assert_eq!(twins[0].level, 0);
        assert!(approx_eq(&twins[0].instance, &[0.0, 1.0, 1.0]));
        assert!(approx_eq(&twins[1].instance, &[1.0, 3.0, 0.0]));
        let linear = LinearScm::new(scm.clone()).unwrap();
        let shifted = linear.twins(&[1.0, 3.0, 0.0], 0).unwrap();
        for (a, b) in twins.iter().zip(&shifted) {
            assert!(approx_eq(&a.instance, &b.instance));
        }
        assert!(matches!(
            scm.twins(&[1.0, 3.0, 0.0], 1),
            Err(Error::NotCategorical(_))
        ));
    }

    #[test]
    fn single_level_twin_is_identity() {
        let vars = vec![
            VariableSpec::categorical("a", vec![3]).protected(),
            VariableSpec::continuous("x"),
        ];
        let scm = StructuralCausalModel::new(
            "one-level",
            vars,
            vec![
                Mechanism::linear(0.0, vec![]),
                Mechanism::linear(0.0, vec![(0, 1.5)]),
            ],
            vec![
                NoiseDist::Constant { value: 3.0 },
                NoiseDist::Normal { mean: 0.0, sd: 1.0 },
            ],
        )
        .unwrap();
        let twins = scm.twins(&[3.0, 0.2], 0).unwrap();
        assert_eq!(twins.len(), 1);
        assert!(approx_eq(&twins[0].instance, &[3.0, 0.2]));
    }

    #[test]
    fn cycle_rejected() {
        let vars = vec![VariableSpec::continuous("x"), VariableSpec::continuous("y")];
        let err = StructuralCausalModel::new(
            "cyclic",
            vars,
            vec![
                Mechanism::linear(0.0, vec![(1, 1.0)]),
                Mechanism::linear(0.0, vec![(0, 1.0)]),
            ],
            vec![NoiseDist::Normal { mean: 0.0, sd: 1.0 }; 2],
        );
        assert!(matches!(err, Err(Error::InvalidScm(_))));
    }

    #[test]
    fn sampling_is_seeded() {
        let scm = lin();
        let a = scm.sample(1, &mut ChaCha8Rng::seed_from_u64(9));
        let b = scm.sample(1, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        let draws = scm.sample(10_000, &mut ChaCha8Rng::seed_from_u64(1));
        let mean_a = draws.iter().map(|(v, _)| v[0]).sum::<f64>() / draws.len() as f64;
        assert!((mean_a - 0.5).abs() < 0.02, "mean of A = {mean_a}");
        assert!(draws.iter().all(|(v, _)| v[0] == 0.0 || v[0] == 1.0));
    }

    #[test]
    fn anm_conditional_variance() {
        let scm = build_scm(BuiltinScm::Anm);
        let draws = scm.sample(10_000, &mut ChaCha8Rng::seed_from_u64(2));
        let x1: Vec<f64> = draws
            .iter()
            .filter(|(v, _)| v[0] == 0.0)
            .map(|(v, _)| v[1])
            .collect();
        let m = x1.iter().sum::<f64>() / x1.len() as f64;
        let var = x1.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (x1.len() - 1) as f64;
        assert!((var - 1.0).abs() < 0.1, "Var(X1 | A=0) = {var}");
    }

    #[test]
    fn hard_intervention_severs_ancestry() {
        let scm = lin();
        let iv = Intervention::hard(0, 1.0);
        let m = scm.apply_intervention(&iv).unwrap();
        let a = m.generate(&[0.0, 0.5, 0.5]).unwrap();
        let b = m.generate(&[1.0, 0.5, 0.5]).unwrap();
        assert_eq!(a[0], 1.0);
        assert_eq!(a, b);
    }

    #[test]
    fn descendants_of_protected() {
        assert_eq!(lin().descendants(0), vec![1, 2]);
        assert_eq!(lin().descendants(2), Vec::<usize>::new());
    }
}
