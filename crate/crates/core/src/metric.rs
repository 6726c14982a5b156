//! Pseudometrics, product metrics, perturbation balls and counterfactual
//! perturbation sets.

use std::cmp::Ordering;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::scm::{Instance, Intervention, StructuralCausalModel};
use crate::{Error, Result, TOLERANCE};

/// An `L_p` exponent, `1 ≤ p ≤ ∞`. Infinity is kept symbolic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub enum Lp {
    Finite(f64),
    Infinity,
}

impl Lp {
    pub const ONE: Lp = Lp::Finite(1.0);
    pub const TWO: Lp = Lp::Finite(2.0);

    pub fn new(p: f64) -> Result<Self> {
        if p == f64::INFINITY {
            Ok(Lp::Infinity)
        } else if p.is_finite() && p >= 1.0 {
            Ok(Lp::Finite(p))
        } else {
            Err(Error::UnsupportedNorm(p))
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Lp::Finite(p) => p,
            Lp::Infinity => f64::INFINITY,
        }
    }

    /// The dual exponent `p*` with `1/p + 1/p* = 1`.
    pub fn conjugate(self) -> Lp {
        match self {
            Lp::Infinity => Lp::ONE,
            Lp::Finite(p) if p == 1.0 => Lp::Infinity,
            Lp::Finite(p) => Lp::Finite(p / (p - 1.0)),
        }
    }

    pub fn norm(self, x: &[f64]) -> f64 {
        self.norm_iter(x.iter().copied())
    }

    pub fn norm_iter<I: IntoIterator<Item = f64>>(self, x: I) -> f64 {
        match self {
            Lp::Infinity => x.into_iter().fold(0.0, |m, v| m.max(v.abs())),
            Lp::Finite(p) if p == 1.0 => x.into_iter().map(f64::abs).sum(),
            Lp::Finite(p) if p == 2.0 => x.into_iter().map(|v| v * v).sum::<f64>().sqrt(),
            Lp::Finite(p) => x
                .into_iter()
                .map(|v| v.abs().powf(p))
                .sum::<f64>()
                .powf(1.0 / p),
        }
    }

    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        self.norm_iter(a.iter().zip(b).map(|(x, y)| x - y))
    }
}

impl TryFrom<f64> for Lp {
    type Error = Error;

    fn try_from(p: f64) -> Result<Self> {
        Lp::new(p)
    }
}

impl From<Lp> for f64 {
    fn from(p: Lp) -> f64 {
        p.value()
    }
}

impl fmt::Display for Lp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Lp::Finite(p) => write!(f, "{p}"),
            Lp::Infinity => f.write_str("inf"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Pseudometric {
    /// 0 if equal, 1 otherwise.
    Discrete,
    /// Identically 0.
    Zero,
    /// `|a − b|`, summed over the block.
    AbsDiff,
    Lq {
        q: Lp,
    },
    /// Explicit symmetric distance table over a level list.
    Table {
        levels: Vec<i64>,
        d: Vec<Vec<f64>>,
    },
}

impl Pseudometric {
    pub fn lq(q: Lp) -> Self {
        Pseudometric::Lq { q }
    }

    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Pseudometric::Discrete => {
                if a == b {
                    0.0
                } else {
                    1.0
                }
            }
            Pseudometric::Zero => 0.0,
            Pseudometric::AbsDiff => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
            Pseudometric::Lq { q } => q.distance(a, b),
            Pseudometric::Table { levels, d } => {
                let pos = |x: f64| levels.iter().position(|&l| l as f64 == x);
                match (pos(a[0]), pos(b[0])) {
                    (Some(i), Some(j)) => d[i][j],
                    _ if a == b => 0.0,
                    _ => f64::INFINITY,
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Pseudometric::Table { levels, d } = self {
            let k = levels.len();
            if d.len() != k || d.iter().any(|r| r.len() != k) {
                return Err(Error::InvalidMetric("table is not square".into()));
            }
            for i in 0..k {
                if d[i][i] != 0.0 {
                    return Err(Error::InvalidMetric("nonzero diagonal".into()));
                }
                for j in 0..k {
                    if d[i][j] != d[j][i] || !(d[i][j] >= 0.0) {
                        return Err(Error::InvalidMetric(
                            "table not symmetric/nonnegative".into(),
                        ));
                    }
                    for m in 0..k {
                        if d[i][m] > d[i][j] + d[j][m] + 1e-12 {
                            return Err(Error::InvalidMetric("triangle inequality fails".into()));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// A metric over a subset of coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub indices: Vec<usize>,
    pub metric: Pseudometric,
}

/// Block distances combined by an `L_q` norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductMetric {
    pub blocks: Vec<Block>,
    pub norm: Lp,
}

impl ProductMetric {
    pub fn new(blocks: Vec<Block>, norm: Lp) -> Result<Self> {
        for b in &blocks {
            b.metric.validate()?;
        }
        let mut seen: Vec<usize> = blocks.iter().flat_map(|b| b.indices.clone()).collect();
        let n = seen.len();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != n {
            return Err(Error::InvalidMetric("blocks overlap".into()));
        }
        Ok(Self { blocks, norm })
    }

    fn max_index(&self) -> Option<usize> {
        self.blocks
            .iter()
            .flat_map(|b| b.indices.iter().copied())
            .max()
    }

    pub fn block_distances(&self, v: &[f64], w: &[f64]) -> Vec<f64> {
        let mut a = Vec::new();
        let mut b = Vec::new();
        self.blocks
            .iter()
            .map(|blk| {
                a.clear();
                b.clear();
                a.extend(blk.indices.iter().map(|&i| v[i]));
                b.extend(blk.indices.iter().map(|&i| w[i]));
                blk.metric.distance(&a, &b)
            })
            .collect()
    }

    pub fn distance(&self, v: &[f64], w: &[f64]) -> Result<f64> {
        if v.len() != w.len() {
            return Err(Error::DimensionMismatch {
                expected: v.len(),
                got: w.len(),
            });
        }
        if let Some(m) = self.max_index() {
            if m >= v.len() {
                return Err(Error::DimensionMismatch {
                    expected: m + 1,
                    got: v.len(),
                });
            }
        }
        Ok(self.norm.norm(&self.block_distances(v, w)))
    }
}

/// Convenience: the whole-instance product metric.
pub fn distance(m: &ProductMetric, v: &[f64], w: &[f64]) -> Result<f64> {
    m.distance(v, w)
}

/// Perturbation ball of radius `Δ` with middle interventions on `I` (categorical)
/// and `J` (continuous).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub metric: ProductMetric,
    pub radius: f64,
    pub categorical: Vec<usize>,
    pub continuous: Vec<usize>,
    /// Combining-norm-free metric on the continuous block.
    pub continuous_q: Lp,
}

impl PerturbationSpec {
    /// Counterfactual perturbation over every variable of `scm`: each categorical
    /// variable is its own block (the protected one under `protected_metric`, others
    /// discrete); all continuous variables form one `L_q` block.
    pub fn for_scm(
        scm: &StructuralCausalModel,
        protected_metric: Pseudometric,
        q: Lp,
        norm: Lp,
        radius: f64,
    ) -> Result<Self> {
        let categorical = scm.categorical_indices();
        let continuous = scm.continuous_indices();
        let mut blocks: Vec<Block> = categorical
            .iter()
            .map(|&i| Block {
                indices: vec![i],
                metric: if scm.variable(i).protected {
                    protected_metric.clone()
                } else {
                    Pseudometric::Discrete
                },
            })
            .collect();
        blocks.push(Block {
            indices: continuous.clone(),
            metric: Pseudometric::lq(q),
        });
        Self::new(
            ProductMetric::new(blocks, norm)?,
            radius,
            categorical,
            continuous,
            q,
        )
    }

    /// Additive counterfactual perturbation: continuous variables only, `I = ∅`.
    pub fn acp(scm: &StructuralCausalModel, q: Lp, radius: f64) -> Result<Self> {
        let continuous = scm.continuous_indices();
        let metric = ProductMetric::new(
            vec![Block {
                indices: continuous.clone(),
                metric: Pseudometric::lq(q),
            }],
            q,
        )?;
        Self::new(metric, radius, Vec::new(), continuous, q)
    }

    pub fn new(
        metric: ProductMetric,
        radius: f64,
        categorical: Vec<usize>,
        continuous: Vec<usize>,
        continuous_q: Lp,
    ) -> Result<Self> {
        if !(radius >= 0.0) || !radius.is_finite() {
            return Err(Error::InvalidMetric(format!(
                "radius {radius} must be >= 0"
            )));
        }
        if categorical.iter().any(|i| continuous.contains(i)) {
            return Err(Error::InvalidMetric("I and J overlap".into()));
        }
        Ok(Self {
            metric,
            radius,
            categorical,
            continuous,
            continuous_q,
        })
    }

    pub fn with_radius(&self, radius: f64) -> Result<Self> {
        let mut s = self.clone();
        if !(radius >= 0.0) || !radius.is_finite() {
            return Err(Error::InvalidMetric(format!(
                "radius {radius} must be >= 0"
            )));
        }
        s.radius = radius;
        Ok(s)
    }

    pub fn ball_contains(&self, center: &[f64], candidate: &[f64]) -> Result<bool> {
        Ok(self.metric.distance(center, candidate)? <= self.radius + TOLERANCE)
    }

    fn categorical_blocks(&self) -> impl Iterator<Item = &Block> {
        self.metric
            .blocks
            .iter()
            .filter(|b| b.indices.iter().all(|i| self.categorical.contains(i)))
    }

    /// Combined distance between categorical values `θ` (aligned with `I`) and
    /// the categorical part of `v`.
    pub fn categorical_distance(&self, theta: &[f64], v: &[f64]) -> f64 {
        let mut w = v.to_vec();
        for (k, &i) in self.categorical.iter().enumerate() {
            w[i] = theta[k];
        }
        let dists = self.categorical_blocks().map(|b| {
            let a: Vec<f64> = b.indices.iter().map(|&i| v[i]).collect();
            let c: Vec<f64> = b.indices.iter().map(|&i| w[i]).collect();
            b.metric.distance(&a, &c)
        });
        self.metric.norm.norm_iter(dists)
    }

    /// `Θ_Δ`: categorical value tuples on `I` within distance `Δ` of `v`,
    /// in lexicographic level order.
    pub fn levels_in_ball(&self, scm: &StructuralCausalModel, v: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut level_sets = Vec::with_capacity(self.categorical.len());
        for &i in &self.categorical {
            let levels = scm
                .variable(i)
                .levels()
                .ok_or_else(|| Error::NotCategorical(scm.variable(i).name.clone()))?;
            level_sets.push(levels.iter().map(|&l| l as f64).collect::<Vec<_>>());
        }
        let mut out = Vec::new();
        let mut idx = vec![0usize; level_sets.len()];
        loop {
            let theta: Vec<f64> = idx.iter().zip(&level_sets).map(|(&k, s)| s[k]).collect();
            if self.categorical_distance(&theta, v) <= self.radius + TOLERANCE {
                out.push(theta);
            }
            // odometer increment, last index fastest
            let mut pos = level_sets.len();
            loop {
                if pos == 0 {
                    return Ok(out);
                }
                pos -= 1;
                idx[pos] += 1;
                if idx[pos] < level_sets[pos].len() {
                    break;
                }
                idx[pos] = 0;
            }
        }
    }

    /// `Δ_θ`: the largest continuous radius `r` with `N(d_cat, r) ≤ Δ`.
    pub fn residual_radius(&self, theta: &[f64], v: &[f64]) -> Result<f64> {
        let dists: Vec<f64> = {
            let mut w = v.to_vec();
            for (k, &i) in self.categorical.iter().enumerate() {
                w[i] = theta[k];
            }
            self.categorical_blocks()
                .map(|b| {
                    let a: Vec<f64> = b.indices.iter().map(|&i| v[i]).collect();
                    let c: Vec<f64> = b.indices.iter().map(|&i| w[i]).collect();
                    b.metric.distance(&a, &c)
                })
                .collect()
        };
        residual_radius(self.metric.norm, &dists, self.radius)
    }
}

/// Largest `r ∈ [0, Δ]` with `N(d_1, …, d_k, r) ≤ Δ`. `L_2` is closed form,
/// everything else bisection.
pub fn residual_radius(norm: Lp, categorical: &[f64], delta: f64) -> Result<f64> {
    let d = norm.norm(categorical);
    if d > delta + TOLERANCE {
        return Err(Error::InvalidMetric(format!(
            "categorical distance {d} exceeds radius {delta}"
        )));
    }
    if norm == Lp::TWO {
        return Ok((delta * delta - d * d).max(0.0).sqrt());
    }
    let total = |r: f64| norm.norm_iter(categorical.iter().copied().chain([r]));
    if total(delta) <= delta {
        return Ok(delta);
    }
    let (mut lo, mut hi) = (0.0, delta);
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if total(mid) <= delta {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protection {
    Protected,
    PartiallyProtected,
    Unprotected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtectedSpec {
    pub index: usize,
    pub verdict: Protection,
}

/// Protected when every pair of levels is at distance 0; partially when some
/// distinct pair is.
pub fn classify_protection(levels: &[i64], metric: &Pseudometric) -> Protection {
    let mut zero = 0usize;
    let mut pairs = 0usize;
    for (k, &a) in levels.iter().enumerate() {
        for &b in &levels[k + 1..] {
            pairs += 1;
            if metric.distance(&[a as f64], &[b as f64]) == 0.0 {
                zero += 1;
            }
        }
    }
    if zero == pairs {
        Protection::Protected
    } else if zero > 0 {
        Protection::PartiallyProtected
    } else {
        Protection::Unprotected
    }
}

/// Points in the `L_q` ball of radius 1 in `dim` dimensions: `interior` uniform
/// draws, `boundary` draws on the sphere, and for `q ∈ {1, ∞}` the extreme points.
pub fn sample_unit_ball<R: Rng + ?Sized>(
    dim: usize,
    q: Lp,
    interior: usize,
    boundary: usize,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(interior + boundary);
    if dim == 0 {
        return out;
    }
    let gaussian = |rng: &mut R| -> Vec<f64> {
        loop {
            let g: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            if q.norm(&g) > 0.0 {
                return g;
            }
        }
    };
    for _ in 0..interior {
        if q == Lp::TWO {
            let g = gaussian(rng);
            let r = rng.random::<f64>().powf(1.0 / dim as f64) / Lp::TWO.norm(&g);
            out.push(g.into_iter().map(|x| x * r).collect());
        } else {
            loop {
                let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
                if q.norm(&x) <= 1.0 {
                    out.push(x);
                    break;
                }
            }
        }
    }
    for _ in 0..boundary {
        let g = gaussian(rng);
        let s = q.norm(&g);
        out.push(g.into_iter().map(|x| x / s).collect());
    }
    match q {
        Lp::Finite(p) if p == 1.0 => {
            for i in 0..dim {
                for sign in [1.0, -1.0] {
                    let mut e = vec![0.0; dim];
                    e[i] = sign;
                    out.push(e);
                }
            }
        }
        Lp::Infinity if dim <= 12 => {
            for mask in 0..(1u32 << dim) {
                out.push(
                    (0..dim)
                        .map(|i| if mask >> i & 1 == 1 { -1.0 } else { 1.0 })
                        .collect(),
                );
            }
        }
        _ => {}
    }
    out
}

/// One member of a counterfactual perturbation set, as a dense middle
/// intervention applied to the exogenous noise of the center.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationDraw {
    pub hard: Vec<Option<f64>>,
    pub shift: Vec<f64>,
}

impl PerturbationDraw {
    pub fn intervention(&self, spec: &PerturbationSpec) -> Intervention {
        Intervention::Middle {
            categorical: spec.categorical.clone(),
            values: spec
                .categorical
                .iter()
                .map(|&i| self.hard[i].unwrap_or(0.0))
                .collect(),
            continuous: spec.continuous.clone(),
            shifts: spec.continuous.iter().map(|&j| self.shift[j]).collect(),
        }
    }
}

/// Middle interventions `(θ, δ)` describing the sampled counterfactual perturbation
/// of `v`: for each `θ ∈ Θ_Δ`, the same seeded unit-ball draws scaled by `Δ_θ`.
/// `n_samples` counts draws per `θ`, a quarter of them on the boundary.
pub fn perturbation_draws(
    scm: &StructuralCausalModel,
    v: &[f64],
    spec: &PerturbationSpec,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<PerturbationDraw>> {
    scm.validate_instance(v)?;
    let n = scm.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let boundary = n_samples / 4;
    let unit = if spec.radius > 0.0 {
        sample_unit_ball(
            spec.continuous.len(),
            spec.continuous_q,
            n_samples - boundary,
            boundary,
            &mut rng,
        )
    } else {
        Vec::new()
    };
    let mut out = Vec::new();
    for theta in spec.levels_in_ball(scm, v)? {
        let mut hard = vec![None; n];
        for (k, &i) in spec.categorical.iter().enumerate() {
            hard[i] = Some(theta[k]);
        }
        let r = spec.residual_radius(&theta, v)?;
        out.push(PerturbationDraw {
            hard: hard.clone(),
            shift: vec![0.0; n],
        });
        if r > 0.0 {
            for d in &unit {
                let mut shift = vec![0.0; n];
                for (k, &j) in spec.continuous.iter().enumerate() {
                    shift[j] = r * d[k];
                }
                out.push(PerturbationDraw {
                    hard: hard.clone(),
                    shift,
                });
            }
        }
    }
    Ok(out)
}

/// Sampled counterfactual perturbation set of `v` (centers included).
pub fn sample_counterfactual_perturbation(
    scm: &StructuralCausalModel,
    v: &[f64],
    spec: &PerturbationSpec,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<Instance>> {
    let u = scm.abduct(v)?;
    let mut out = vec![0.0; scm.len()];
    Ok(perturbation_draws(scm, v, spec, n_samples, seed)?
        .into_iter()
        .map(|d| {
            scm.generate_with(&u, &d.hard, &d.shift, &mut out);
            Instance::new(out.clone())
        })
        .collect())
}

/// Union over `θ ∈ Θ_Δ` of the additive perturbation (radius `Δ_θ`) around the
/// twin `CF(v, do(I = θ))`, each computed in the intervened model `M^{do(I=θ)}`.
pub fn twin_acp_union(
    scm: &StructuralCausalModel,
    v: &[f64],
    spec: &PerturbationSpec,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<Instance>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let boundary = n_samples / 4;
    let unit = if spec.radius > 0.0 {
        sample_unit_ball(
            spec.continuous.len(),
            spec.continuous_q,
            n_samples - boundary,
            boundary,
            &mut rng,
        )
    } else {
        Vec::new()
    };
    let mut out = Vec::new();
    for theta in spec.levels_in_ball(scm, v)? {
        let fix = Intervention::Hard {
            indices: spec.categorical.clone(),
            values: theta.clone(),
        };
        let twin = scm.counterfactual(v, &fix)?;
        let intervened = scm.apply_intervention(&fix)?;
        let r = spec.residual_radius(&theta, v)?;
        out.push(twin.clone());
        if r > 0.0 {
            for d in &unit {
                let iv = Intervention::Additive {
                    indices: spec.continuous.clone(),
                    shifts: d.iter().map(|x| r * x).collect(),
                };
                out.push(intervened.counterfactual(&twin, &iv)?);
            }
        }
    }
    Ok(out)
}

/// Every point of `a` has a point of `b` within `tol` (max-norm).
pub fn covered_by(a: &[Instance], b: &[Instance], tol: f64) -> bool {
    let mut sorted: Vec<&Instance> = b.iter().collect();
    sorted.sort_by(|x, y| x[0].partial_cmp(&y[0]).unwrap_or(Ordering::Equal));
    a.iter().all(|p| {
        let start = sorted.partition_point(|q| q[0] < p[0] - tol);
        sorted[start..]
            .iter()
            .take_while(|q| q[0] <= p[0] + tol)
            .any(|q| Lp::Infinity.distance(p, q) <= tol)
    })
}

/// Two-sided sampled containment.
pub fn sets_match(a: &[Instance], b: &[Instance], tol: f64) -> bool {
    covered_by(a, b, tol) && covered_by(b, a, tol)
}

/// Sampled check that the counterfactual perturbation of `v` equals the union of
/// the twin additive perturbations, within `1e−6`.
pub fn decomposition_check(
    scm: &StructuralCausalModel,
    v: &[f64],
    spec: &PerturbationSpec,
    n_samples: usize,
    seed: u64,
) -> Result<bool> {
    let lhs = sample_counterfactual_perturbation(scm, v, spec, n_samples, seed)?;
    let rhs = twin_acp_union(scm, v, spec, n_samples, seed)?;
    Ok(sets_match(&lhs, &rhs, 1e-6))
}
