//! Independent oracles shared by the integration tests. Nothing here calls the
//! library's counterfactual or closed-form code.

#![allow(dead_code, clippy::needless_range_loop)]

use causal_recourse::scm::{Mechanism, NoiseDist, StructuralCausalModel, VariableSpec};
use rand::Rng;

/// A random linear SCM in topological index order, with its raw parameters.
pub struct RandomLinear {
    pub scm: StructuralCausalModel,
    pub intercept: Vec<f64>,
    /// `coef[i][j]` for `j < i`.
    pub coef: Vec<Vec<f64>>,
}

/// `n` variables; variable 0 is a protected binary root when `protected`.
pub fn random_linear<R: Rng>(rng: &mut R, n: usize, protected: bool) -> RandomLinear {
    let mut variables = Vec::with_capacity(n);
    let mut mechanisms = Vec::with_capacity(n);
    let mut noise = Vec::with_capacity(n);
    let mut intercept = vec![0.0; n];
    let mut coef = vec![vec![0.0; n]; n];
    for i in 0..n {
        if i == 0 && protected {
            variables.push(VariableSpec::categorical("a", vec![0, 1]).protected());
            mechanisms.push(Mechanism::linear(0.0, vec![]));
            noise.push(NoiseDist::Bernoulli { p: 0.5 });
            continue;
        }
        let mut terms = Vec::new();
        for j in 0..i {
            if rng.random_bool(0.7) {
                let c = rng.random_range(-2.0..2.0);
                coef[i][j] = c;
                terms.push((j, c));
            }
        }
        intercept[i] = rng.random_range(-1.0..1.0);
        variables.push(VariableSpec::continuous(format!("x{i}")));
        mechanisms.push(Mechanism::linear(intercept[i], terms));
        noise.push(NoiseDist::Normal { mean: 0.0, sd: 1.0 });
    }
    let scm = StructuralCausalModel::new("random", variables, mechanisms, noise).unwrap();
    RandomLinear {
        scm,
        intercept,
        coef,
    }
}

impl RandomLinear {
    pub fn len(&self) -> usize {
        self.intercept.len()
    }

    pub fn abduct(&self, v: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|i| v[i] - self.intercept[i] - (0..i).map(|j| self.coef[i][j] * v[j]).sum::<f64>())
            .collect()
    }

    /// Forward substitution with optional hard values and additive shifts.
    pub fn generate(&self, u: &[f64], hard: &[Option<f64>], shift: &[f64]) -> Vec<f64> {
        let mut v = vec![0.0; self.len()];
        for i in 0..self.len() {
            v[i] = match hard[i] {
                Some(x) => x,
                None => {
                    self.intercept[i]
                        + (0..i).map(|j| self.coef[i][j] * v[j]).sum::<f64>()
                        + u[i]
                        + shift[i]
                }
            };
        }
        v
    }

    pub fn counterfactual(&self, v: &[f64], hard: &[Option<f64>], shift: &[f64]) -> Vec<f64> {
        self.generate(&self.abduct(v), hard, shift)
    }

    /// `S[i][j]`: response of `v_i` to a unit of noise at `j`.
    pub fn s(&self) -> Vec<Vec<f64>> {
        let n = self.len();
        let zero_u = vec![0.0; n];
        let none = vec![None; n];
        let base = self.generate(&zero_u, &none, &zero_u);
        let mut s = vec![vec![0.0; n]; n];
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let col = self.generate(&e, &none, &zero_u);
            for i in 0..n {
                s[i][j] = col[i] - base[i];
            }
        }
        s
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let n = self.len();
        let u: Vec<f64> = self.scm.noise().iter().map(|d| d.sample(rng)).collect();
        self.generate(&u, &vec![None; n], &vec![0.0; n])
    }
}

/// `‖x‖_p`; `p = ∞` is the max norm.
pub fn lp_norm(x: &[f64], p: f64) -> f64 {
    if p.is_infinite() {
        x.iter().fold(0.0, |m, v| m.max(v.abs()))
    } else {
        x.iter().map(|v| v.abs().powf(p)).sum::<f64>().powf(1.0 / p)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Weights with magnitudes in `[lo, hi]` and random signs.
pub fn random_weights<R: Rng>(rng: &mut R, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(lo..hi);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// Uniform draw from the Euclidean unit sphere.
pub fn unit_sphere<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    loop {
        let g: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let r = lp_norm(&g, 2.0);
        if r > 1e-12 {
            return g.into_iter().map(|x| x / r).collect();
        }
    }
}

pub fn line(id: u32, ok: bool, what: &str, detail: &str) {
    println!(
        "[{}] criterion {id:>2}: {what}: {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
}
