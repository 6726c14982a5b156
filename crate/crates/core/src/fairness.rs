//! Individual and relative twin-gap fairness metrics over recourse costs.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Recourse costs of one instance and of each of its twins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrbitCosts {
    pub instance: usize,
    /// Position of the instance's own level in `levels`.
    pub own: usize,
    pub levels: Vec<i64>,
    pub costs: Vec<f64>,
}

impl OrbitCosts {
    pub fn own_cost(&self) -> f64 {
        self.costs[self.own]
    }

    fn check(&self) -> Result<()> {
        if self.costs.len() != self.levels.len() || self.own >= self.costs.len() {
            return Err(Error::Metric(format!(
                "instance {}: {} costs for {} levels",
                self.instance,
                self.costs.len(),
                self.levels.len()
            )));
        }
        if let Some(k) = self.costs.iter().position(|c| !c.is_finite()) {
            return Err(Error::Metric(format!(
                "instance {}: missing cost for twin level {}",
                self.instance, self.levels[k]
            )));
        }
        Ok(())
    }

    fn max_gap(&self) -> f64 {
        let own = self.own_cost();
        self.costs
            .iter()
            .map(|c| (own - c).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    Plain,
    Robust,
    FairRobust,
}

impl CostKind {
    pub fn name(self) -> &'static str {
        match self {
            CostKind::Plain => "plain",
            CostKind::Robust => "robust",
            CostKind::FairRobust => "fair_robust",
        }
    }
}

/// `max_{a, v} |r(v) − r(v̈_a)|`.
pub fn sigma_ind(orbits: &[OrbitCosts]) -> Result<f64> {
    let mut worst = 0.0_f64;
    for o in orbits {
        o.check()?;
        worst = worst.max(o.max_gap());
    }
    Ok(worst)
}

/// `σ_ind` divided by the mean own cost.
pub fn sigma_relative(orbits: &[OrbitCosts]) -> Result<f64> {
    let gap = sigma_ind(orbits)?;
    let mean = orbits.iter().map(OrbitCosts::own_cost).sum::<f64>() / orbits.len() as f64;
    if !(mean > 0.0) {
        return Err(Error::Metric("mean recourse cost is zero".into()));
    }
    Ok(gap / mean)
}

/// Per-pair ratios `r(v) / r(v̈_a)` over twins at other levels, and the number
/// of pairs skipped because the twin cost is zero.
pub fn cost_ratio_distribution(orbits: &[OrbitCosts]) -> (Vec<(usize, f64)>, usize) {
    let mut ratios = Vec::new();
    let mut skipped = 0;
    for o in orbits {
        for (k, &c) in o.costs.iter().enumerate() {
            if k == o.own {
                continue;
            }
            if c == 0.0 || !c.is_finite() {
                skipped += 1;
            } else {
                ratios.push((o.instance, o.own_cost() / c));
            }
        }
    }
    (ratios, skipped)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub delta: f64,
    pub sigma_ind: f64,
    pub sigma_r: f64,
    pub sigma_ar: f64,
    pub sigma_fr: f64,
    pub n_instances: usize,
    pub n_excluded_unfair: usize,
    pub n_infeasible: usize,
}
