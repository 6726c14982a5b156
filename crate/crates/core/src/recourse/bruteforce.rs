//! Grid search over actions for arbitrary SCMs and classifiers.
//!
//! Candidates are visited in order of increasing cost; the first one whose
//! counterfactuals keep every perturbation point favorable is optimal on the grid.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use super::{ActionKind, Afrr, GridSpec, RecourseProblem, RecourseSolution, SolverKind, Validity};
use crate::metric::{perturbation_draws, PerturbationDraw, PerturbationSpec};
use crate::scm::Intervention;
use crate::{Error, Result};

/// Refuse grids larger than this many candidates.
const MAX_CANDIDATES: usize = 20_000_000;

struct Axis {
    index: usize,
    categorical: bool,
    values: Vec<f64>,
}

struct Search<'p, 'a> {
    problem: &'p RecourseProblem<'a>,
    v: &'p [f64],
    u: Vec<f64>,
    axes: Vec<Axis>,
    total: usize,
    /// Hard assignments and values of the objective's reference points.
    centers: Vec<(Vec<Option<f64>>, Vec<f64>)>,
}

impl Search<'_, '_> {
    fn decode(&self, mut k: usize, hard: &mut [Option<f64>], shift: &mut [f64]) {
        for axis in self.axes.iter().rev() {
            let n = axis.values.len();
            let x = axis.values[k % n];
            k /= n;
            if axis.categorical {
                hard[axis.index] = Some(x);
            } else {
                match self.problem.actions.kind {
                    ActionKind::Additive => shift[axis.index] = x,
                    ActionKind::Hard => {
                        if x != 0.0 {
                            hard[axis.index] = Some(self.v[axis.index] + x)
                        }
                    }
                }
            }
        }
    }

    fn cost(&self, k: usize, scratch: &mut Scratch) -> f64 {
        let n = self.v.len();
        scratch.action_hard.iter_mut().for_each(|h| *h = None);
        scratch.action_shift.iter_mut().for_each(|s| *s = 0.0);
        self.decode(k, &mut scratch.action_hard, &mut scratch.action_shift);
        let mut worst = 0.0_f64;
        for (center_hard, center) in &self.centers {
            for i in 0..n {
                scratch.hard[i] = scratch.action_hard[i].or(center_hard[i]);
            }
            self.problem.scm.generate_with(
                &self.u,
                &scratch.hard,
                &scratch.action_shift,
                &mut scratch.out,
            );
            for i in 0..n {
                scratch.diff[i] = center[i] - scratch.out[i];
            }
            worst = worst.max(self.problem.cost.norm(&scratch.diff));
        }
        worst
    }

    /// Index of the first anchor whose counterfactual is unfavorable, if any.
    fn violation(
        &self,
        k: usize,
        anchors: &[PerturbationDraw],
        order: &[usize],
        scratch: &mut Scratch,
    ) -> Option<usize> {
        let n = self.v.len();
        scratch.action_hard.iter_mut().for_each(|h| *h = None);
        scratch.action_shift.iter_mut().for_each(|s| *s = 0.0);
        self.decode(k, &mut scratch.action_hard, &mut scratch.action_shift);
        for (pos, &a) in order.iter().enumerate() {
            let anchor = &anchors[a];
            for i in 0..n {
                scratch.hard[i] = scratch.action_hard[i].or(anchor.hard[i]);
                scratch.shift[i] = anchor.shift[i] + scratch.action_shift[i];
            }
            self.problem.scm.generate_with(
                &self.u,
                &scratch.hard,
                &scratch.shift,
                &mut scratch.out,
            );
            if !self.problem.model.is_favorable_unchecked(&scratch.out) {
                return Some(pos);
            }
        }
        None
    }

    fn intervention(&self, k: usize) -> Intervention {
        let n = self.v.len();
        let mut hard = vec![None; n];
        let mut shift = vec![0.0; n];
        self.decode(k, &mut hard, &mut shift);
        let mut cat = (Vec::new(), Vec::new());
        let mut hard_cont = (Vec::new(), Vec::new());
        let mut add = (Vec::new(), Vec::new());
        for axis in &self.axes {
            let i = axis.index;
            if axis.categorical {
                if hard[i] != Some(self.v[i]) {
                    cat.0.push(i);
                    cat.1.push(hard[i].unwrap_or(self.v[i]));
                }
            } else if let Some(x) = hard[i] {
                hard_cont.0.push(i);
                hard_cont.1.push(x);
            } else if shift[i] != 0.0 {
                add.0.push(i);
                add.1.push(shift[i]);
            }
        }
        if !add.0.is_empty() {
            if cat.0.is_empty() {
                Intervention::Additive {
                    indices: add.0,
                    shifts: add.1,
                }
            } else {
                Intervention::Middle {
                    categorical: cat.0,
                    values: cat.1,
                    continuous: add.0,
                    shifts: add.1,
                }
            }
        } else {
            let mut indices = cat.0;
            let mut values = cat.1;
            indices.extend(hard_cont.0);
            values.extend(hard_cont.1);
            Intervention::Hard { indices, values }
        }
    }
}

struct Scratch {
    action_hard: Vec<Option<f64>>,
    action_shift: Vec<f64>,
    hard: Vec<Option<f64>>,
    shift: Vec<f64>,
    out: Vec<f64>,
    diff: Vec<f64>,
}

impl Scratch {
    fn new(n: usize) -> Self {
        Self {
            action_hard: vec![None; n],
            action_shift: vec![0.0; n],
            hard: vec![None; n],
            shift: vec![0.0; n],
            out: vec![0.0; n],
            diff: vec![0.0; n],
        }
    }
}

/// Grid candidates ranked by objective cost, reusable across constraint sets.
pub(crate) struct Prepared<'p, 'a> {
    search: Search<'p, 'a>,
    costs: Vec<f64>,
    ranked: Vec<usize>,
}

impl<'p, 'a> Prepared<'p, 'a> {
    /// Rank the grid around `v`. The objective is the worst cost over the
    /// centers of `objective` (its `Θ_Δ` twins), or the cost at `v` itself.
    pub(crate) fn new(
        problem: &'p RecourseProblem<'a>,
        v: &'p [f64],
        grid: &GridSpec,
        objective: Option<&PerturbationSpec>,
    ) -> Result<Self> {
        problem.validate()?;
        let scm = problem.scm;
        scm.validate_instance(v)?;
        if grid.half_width.len() != problem.actions.indices.len() {
            return Err(Error::DimensionMismatch {
                expected: problem.actions.indices.len(),
                got: grid.half_width.len(),
            });
        }
        let n = scm.len();
        let u = scm.abduct(v)?;

        let mut axes = Vec::with_capacity(problem.actions.indices.len());
        for (k, &i) in problem.actions.indices.iter().enumerate() {
            axes.push(match scm.variable(i).levels() {
                Some(levels) => Axis {
                    index: i,
                    categorical: true,
                    values: levels.iter().map(|&l| l as f64).collect(),
                },
                None => Axis {
                    index: i,
                    categorical: false,
                    values: grid.offsets(k),
                },
            });
        }
        let total = axes
            .iter()
            .try_fold(1usize, |acc, a| acc.checked_mul(a.values.len()))
            .filter(|t| *t <= MAX_CANDIDATES)
            .ok_or_else(|| Error::Config("action grid too large".into()))?;

        let centers = match objective {
            None => vec![(vec![None; n], v.to_vec())],
            Some(spec) => {
                let mut centers = Vec::new();
                let mut out = vec![0.0; n];
                let zero = vec![0.0; n];
                for theta in spec.levels_in_ball(scm, v)? {
                    let mut hard = vec![None; n];
                    for (k, &i) in spec.categorical.iter().enumerate() {
                        hard[i] = Some(theta[k]);
                    }
                    scm.generate_with(&u, &hard, &zero, &mut out);
                    centers.push((hard, out.clone()));
                }
                centers
            }
        };

        let search = Search {
            problem,
            v,
            u,
            axes,
            total,
            centers,
        };

        #[cfg(feature = "parallel")]
        let costs: Vec<f64> = (0..search.total)
            .into_par_iter()
            .map_init(|| Scratch::new(n), |s, k| search.cost(k, s))
            .collect();
        #[cfg(not(feature = "parallel"))]
        let costs: Vec<f64> = {
            let mut s = Scratch::new(n);
            (0..search.total).map(|k| search.cost(k, &mut s)).collect()
        };

        let mut ranked: Vec<usize> = (0..search.total).collect();
        ranked.sort_unstable_by(|&a, &b| costs[a].total_cmp(&costs[b]).then(a.cmp(&b)));
        Ok(Self {
            search,
            costs,
            ranked,
        })
    }

    /// First candidate at rank `>= start` keeping every anchor favorable, with
    /// its rank. Any rank below the answer for a subset of `anchors` is a valid
    /// `start`.
    pub(crate) fn solve(
        &self,
        anchors: &[PerturbationDraw],
        start: usize,
        validity: Validity,
    ) -> Result<(usize, RecourseSolution)> {
        let n = self.search.v.len();
        let mut order: Vec<usize> = (0..anchors.len()).collect();
        let mut scratch = Scratch::new(n);
        for (rank, &k) in self.ranked.iter().enumerate().skip(start) {
            match self.search.violation(k, anchors, &order, &mut scratch) {
                Some(pos) => order[..=pos].rotate_right(1),
                None => {
                    let action = self.search.intervention(k);
                    let counterfactual = self
                        .search
                        .problem
                        .scm
                        .counterfactual_from_noise(&self.search.u, &action);
                    return Ok((
                        rank,
                        RecourseSolution {
                            action,
                            counterfactual,
                            cost: self.costs[k],
                            validity,
                            solver: SolverKind::BruteForce,
                        },
                    ));
                }
            }
        }
        Err(Error::InfeasibleWithinGrid {
            candidates: self.search.total,
        })
    }
}

/// The single anchor "no perturbation".
pub(crate) fn center_anchor(n: usize) -> Vec<PerturbationDraw> {
    vec![PerturbationDraw {
        hard: vec![None; n],
        shift: vec![0.0; n],
    }]
}

/// Minimum-cost grid action whose counterfactual is favorable, and with a
/// perturbation, whose counterfactuals of every sampled perturbation point are.
pub fn solve_bruteforce(
    problem: &RecourseProblem<'_>,
    v: &[f64],
    grid: &GridSpec,
) -> Result<RecourseSolution> {
    let prepared = Prepared::new(problem, v, grid, problem.perturbation.as_ref())?;
    let anchors = match &problem.perturbation {
        None => center_anchor(v.len()),
        Some(spec) => perturbation_draws(problem.scm, v, spec, problem.n_samples, problem.seed)?,
    };
    prepared
        .solve(&anchors, 0, problem.validity())
        .map(|(_, s)| s)
}

/// AFRR by grid search: undefined when `v` and one of its twins are labelled
/// differently.
pub fn solve_afrr(
    problem: &RecourseProblem<'_>,
    v: &[f64],
    grid: &GridSpec,
) -> Result<Afrr<RecourseSolution>> {
    let protected = problem
        .protected
        .ok_or_else(|| Error::InvalidScm("no protected variable".into()))?;
    let own = problem.model.predict(v)?;
    for twin in problem.scm.twins(v, protected)? {
        if problem.model.predict(&twin.instance)? != own {
            return Ok(Afrr::CounterfactuallyUnfair);
        }
    }
    solve_bruteforce(problem, v, grid).map(Afrr::Defined)
}
