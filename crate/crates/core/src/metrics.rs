//! Stationary performance measures and the threshold search.
//!
//! The sojourn formulas in [`sojourn_paper`] are evaluated literally as
//! published, including factors such as `k mu` where `k / mu` would be
//! dimensionally expected. They are flagged as such; the Little's-law value
//! `E(Q) / lambda` and the simulator are the reference sojourn numbers.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixedpoint::{solve, SolverConfig, StationaryDistribution};
use crate::model::ModelParams;
use crate::sim::SimReport;

/// Marks sojourn values taken verbatim from the published formulas.
pub const FLAG_VERBATIM: &str = "paper-formula-verbatim";
/// Marks reports built from simulation output.
pub const FLAG_SIMULATED: &str = "simulated";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerformanceReport {
    /// Mean tasks per server held while working.
    pub eq_w: f64,
    /// Mean tasks per server held while dormant.
    pub eq_d: f64,
    pub eq: f64,
    pub es_w: f64,
    pub es_v: f64,
    pub es_paper: f64,
    /// `eq / lambda`.
    pub es_little: f64,
    /// Stationary fraction of dormant servers.
    pub energy_saving: f64,
    pub flags: Vec<String>,
}

impl PerformanceReport {
    /// Measures at a stationary point.
    pub fn from_distribution(dist: &StationaryDistribution) -> Self {
        let (eq_w, eq_d, eq) = queue_lengths(dist);
        let (es_w, es_v, es_paper) = sojourn_paper(dist);
        PerformanceReport {
            eq_w,
            eq_d,
            eq,
            es_w,
            es_v,
            es_paper,
            es_little: sojourn_little(dist),
            energy_saving: energy_saving(dist),
            flags: vec![FLAG_VERBATIM.to_string()],
        }
    }

    /// Measures estimated by simulation. The sojourn fields hold measured
    /// means: `es_w` and `es_v` split tasks by the mode of the server they
    /// joined, `es_paper` is the overall mean.
    pub fn from_simulation(report: &SimReport) -> Self {
        let eq = report.eq_mean.mean;
        PerformanceReport {
            eq_w: report.eq_working,
            eq_d: report.eq_dormant,
            eq,
            es_w: report.es_joined_working,
            es_v: report.es_joined_dormant,
            es_paper: report.es_mean.mean,
            es_little: eq / report.params.lambda,
            energy_saving: report.dormant_fraction.mean,
            flags: vec![FLAG_SIMULATED.to_string()],
        }
    }
}

/// `(E(Q_W), E(Q_D), E(Q))` from the tail sums.
pub fn queue_lengths(dist: &StationaryDistribution) -> (f64, f64, f64) {
    let eq_w: f64 = dist.delta.iter().sum();
    let eq_d: f64 = dist.xi.iter().skip(1).sum();
    (eq_w, eq_d, eq_w + eq_d)
}

/// The published `(E(S_W), E(S_V), E(S))`, evaluated literally.
pub fn sojourn_paper(dist: &StationaryDistribution) -> (f64, f64, f64) {
    let StationaryDistribution { lambda, mu, m, .. } = *dist;
    let delta = |k: usize| {
        if k == 0 {
            1.0
        } else {
            dist.delta.get(k - 1).copied().unwrap_or(0.0)
        }
    };
    let xi = |j: usize| dist.xi.get(j).copied().unwrap_or(0.0);
    let state = dist.to_state();
    let w = |k: usize| crate::model::rate_w(k, &state, &dist.params()).unwrap_or(0.0);

    let mut working_sum = 0.0;
    for k in 2..=dist.delta.len() + 1 {
        working_sum += k as f64 * mu * (delta(k - 1) - delta(k)) * w(k);
    }
    let mut dormant_sum = 0.0;
    for k in 1..m {
        let factor = (m - k) as f64 / lambda + k as f64 * mu;
        dormant_sum += factor * (xi(k - 1) - xi(k)) * w(k);
    }
    let wake = m as f64 * mu * xi(m - 1) * w(m);

    let es_w = working_sum * mu / lambda;
    let es_v = dormant_sum * mu / (mu - lambda) + wake * mu / (mu - lambda);
    let es = working_sum + dormant_sum + wake;
    (es_w, es_v, es)
}

/// `E(Q) / lambda`.
pub fn sojourn_little(dist: &StationaryDistribution) -> f64 {
    queue_lengths(dist).2 / dist.lambda
}

/// Stationary dormant fraction `xi_0`.
pub fn energy_saving(dist: &StationaryDistribution) -> f64 {
    dist.xi[0]
}

/// What the threshold search constrains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    /// Mean queue length.
    Eq,
    /// Mean sojourn time, taken as `E(Q) / lambda`.
    Es,
}

impl Criterion {
    pub fn evaluate(&self, dist: &StationaryDistribution) -> f64 {
        match self {
            Criterion::Eq => queue_lengths(dist).2,
            Criterion::Es => sojourn_little(dist),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdChoice {
    /// Largest admissible threshold.
    pub m: usize,
    /// Criterion value at `m`.
    pub value: f64,
    /// Every `(m, value)` evaluated, in increasing `m`.
    pub evaluated: Vec<(usize, f64)>,
    /// Whether the search fell back to scanning every threshold.
    pub linear_scan: bool,
}

/// Largest `m` in `2..=m_max` whose criterion stays within `bound`.
///
/// The criterion grows with `m`, so this is a binary search; if the endpoint
/// values contradict monotonicity every threshold is scanned instead.
pub fn optimal_threshold(
    params: &ModelParams,
    bound: f64,
    criterion: Criterion,
    m_max: usize,
    config: &SolverConfig,
) -> Result<ThresholdChoice> {
    if m_max < 2 {
        return Err(Error::InvalidParams(format!(
            "m_max must be at least 2, got {m_max}"
        )));
    }
    params.with_m(2).require_stable()?;
    let eval = |m: usize| -> Result<f64> {
        let p = params.with_m(m);
        Ok(criterion.evaluate(&solve(&p, config)?))
    };
    let mut evaluated = vec![(2, eval(2)?)];
    if evaluated[0].1 > bound {
        return Err(Error::BoundInfeasible {
            bound,
            at_min: evaluated[0].1,
        });
    }
    if m_max == 2 {
        return Ok(finish(evaluated, 2, false));
    }
    let top = eval(m_max)?;
    evaluated.push((m_max, top));
    if top < evaluated[0].1 {
        let values: Vec<(usize, f64)> = (2..=m_max)
            .into_par_iter()
            .map(|m| eval(m).map(|v| (m, v)))
            .collect::<Result<Vec<_>>>()?;
        let best = values
            .iter()
            .filter(|(_, v)| *v <= bound)
            .map(|(m, _)| *m)
            .max()
            .unwrap_or(2);
        return Ok(finish(values, best, true));
    }
    if top <= bound {
        return Ok(finish(evaluated, m_max, false));
    }
    // invariant: lo feasible, hi infeasible
    let (mut lo, mut hi) = (2, m_max);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        let value = eval(mid)?;
        evaluated.push((mid, value));
        if value <= bound {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(finish(evaluated, lo, false))
}

fn finish(mut evaluated: Vec<(usize, f64)>, m: usize, linear_scan: bool) -> ThresholdChoice {
    evaluated.sort_by_key(|(k, _)| *k);
    let value = evaluated
        .iter()
        .find(|(k, _)| *k == m)
        .map(|(_, v)| *v)
        .unwrap_or(f64::NAN);
    ThresholdChoice {
        m,
        value,
        evaluated,
        linear_scan,
    }
}
