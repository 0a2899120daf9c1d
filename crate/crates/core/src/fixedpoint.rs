//! Recursive computation of the stationary point `(xi, delta)`.
//!
//! Normalization pins the head: `delta_1 = lambda / mu` and
//! `xi_0 = 1 - lambda / mu`. Everything else follows from the single free
//! parameter `delta_2`:
//!
//! 1. for each dormant level `k = 1..m-1`, `xi_k` is the unique root in
//!    `(0, xi_{k-1})` of the decreasing function `G_k`;
//! 2. the working levels `delta_3..delta_{m+1}` follow from the stationary
//!    equations at levels `2..m`;
//! 3. the wake-flux balance `lambda xi_{m-1} W_m = mu (delta_1 - delta_2)` closes
//!    the system and determines `delta_2` (outer bisection);
//! 4. the tail `k > m` is extended by the second-order recursion until it
//!    drops below the truncation floor.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{power_sum, rate_w_unchecked, FractionState, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Bisection width for the inner `xi_k` roots.
    pub inner_tol: f64,
    /// Bisection width for the outer `delta_2` root.
    pub outer_tol: f64,
    /// Number of initial `delta_2` probes in `(0, delta_1)`.
    pub grid: usize,
    /// The working tail is truncated once `delta_k` falls below this.
    pub tail_floor: f64,
    /// Maximum number of working levels.
    pub k_max: usize,
    /// Largest acceptable residual of the stationary equations.
    pub residual_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            inner_tol: 1e-16,
            outer_tol: 1e-16,
            grid: 64,
            tail_floor: 1e-12,
            k_max: 512,
            residual_tol: 1e-8,
        }
    }
}

/// Stationary dormant tails `xi_0..xi_{m-1}` and working tails `delta_1..delta_K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryDistribution {
    pub lambda: f64,
    pub mu: f64,
    pub d: usize,
    pub m: usize,
    pub delta2: f64,
    pub xi: Vec<f64>,
    pub delta: Vec<f64>,
    pub residual_max: f64,
    pub flux_deviation_max: f64,
}

impl StationaryDistribution {
    pub fn params(&self) -> ModelParams {
        ModelParams {
            lambda: self.lambda,
            mu: self.mu,
            d: self.d,
            m: self.m,
        }
    }

    /// The distribution as a mean-field state (`u = delta`, `v = xi`), padded
    /// to at least `m + 1` working levels.
    pub fn to_state(&self) -> FractionState {
        let mut u = self.delta.clone();
        if u.len() < self.m + 1 {
            u.resize(self.m + 1, 0.0);
        }
        FractionState::from_parts_unchecked(u, self.xi.clone())
    }

    /// `W_k` evaluated at the stationary point.
    pub fn rate_w(&self, k: usize) -> f64 {
        rate_w_unchecked(k.max(1), &self.to_state(), self.d)
    }
}

/// Why a forward chain could not be completed for a given `delta_2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ChainError {
    /// `G_k` has no sign change on `[0, xi_{k-1}]`. `g_at_zero < 0` means the
    /// candidate `delta_2` is too small to sustain the wake flux through level `k`;
    /// `degenerate` marks `delta_2 >= delta_1` (zero flux).
    NoBracket {
        level: usize,
        g_at_zero: f64,
        degenerate: bool,
    },
}

/// Root of `G_k(x) = lambda (xi_{k-1} - x) W_k(x) + mu (delta_2 - delta_1)` in
/// `(0, xi_{k-1})`, where `W_k(x) = power_sum(delta_{k-1} + xi_{k-1}, delta_k + x, d)`.
///
/// For `k = 1` pass `delta_prev = delta_k = delta_1`.
pub fn solve_xi(
    k: usize,
    xi_prev: f64,
    delta_prev: f64,
    delta_k: f64,
    delta2: f64,
    params: &ModelParams,
    tol: f64,
) -> std::result::Result<f64, ChainError> {
    let ModelParams { lambda, mu, d, .. } = *params;
    let delta1 = params.rho();
    let dissipation = mu * (delta2 - delta1);
    let high = delta_prev + xi_prev;
    let g = |x: f64| lambda * (xi_prev - x) * power_sum(high, delta_k + x, d) + dissipation;

    let g0 = g(0.0);
    if !(dissipation < 0.0) {
        return Err(ChainError::NoBracket {
            level: k,
            g_at_zero: g0,
            degenerate: true,
        });
    }
    if !(g0 >= 0.0) {
        return Err(ChainError::NoBracket {
            level: k,
            g_at_zero: g0,
            degenerate: false,
        });
    }
    // g(xi_prev) = dissipation < 0
    let (mut lo, mut hi) = (0.0, xi_prev);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) >= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Head of the recursion for one value of `delta_2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    /// `xi_0..xi_{m-1}`
    pub xi: Vec<f64>,
    /// `delta_1..delta_{m+1}`
    pub delta: Vec<f64>,
    /// Wake-flux balance `lambda xi_{m-1} W_m - mu (delta_1 - delta_2)`.
    pub residual: f64,
}

/// Runs the head recursion for a candidate `delta_2` (requires `m >= 2`).
pub fn forward_chain(
    delta2: f64,
    params: &ModelParams,
    tol: f64,
) -> std::result::Result<Chain, ChainError> {
    let ModelParams { lambda, mu, d, m } = *params;
    let rho = params.rho();
    let delta1 = rho;
    let shift = delta2 - delta1;
    // delta[i] holds delta_{i+1}
    let mut delta = vec![delta1, delta2];
    let mut xi = vec![1.0 - rho];
    for k in 1..m {
        let delta_prev = if k == 1 { delta1 } else { delta[k - 2] };
        let delta_k = delta[k - 1];
        let x = solve_xi(k, xi[k - 1], delta_prev, delta_k, delta2, params, tol)?;
        xi.push(x);
        if k >= 2 {
            let w = power_sum(delta_prev + xi[k - 1], delta_k + x, d);
            delta.push(delta_k + rho * (delta_k - delta_prev) * w + shift);
        }
    }
    // level m: no dormant servers hold m tasks
    let (delta_prev, delta_m) = (delta[m - 2], delta[m - 1]);
    let w_m = power_sum(delta_prev + xi[m - 1], delta_m, d);
    delta.push(delta_m + rho * (delta_m - delta_prev) * w_m + shift);
    let residual = lambda * xi[m - 1] * w_m - mu * (delta1 - delta2);
    Ok(Chain {
        xi,
        delta,
        residual,
    })
}

/// One tail step for levels `k > m`:
/// `delta_{k+1} = delta_k - (lambda/mu) (delta_{k-1}^d - delta_k^d)`.
///
/// Returns the new value and the deviation `|mu delta_{k+1} - lambda delta_k^d|`
/// from the telescoped flux identity.
pub fn tail_extend(
    level: usize,
    delta_prev: f64,
    delta_k: f64,
    params: &ModelParams,
) -> Result<(f64, f64)> {
    let d = params.d as i32;
    let next = delta_k - params.rho() * (delta_prev.powi(d) - delta_k.powi(d));
    if next < -1e-10 {
        return Err(Error::NegativeTail {
            level: level + 1,
            value: next,
        });
    }
    let deviation = (params.mu * next - params.lambda * delta_k.powi(d)).abs();
    Ok((next, deviation))
}

/// Max-abs residual of the stationary equations at `(xi, delta)`, with
/// `delta_{K+1} = 0`.
pub fn stationary_residual(xi: &[f64], delta: &[f64], params: &ModelParams) -> f64 {
    let ModelParams { lambda, mu, d, m } = *params;
    let mut u = delta.to_vec();
    if u.len() < m + 1 {
        u.resize(m + 1, 0.0);
    }
    let k_max = u.len();
    let s = FractionState::from_parts_unchecked(u, xi.to_vec());
    let w = |k: usize| rate_w_unchecked(k, &s, d);
    let wake = lambda * s.v(m - 1) * w(m);

    let mut worst = (mu * (s.u(2) - s.u(1)) + wake).abs(); // balance at level 1
    for k in 2..=k_max {
        let mut r = lambda * (s.u(k - 1) - s.u(k)) * w(k) + mu * (s.u(k + 1) - s.u(k));
        if k <= m {
            r += wake;
        }
        worst = worst.max(r.abs());
    }
    for j in 1..m {
        let r = lambda * (s.v(j - 1) - s.v(j)) * w(j) - wake;
        worst = worst.max(r.abs());
    }
    worst
}

/// Closure residual with infeasible-low candidates mapped to the zero-flux value
/// `-mu (delta_1 - delta_2)`; `None` if the chain failed otherwise.
fn extended_residual(delta2: f64, params: &ModelParams, tol: f64) -> Option<f64> {
    match forward_chain(delta2, params, tol) {
        Ok(c) => Some(c.residual),
        Err(ChainError::NoBracket {
            degenerate: false, ..
        }) => Some(-params.mu * (params.rho() - delta2)),
        Err(_) => None,
    }
}

/// Computes the stationary distribution.
pub fn solve(params: &ModelParams, config: &SolverConfig) -> Result<StationaryDistribution> {
    let params = params.require_stable()?;
    let delta1 = params.rho();
    let (xi, delta, flux_deviation_max) = if params.m == 1 {
        // closure solved directly: mu (delta_1 - delta_2) = lambda xi_0 W_1
        let xi0 = 1.0 - delta1;
        let w1 = power_sum(1.0, delta1, params.d);
        let delta2 = delta1 - delta1 * xi0 * w1;
        let (delta, flux) = extend_tail(vec![delta1, delta2.max(0.0)], &params, config)?;
        (vec![xi0], delta, flux)
    } else {
        let brackets = scan_delta2(&params, config)?;
        let mut last_err = None;
        let mut found = None;
        for (lo, hi) in brackets {
            let delta2 = bisect_delta2(lo, hi, &params, config);
            let chain = match forward_chain(delta2, &params, config.inner_tol) {
                Ok(c) => c,
                Err(_) => match forward_chain(hi, &params, config.inner_tol) {
                    Ok(c) => c,
                    Err(e) => {
                        last_err = Some(Error::NoConvergence(format!(
                            "chain failed at the converged delta2 = {delta2}: {e:?}"
                        )));
                        continue;
                    }
                },
            };
            match extend_tail(chain.delta.clone(), &params, config) {
                Ok((delta, flux)) => {
                    found = Some((chain.xi, delta, flux));
                    break;
                }
                Err(e) => last_err = Some(e),
            }
        }
        match found {
            Some(f) => f,
            None => {
                return Err(
                    last_err.unwrap_or_else(|| Error::TailDiverged("no bracket passed".into()))
                )
            }
        }
    };
    let delta2 = delta[1];
    let residual_max = stationary_residual(&xi, &delta, &params);
    if !(residual_max < config.residual_tol) {
        return Err(Error::NoConvergence(format!(
            "stationary residual {residual_max:e} exceeds {:e}",
            config.residual_tol
        )));
    }
    Ok(StationaryDistribution {
        lambda: params.lambda,
        mu: params.mu,
        d: params.d,
        m: params.m,
        delta2,
        xi,
        delta,
        residual_max,
        flux_deviation_max,
    })
}

/// Probes `delta_2` on a uniform grid in `(0, delta_1]` and returns every
/// interval where the closure residual changes sign from negative to positive,
/// lowest first. The endpoint `delta_1` carries the positive zero-flux limit.
pub fn scan_delta2(params: &ModelParams, config: &SolverConfig) -> Result<Vec<(f64, f64)>> {
    let delta1 = params.rho();
    let n = config.grid.max(2);
    let probes: Vec<(f64, Option<f64>)> = (1..=n)
        .into_par_iter()
        .map(|i| {
            let x = delta1 * i as f64 / n as f64;
            if i == n {
                (x, Some(f64::INFINITY))
            } else {
                (x, extended_residual(x, params, config.inner_tol))
            }
        })
        .collect();
    let mut brackets = Vec::new();
    for w in probes.windows(2) {
        if let ((a, Some(ra)), (b, Some(rb))) = (w[0], w[1]) {
            if ra <= 0.0 && rb > 0.0 {
                brackets.push((a, b));
            }
        }
    }
    // a sign change before the first probe
    if let Some(&(b, Some(rb))) = probes.first() {
        if rb > 0.0 {
            brackets.insert(0, (0.0, b));
        }
    }
    if brackets.is_empty() {
        return Err(Error::NoRoot { profile: probes });
    }
    Ok(brackets)
}

fn bisect_delta2(mut lo: f64, mut hi: f64, params: &ModelParams, config: &SolverConfig) -> f64 {
    while hi - lo > config.outer_tol {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        match extended_residual(mid, params, config.inner_tol) {
            Some(r) if r > 0.0 => hi = mid,
            _ => lo = mid,
        }
    }
    0.5 * (lo + hi)
}

/// Extends `delta_1..delta_{m+1}` with [`tail_extend`] until the floor is
/// reached; returns the tail and the worst flux deviation for `k >= m + 1`.
fn extend_tail(
    mut delta: Vec<f64>,
    params: &ModelParams,
    config: &SolverConfig,
) -> Result<(Vec<f64>, f64)> {
    let m = params.m;
    let mut worst = 0.0f64;
    for x in delta.iter_mut() {
        if *x < 0.0 && *x > -1e-10 {
            *x = 0.0;
        }
    }
    while *delta.last().unwrap() >= config.tail_floor {
        let k = delta.len();
        if k >= config.k_max {
            return Err(Error::TailDiverged(format!(
                "tail still at {:e} after {} levels",
                delta[k - 1],
                config.k_max
            )));
        }
        if k < m + 1 {
            break;
        }
        let (next, dev) = tail_extend(k, delta[k - 2], delta[k - 1], params)?;
        if next > delta[k - 1] {
            return Err(Error::TailDiverged(format!(
                "delta_{} = {next} exceeds delta_{k} = {}",
                k + 1,
                delta[k - 1]
            )));
        }
        worst = worst.max(dev);
        delta.push(next.max(0.0));
    }
    Ok((delta, worst))
}
