//! Closed-form stationary laws for the `d = 1` and `m = 1` special cases.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{FractionState, ModelParams};

/// Agreement required between the closed form and the numeric solve.
const CHECK_TOL: f64 = 1e-8;
/// Largest truncation used by the numeric cross-check.
const CHECK_LEVELS: usize = 1200;

/// Stationary law of a single M/M/1 queue that idles until `m` tasks wait.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NPolicyDistribution {
    /// `dormant[j]`: probability of being dormant with `j` tasks, `j < m`.
    pub dormant: Vec<f64>,
    /// `working[k - 1]`: probability of working with `k` tasks, down to 1e-16.
    pub working: Vec<f64>,
    pub eq: f64,
}

impl NPolicyDistribution {
    /// Tail fractions `(u, v)` of the distribution.
    pub fn to_state(&self) -> FractionState {
        let tails = |p: &[f64]| {
            let mut acc = 0.0;
            let mut out: Vec<f64> = p
                .iter()
                .rev()
                .map(|x| {
                    acc += x;
                    acc
                })
                .collect();
            out.reverse();
            out
        };
        FractionState::new(tails(&self.working), tails(&self.dormant)).expect("valid tails")
    }
}

/// N-policy M/M/1 law: with `c = (1 - rho) / m`, dormant levels carry `c`
/// each, working level `k <= m` carries `c rho (1 - rho^k) / (1 - rho)` and
/// levels above `m` decay geometrically. Mean `rho / (1 - rho) + (m - 1) / 2`.
///
/// Before returning, the law is checked against a truncated numeric solve.
pub fn npolicy_mm1(params: &ModelParams) -> Result<NPolicyDistribution> {
    params.validate()?;
    if params.d != 1 {
        return Err(Error::InvalidParams(format!(
            "the N-policy reduction needs d = 1, got d = {}",
            params.d
        )));
    }
    params.require_stable()?;
    let rho = params.rho();
    let m = params.m;
    let c = (1.0 - rho) / m as f64;
    let dormant = vec![c; m];
    let mut working = Vec::new();
    let mut k = 1;
    loop {
        let p = working_mass(rho, m, k);
        if k > m && p < 1e-16 {
            break;
        }
        working.push(p);
        k += 1;
    }
    let eq = rho / (1.0 - rho) + (m as f64 - 1.0) / 2.0;
    let dist = NPolicyDistribution {
        dormant,
        working,
        eq,
    };
    check_against_numeric(&dist, params)?;
    Ok(dist)
}

fn working_mass(rho: f64, m: usize, k: usize) -> f64 {
    let c = (1.0 - rho) / m as f64;
    let level = k.min(m);
    let head = c * rho * (1.0 - rho.powi(level as i32)) / (1.0 - rho);
    head * rho.powi((k - level) as i32)
}

/// Solves the single-server chain with the queue capped at `cap`.
/// States are dormant `0..m` followed by working `1..=cap`.
pub fn npolicy_truncated(params: &ModelParams, cap: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let ModelParams { lambda, mu, m, .. } = *params;
    if cap < m {
        return Err(Error::InvalidConfig(format!(
            "cap {cap} must be at least m = {m}"
        )));
    }
    let n = m + cap;
    let dormant = |j: usize| j;
    let working = |k: usize| m + k - 1;
    // a[(to, from)] accumulates Q^T
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut add = |from: usize, to: usize, rate: f64| {
        a[(to, from)] += rate;
        a[(from, from)] -= rate;
    };
    for j in 0..m {
        let to = if j + 1 == m {
            working(m)
        } else {
            dormant(j + 1)
        };
        add(dormant(j), to, lambda);
    }
    for k in 1..=cap {
        if k < cap {
            add(working(k), working(k + 1), lambda);
        }
        let to = if k == 1 { dormant(0) } else { working(k - 1) };
        add(working(k), to, mu);
    }
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut b = DVector::<f64>::zeros(n);
    b[n - 1] = 1.0;
    let x = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::LinearSolve("singular generator".into()))?;
    Ok((x.as_slice()[..m].to_vec(), x.as_slice()[m..].to_vec()))
}

fn check_against_numeric(dist: &NPolicyDistribution, params: &ModelParams) -> Result<()> {
    let rho = params.rho();
    let m = params.m;
    // capping the queue above m only rescales the law, since the chain is
    // birth-death there; compare against the conditioned closed form
    let needed = (1e-13f64.ln() / rho.ln()).ceil() as usize;
    let cap = m + needed.clamp(1, CHECK_LEVELS);
    let (dormant, working) = npolicy_truncated(params, cap)?;
    let kept: f64 =
        dist.dormant.iter().sum::<f64>() + (1..=cap).map(|k| working_mass(rho, m, k)).sum::<f64>();
    let mut gap = 0.0f64;
    for (j, p) in dormant.iter().enumerate() {
        gap = gap.max((p - dist.dormant[j] / kept).abs());
    }
    for (i, p) in working.iter().enumerate() {
        gap = gap.max((p - working_mass(rho, m, i + 1) / kept).abs());
    }
    let eq_numeric: f64 = dormant
        .iter()
        .enumerate()
        .map(|(j, p)| j as f64 * p)
        .sum::<f64>()
        + working
            .iter()
            .enumerate()
            .map(|(i, p)| (i + 1) as f64 * p)
            .sum::<f64>();
    let eq_closed: f64 = (1..=cap)
        .map(|k| k as f64 * working_mass(rho, m, k))
        .chain(dist.dormant.iter().enumerate().map(|(j, p)| j as f64 * p))
        .sum::<f64>()
        / kept;
    gap = gap.max((eq_numeric - eq_closed).abs() / eq_closed.max(1.0));
    if gap > CHECK_TOL {
        return Err(Error::LinearSolve(format!(
            "closed form disagrees with the numeric solve by {gap:e}"
        )));
    }
    Ok(())
}

/// Tail `delta_k = rho^((d^k - 1) / (d - 1))`, `k >= 1`, of the classic
/// supermarket model (`m = 1`), listed while above `floor`.
pub fn supermarket_m1(params: &ModelParams, floor: f64) -> Result<Vec<f64>> {
    params.validate()?;
    if params.m != 1 {
        return Err(Error::InvalidParams(format!(
            "the supermarket reduction needs m = 1, got m = {}",
            params.m
        )));
    }
    params.require_stable()?;
    let rho = params.rho();
    let d = params.d as f64;
    let mut tail = Vec::new();
    for k in 1.. {
        let exponent = if params.d == 1 {
            k as f64
        } else {
            (d.powi(k) - 1.0) / (d - 1.0)
        };
        let value = rho.powf(exponent);
        if value <= floor || !value.is_finite() {
            break;
        }
        tail.push(value);
    }
    Ok(tail)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn npolicy_means() {
        for (lambda, m, expected) in [(0.5, 2, 1.5), (0.5, 1, 1.0), (0.9, 5, 11.0)] {
            let p = ModelParams::new(lambda, 1.0, 1, m).unwrap();
            let dist = npolicy_mm1(&p).unwrap();
            assert!((dist.eq - expected).abs() < 1e-12);
            let total = dist.dormant.iter().sum::<f64>() + dist.working.iter().sum::<f64>();
            assert!((total - 1.0).abs() < 1e-14);
            let mean = dist
                .working
                .iter()
                .enumerate()
                .map(|(i, p)| (i + 1) as f64 * p)
                .sum::<f64>()
                + dist
                    .dormant
                    .iter()
                    .enumerate()
                    .map(|(j, p)| j as f64 * p)
                    .sum::<f64>();
            assert!((mean - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn npolicy_state_is_consistent() {
        let p = ModelParams::new(0.6, 1.0, 1, 3).unwrap();
        let s = npolicy_mm1(&p).unwrap().to_state();
        assert!((s.u(1) - 0.6).abs() < 1e-14);
        assert!((s.v(0) - 0.4).abs() < 1e-14);
    }

    #[test]
    fn npolicy_preconditions() {
        let p = ModelParams::new(0.5, 1.0, 2, 2).unwrap();
        assert!(matches!(npolicy_mm1(&p), Err(Error::InvalidParams(_))));
        let p = ModelParams::new(1.0, 1.0, 1, 2).unwrap();
        assert!(matches!(npolicy_mm1(&p), Err(Error::Unstable { .. })));
    }

    #[test]
    fn supermarket_values() {
        let p = ModelParams::new(0.5, 1.0, 2, 1).unwrap();
        let tail = supermarket_m1(&p, 1e-300).unwrap();
        assert_eq!(&tail[..3], &[0.5, 0.125, 0.5f64.powi(7)]);
        for w in tail.windows(2) {
            assert!((w[1] - 0.5 * w[0] * w[0]).abs() <= 1e-15 * w[1]);
        }
        let p = ModelParams::new(0.7, 1.0, 1, 1).unwrap();
        let tail = supermarket_m1(&p, 1e-12).unwrap();
        for (i, x) in tail.iter().enumerate() {
            assert!((x - 0.7f64.powi(i as i32 + 1)).abs() < 1e-15);
        }
        let p = ModelParams::new(0.5, 1.0, 2, 2).unwrap();
        assert!(matches!(
            supermarket_m1(&p, 0.0),
            Err(Error::InvalidParams(_))
        ));
    }
}
