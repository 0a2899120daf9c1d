//! Helpers shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use threshold_lab::sim::{run_replication, SimConfig, SimReport};
use threshold_lab::{FractionState, ModelParams};

/// Random point of the state space with `k` working and `m` dormant levels.
pub fn random_state<R: Rng>(rng: &mut R, m: usize, k: usize) -> FractionState {
    let u1: f64 = rng.random();
    let mut u = vec![u1];
    for _ in 1..k {
        let next = u.last().unwrap() * rng.random::<f64>();
        u.push(next);
    }
    let mut v = vec![1.0 - u1];
    for _ in 1..m {
        let next = v.last().unwrap() * rng.random::<f64>();
        v.push(next);
    }
    FractionState::new(u, v).expect("ordered by construction")
}

fn binom(n: usize, r: usize) -> f64 {
    (0..r).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// `W_k` as the binomial sum over how many sampled servers sit at the
/// joining level, with the four threshold cases written out.
pub fn w_binomial(k: usize, s: &FractionState, p: &ModelParams) -> f64 {
    let (m, d) = (p.m, p.d);
    let (gap, low) = if k == 1 {
        (s.v(0) - s.v(1), s.v(1) + s.u(1))
    } else if k < m {
        (s.u(k - 1) - s.u(k) + s.v(k - 1) - s.v(k), s.u(k) + s.v(k))
    } else if k == m {
        (s.u(m - 1) - s.u(m) + s.v(m - 1), s.u(m))
    } else {
        (s.u(k - 1) - s.u(k), s.u(k))
    };
    (1..=d)
        .map(|n| binom(d, n) * gap.powi(n as i32 - 1) * low.powi((d - n) as i32))
        .sum()
}

/// Componentwise mean and standard error of `u_hat` and `v_hat` over
/// independent replications, padded to `levels` working levels.
pub struct LevelStats {
    pub u_mean: Vec<f64>,
    pub u_se: Vec<f64>,
    pub v_mean: Vec<f64>,
    pub v_se: Vec<f64>,
    pub eq_mean: f64,
    pub eq_se: f64,
    pub reports: Vec<SimReport>,
}

pub fn replicate(
    params: &ModelParams,
    config: &SimConfig,
    replications: u64,
    levels: usize,
) -> LevelStats {
    let reports: Vec<SimReport> = (0..replications)
        .map(|r| run_replication(params, config, r).unwrap())
        .collect();
    let pad = |x: &[f64], n: usize| {
        let mut y = x.to_vec();
        y.resize(n.max(x.len()), 0.0);
        y.truncate(n);
        y
    };
    let us: Vec<Vec<f64>> = reports.iter().map(|r| pad(&r.u_hat, levels)).collect();
    let vs: Vec<Vec<f64>> = reports.iter().map(|r| pad(&r.v_hat, params.m)).collect();
    let eqs: Vec<f64> = reports.iter().map(|r| r.eq_mean.mean).collect();
    let (u_mean, u_se) = columnwise(&us);
    let (v_mean, v_se) = columnwise(&vs);
    let (eq_mean, eq_se) = mean_se(&eqs);
    LevelStats {
        u_mean,
        u_se,
        v_mean,
        v_se,
        eq_mean,
        eq_se,
        reports,
    }
}

pub fn mean_se(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn columnwise(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let width = rows[0].len();
    (0..width)
        .map(|j| mean_se(&rows.iter().map(|r| r[j]).collect::<Vec<_>>()))
        .unzip()
}

/// Little's law check on one report: `lambda * es` and `eq` agree within the
/// sum of their confidence half-widths.
pub fn little_holds(r: &SimReport) -> (bool, f64, f64) {
    let lambda = r.params.lambda;
    let gap = (lambda * r.es_mean.mean - r.eq_mean.mean).abs();
    let allowed = lambda * r.es_mean.half_width + r.eq_mean.half_width;
    (gap <= allowed, gap, allowed)
}
