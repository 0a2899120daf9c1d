//! Finite-N discrete-event simulation.
//!
//! The process is simulated as a single continuous-time Markov chain: the
//! next event fires at the total rate `N lambda + mu * (working servers)` and
//! is an arrival or a completion at a uniformly chosen working server in
//! proportion to their rates. This is equivalent in law to racing one global
//! arrival clock against per-server service clocks.
//!
//! Every server starts empty and dormant. Statistics are time-weighted over
//! `[t_warmup, t_warmup + t_measure]`, split into `n_batches` equal batches.

mod rules;
mod stats;

pub use rules::{DispatchRule, Mode, Sampling, ServerState, TieBreak};
pub use stats::{t_quantile, Estimate, CONFIDENCE};

use std::collections::VecDeque;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Simulation settings. `d` and the rates come from [`ModelParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_servers: usize,
    pub seed: u64,
    pub t_warmup: f64,
    pub t_measure: f64,
    pub n_batches: usize,
    pub n_replications: usize,
    /// Abort once any queue exceeds this length.
    pub queue_cap: Option<u32>,
    pub sampling: Sampling,
    pub tie_break: TieBreak,
}

impl SimConfig {
    /// Warm-up of `10 / (mu - lambda)` (or `10 / mu` when unstable) and a
    /// measurement window holding about a million arrivals.
    pub fn defaults(params: &ModelParams, n_servers: usize, seed: u64) -> Self {
        let relax = if params.is_stable() {
            params.mu - params.lambda
        } else {
            params.mu
        };
        SimConfig {
            n_servers,
            seed,
            t_warmup: 10.0 / relax,
            t_measure: 1e6 / (n_servers as f64 * params.lambda),
            n_batches: 20,
            n_replications: 1,
            queue_cap: None,
            sampling: Sampling::default(),
            tie_break: TieBreak::default(),
        }
    }

    /// Shrinks the measurement window to about `arrivals` expected arrivals.
    pub fn with_arrivals(mut self, params: &ModelParams, arrivals: f64) -> Self {
        self.t_measure = arrivals / (self.n_servers as f64 * params.lambda);
        self
    }

    pub fn dispatch(&self, d: usize) -> DispatchRule {
        DispatchRule {
            d,
            sampling: self.sampling,
            tie_break: self.tie_break,
        }
    }

    pub fn validate(&self, params: &ModelParams) -> Result<()> {
        params.validate()?;
        if self.n_servers < 1 {
            return Err(Error::InvalidConfig("n_servers must be at least 1".into()));
        }
        if !(self.t_measure.is_finite() && self.t_measure > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "t_measure must be positive and finite, got {}",
                self.t_measure
            )));
        }
        if !(self.t_warmup.is_finite() && self.t_warmup >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "t_warmup must be non-negative and finite, got {}",
                self.t_warmup
            )));
        }
        if self.n_batches < 2 {
            return Err(Error::InvalidConfig("n_batches must be at least 2".into()));
        }
        if self.n_replications < 1 {
            return Err(Error::InvalidConfig(
                "n_replications must be at least 1".into(),
            ));
        }
        self.dispatch(params.d).check(self.n_servers)
    }
}

/// Generator for one replication: ChaCha8 keyed by `seed` (expanded by
/// `seed_from_u64`), stream number `replication`, block counter from zero.
pub fn replication_rng(seed: u64, replication: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replication);
    rng
}

/// Time averages over one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    /// Mean queue length per server.
    pub eq: f64,
    /// Mean sojourn of tasks departing in the batch; NaN if none departed.
    pub es: f64,
    /// Fraction of dormant servers.
    pub v0: f64,
}

/// Estimates from one replication or pooled over several.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub params: ModelParams,
    pub config: SimConfig,
    /// Number of replications pooled into this report.
    pub replications: usize,
    /// `u_hat[k - 1]`: time-averaged fraction of working servers with at least `k` tasks.
    pub u_hat: Vec<f64>,
    /// `v_hat[j]`: time-averaged fraction of dormant servers with at least `j` tasks.
    pub v_hat: Vec<f64>,
    pub eq_mean: Estimate,
    pub es_mean: Estimate,
    pub dormant_fraction: Estimate,
    /// Mean tasks per server held by working servers.
    pub eq_working: f64,
    /// Mean tasks per server held by dormant servers.
    pub eq_dormant: f64,
    /// Mean sojourn of tasks that joined a working server.
    pub es_joined_working: f64,
    /// Mean sojourn of tasks that joined a dormant server.
    pub es_joined_dormant: f64,
    pub arrivals: u64,
    pub tasks_completed: u64,
    pub unstable: bool,
    #[serde(skip)]
    pub batches: Vec<BatchRecord>,
}

impl SimReport {
    /// Per-batch CSV with columns `batch_index,eq,es,v0`. Floats use the
    /// shortest round-trip form, switching to exponent notation at extreme
    /// magnitudes.
    pub fn write_batches_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "batch_index,eq,es,v0")?;
        for (i, b) in self.batches.iter().enumerate() {
            writeln!(out, "{i},{:?},{:?},{:?}", b.eq, b.es, b.v0)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Cell {
    count: u32,
    last: f64,
    area: f64,
}

impl Cell {
    fn advance(&mut self, t: f64) {
        self.area += self.count as f64 * (t - self.last);
        self.last = t;
    }
}

/// Time-weighted server counts per `(mode, queue_length)`, advanced lazily.
struct Occupancy {
    working: Vec<Cell>,
    dormant: Vec<Cell>,
}

impl Occupancy {
    fn new(n_servers: usize, m: usize) -> Self {
        let mut dormant = vec![Cell::default(); m];
        dormant[0].count = n_servers as u32;
        Occupancy {
            working: vec![Cell::default(); m + 2],
            dormant,
        }
    }

    fn cell(&mut self, s: ServerState) -> &mut Cell {
        let q = s.queue_length as usize;
        match s.mode {
            Mode::Dormant => &mut self.dormant[q],
            Mode::Working => {
                if q >= self.working.len() {
                    self.working.resize(q + 1, Cell::default());
                }
                &mut self.working[q]
            }
        }
    }

    fn moved(&mut self, t: f64, from: ServerState, to: ServerState) {
        let c = self.cell(from);
        c.advance(t);
        c.count -= 1;
        let c = self.cell(to);
        c.advance(t);
        c.count += 1;
    }

    /// Closes the window at `t` and returns the areas `(working, dormant)`.
    fn take(&mut self, t: f64) -> (Vec<f64>, Vec<f64>) {
        let take = |cells: &mut Vec<Cell>| {
            cells
                .iter_mut()
                .map(|c| {
                    c.advance(t);
                    std::mem::take(&mut c.area)
                })
                .collect::<Vec<f64>>()
        };
        (take(&mut self.working), take(&mut self.dormant))
    }
}

fn add_into(acc: &mut Vec<f64>, x: &[f64]) {
    if acc.len() < x.len() {
        acc.resize(x.len(), 0.0);
    }
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

#[derive(Default)]
struct SojournTally {
    sum: f64,
    count: u64,
    sum_working: f64,
    count_working: u64,
}

/// Runs replication `replication` of the configuration.
pub fn run_replication(
    params: &ModelParams,
    config: &SimConfig,
    replication: u64,
) -> Result<SimReport> {
    config.validate(params)?;
    let n = config.n_servers;
    let m = params.m;
    let rule = config.dispatch(params.d);
    let mut rng = replication_rng(config.seed, replication);

    let mut servers = vec![ServerState::EMPTY; n];
    // arrival time and whether the task joined a dormant server
    let mut stamps: Vec<VecDeque<(f64, bool)>> = vec![VecDeque::new(); n];
    let mut working: Vec<usize> = Vec::with_capacity(n);
    let mut slot = vec![usize::MAX; n];
    let mut occupancy = Occupancy::new(n, m);

    let arrival_rate = n as f64 * params.lambda;
    let batch_len = config.t_measure / config.n_batches as f64;
    let boundary = |i: usize| {
        if i == config.n_batches {
            config.t_warmup + config.t_measure
        } else {
            config.t_warmup + batch_len * i as f64
        }
    };
    let server_time = n as f64 * batch_len;

    let mut batches = Vec::with_capacity(config.n_batches);
    let mut working_area = Vec::new();
    let mut dormant_area = vec![0.0; m];
    let mut batch_sojourn = SojournTally::default();
    let mut total_sojourn = SojournTally::default();
    let mut arrivals = 0u64;

    let mut next_boundary = 0usize;
    let mut t = 0.0f64;
    loop {
        let rate = arrival_rate + params.mu * working.len() as f64;
        let t_next = if rate > 0.0 {
            t + rng.sample::<f64, _>(Exp1) / rate
        } else {
            f64::INFINITY
        };
        while next_boundary <= config.n_batches && boundary(next_boundary) <= t_next {
            let (w, dm) = occupancy.take(boundary(next_boundary));
            if next_boundary > 0 {
                let tasks: f64 = w.iter().enumerate().map(|(q, a)| q as f64 * a).sum::<f64>()
                    + dm.iter()
                        .enumerate()
                        .map(|(q, a)| q as f64 * a)
                        .sum::<f64>();
                let dormant: f64 = dm.iter().sum();
                batches.push(BatchRecord {
                    eq: tasks / server_time,
                    es: if batch_sojourn.count > 0 {
                        batch_sojourn.sum / batch_sojourn.count as f64
                    } else {
                        f64::NAN
                    },
                    v0: dormant / server_time,
                });
                add_into(&mut working_area, &w);
                add_into(&mut dormant_area, &dm);
                total_sojourn.sum += batch_sojourn.sum;
                total_sojourn.count += batch_sojourn.count;
                total_sojourn.sum_working += batch_sojourn.sum_working;
                total_sojourn.count_working += batch_sojourn.count_working;
            } else {
                arrivals = 0;
            }
            batch_sojourn = SojournTally::default();
            next_boundary += 1;
        }
        if next_boundary > config.n_batches {
            break;
        }
        t = t_next;

        if rng.random::<f64>() * rate < arrival_rate {
            let target = rule.choose(&mut rng, &servers)?;
            let before = servers[target];
            let after = before.after_arrival(m);
            if let Some(cap) = config.queue_cap {
                if after.queue_length > cap {
                    return Err(Error::QueueCapExceeded {
                        cap,
                        t,
                        replication,
                    });
                }
            }
            servers[target] = after;
            stamps[target].push_back((t, before.mode == Mode::Dormant));
            occupancy.moved(t, before, after);
            if !before.is_serving() && after.is_serving() {
                slot[target] = working.len();
                working.push(target);
            }
            arrivals += 1;
        } else {
            let target = working[rng.random_range(0..working.len())];
            let before = servers[target];
            let after = before.after_completion();
            servers[target] = after;
            let (arrived, joined_dormant) = stamps[target].pop_front().expect("queued task");
            occupancy.moved(t, before, after);
            if !after.is_serving() {
                let i = slot[target];
                working.swap_remove(i);
                if i < working.len() {
                    slot[working[i]] = i;
                }
                slot[target] = usize::MAX;
            }
            let sojourn = t - arrived;
            batch_sojourn.sum += sojourn;
            batch_sojourn.count += 1;
            if !joined_dormant {
                batch_sojourn.sum_working += sojourn;
                batch_sojourn.count_working += 1;
            }
        }
    }

    let horizon = n as f64 * config.t_measure;
    let mut u_hat: Vec<f64> = working_area.iter().skip(1).map(|a| a / horizon).collect();
    while u_hat.len() > 1 && u_hat.last() == Some(&0.0) {
        u_hat.pop();
    }
    tail_sums(&mut u_hat);
    let mut v_hat: Vec<f64> = dormant_area.iter().map(|a| a / horizon).collect();
    tail_sums(&mut v_hat);
    let eq_working = working_area
        .iter()
        .enumerate()
        .map(|(q, a)| q as f64 * a)
        .sum::<f64>()
        / horizon;
    let eq_dormant = dormant_area
        .iter()
        .enumerate()
        .map(|(q, a)| q as f64 * a)
        .sum::<f64>()
        / horizon;

    let eqs: Vec<f64> = batches.iter().map(|b| b.eq).collect();
    let ess: Vec<f64> = batches
        .iter()
        .map(|b| b.es)
        .filter(|x| !x.is_nan())
        .collect();
    let v0s: Vec<f64> = batches.iter().map(|b| b.v0).collect();
    let count_dormant = total_sojourn.count - total_sojourn.count_working;
    let ratio = |s: f64, c: u64| if c > 0 { s / c as f64 } else { 0.0 };

    Ok(SimReport {
        params: *params,
        config: config.clone(),
        replications: 1,
        u_hat,
        v_hat,
        eq_mean: Estimate::from_samples(&eqs),
        es_mean: if ess.is_empty() {
            Estimate {
                mean: 0.0,
                half_width: 0.0,
            }
        } else {
            Estimate::from_samples(&ess)
        },
        dormant_fraction: Estimate::from_samples(&v0s),
        eq_working,
        eq_dormant,
        es_joined_working: ratio(total_sojourn.sum_working, total_sojourn.count_working),
        es_joined_dormant: ratio(total_sojourn.sum - total_sojourn.sum_working, count_dormant),
        arrivals,
        tasks_completed: total_sojourn.count,
        unstable: !params.is_stable(),
        batches,
    })
}

/// Turns point masses into tails in place: `x[i] <- sum_{j >= i} x[j]`.
fn tail_sums(x: &mut [f64]) {
    let mut acc = 0.0;
    for v in x.iter_mut().rev() {
        acc += *v;
        *v = acc;
    }
}

/// Runs `config.n_replications` replications in parallel and pools them.
///
/// With several replications the confidence intervals come from the spread
/// of the replication means. Errors are reported for the lowest failing
/// replication index.
pub fn run_ensemble(params: &ModelParams, config: &SimConfig) -> Result<SimReport> {
    config.validate(params)?;
    let reports: Vec<Result<SimReport>> = (0..config.n_replications as u64)
        .into_par_iter()
        .map(|r| run_replication(params, config, r))
        .collect();
    let reports = reports.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(pool(reports))
}

/// Pools replication reports; a single report is returned unchanged.
pub fn pool(mut reports: Vec<SimReport>) -> SimReport {
    if reports.len() == 1 {
        return reports.pop().unwrap();
    }
    let count = reports.len();
    let r = count as f64;
    let average = |f: &dyn Fn(&SimReport) -> f64| reports.iter().map(f).sum::<f64>() / r;
    let across = |f: &dyn Fn(&SimReport) -> f64| {
        Estimate::from_samples(&reports.iter().map(f).collect::<Vec<_>>())
    };
    let mean_vec = |f: &dyn Fn(&SimReport) -> &Vec<f64>| {
        let mut acc = Vec::new();
        for rep in &reports {
            add_into(&mut acc, f(rep));
        }
        acc.iter().map(|x| x / r).collect::<Vec<f64>>()
    };

    let first = &reports[0];
    SimReport {
        params: first.params,
        config: first.config.clone(),
        replications: reports.iter().map(|x| x.replications).sum(),
        u_hat: mean_vec(&|x| &x.u_hat),
        v_hat: mean_vec(&|x| &x.v_hat),
        eq_mean: across(&|x| x.eq_mean.mean),
        es_mean: across(&|x| x.es_mean.mean),
        dormant_fraction: across(&|x| x.dormant_fraction.mean),
        eq_working: average(&|x| x.eq_working),
        eq_dormant: average(&|x| x.eq_dormant),
        es_joined_working: average(&|x| x.es_joined_working),
        es_joined_dormant: average(&|x| x.es_joined_dormant),
        arrivals: reports.iter().map(|x| x.arrivals).sum(),
        tasks_completed: reports.iter().map(|x| x.tasks_completed).sum(),
        unstable: first.unstable,
        batches: reports
            .iter()
            .flat_map(|x| x.batches.iter().copied())
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short(params: &ModelParams, n: usize, seed: u64, arrivals: f64) -> SimConfig {
        SimConfig::defaults(params, n, seed).with_arrivals(params, arrivals)
    }

    #[test]
    fn validation() {
        let p = ModelParams::new(0.39, 1.0, 2, 2).unwrap();
        let mut c = short(&p, 10, 1, 1e3);
        c.n_batches = 1;
        assert!(matches!(c.validate(&p), Err(Error::InvalidConfig(_))));
        let c = short(&p, 1, 1, 1e3);
        assert_eq!(c.validate(&p), Err(Error::DExceedsN { d: 2, n: 1 }));
        let mut c = short(&p, 1, 1, 1e3);
        c.sampling = Sampling::WithReplacement;
        assert!(c.validate(&p).is_ok());
    }

    #[test]
    fn deterministic_given_seed() {
        let p = ModelParams::new(0.7, 1.0, 2, 3).unwrap();
        let c = short(&p, 20, 42, 2e4);
        let a = run_replication(&p, &c, 0).unwrap();
        let b = run_replication(&p, &c, 0).unwrap();
        assert_eq!(a, b);
        let other = run_replication(&p, &c, 1).unwrap();
        assert_ne!(a.eq_mean, other.eq_mean);
    }

    #[test]
    fn near_zero_load_stays_empty() {
        let p = ModelParams::new(1e-9, 1.0, 2, 2).unwrap();
        let mut c = SimConfig::defaults(&p, 10, 3);
        c.t_measure = 100.0;
        let r = run_replication(&p, &c, 0).unwrap();
        assert_eq!(
            r.eq_mean,
            Estimate {
                mean: 0.0,
                half_width: 0.0
            }
        );
        assert!((r.dormant_fraction.mean - 1.0).abs() < 1e-12);
        assert_eq!(r.tasks_completed, 0);
        assert!((r.v_hat[0] - 1.0).abs() < 1e-12);
        assert_eq!(r.v_hat[1], 0.0);
    }

    #[test]
    fn conservation_and_ordering() {
        let p = ModelParams::new(0.8, 1.0, 2, 3).unwrap();
        let r = run_replication(&p, &short(&p, 30, 9, 5e4), 0).unwrap();
        assert!((r.u_hat[0] + r.v_hat[0] - 1.0).abs() < 1e-12);
        assert!(r.u_hat.windows(2).all(|w| w[0] >= w[1]));
        assert!(r.v_hat.windows(2).all(|w| w[0] >= w[1]));
        assert!(r.eq_mean.mean >= 0.0);
        let batch_mean = r.batches.iter().map(|b| b.v0).sum::<f64>() / r.batches.len() as f64;
        assert!((batch_mean - r.v_hat[0]).abs() < 1e-12);
        assert!((r.eq_working + r.eq_dormant - r.eq_mean.mean).abs() < 1e-12);
    }

    #[test]
    fn queue_cap_trips_when_overloaded() {
        let p = ModelParams::new(1.5, 1.0, 2, 2).unwrap();
        let mut c = short(&p, 5, 1, 1e5);
        c.queue_cap = Some(30);
        match run_replication(&p, &c, 4) {
            Err(Error::QueueCapExceeded {
                cap, replication, ..
            }) => {
                assert_eq!(cap, 30);
                assert_eq!(replication, 4);
            }
            other => panic!("expected cap error, got {other:?}"),
        }
    }

    #[test]
    fn single_replication_ensemble_matches() {
        let p = ModelParams::new(0.5, 1.0, 2, 2).unwrap();
        let c = short(&p, 10, 5, 1e4);
        assert_eq!(
            run_ensemble(&p, &c).unwrap(),
            run_replication(&p, &c, 0).unwrap()
        );
    }

    #[test]
    fn pooled_mean_is_average_of_replications() {
        let p = ModelParams::new(0.5, 1.0, 2, 2).unwrap();
        let mut c = short(&p, 10, 5, 1e4);
        c.n_replications = 4;
        let pooled = run_ensemble(&p, &c).unwrap();
        let reps: Vec<SimReport> = (0..4)
            .map(|r| run_replication(&p, &c, r).unwrap())
            .collect();
        let avg = reps.iter().map(|r| r.eq_mean.mean).sum::<f64>() / 4.0;
        assert!((pooled.eq_mean.mean - avg).abs() < 1e-15);
        assert_eq!(pooled.replications, 4);
        assert_eq!(pooled.batches.len(), 4 * c.n_batches);
        assert_eq!(pooled, run_ensemble(&p, &c).unwrap());
    }

    #[test]
    fn batch_csv() {
        let p = ModelParams::new(0.5, 1.0, 2, 2).unwrap();
        let r = run_replication(&p, &short(&p, 4, 5, 1e3), 0).unwrap();
        let mut out = Vec::new();
        r.write_batches_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("batch_index,eq,es,v0\n0,"));
        assert_eq!(text.lines().count(), 21);
    }
}
