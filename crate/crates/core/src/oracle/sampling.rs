//! Exact probability that an arrival joins a given `(queue_length, mode)` class.

use std::collections::BTreeMap;

use num_bigint::BigUint;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};

use crate::error::{Error, Result};
use crate::model::FractionState;
use crate::sim::{Mode, Sampling, ServerState, TieBreak};

/// Server counts per `(queue_length, mode)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Population {
    counts: BTreeMap<ServerState, u64>,
}

impl Population {
    pub fn from_servers(servers: &[ServerState]) -> Self {
        let mut pop = Population::default();
        for &s in servers {
            pop.add(s, 1);
        }
        pop
    }

    pub fn add(&mut self, state: ServerState, count: u64) {
        if count > 0 {
            *self.counts.entry(state).or_insert(0) += count;
        }
    }

    pub fn count(&self, state: ServerState) -> u64 {
        self.counts.get(&state).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn classes(&self) -> impl Iterator<Item = ServerState> + '_ {
        self.counts.keys().copied()
    }

    /// Servers with queue length at least `level`.
    fn at_least(&self, level: u32) -> u64 {
        self.counts
            .iter()
            .filter(|(s, _)| s.queue_length >= level)
            .map(|(_, c)| c)
            .sum()
    }

    /// `n` servers whose class fractions follow the tails of `state`, rounded
    /// by largest remainder so the counts add up to `n`.
    pub fn synthesize(state: &FractionState, n: u64) -> Self {
        let mut classes: Vec<(ServerState, f64)> = Vec::new();
        for k in 1..=state.k() {
            let mass = state.u(k) - state.u(k + 1);
            classes.push((ServerState::working(k as u32), mass));
        }
        for j in 0..state.m() {
            let mass = state.v(j) - state.v(j + 1);
            classes.push((ServerState::dormant(j as u32), mass));
        }
        let target: Vec<f64> = classes.iter().map(|(_, f)| f.max(0.0) * n as f64).collect();
        let mut counts: Vec<u64> = target.iter().map(|x| x.floor() as u64).collect();
        let assigned: u64 = counts.iter().sum();
        let mut order: Vec<usize> = (0..classes.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = target[a] - target[a].floor();
            let rb = target[b] - target[b].floor();
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        for &i in order.iter().take(n.saturating_sub(assigned) as usize) {
            counts[i] += 1;
        }
        let mut pop = Population::default();
        for ((s, _), c) in classes.into_iter().zip(counts) {
            pop.add(s, c);
        }
        pop
    }
}

fn binomial(n: u64, k: u64) -> BigUint {
    if k > n {
        return BigUint::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigUint::one();
    for i in 0..k {
        acc = acc * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    acc
}

/// Probability that a sample leaves at most `outside` servers excluded,
/// i.e. that all `d` draws land in a set of size `inside` out of `total`.
fn all_within(inside: u64, total: u64, d: usize, sampling: Sampling) -> BigRational {
    match sampling {
        Sampling::WithoutReplacement => BigRational::new(
            binomial(inside, d as u64).into(),
            binomial(total, d as u64).into(),
        ),
        Sampling::WithReplacement => {
            let ratio = BigRational::new(inside.into(), total.into());
            num_traits::pow(ratio, d)
        }
    }
}

/// Exact probability that the next arrival joins a server in class `target`
/// (its queue length before the arrival, and its mode).
///
/// Sorting classes by the tie-break key, the arrival lands in the first class
/// hit by the sample, so the probability is a difference of "all draws avoid
/// everything below" events. Under uniform tie-breaking the mass of a level
/// is split between its working and dormant servers in proportion to their
/// counts.
pub fn enumerate_sampling_probability(
    population: &Population,
    d: usize,
    target: ServerState,
    sampling: Sampling,
    tie_break: TieBreak,
) -> Result<BigRational> {
    let total = population.total();
    if d < 1 {
        return Err(Error::InvalidParams("d must be at least 1".into()));
    }
    if sampling == Sampling::WithoutReplacement && d as u64 > total {
        return Err(Error::DExceedsN {
            d,
            n: total as usize,
        });
    }
    let in_class = population.count(target);
    if in_class == 0 {
        return Ok(BigRational::zero());
    }
    let level = target.queue_length;
    let at_least = population.at_least(level);
    let above = population.at_least(level + 1);
    let within = |n: u64| all_within(n, total, d, sampling);
    Ok(match tie_break {
        TieBreak::Uniform => {
            let at_level = at_least - above;
            (within(at_least) - within(above)) * BigRational::new(in_class.into(), at_level.into())
        }
        TieBreak::PreferWorking => {
            let working_here = population.count(ServerState {
                queue_length: level,
                mode: Mode::Working,
            });
            match target.mode {
                Mode::Working => within(at_least) - within(at_least - working_here),
                Mode::Dormant => within(at_least - working_here) - within(above),
            }
        }
    })
}

pub fn to_f64(x: &BigRational) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}
