//! Exact stationary distribution of the finite-N chain for a handful of servers.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::sim::{DispatchRule, Mode, ServerState};

/// Largest joint state space accepted.
pub const STATE_LIMIT: usize = 1_000_000;
/// Largest state space solved by dense LU; beyond it Gauss-Seidel is used.
pub const DENSE_LIMIT: usize = 1500;
/// Largest stationary mass allowed on states with a queue at the cap.
pub const TRUNCATION_LIMIT: f64 = 1e-8;
/// Largest accepted `max |(pi Q)_j|`.
pub const RESIDUAL_LIMIT: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CtmcSolution {
    pub n_servers: usize,
    pub queue_cap: u32,
    /// Joint states in lexicographic order of per-server states.
    #[serde(skip)]
    pub states: Vec<Vec<ServerState>>,
    #[serde(skip)]
    pub probabilities: Vec<f64>,
    /// `u[k - 1]`: expected fraction of working servers with at least `k` tasks.
    pub u: Vec<f64>,
    /// `v[j]`: expected fraction of dormant servers with at least `j` tasks.
    pub v: Vec<f64>,
    /// Mean tasks per server.
    pub eq: f64,
    /// Stationary mass of states in which some queue sits at the cap.
    pub truncation_mass: f64,
    pub residual: f64,
}

impl CtmcSolution {
    /// JSON with the marginals, plus the full state vector when `full` is set.
    pub fn to_json(&self, full: bool) -> serde_json::Value {
        let mut value = serde_json::to_value(self).expect("plain data");
        if full {
            let states: Vec<serde_json::Value> = self
                .states
                .iter()
                .zip(&self.probabilities)
                .map(|(s, p)| serde_json::json!({ "servers": s, "probability": p }))
                .collect();
            value["states"] = serde_json::Value::Array(states);
        }
        value
    }
}

struct Generator {
    /// Off-diagonal transitions `(from, to, rate)`.
    transitions: Vec<(usize, usize, f64)>,
    out_rate: Vec<f64>,
}

/// Solves `pi Q = 0` for `n_servers` servers whose queues are capped at
/// `queue_cap`; arrivals routed to a full queue are lost.
pub fn ctmc_exact_small_n(
    params: &ModelParams,
    dispatch: &DispatchRule,
    n_servers: usize,
    queue_cap: u32,
) -> Result<CtmcSolution> {
    params.validate()?;
    dispatch.check(n_servers)?;
    if n_servers < 1 {
        return Err(Error::InvalidConfig("n_servers must be at least 1".into()));
    }
    if (queue_cap as usize) < params.m {
        return Err(Error::InvalidConfig(format!(
            "queue_cap {queue_cap} must be at least m = {}",
            params.m
        )));
    }
    let (states, generator) = build_generator(params, dispatch, n_servers, queue_cap)?;
    let n_states = states.len();
    let pi = if n_states <= DENSE_LIMIT {
        solve_dense(&generator, n_states)?
    } else {
        solve_gauss_seidel(&generator, n_states)?
    };
    let residual = balance_residual(&generator, &pi);
    if residual > RESIDUAL_LIMIT {
        return Err(Error::LinearSolve(format!(
            "balance residual {residual:e} exceeds {RESIDUAL_LIMIT:e}"
        )));
    }

    let cap = queue_cap as usize;
    let mut u = vec![0.0; cap];
    let mut v = vec![0.0; params.m];
    let mut eq = 0.0;
    let mut truncation_mass = 0.0;
    let per_server = 1.0 / n_servers as f64;
    for (servers, &p) in states.iter().zip(&pi) {
        let mut at_cap = false;
        for x in servers {
            let q = x.queue_length as usize;
            if x.is_serving() {
                for uk in &mut u[..q] {
                    *uk += p * per_server;
                }
            } else {
                for vj in &mut v[..=q] {
                    *vj += p * per_server;
                }
            }
            eq += p * per_server * q as f64;
            at_cap |= q == cap;
        }
        if at_cap {
            truncation_mass += p;
        }
    }
    if truncation_mass > TRUNCATION_LIMIT {
        return Err(Error::TruncationMassTooHigh {
            mass: truncation_mass,
            limit: TRUNCATION_LIMIT,
        });
    }

    Ok(CtmcSolution {
        n_servers,
        queue_cap,
        states,
        probabilities: pi,
        u,
        v,
        eq,
        truncation_mass,
        residual,
    })
}

/// Enumerates the joint states and their outgoing transitions.
fn build_generator(
    params: &ModelParams,
    dispatch: &DispatchRule,
    n_servers: usize,
    queue_cap: u32,
) -> Result<(Vec<Vec<ServerState>>, Generator)> {
    let local = ServerState::enumerate(params.m, queue_cap);
    let s = local.len();
    let n_states = (s as f64).powi(n_servers as i32);
    if n_states > STATE_LIMIT as f64 {
        return Err(Error::StateSpaceTooLarge {
            states: n_states as usize,
            limit: STATE_LIMIT,
        });
    }
    let n_states = n_states as usize;
    // position in `local`: dormant levels first, then working levels
    let m = params.m;
    let local_index = |x: ServerState| match x.mode {
        Mode::Dormant => x.queue_length as usize,
        Mode::Working => m + x.queue_length as usize - 1,
    };
    let decode = |mut idx: usize| -> Vec<ServerState> {
        let mut out = vec![ServerState::EMPTY; n_servers];
        for slot in out.iter_mut().rev() {
            *slot = local[idx % s];
            idx /= s;
        }
        out
    };
    let encode = |servers: &[ServerState]| -> usize {
        servers.iter().fold(0, |acc, &x| acc * s + local_index(x))
    };

    let states: Vec<Vec<ServerState>> = (0..n_states).map(decode).collect();
    let mut generator = Generator {
        transitions: Vec::new(),
        out_rate: vec![0.0; n_states],
    };
    let arrival_rate = n_servers as f64 * params.lambda;
    let mut next = vec![ServerState::EMPTY; n_servers];
    for (from, servers) in states.iter().enumerate() {
        let targets = dispatch.target_probabilities(servers)?;
        for (i, &p) in targets.iter().enumerate() {
            if p > 0.0 && servers[i].queue_length < queue_cap {
                next.copy_from_slice(servers);
                next[i] = servers[i].after_arrival(params.m);
                let rate = arrival_rate * p;
                generator.transitions.push((from, encode(&next), rate));
                generator.out_rate[from] += rate;
            }
        }
        for (i, x) in servers.iter().enumerate() {
            if x.is_serving() {
                next.copy_from_slice(servers);
                next[i] = x.after_completion();
                generator.transitions.push((from, encode(&next), params.mu));
                generator.out_rate[from] += params.mu;
            }
        }
    }
    Ok((states, generator))
}

fn solve_dense(generator: &Generator, n: usize) -> Result<Vec<f64>> {
    // Q^T pi = 0 with the last equation replaced by sum(pi) = 1
    let mut a = DMatrix::<f64>::zeros(n, n);
    for &(from, to, rate) in &generator.transitions {
        a[(to, from)] += rate;
    }
    for j in 0..n {
        a[(j, j)] -= generator.out_rate[j];
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
    Ok(clean(x.iter().copied().collect()))
}

fn solve_gauss_seidel(generator: &Generator, n: usize) -> Result<Vec<f64>> {
    const MAX_SWEEPS: usize = 200_000;
    let mut incoming: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for &(from, to, rate) in &generator.transitions {
        if from != to {
            incoming[to].push((from, rate));
        }
    }
    let mut pi = vec![1.0 / n as f64; n];
    for _ in 0..MAX_SWEEPS {
        let mut change = 0.0f64;
        for j in 0..n {
            if generator.out_rate[j] == 0.0 {
                continue;
            }
            let inflow: f64 = incoming[j].iter().map(|&(i, r)| pi[i] * r).sum();
            let new = inflow / generator.out_rate[j];
            change = change.max((new - pi[j]).abs());
            pi[j] = new;
        }
        let total: f64 = pi.iter().sum();
        pi.iter_mut().for_each(|p| *p /= total);
        if change < 1e-16 {
            return Ok(clean(pi));
        }
    }
    let pi = clean(pi);
    let residual = balance_residual(generator, &pi);
    if residual <= RESIDUAL_LIMIT {
        Ok(pi)
    } else {
        Err(Error::NoConvergence(format!(
            "Gauss-Seidel stalled with balance residual {residual:e}"
        )))
    }
}

/// Clamps round-off negatives and renormalizes.
fn clean(mut pi: Vec<f64>) -> Vec<f64> {
    pi.iter_mut().for_each(|p| *p = p.max(0.0));
    let total: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|p| *p /= total);
    pi
}

fn balance_residual(generator: &Generator, pi: &[f64]) -> f64 {
    let mut flow: Vec<f64> = pi
        .iter()
        .zip(&generator.out_rate)
        .map(|(p, r)| -p * r)
        .collect();
    for &(from, to, rate) in &generator.transitions {
        flow[to] += pi[from] * rate;
    }
    flow.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn near_zero_load_keeps_every_server_dormant() {
        let p = ModelParams::new(1e-9, 1.0, 2, 1).unwrap();
        let sol = ctmc_exact_small_n(&p, &DispatchRule::new(2), 2, 6).unwrap();
        assert_eq!(sol.states[0], vec![ServerState::EMPTY; 2]);
        assert!((sol.probabilities[0] - 1.0).abs() < 1e-8);
        assert!((sol.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        // with m = 2 the servers alternate between holding one task each and
        // one task in total (the woken server drains instantly), with equal
        // holding times; both-empty is never revisited
        let p = ModelParams::new(1e-9, 1.0, 2, 2).unwrap();
        let sol = ctmc_exact_small_n(&p, &DispatchRule::new(2), 2, 6).unwrap();
        assert!((sol.v[0] - 1.0).abs() < 1e-8);
        assert!((sol.v[1] - 0.75).abs() < 1e-8);
        assert!(sol.u[0] < 1e-8);
    }

    #[test]
    fn rejects_huge_state_space_and_short_cap() {
        let p = ModelParams::new(0.5, 1.0, 2, 2).unwrap();
        assert!(matches!(
            ctmc_exact_small_n(&p, &DispatchRule::new(2), 3, 200),
            Err(Error::StateSpaceTooLarge { .. })
        ));
        assert!(matches!(
            ctmc_exact_small_n(&p, &DispatchRule::new(2), 2, 5),
            Err(Error::TruncationMassTooHigh { .. })
        ));
        assert!(matches!(
            ctmc_exact_small_n(&p, &DispatchRule::new(2), 2, 1),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn dense_and_iterative_solvers_agree() {
        let p = ModelParams::new(0.39, 1.0, 2, 2).unwrap();
        let (states, generator) = build_generator(&p, &DispatchRule::new(2), 2, 25).unwrap();
        let dense = solve_dense(&generator, states.len()).unwrap();
        let iterative = solve_gauss_seidel(&generator, states.len()).unwrap();
        let gap = iterative
            .iter()
            .zip(&dense)
            .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        assert!(gap < 1e-12, "gap {gap:e}");
        assert!(balance_residual(&generator, &iterative) < RESIDUAL_LIMIT);
    }

    #[test]
    fn marginals_are_consistent() {
        let p = ModelParams::new(0.6, 1.0, 2, 3).unwrap();
        let sol = ctmc_exact_small_n(&p, &DispatchRule::new(2), 2, 30).unwrap();
        assert!((sol.u[0] + sol.v[0] - 1.0).abs() < 1e-12);
        assert!(sol.u.windows(2).all(|w| w[0] >= w[1]));
        assert!(sol.v.windows(2).all(|w| w[0] >= w[1]));
        let tails: f64 = sol.u.iter().sum::<f64>() + sol.v[1..].iter().sum::<f64>();
        assert!((tails - sol.eq).abs() < 1e-12);
        assert!(sol.residual < RESIDUAL_LIMIT);
        let json = sol.to_json(false);
        assert!(json.get("states").is_none());
        assert_eq!(
            sol.to_json(true)["states"].as_array().unwrap().len(),
            sol.states.len()
        );
    }
}
