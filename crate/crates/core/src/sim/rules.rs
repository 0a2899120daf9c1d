//! Per-server transition rules and the dispatch rule.
//!
//! Both the event-driven simulator and the exact CTMC builder in
//! [`crate::oracle`] take their dynamics from here.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Working,
    Dormant,
}

/// Queue length (including the task in service) and mode of one server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ServerState {
    pub queue_length: u32,
    pub mode: Mode,
}

impl ServerState {
    pub const EMPTY: ServerState = ServerState {
        queue_length: 0,
        mode: Mode::Dormant,
    };

    pub fn working(queue_length: u32) -> Self {
        debug_assert!(queue_length >= 1);
        ServerState {
            queue_length,
            mode: Mode::Working,
        }
    }

    pub fn dormant(queue_length: u32) -> Self {
        ServerState {
            queue_length,
            mode: Mode::Dormant,
        }
    }

    /// Only working servers serve.
    pub fn is_serving(&self) -> bool {
        self.mode == Mode::Working
    }

    /// A dormant server wakes as soon as its buffer reaches `m` tasks.
    pub fn after_arrival(self, m: usize) -> Self {
        let q = self.queue_length + 1;
        match self.mode {
            Mode::Dormant if q as usize >= m => ServerState::working(q),
            mode => ServerState {
                queue_length: q,
                mode,
            },
        }
    }

    /// A working server that empties goes dormant.
    pub fn after_completion(self) -> Self {
        debug_assert!(self.is_serving() && self.queue_length >= 1);
        let q = self.queue_length - 1;
        if q == 0 {
            ServerState::EMPTY
        } else {
            ServerState::working(q)
        }
    }

    /// All per-server states with queue length at most `cap`, ordered
    /// dormant `0..m-1` then working `1..=cap`.
    pub fn enumerate(m: usize, cap: u32) -> Vec<ServerState> {
        let dormant = (0..m as u32).map(ServerState::dormant);
        let working = (1..=cap).map(ServerState::working);
        dormant.chain(working).collect()
    }
}

/// How the `d` candidates are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    #[default]
    WithoutReplacement,
    WithReplacement,
}

/// How ties among the shortest sampled queues are broken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    /// Uniform over all sampled servers of minimal queue length.
    #[default]
    Uniform,
    /// Uniform over working servers of minimal queue length if any, otherwise
    /// over the dormant ones.
    PreferWorking,
}

/// Power-of-d dispatch: sample `d` servers, join the shortest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispatchRule {
    pub d: usize,
    pub sampling: Sampling,
    pub tie_break: TieBreak,
}

impl DispatchRule {
    pub fn new(d: usize) -> Self {
        DispatchRule {
            d,
            sampling: Sampling::default(),
            tie_break: TieBreak::default(),
        }
    }

    fn key(&self, s: &ServerState) -> (u32, u8) {
        match self.tie_break {
            TieBreak::Uniform => (s.queue_length, 0),
            TieBreak::PreferWorking => (s.queue_length, (s.mode == Mode::Dormant) as u8),
        }
    }

    pub fn check(&self, n_servers: usize) -> Result<()> {
        if self.d < 1 {
            return Err(Error::InvalidParams("d must be at least 1".into()));
        }
        if self.sampling == Sampling::WithoutReplacement && self.d > n_servers {
            return Err(Error::DExceedsN {
                d: self.d,
                n: n_servers,
            });
        }
        Ok(())
    }

    /// Draws the candidate indices.
    pub fn sample_servers<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        n_servers: usize,
    ) -> Result<Vec<usize>> {
        self.check(n_servers)?;
        Ok(match self.sampling {
            Sampling::WithoutReplacement => index::sample(rng, n_servers, self.d).into_vec(),
            Sampling::WithReplacement => (0..self.d)
                .map(|_| rng.random_range(0..n_servers))
                .collect(),
        })
    }

    /// Picks the target among `candidates`, breaking ties uniformly over slots.
    pub fn pick<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        servers: &[ServerState],
        candidates: &[usize],
    ) -> usize {
        let mut best = candidates[0];
        let mut best_key = self.key(&servers[best]);
        let mut ties = 1u32;
        for &i in &candidates[1..] {
            let key = self.key(&servers[i]);
            if key < best_key {
                best = i;
                best_key = key;
                ties = 1;
            } else if key == best_key {
                ties += 1;
                if rng.random_range(0..ties) == 0 {
                    best = i;
                }
            }
        }
        best
    }

    /// Samples and picks in one go.
    pub fn choose<R: Rng + ?Sized>(&self, rng: &mut R, servers: &[ServerState]) -> Result<usize> {
        let candidates = self.sample_servers(rng, servers.len())?;
        Ok(self.pick(rng, servers, &candidates))
    }

    /// Exact probability that each server receives the next arrival, by
    /// enumerating every ordered sample. Intended for a handful of servers.
    pub fn target_probabilities(&self, servers: &[ServerState]) -> Result<Vec<f64>> {
        let n = servers.len();
        self.check(n)?;
        let mut probs = vec![0.0; n];
        let mut tuple = vec![0usize; self.d];
        let mut total = 0.0;
        self.visit(servers, &mut tuple, 0, &mut |sample| {
            let best_key = sample.iter().map(|&i| self.key(&servers[i])).min().unwrap();
            let winners: Vec<usize> = sample
                .iter()
                .copied()
                .filter(|&i| self.key(&servers[i]) == best_key)
                .collect();
            let share = 1.0 / winners.len() as f64;
            for i in winners {
                probs[i] += share;
            }
            total += 1.0;
        });
        for p in probs.iter_mut() {
            *p /= total;
        }
        Ok(probs)
    }

    fn visit(
        &self,
        servers: &[ServerState],
        tuple: &mut Vec<usize>,
        depth: usize,
        f: &mut impl FnMut(&[usize]),
    ) {
        if depth == self.d {
            f(tuple);
            return;
        }
        for i in 0..servers.len() {
            if self.sampling == Sampling::WithoutReplacement && tuple[..depth].contains(&i) {
                continue;
            }
            tuple[depth] = i;
            self.visit(servers, tuple, depth + 1, f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lifecycle() {
        let m = 3;
        let s = ServerState::EMPTY.after_arrival(m).after_arrival(m);
        assert_eq!(s, ServerState::dormant(2));
        let s = s.after_arrival(m);
        assert_eq!(s, ServerState::working(3));
        let s = s.after_completion().after_completion().after_completion();
        assert_eq!(s, ServerState::EMPTY);
        // m = 1: the first arrival wakes the server
        assert_eq!(ServerState::EMPTY.after_arrival(1), ServerState::working(1));
    }

    #[test]
    fn enumerate_states() {
        let states = ServerState::enumerate(2, 3);
        assert_eq!(
            states,
            vec![
                ServerState::dormant(0),
                ServerState::dormant(1),
                ServerState::working(1),
                ServerState::working(2),
                ServerState::working(3)
            ]
        );
    }

    #[test]
    fn d_exceeding_n_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rule = DispatchRule::new(4);
        assert_eq!(
            rule.sample_servers(&mut rng, 3),
            Err(Error::DExceedsN { d: 4, n: 3 })
        );
    }

    #[test]
    fn full_sample_is_global_jsq() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let servers = vec![
            ServerState::working(3),
            ServerState::dormant(1),
            ServerState::working(2),
            ServerState::dormant(0),
        ];
        let rule = DispatchRule::new(4);
        for _ in 0..100 {
            let mut c = rule.sample_servers(&mut rng, 4).unwrap();
            c.sort();
            assert_eq!(c, vec![0, 1, 2, 3]);
            assert_eq!(rule.pick(&mut rng, &servers, &c), 3);
        }
        let probs = rule.target_probabilities(&servers).unwrap();
        assert_eq!(probs, vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn exact_probabilities_sum_to_one_and_match_draws() {
        let servers = vec![
            ServerState::working(1),
            ServerState::dormant(1),
            ServerState::working(2),
        ];
        for sampling in [Sampling::WithoutReplacement, Sampling::WithReplacement] {
            for tie_break in [TieBreak::Uniform, TieBreak::PreferWorking] {
                let rule = DispatchRule {
                    d: 2,
                    sampling,
                    tie_break,
                };
                let probs = rule.target_probabilities(&servers).unwrap();
                assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-15);
                let mut rng = ChaCha8Rng::seed_from_u64(3);
                let n = 200_000;
                let mut hits = [0usize; 3];
                for _ in 0..n {
                    hits[rule.choose(&mut rng, &servers).unwrap()] += 1;
                }
                for i in 0..3 {
                    let p = probs[i];
                    let sd = (p * (1.0 - p) / n as f64).sqrt();
                    let freq = hits[i] as f64 / n as f64;
                    assert!(
                        (freq - p).abs() <= 4.0 * sd + 1e-12,
                        "{sampling:?} {tie_break:?} {i}"
                    );
                }
            }
        }
    }

    #[test]
    fn prefer_working_breaks_mixed_ties() {
        let servers = vec![ServerState::working(1), ServerState::dormant(1)];
        let rule = DispatchRule {
            d: 2,
            sampling: Sampling::WithoutReplacement,
            tie_break: TieBreak::PreferWorking,
        };
        assert_eq!(rule.target_probabilities(&servers).unwrap(), vec![1.0, 0.0]);
        let uniform = DispatchRule::new(2);
        assert_eq!(
            uniform.target_probabilities(&servers).unwrap(),
            vec![0.5, 0.5]
        );
    }
}
