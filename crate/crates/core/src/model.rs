//! Model parameters, the tail-fraction state space and the arrival rate
//! multipliers `W_k` shared by the mean-field, fixed-point and oracle code.
//!
//! A state is described by two tail sequences:
//!
//! * `u_k` (k >= 1): fraction of servers that are working with at least `k` tasks,
//! * `v_j` (0 <= j < m): fraction of servers that are dormant with at least `j` tasks.
//!
//! Every server is either working or dormant, so `u_1 + v_0 = 1`. Entries past
//! the stored truncation are exactly zero, and `v_j = 0` for `j >= m`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance used for invariant checks on fraction states.
pub const STATE_TOL: f64 = 1e-12;

/// Per-server arrival rate, service rate, sample size and wake threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub lambda: f64,
    pub mu: f64,
    pub d: usize,
    pub m: usize,
}

impl ModelParams {
    pub fn new(lambda: f64, mu: f64, d: usize, m: usize) -> Result<Self> {
        ModelParams { lambda, mu, d, m }.validate()
    }

    /// Checks the field invariants. Stability is not required here; use
    /// [`ModelParams::require_stable`] at solver entry points.
    pub fn validate(self) -> Result<Self> {
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::InvalidParams(format!(
                "lambda must be positive and finite, got {}",
                self.lambda
            )));
        }
        if !(self.mu.is_finite() && self.mu > 0.0) {
            return Err(Error::InvalidParams(format!(
                "mu must be positive and finite, got {}",
                self.mu
            )));
        }
        if self.d < 1 {
            return Err(Error::InvalidParams("d must be at least 1".into()));
        }
        if self.m < 1 {
            return Err(Error::InvalidParams("m must be at least 1".into()));
        }
        Ok(self)
    }

    /// The system is stable iff `lambda < mu`.
    pub fn is_stable(&self) -> bool {
        self.lambda < self.mu
    }

    pub fn require_stable(self) -> Result<Self> {
        let p = self.validate()?;
        if p.is_stable() {
            Ok(p)
        } else {
            Err(Error::Unstable {
                lambda: p.lambda,
                mu: p.mu,
            })
        }
    }

    /// Load `lambda / mu`.
    pub fn rho(&self) -> f64 {
        self.lambda / self.mu
    }

    pub fn with_lambda(self, lambda: f64) -> Self {
        ModelParams { lambda, ..self }
    }

    pub fn with_m(self, m: usize) -> Self {
        ModelParams { m, ..self }
    }

    pub fn with_d(self, d: usize) -> Self {
        ModelParams { d, ..self }
    }
}

/// `sum_{j=0}^{d-1} a^j b^(d-1-j)`, i.e. the divided difference
/// `(a^d - b^d) / (a - b)` without the division (equals `d a^(d-1)` when `a == b`).
pub fn power_sum(a: f64, b: f64, d: usize) -> f64 {
    // Horner form: ((a + b) a + b^2) a + ...
    let mut acc = 0.0;
    let mut b_pow = 1.0;
    for _ in 0..d {
        acc = acc * a + b_pow;
        b_pow *= b;
    }
    // acc now equals sum_j a^(d-1-j) b^j, which is symmetric in the summation order
    acc
}

/// Truncated tail fractions `(u_1..u_K; v_0..v_{m-1})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionState {
    u: Vec<f64>,
    v: Vec<f64>,
}

impl FractionState {
    /// Builds a state and checks range, ordering and `u_1 + v_0 = 1` to
    /// [`STATE_TOL`].
    pub fn new(u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        let s = FractionState { u, v };
        s.check()?;
        Ok(s)
    }

    pub(crate) fn from_parts_unchecked(u: Vec<f64>, v: Vec<f64>) -> Self {
        FractionState { u, v }
    }

    /// Every server dormant and empty: `u = 0`, `v_0 = 1`, `v_j = 0` for `j > 0`.
    pub fn empty(m: usize, k: usize) -> Self {
        let mut v = vec![0.0; m.max(1)];
        v[0] = 1.0;
        FractionState { u: vec![0.0; k], v }
    }

    /// Every server working with exactly `tasks` tasks.
    pub fn all_working(m: usize, k: usize, tasks: usize) -> Self {
        let u = (1..=k)
            .map(|i| if i <= tasks { 1.0 } else { 0.0 })
            .collect();
        FractionState {
            u,
            v: vec![0.0; m.max(1)],
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.v.is_empty() {
            return Err(Error::InvalidState("v must contain at least v_0".into()));
        }
        check_tail("u", &self.u, STATE_TOL)?;
        check_tail("v", &self.v, STATE_TOL)?;
        let total = self.u(1) + self.v[0];
        if (total - 1.0).abs() > STATE_TOL {
            return Err(Error::InvalidState(format!(
                "u_1 + v_0 = {total}, expected 1"
            )));
        }
        Ok(())
    }

    /// Truncation length `K` of the working tail.
    pub fn k(&self) -> usize {
        self.u.len()
    }

    /// Threshold `m` implied by the length of `v`.
    pub fn m(&self) -> usize {
        self.v.len()
    }

    /// `u_k` for `k >= 1`; zero beyond the truncation. `u(0)` is defined as `u_1`
    /// (no working server holds zero tasks).
    pub fn u(&self, k: usize) -> f64 {
        let k = k.max(1);
        self.u.get(k - 1).copied().unwrap_or(0.0)
    }

    /// `v_j`; zero for `j >= m`.
    pub fn v(&self, j: usize) -> f64 {
        self.v.get(j).copied().unwrap_or(0.0)
    }

    pub fn u_slice(&self) -> &[f64] {
        &self.u
    }

    pub fn v_slice(&self) -> &[f64] {
        &self.v
    }

    pub fn into_parts(self) -> (Vec<f64>, Vec<f64>) {
        (self.u, self.v)
    }

    /// Fraction of servers (either mode) holding at least `k` tasks, with
    /// `combined_tail(0) = u_1 + v_0`.
    pub fn combined_tail(&self, k: usize) -> f64 {
        if k == 0 {
            self.u(1) + self.v(0)
        } else {
            self.u(k) + self.v(k)
        }
    }

    /// Returns a copy with the working tail zero-padded (or truncated) to `k` levels.
    pub fn resized(&self, k: usize) -> Self {
        let mut u = self.u.clone();
        u.resize(k, 0.0);
        FractionState {
            u,
            v: self.v.clone(),
        }
    }

    /// Mean number of tasks per server: `sum_k u_k + sum_{j>=1} v_j`.
    pub fn mean_queue_length(&self) -> f64 {
        self.u.iter().sum::<f64>() + self.v.iter().skip(1).sum::<f64>()
    }
}

fn check_tail(name: &str, xs: &[f64], tol: f64) -> Result<()> {
    let mut prev = 1.0;
    for (i, &x) in xs.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::InvalidState(format!("{name}[{i}] is not finite")));
        }
        if x < -tol || x > 1.0 + tol {
            return Err(Error::InvalidState(format!(
                "{name}[{i}] = {x} outside [0, 1]"
            )));
        }
        if x > prev + tol {
            return Err(Error::InvalidState(format!(
                "{name} not nonincreasing at index {i}: {x} > {prev}"
            )));
        }
        prev = x;
    }
    Ok(())
}

/// `W_k`: the rate multiplier such that an arrival joins a working (dormant)
/// server holding exactly `k - 1` tasks at rate `lambda (u_{k-1} - u_k) W_k`
/// (`lambda (v_{k-1} - v_k) W_k`).
///
/// With `s_k` the combined tail (`s_0 = u_1 + v_0`, `s_k = u_k + v_k`), all four
/// level cases reduce to `power_sum(s_{k-1}, s_k, d)`:
///
/// | level          | high                    | low           |
/// |----------------|-------------------------|---------------|
/// | `k = 1`        | `u_1 + v_0`             | `u_1 + v_1`   |
/// | `2 <= k < m`   | `u_{k-1} + v_{k-1}`     | `u_k + v_k`   |
/// | `k = m`        | `u_{m-1} + v_{m-1}`     | `u_m`         |
/// | `k > m`        | `u_{k-1}`               | `u_k`         |
pub fn rate_w(k: usize, state: &FractionState, params: &ModelParams) -> Result<f64> {
    if k < 1 {
        return Err(Error::IndexOutOfRange(k));
    }
    Ok(rate_w_unchecked(k, state, params.d))
}

#[inline]
pub(crate) fn rate_w_unchecked(k: usize, state: &FractionState, d: usize) -> f64 {
    let high = state.combined_tail(k - 1);
    let low = state.combined_tail(k);
    power_sum(high, low, d)
}

/// Weighted sup distance between two states.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct OmegaDistance(pub f64);

impl OmegaDistance {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// `max(sup_k |u_k - u'_k| / (k + 1), sup_j |v_j - v'_j| / (j + 1))`, with the
/// shorter state zero-padded.
pub fn omega_distance(a: &FractionState, b: &FractionState) -> OmegaDistance {
    let ku = a.u.len().max(b.u.len());
    let kv = a.v.len().max(b.v.len());
    let du = (1..=ku)
        .map(|k| {
            let x = a.u.get(k - 1).copied().unwrap_or(0.0);
            let y = b.u.get(k - 1).copied().unwrap_or(0.0);
            (x - y).abs() / (k as f64 + 1.0)
        })
        .fold(0.0, f64::max);
    let dv = (0..kv)
        .map(|j| (a.v(j) - b.v(j)).abs() / (j as f64 + 1.0))
        .fold(0.0, f64::max);
    OmegaDistance(du.max(dv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn binom(n: usize, k: usize) -> f64 {
        (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
    }

    /// Binomial-sum form of `W_k`, written case by case.
    fn w_binomial(k: usize, s: &FractionState, p: &ModelParams) -> f64 {
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

    fn arb_state(m: usize, k: usize) -> impl Strategy<Value = FractionState> {
        (
            0.0f64..=1.0,
            prop::collection::vec(0.0f64..=1.0, k),
            prop::collection::vec(0.0f64..=1.0, m),
        )
            .prop_map(move |(u1, mut us, mut vs)| {
                us.sort_by(|a, b| b.partial_cmp(a).unwrap());
                vs.sort_by(|a, b| b.partial_cmp(a).unwrap());
                let mut u: Vec<f64> = us.iter().map(|x| x * u1).collect();
                u[0] = u1;
                let v0 = 1.0 - u1;
                let mut v: Vec<f64> = vs.iter().map(|x| x * v0).collect();
                v[0] = v0;
                vs.clear();
                FractionState::new(u, v).unwrap()
            })
    }

    #[test]
    fn validate_examples() {
        let p = ModelParams::new(0.39, 1.0, 2, 2).unwrap();
        assert!(p.is_stable());
        let q = ModelParams::new(1.0, 1.0, 2, 2).unwrap();
        assert!(!q.is_stable());
        assert!(matches!(q.require_stable(), Err(Error::Unstable { .. })));
        assert!(matches!(
            ModelParams::new(0.5, 1.0, 0, 2),
            Err(Error::InvalidParams(_))
        ));
        assert!(ModelParams::new(0.5, 1.0, 1, 0).is_err());
        assert!(ModelParams::new(-0.5, 1.0, 1, 1).is_err());
        assert!(ModelParams::new(0.5, 0.0, 1, 1).is_err());
    }

    #[test]
    fn power_sum_examples() {
        assert_eq!(power_sum(1.0, 0.0, 2), 1.0);
        assert!((power_sum(0.5, 0.5, 3) - 0.75).abs() < 1e-15);
        assert!((power_sum(0.8, 0.2, 2) - 1.0).abs() < 1e-15);
        assert_eq!(power_sum(0.0, 0.0, 2), 0.0);
        assert_eq!(power_sum(0.3, 0.9, 1), 1.0);
    }

    #[test]
    fn rate_w_examples() {
        let p = ModelParams::new(0.39, 1.0, 2, 2).unwrap();
        let s = FractionState::new(vec![0.39, 0.1, 0.0], vec![0.61, 0.2]).unwrap();
        let w1 = rate_w(1, &s, &p).unwrap();
        assert!((w1 - 1.59).abs() < 1e-14);
        assert!((w1 - w_binomial(1, &s, &p)).abs() < 1e-14);

        // equal-argument limit beyond the threshold
        let s = FractionState::new(vec![0.5, 0.3, 0.3, 0.3], vec![0.5, 0.0]).unwrap();
        assert!((rate_w(4, &s, &p).unwrap() - 0.6).abs() < 1e-15);

        let s = FractionState::empty(2, 4);
        assert_eq!(rate_w(4, &s, &p).unwrap(), 0.0);
        assert_eq!(rate_w(0, &s, &p), Err(Error::IndexOutOfRange(0)));
    }

    #[test]
    fn omega_distance_examples() {
        let a = FractionState::new(vec![0.5, 0.2], vec![0.5, 0.1]).unwrap();
        assert_eq!(omega_distance(&a, &a).value(), 0.0);

        let b = FractionState::from_parts_unchecked(vec![0.3, 0.2], vec![0.5, 0.1]);
        assert!((omega_distance(&a, &b).value() - 0.1).abs() < 1e-15);

        let c = FractionState::from_parts_unchecked(vec![0.5, 0.2], vec![0.8, 0.2]);
        assert!((omega_distance(&a, &c).value() - 0.3).abs() < 1e-15);

        // padding: trailing zeros do not matter
        let d = FractionState::new(vec![0.5, 0.2, 0.0, 0.0], vec![0.5, 0.1]).unwrap();
        assert_eq!(omega_distance(&a, &d).value(), 0.0);
    }

    #[test]
    fn invalid_states_rejected() {
        assert!(FractionState::new(vec![0.5, 0.6], vec![0.5]).is_err());
        assert!(FractionState::new(vec![0.5], vec![0.4]).is_err());
        assert!(FractionState::new(vec![0.5], vec![0.5, 0.6]).is_err());
        assert!(FractionState::new(vec![1.1], vec![-0.1]).is_err());
    }

    #[test]
    fn w_is_one_when_d_is_one() {
        let p = ModelParams::new(0.5, 1.0, 1, 3).unwrap();
        let s = FractionState::new(vec![0.5, 0.2, 0.1, 0.0], vec![0.5, 0.3, 0.1]).unwrap();
        for k in 1..8 {
            assert_eq!(rate_w(k, &s, &p).unwrap(), 1.0);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn rate_w_matches_binomial_form(
            s in (1usize..6).prop_flat_map(|m| arb_state(m, m + 4)),
            d in 1usize..6,
        ) {
            let p = ModelParams::new(0.5, 1.0, d, s.m()).unwrap();
            for k in 1..=s.k() + 1 {
                let w = rate_w(k, &s, &p).unwrap();
                let b = w_binomial(k, &s, &p);
                prop_assert!((w - b).abs() < 1e-12, "k={} w={} b={}", k, w, b);
                prop_assert!(w >= 0.0 && w <= d as f64 + 1e-12);
            }
        }

        #[test]
        fn power_sum_is_divided_difference(a in 0.0f64..=1.0, b in 0.0f64..=1.0, d in 1usize..8) {
            prop_assume!((a - b).abs() > 1e-6);
            let lhs = power_sum(a, b, d) * (a - b);
            let rhs = a.powi(d as i32) - b.powi(d as i32);
            prop_assert!((lhs - rhs).abs() < 1e-14);
        }

        #[test]
        fn omega_triangle_inequality(
            a in arb_state(3, 6), b in arb_state(3, 6), c in arb_state(3, 6)
        ) {
            let ab = omega_distance(&a, &b).value();
            let bc = omega_distance(&b, &c).value();
            let ac = omega_distance(&a, &c).value();
            prop_assert!(ac <= ab + bc + 1e-15);
            prop_assert!(ab <= 1.0);
            prop_assert_eq!(ab, omega_distance(&b, &a).value());
        }
    }
}
