//! Dormand–Prince 5(4) integration of the mean-field system with PI step
//! control, plus steady-state detection with adaptive truncation growth.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::drift_into;
use crate::error::{Error, Result};
use crate::model::{omega_distance, FractionState, ModelParams};

/// Largest excursion outside the state space that projection may absorb.
pub const PROJECTION_TOL: f64 = 1e-10;

// Dormand–Prince tableau (the system is autonomous, so the nodes c_i are unused)
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    /// Absolute and relative local error target per step.
    pub step_tol: f64,
    /// Record a state every `output_interval` time units; `None` records every
    /// accepted step.
    pub output_interval: Option<f64>,
    pub max_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            step_tol: 1e-10,
            output_interval: None,
            max_steps: 10_000_000,
        }
    }
}

/// Time points and the states visited at them.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<FractionState>,
}

impl Trajectory {
    pub fn last(&self) -> &FractionState {
        self.states.last().expect("trajectory is never empty")
    }

    /// CSV with header `t,u1..uK,v0..v{m-1}`, floats in shortest round-trip form.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let first = &self.states[0];
        let mut header = vec!["t".to_string()];
        header.extend((1..=first.k()).map(|k| format!("u{k}")));
        header.extend((0..first.m()).map(|j| format!("v{j}")));
        writeln!(out, "{}", header.join(","))?;
        for (t, s) in self.times.iter().zip(&self.states) {
            let mut row = vec![format!("{t:?}")];
            row.extend(s.u_slice().iter().map(|x| format!("{x:?}")));
            row.extend(s.v_slice().iter().map(|x| format!("{x:?}")));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Explicit adaptive integrator over the flattened state `[u; v]`.
struct Stepper {
    params: ModelParams,
    k: usize,
    y: Vec<f64>,
    t: f64,
    h: f64,
    step_tol: f64,
    err_old: f64,
    steps: usize,
    max_steps: usize,
    // stage buffers
    stages: [Vec<f64>; 7],
    tmp: Vec<f64>,
    y_new: Vec<f64>,
}

impl Stepper {
    fn new(state: &FractionState, params: ModelParams, step_tol: f64, max_steps: usize) -> Self {
        let k = state.k();
        let mut y = state.u_slice().to_vec();
        y.extend_from_slice(state.v_slice());
        let n = y.len();
        Stepper {
            params,
            k,
            y,
            t: 0.0,
            h: 0.0,
            step_tol,
            err_old: 1e-4,
            steps: 0,
            max_steps,
            stages: std::array::from_fn(|_| vec![0.0; n]),
            tmp: vec![0.0; n],
            y_new: vec![0.0; n],
        }
    }

    fn state(&self) -> FractionState {
        FractionState::from_parts_unchecked(self.y[..self.k].to_vec(), self.y[self.k..].to_vec())
    }

    fn eval(&self, y: &[f64], out: &mut [f64]) {
        let (u, v) = y.split_at(self.k);
        let (du, dv) = out.split_at_mut(self.k);
        drift_into(u, v, &self.params, du, dv);
    }

    /// Zero-pads the working tail to `k` levels; keeps time and step size.
    fn grow(&mut self, k: usize) {
        let s = self.state().resized(k);
        let mut fresh = Stepper::new(&s, self.params, self.step_tol, self.max_steps);
        fresh.t = self.t;
        fresh.h = self.h;
        fresh.steps = self.steps;
        *self = fresh;
    }

    fn initial_step(&mut self) {
        let n = self.y.len();
        let mut f0 = vec![0.0; n];
        self.eval(&self.y, &mut f0);
        let fnorm = f0.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        let scale = self.step_tol.max(1e-14);
        self.h = if fnorm > 0.0 {
            (0.01 * (scale / fnorm).powf(0.2)).clamp(1e-6, 1.0)
        } else {
            0.1
        };
    }

    /// Advances exactly to `t_target`.
    fn advance_to(&mut self, t_target: f64, mut on_step: impl FnMut(f64, &[f64])) -> Result<()> {
        if self.h == 0.0 {
            self.initial_step();
        }
        while self.t < t_target {
            let remaining = t_target - self.t;
            let last = self.h >= remaining;
            let h = if last { remaining } else { self.h };
            let (err, h_next) = self.try_step(h)?;
            if err <= 1.0 {
                self.t = if last { t_target } else { self.t + h };
                std::mem::swap(&mut self.y, &mut self.y_new);
                self.project()?;
                if !last || h_next < self.h {
                    self.h = h_next;
                }
                self.err_old = err.max(1e-4);
                on_step(self.t, &self.y);
            } else {
                self.h = h_next;
            }
            self.steps += 1;
            if self.steps > self.max_steps {
                return Err(Error::NoConvergence(format!(
                    "step limit {} reached at t = {}",
                    self.max_steps, self.t
                )));
            }
        }
        Ok(())
    }

    /// Attempts one step of size `h`; returns the scaled error and a proposed
    /// next step size.
    fn try_step(&mut self, h: f64) -> Result<(f64, f64)> {
        let n = self.y.len();
        let [k1, k2, k3, k4, k5, k6, k7] = &mut self.stages;
        let y = &self.y;
        let tmp = &mut self.tmp;
        let eval = |yy: &[f64], out: &mut [f64]| {
            let (u, v) = yy.split_at(self.k);
            let (du, dv) = out.split_at_mut(self.k);
            drift_into(u, v, &self.params, du, dv);
        };
        eval(y, k1);
        for i in 0..n {
            tmp[i] = y[i] + h * A21 * k1[i];
        }
        eval(tmp, k2);
        for i in 0..n {
            tmp[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        eval(tmp, k3);
        for i in 0..n {
            tmp[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        eval(tmp, k4);
        for i in 0..n {
            tmp[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        eval(tmp, k5);
        for i in 0..n {
            tmp[i] =
                y[i] + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        eval(tmp, k6);
        let y_new = &mut self.y_new;
        for i in 0..n {
            y_new[i] =
                y[i] + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        eval(y_new, k7);

        let mut sum = 0.0;
        for i in 0..n {
            let e =
                h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let sc = self.step_tol + self.step_tol * y[i].abs().max(y_new[i].abs());
            sum += (e / sc) * (e / sc);
        }
        let err = (sum / n as f64).sqrt();
        if !err.is_finite() || y_new.iter().any(|x| !x.is_finite()) {
            // shrink hard; a persistent failure surfaces through the step limit
            if h < 1e-12 {
                return Err(Error::NonFinite { t: self.t });
            }
            return Ok((f64::INFINITY, h * 0.1));
        }
        // PI controller (beta = 0.04)
        const BETA: f64 = 0.04;
        const EXPO1: f64 = 0.2 - BETA * 0.75;
        let fac = if err == 0.0 {
            10.0
        } else {
            (0.9 * err.powf(-EXPO1) * self.err_old.powf(BETA)).clamp(0.2, 10.0)
        };
        let fac = if err > 1.0 { fac.min(1.0) } else { fac };
        Ok((err, h * fac))
    }

    /// Restores `u_1 + v_0 = 1`, clips tiny range excursions and monotonicity
    /// defects; anything larger than [`PROJECTION_TOL`] is an error.
    fn project(&mut self) -> Result<()> {
        let t = self.t;
        let k = self.k;
        let violation = |detail: String| Error::InvariantViolation { t, detail };
        if self.y.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { t });
        }
        let total = self.y[0] + self.y[k];
        if (total - 1.0).abs() > PROJECTION_TOL {
            return Err(violation(format!("u_1 + v_0 = {total}")));
        }
        for part in [0..k, k..self.y.len()] {
            let mut prev = 1.0f64;
            for i in part {
                let x = self.y[i];
                if x < -PROJECTION_TOL || x > prev + PROJECTION_TOL {
                    return Err(violation(format!("component {i} = {x}, previous {prev}")));
                }
                let x = x.clamp(0.0, prev);
                self.y[i] = x;
                prev = x;
            }
        }
        self.y[k] = 1.0 - self.y[0];
        Ok(())
    }
}

/// Integrates from `initial` over `[0, t_end]`.
pub fn integrate(
    initial: &FractionState,
    params: &ModelParams,
    t_end: f64,
    config: &IntegratorConfig,
) -> Result<Trajectory> {
    let params = params.validate()?;
    initial.check()?;
    if initial.m() != params.m {
        return Err(Error::InvalidState(format!(
            "state has {} dormant levels, params expect m = {}",
            initial.m(),
            params.m
        )));
    }
    if initial.k() < params.m + 1 {
        return Err(Error::TruncationTooShort {
            k: initial.k(),
            m: params.m,
        });
    }
    let mut stepper = Stepper::new(initial, params, config.step_tol, config.max_steps);
    let mut traj = Trajectory {
        times: vec![0.0],
        states: vec![initial.clone()],
    };
    let k = initial.k();
    let mut record = |t: f64, y: &[f64]| {
        traj.times.push(t);
        traj.states.push(FractionState::from_parts_unchecked(
            y[..k].to_vec(),
            y[k..].to_vec(),
        ));
    };
    match config.output_interval {
        None => stepper.advance_to(t_end, &mut record)?,
        Some(dt) => {
            if !(dt > 0.0) {
                return Err(Error::InvalidParams(format!(
                    "output interval must be positive, got {dt}"
                )));
            }
            let mut i = 1u64;
            loop {
                let target = (i as f64 * dt).min(t_end);
                stepper.advance_to(target, |_, _| {})?;
                record(stepper.t, &stepper.y);
                if target >= t_end {
                    break;
                }
                i += 1;
            }
        }
    }
    Ok(traj)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteadyStateConfig {
    /// Bound on both the drift max-norm and the distance between states one
    /// time unit apart.
    pub tol: f64,
    pub step_tol: f64,
    /// Initial truncation length (raised to at least `m + 2`).
    pub k_initial: usize,
    /// Grow the truncation while `u_K` exceeds this.
    pub tail_eps: f64,
    pub k_cap: usize,
    pub t_cap: f64,
}

impl Default for SteadyStateConfig {
    fn default() -> Self {
        SteadyStateConfig {
            tol: 1e-10,
            step_tol: 1e-12,
            k_initial: 16,
            tail_eps: 1e-14,
            k_cap: 8192,
            t_cap: 1e6,
        }
    }
}

/// Integrates from the empty system until the drift and one-unit displacement
/// both fall below `config.tol`, growing the truncation while `u_K > tail_eps`.
pub fn steady_state(params: &ModelParams, config: &SteadyStateConfig) -> Result<FractionState> {
    steady_state_from(&FractionState::empty(params.m, 1), params, config)
}

/// As [`steady_state`] but from an arbitrary initial state.
pub fn steady_state_from(
    initial: &FractionState,
    params: &ModelParams,
    config: &SteadyStateConfig,
) -> Result<FractionState> {
    let params = params.require_stable()?;
    initial.check()?;
    let k0 = config.k_initial.max(params.m + 2).max(initial.k());
    let mut stepper = Stepper::new(&initial.resized(k0), params, config.step_tol, usize::MAX);
    let mut prev = stepper.state();
    loop {
        let target = stepper.t + 1.0;
        stepper.advance_to(target, |_, _| {})?;
        let tail = stepper.y[stepper.k - 1];
        if tail > config.tail_eps {
            if stepper.k >= config.k_cap {
                return Err(Error::NoConvergence(format!(
                    "truncation cap {} reached with u_K = {tail:e}",
                    config.k_cap
                )));
            }
            let k = (stepper.k * 2).min(config.k_cap);
            stepper.grow(k);
            prev = prev.resized(k);
            continue;
        }
        let cur = stepper.state();
        let displacement = omega_distance(&cur, &prev).value();
        let norm = super::drift_norm(&cur, &params)?;
        if norm < config.tol && displacement < config.tol {
            return Ok(cur);
        }
        if stepper.t > config.t_cap {
            return Err(Error::NoConvergence(format!(
                "time cap {} reached (drift {norm:e}, displacement {displacement:e})",
                config.t_cap
            )));
        }
        prev = cur;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lambda_limit_keeps_empty_state() {
        // lambda must be positive; a vanishing rate leaves the empty state put
        let p = ModelParams::new(1e-300, 1.0, 2, 2).unwrap();
        let s = FractionState::empty(2, 4);
        let traj = integrate(&s, &p, 50.0, &IntegratorConfig::default()).unwrap();
        assert!(omega_distance(traj.last(), &s).value() < 1e-250);
    }

    #[test]
    fn supermarket_steady_state() {
        let p = ModelParams::new(0.5, 1.0, 2, 1).unwrap();
        let s = steady_state(&p, &SteadyStateConfig::default()).unwrap();
        assert!((s.u(1) - 0.5).abs() < 1e-9);
        assert!((s.u(2) - 0.125).abs() < 1e-9);
        assert!((s.u(3) - 0.5f64.powi(7)).abs() < 1e-9);
    }

    #[test]
    fn steady_state_rejects_unstable() {
        let p = ModelParams::new(1.0, 1.0, 2, 2).unwrap();
        assert!(matches!(
            steady_state(&p, &SteadyStateConfig::default()),
            Err(Error::Unstable { .. })
        ));
    }

    #[test]
    fn head_of_steady_state_is_normalized() {
        for lambda in [0.39, 0.9] {
            let p = ModelParams::new(lambda, 1.0, 2, 2).unwrap();
            let s = steady_state(&p, &SteadyStateConfig::default()).unwrap();
            assert!((s.u(1) - lambda).abs() < 1e-8, "u1 = {}", s.u(1));
            assert!((s.v(0) - (1.0 - lambda)).abs() < 1e-8);
        }
    }

    #[test]
    fn csv_header() {
        let p = ModelParams::new(0.39, 1.0, 2, 2).unwrap();
        let s = FractionState::empty(2, 3);
        let cfg = IntegratorConfig {
            output_interval: Some(0.5),
            ..Default::default()
        };
        let traj = integrate(&s, &p, 1.0, &cfg).unwrap();
        assert_eq!(traj.times, vec![0.0, 0.5, 1.0]);
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "t,u1,u2,u3,v0,v1");
        assert_eq!(text.lines().count(), 4);
    }
}
