//! Mean-field limit of the scaled occupancy process.
//!
//! The state vector is laid out as `[u_1, .., u_K, v_0, .., v_{m-1}]`; the
//! working tail is closed with `u_{K+1} = 0`.

mod integrate;

pub use integrate::{
    integrate, steady_state, steady_state_from, IntegratorConfig, SteadyStateConfig, Trajectory,
};

use crate::error::{Error, Result};
use crate::model::{power_sum, FractionState, ModelParams};

/// Time derivative of `(u, v)` under the mean-field dynamics.
pub fn drift(state: &FractionState, params: &ModelParams) -> Result<FractionState> {
    let k = state.k();
    let m = params.m;
    if k < m + 1 {
        return Err(Error::TruncationTooShort { k, m });
    }
    if state.m() != m {
        return Err(Error::InvalidState(format!(
            "state has {} dormant levels, params expect m = {m}",
            state.m()
        )));
    }
    let mut du = vec![0.0; k];
    let mut dv = vec![0.0; m];
    drift_into(state.u_slice(), state.v_slice(), params, &mut du, &mut dv);
    Ok(FractionState::from_parts_unchecked(du, dv))
}

/// Slice form of [`drift`]; `u.len() >= m + 1` and `v.len() == m` are assumed.
pub(crate) fn drift_into(
    u: &[f64],
    v: &[f64],
    params: &ModelParams,
    du: &mut [f64],
    dv: &mut [f64],
) {
    let ModelParams { lambda, mu, d, m } = *params;
    let k_max = u.len();
    let uk = |k: usize| -> f64 {
        if k == 0 {
            u[0]
        } else {
            u.get(k - 1).copied().unwrap_or(0.0)
        }
    };
    let vj = |j: usize| -> f64 { v.get(j).copied().unwrap_or(0.0) };
    // combined tail s_k = u_k + v_k with s_0 = u_1 + v_0
    let s = |k: usize| -> f64 {
        if k == 0 {
            u[0] + v[0]
        } else {
            uk(k) + vj(k)
        }
    };
    let w = |k: usize| power_sum(s(k - 1), s(k), d);

    let wake = lambda * vj(m - 1) * w(m);

    du[0] = mu * (uk(2) - uk(1)) + wake;
    for k in 2..=k_max {
        let mut y = lambda * (uk(k - 1) - uk(k)) * w(k) + mu * (uk(k + 1) - uk(k));
        if k <= m {
            y += wake;
        }
        du[k - 1] = y;
    }
    dv[0] = mu * (uk(1) - uk(2)) - wake;
    for (j, y) in dv.iter_mut().enumerate().take(m).skip(1) {
        *y = lambda * (vj(j - 1) - vj(j)) * w(j) - wake;
    }
}

/// Max-norm of the drift.
pub fn drift_norm(state: &FractionState, params: &ModelParams) -> Result<f64> {
    let y = drift(state, params)?;
    Ok(y.u_slice()
        .iter()
        .chain(y.v_slice())
        .fold(0.0f64, |a, x| a.max(x.abs())))
}
