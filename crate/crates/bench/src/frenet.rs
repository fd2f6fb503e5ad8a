//! Frenet-frame state, Cartesian conversions, and the input-affine
//! discrete-time kinematics of a unicycle tracking a reference path.
//!
//! State `(s, d, theta)`: normalized arc position, lateral offset (left of
//! the tangent positive), heading error to the local tangent. Forward-Euler
//! discretization of
//!
//! ```text
//! s'     = v cos(theta) / (L (1 - d kappa))
//! d'     = v sin(theta)
//! theta' = omega - kappa L s'
//! ```
//!
//! keeps the step exactly affine in the input `u = (v, omega)`:
//! `x_next = A(x) + B(x) u` with `A(x) = x`.

use crate::path::Path;
use minsurro_core::{CoreError, CoreResult};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrenetState {
    /// Normalized arc position in `[0, 1)`; wraps on lap completion.
    pub s: f64,
    /// Lateral offset in meters.
    pub d: f64,
    /// Heading error in radians, `(-pi, pi]`.
    pub theta: f64,
}

impl FrenetState {
    pub fn new(s: f64, d: f64, theta: f64) -> Self {
        FrenetState {
            s: wrap_unit(s),
            d,
            theta: wrap_angle(theta),
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.s, self.d, self.theta]
    }
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut x = a.rem_euclid(two_pi);
    if x > std::f64::consts::PI {
        x -= two_pi;
    }
    x
}

/// Wraps to `[0, 1)`.
pub fn wrap_unit(s: f64) -> f64 {
    s.rem_euclid(1.0)
}

/// Wraps a normalized arc difference to `(-0.5, 0.5]`.
pub fn wrap_centered(x: f64) -> f64 {
    let mut v = x.rem_euclid(1.0);
    if v > 0.5 {
        v -= 1.0;
    }
    v
}

const SINGULARITY_TOL: f64 = 1e-6;

/// Converts a Cartesian pose to Frenet coordinates. The projection must be
/// well defined (pose near the path); ambiguous projections resolve to the
/// lowest arc position by the table scan order.
pub fn frenet_from_cartesian(pose: [f64; 3], path: &Path) -> CoreResult<FrenetState> {
    let (t, s, _) = path.project([pose[0], pose[1]]);
    let pt = path.sample_at(t)?;
    let normal = [-pt.heading.sin(), pt.heading.cos()];
    let dx = pose[0] - pt.position[0];
    let dy = pose[1] - pt.position[1];
    let d = dx * normal[0] + dy * normal[1];
    let theta = wrap_angle(pose[2] - pt.heading);
    Ok(FrenetState { s, d, theta })
}

/// Inverse map: centerline point at `s` displaced `d` along the left normal,
/// heading offset by `theta`.
pub fn cartesian_from_frenet(state: &FrenetState, path: &Path) -> CoreResult<[f64; 3]> {
    let r = path.point_at_s(state.s)?;
    let heading = r.point.heading;
    let normal = [-heading.sin(), heading.cos()];
    Ok([
        r.point.position[0] + state.d * normal[0],
        r.point.position[1] + state.d * normal[1],
        wrap_angle(heading + state.theta),
    ])
}

/// The state-dependent control matrix `B(x)` (times `dt`); the drift of the
/// Euler-discretized driftless unicycle is the state itself.
pub fn control_matrix(state: &FrenetState, path: &Path, dt: f64) -> CoreResult<[[f64; 2]; 3]> {
    let r = path.point_at_s(state.s)?;
    let kappa = r.point.curvature;
    let denom = 1.0 - state.d * kappa;
    if denom.abs() <= SINGULARITY_TOL {
        return Err(CoreError::ContractViolation(format!(
            "frenet singularity: 1 - d*kappa = {denom}"
        )));
    }
    let l = path.total_len();
    let (sin_t, cos_t) = state.theta.sin_cos();
    Ok([
        [dt * cos_t / (l * denom), 0.0],
        [dt * sin_t, 0.0],
        [-dt * kappa * cos_t / denom, dt],
    ])
}

/// One Euler step `x + B(x) u`, with `s` wrapped modulo one.
pub fn dynamics_step(
    state: &FrenetState,
    u: [f64; 2],
    path: &Path,
    dt: f64,
) -> CoreResult<FrenetState> {
    let b = control_matrix(state, path, dt)?;
    Ok(FrenetState {
        s: wrap_unit(state.s + b[0][0] * u[0] + b[0][1] * u[1]),
        d: state.d + b[1][0] * u[0] + b[1][1] * u[1],
        theta: wrap_angle(state.theta + b[2][0] * u[0] + b[2][1] * u[1]),
    })
}

/// Step plus exact Jacobians `A = dx_next/dx` (3x3) and `B = dx_next/du`
/// (3x2).
pub fn dynamics_jacobians(
    state: &FrenetState,
    u: [f64; 2],
    path: &Path,
    dt: f64,
) -> CoreResult<(FrenetState, [[f64; 3]; 3], [[f64; 2]; 3])> {
    let r = path.point_at_s(state.s)?;
    let kappa = r.point.curvature;
    let kappa_ds = r.dkappa_ds;
    let denom = 1.0 - state.d * kappa;
    if denom.abs() <= SINGULARITY_TOL {
        return Err(CoreError::ContractViolation(format!(
            "frenet singularity: 1 - d*kappa = {denom}"
        )));
    }
    let l = path.total_len();
    let (sin_t, cos_t) = state.theta.sin_cos();
    let v = u[0];
    let omega = u[1];

    let s_dot = v * cos_t / (l * denom);
    let d_dot = v * sin_t;
    let theta_dot = omega - kappa * v * cos_t / denom;

    // Partials of the continuous rates.
    let ds_ds = v * cos_t / l * state.d * kappa_ds / (denom * denom);
    let ds_dd = v * cos_t / l * kappa / (denom * denom);
    let ds_dth = -v * sin_t / (l * denom);
    let dth_ds = -v * cos_t * kappa_ds / (denom * denom);
    let dth_dd = -v * cos_t * kappa * kappa / (denom * denom);
    let dth_dth = kappa * v * sin_t / denom;

    let a = [
        [1.0 + dt * ds_ds, dt * ds_dd, dt * ds_dth],
        [0.0, 1.0, dt * v * cos_t],
        [dt * dth_ds, dt * dth_dd, 1.0 + dt * dth_dth],
    ];
    let b = [
        [dt * cos_t / (l * denom), 0.0],
        [dt * sin_t, 0.0],
        [-dt * kappa * cos_t / denom, dt],
    ];
    let next = FrenetState {
        s: wrap_unit(state.s + dt * s_dot),
        d: state.d + dt * d_dot,
        theta: wrap_angle(state.theta + dt * theta_dot),
    };
    Ok((next, a, b))
}
