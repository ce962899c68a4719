//! Unicycle vehicle model.
//!
//! The transition is semi-implicit Euler: speed and yaw are advanced first and
//! the position is then integrated with the *updated* speed and yaw:
//!
//! ```text
//! v'     = v + accel * dt
//! theta' = theta + yaw_rate * dt
//! x'     = x + v' * cos(theta') * dt
//! y'     = y + v' * sin(theta') * dt
//! ```
//!
//! [`rollout_vjp`] is the exact reverse-mode derivative of [`rollout`], so any
//! objective defined on states can be pulled back onto the action sequence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default integration step (s).
pub const DEFAULT_DT: f64 = 0.1;
/// Default planning horizon in steps (4 s at the default `dt`).
pub const DEFAULT_HORIZON: usize = 40;

/// Planar vehicle state. `theta` is kept unwrapped.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub theta: f64,
}

impl VehicleState {
    pub fn new(x: f64, y: f64, v: f64, theta: f64) -> Self {
        Self { x, y, v, theta }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.v.is_finite() && self.theta.is_finite()
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.v, self.theta]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

/// Control input: longitudinal acceleration and yaw rate.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleAction {
    pub accel: f64,
    pub yaw_rate: f64,
}

impl VehicleAction {
    pub fn new(accel: f64, yaw_rate: f64) -> Self {
        Self { accel, yaw_rate }
    }

    pub fn is_finite(&self) -> bool {
        self.accel.is_finite() && self.yaw_rate.is_finite()
    }
}

/// Physical actuation limits, applied when an action is executed in closed loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActionLimits {
    pub max_accel: f64,
    pub max_yaw_rate: f64,
}

impl Default for ActionLimits {
    fn default() -> Self {
        Self {
            max_accel: 6.0,
            max_yaw_rate: 1.5,
        }
    }
}

impl ActionLimits {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_accel > 0.0 && self.max_yaw_rate > 0.0) {
            return Err(Error::validation("action limits must be positive"));
        }
        Ok(())
    }

    pub fn clamp(&self, a: VehicleAction) -> VehicleAction {
        VehicleAction {
            accel: a.accel.clamp(-self.max_accel, self.max_accel),
            yaw_rate: a.yaw_rate.clamp(-self.max_yaw_rate, self.max_yaw_rate),
        }
    }

    /// Clamp to the limits and additionally forbid the speed from going negative.
    ///
    /// The returned action is the one actually applied, so logging it keeps the
    /// recorded (state, action) pairs consistent with [`step`].
    pub fn clamp_for_execution(&self, s: &VehicleState, a: VehicleAction, dt: f64) -> VehicleAction {
        let mut out = self.clamp(a);
        if s.v + out.accel * dt < 0.0 {
            out.accel = -s.v / dt;
        }
        out
    }
}

/// Action sequence of length `T` applied at a fixed step `dt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionTrajectory {
    pub actions: Vec<VehicleAction>,
    pub dt: f64,
}

impl ActionTrajectory {
    pub fn new(actions: Vec<VehicleAction>, dt: f64) -> Result<Self> {
        let tau = Self { actions, dt };
        tau.validate()?;
        Ok(tau)
    }

    pub fn zeros(len: usize, dt: f64) -> Self {
        Self {
            actions: vec![VehicleAction::default(); len],
            dt,
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.actions.is_empty() {
            return Err(Error::validation("action trajectory must be non-empty"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::validation(format!("dt must be positive, got {}", self.dt)));
        }
        Ok(())
    }

    /// Interleaved `[accel_0, yaw_0, accel_1, yaw_1, ...]` layout.
    pub fn to_flat(&self) -> Vec<f64> {
        self.actions.iter().flat_map(|a| [a.accel, a.yaw_rate]).collect()
    }

    pub fn from_flat(flat: &[f64], dt: f64) -> Result<Self> {
        if flat.len() % 2 != 0 {
            return Err(Error::validation("flat action vector must have even length"));
        }
        let actions = flat
            .chunks_exact(2)
            .map(|c| VehicleAction::new(c[0], c[1]))
            .collect();
        Self::new(actions, dt)
    }
}

/// States `s_0 ..= s_T` produced by a rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateTrajectory {
    pub states: Vec<VehicleState>,
}

impl StateTrajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn speeds(&self) -> impl Iterator<Item = f64> + '_ {
        self.states.iter().map(|s| s.v)
    }

    pub fn positions(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        self.states.iter().map(|s| s.position())
    }
}

#[inline]
fn step_unchecked(s: &VehicleState, a: &VehicleAction, dt: f64) -> VehicleState {
    let v = s.v + a.accel * dt;
    let theta = s.theta + a.yaw_rate * dt;
    let (sin, cos) = theta.sin_cos();
    VehicleState {
        x: s.x + v * cos * dt,
        y: s.y + v * sin * dt,
        v,
        theta,
    }
}

/// One transition of the unicycle model.
pub fn step(s: &VehicleState, a: &VehicleAction, dt: f64) -> Result<VehicleState> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::validation(format!("dt must be positive, got {dt}")));
    }
    if !s.is_finite() || !a.is_finite() {
        return Err(Error::validation(format!("non-finite step input: {s:?}, {a:?}")));
    }
    let next = step_unchecked(s, a, dt);
    if !next.is_finite() {
        return Err(Error::validation(format!("step produced a non-finite state from {s:?}")));
    }
    Ok(next)
}

/// Integrate `tau_a` from `s0`; the result has `T + 1` states.
pub fn rollout(s0: &VehicleState, tau_a: &ActionTrajectory) -> Result<StateTrajectory> {
    tau_a.validate()?;
    let mut states = Vec::with_capacity(tau_a.len() + 1);
    states.push(*s0);
    let mut s = *s0;
    for a in &tau_a.actions {
        s = step(&s, a, tau_a.dt)?;
        states.push(s);
    }
    Ok(StateTrajectory { states })
}

/// Vector-Jacobian product of [`rollout`].
///
/// `grad_states[t]` is the cotangent of state `t` (same field layout as a
/// state). Returns the gradient of `sum_t <grad_states[t], states[t]>` with
/// respect to every action. The cotangent on `s0` is accepted but has no
/// action dependence.
pub fn rollout_vjp(
    s0: &VehicleState,
    tau_a: &ActionTrajectory,
    grad_states: &[VehicleState],
) -> Result<Vec<VehicleAction>> {
    let traj = rollout(s0, tau_a)?;
    rollout_vjp_with_states(&traj, tau_a, grad_states)
}

/// Same as [`rollout_vjp`] but reuses an already computed forward pass.
pub fn rollout_vjp_with_states(
    traj: &StateTrajectory,
    tau_a: &ActionTrajectory,
    grad_states: &[VehicleState],
) -> Result<Vec<VehicleAction>> {
    let n = tau_a.len();
    if traj.len() != n + 1 || grad_states.len() != n + 1 {
        return Err(Error::validation(format!(
            "cotangent length {} does not match {} states",
            grad_states.len(),
            n + 1
        )));
    }
    let dt = tau_a.dt;
    let mut out = vec![VehicleAction::default(); n];
    // Running cotangent of s_{t+1}, seeded with the terminal state.
    let mut g = grad_states[n];
    for t in (0..n).rev() {
        let next = &traj.states[t + 1];
        let (sin, cos) = next.theta.sin_cos();
        let gv = g.v + (g.x * cos + g.y * sin) * dt;
        let gtheta = g.theta + next.v * (g.y * cos - g.x * sin) * dt;
        out[t] = VehicleAction {
            accel: gv * dt,
            yaw_rate: gtheta * dt,
        };
        let own = &grad_states[t];
        g = VehicleState {
            x: g.x + own.x,
            y: g.y + own.y,
            v: gv + own.v,
            theta: gtheta + own.theta,
        };
    }
    Ok(out)
}
