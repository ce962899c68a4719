//! Adversarial guidance objectives and the guided reverse process.
//!
//! The combined objective `J = w_b J_BC + w_d J_DV + w_a J_AS + w_o J_OR` is
//! evaluated on rolled-out states; its state gradient is pulled back to actions
//! through the exact rollout VJP. During sampling the reverse-transition mean is
//! shifted by `guidance_scale * Sigma_k * g`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::diffusion::{DiffusionModel, MeanShift};
use crate::dynamics::{self, ActionTrajectory, StateTrajectory, VehicleAction, VehicleState};
use crate::error::{Error, Result};
use crate::world::{self, ContextFeatures, Point2, RoadMap};

/// Where the objective gradient is evaluated during sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalPoint {
    /// The denoiser's clean estimate of the current step.
    #[default]
    CleanEstimate,
    /// The noisy intermediate trajectory itself.
    Noisy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub omega_b: f64,
    pub omega_d: f64,
    pub omega_a: f64,
    pub omega_o: f64,
    pub w_acc: f64,
    pub w_theta: f64,
    /// Target density in vehicles per m^2.
    pub rho_d: f64,
    pub roi_radius: f64,
    pub roi_sharpness: f64,
    /// Desired average SV speed (m/s).
    pub v_d: f64,
    pub guidance_scale: f64,
    /// Per-trajectory gradient norm limit; `0` disables clipping.
    pub grad_clip: f64,
    pub eval_point: EvalPoint,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            omega_b: 0.03,
            omega_d: 200.0,
            omega_a: 1.0,
            omega_o: 0.02,
            w_acc: 1.0,
            w_theta: 2.0,
            rho_d: 5.0 / (std::f64::consts::PI * 100.0),
            roi_radius: 10.0,
            roi_sharpness: 0.5,
            v_d: 8.0,
            guidance_scale: 1.0,
            grad_clip: 50.0,
            eval_point: EvalPoint::CleanEstimate,
        }
    }
}

impl GuidanceConfig {
    /// All objective weights zero: no guidance at all.
    pub fn unguided() -> Self {
        Self {
            omega_b: 0.0,
            omega_d: 0.0,
            omega_a: 0.0,
            omega_o: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("omega_b", self.omega_b),
            ("omega_d", self.omega_d),
            ("omega_a", self.omega_a),
            ("omega_o", self.omega_o),
            ("w_acc", self.w_acc),
            ("w_theta", self.w_theta),
            ("guidance_scale", self.guidance_scale),
            ("grad_clip", self.grad_clip),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::validation(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        let pos = [
            ("rho_d", self.rho_d),
            ("v_d", self.v_d),
            ("roi_radius", self.roi_radius),
            ("roi_sharpness", self.roi_sharpness),
        ];
        for (name, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::validation(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Whether sampling with this configuration differs from unguided sampling.
    pub fn is_active(&self) -> bool {
        self.guidance_scale > 0.0
            && (self.omega_b > 0.0 || self.omega_d > 0.0 || self.omega_a > 0.0 || self.omega_o > 0.0)
    }
}

/// What the objective needs besides the SV's own trajectory.
#[derive(Debug, Clone, Copy)]
pub struct SceneContext<'a> {
    /// Predicted ego states aligned with the SV plan timeline.
    pub ego_plan: &'a StateTrajectory,
    /// Plans of the other SVs, held fixed.
    pub other_sv_plans: &'a [StateTrajectory],
    pub map: &'a RoadMap,
}

impl SceneContext<'_> {
    fn check(&self, len: usize) -> Result<()> {
        if self.ego_plan.len() != len || self.other_sv_plans.iter().any(|p| p.len() != len) {
            return Err(Error::validation("scene plans and SV trajectory lengths differ"));
        }
        Ok(())
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Behavior complexity: weighted absolute speed and heading changes.
pub fn j_bc(tau_s: &StateTrajectory, cfg: &GuidanceConfig) -> f64 {
    tau_s
        .states
        .windows(2)
        .map(|w| cfg.w_acc * (w[1].v - w[0].v).abs() + cfg.w_theta * (w[1].theta - w[0].theta).abs())
        .sum()
}

fn j_bc_grad(tau_s: &StateTrajectory, cfg: &GuidanceConfig, scale: f64, out: &mut [VehicleState]) {
    for (t, w) in tau_s.states.windows(2).enumerate() {
        let dv = scale * cfg.w_acc * sign(w[1].v - w[0].v);
        let dth = scale * cfg.w_theta * sign(w[1].theta - w[0].theta);
        out[t + 1].v += dv;
        out[t].v -= dv;
        out[t + 1].theta += dth;
        out[t].theta -= dth;
    }
}

/// Density objective over a set of SV trajectories around the ego plan.
pub fn j_dv_joint(sv_plans: &[&StateTrajectory], ego_plan: &StateTrajectory, cfg: &GuidanceConfig) -> Result<f64> {
    let mut total = 0.0;
    for (t, ego) in ego_plan.states.iter().enumerate() {
        let pts: Vec<Point2> = sv_plans.iter().map(|p| p.states[t].position()).collect();
        let rho = world::roi_density(ego.position(), &pts, cfg.roi_radius, cfg.roi_sharpness)?;
        total -= (rho - cfg.rho_d).abs();
    }
    Ok(total)
}

fn j_dv_joint_grad(
    sv_plans: &[&StateTrajectory],
    ego_plan: &StateTrajectory,
    cfg: &GuidanceConfig,
    scale: f64,
    out: &mut [Vec<VehicleState>],
) -> Result<()> {
    for (t, ego) in ego_plan.states.iter().enumerate() {
        let pts: Vec<Point2> = sv_plans.iter().map(|p| p.states[t].position()).collect();
        let (rho, grads) = world::roi_density_and_gradient(ego.position(), &pts, cfg.roi_radius, cfg.roi_sharpness)?;
        let outer = -scale * sign(rho - cfg.rho_d);
        for (i, g) in grads.iter().enumerate().take(out.len()) {
            out[i][t].x += outer * g[0];
            out[i][t].y += outer * g[1];
        }
    }
    Ok(())
}

/// Density objective of one SV given the fixed plans of the others.
pub fn j_dv(tau_s: &StateTrajectory, scene: &SceneContext, cfg: &GuidanceConfig) -> Result<f64> {
    scene.check(tau_s.len())?;
    let plans: Vec<&StateTrajectory> = std::iter::once(tau_s).chain(scene.other_sv_plans).collect();
    j_dv_joint(&plans, scene.ego_plan, cfg)
}

/// Average-speed objective: negative distance of the mean speed from `v_d`.
pub fn j_as(tau_s: &StateTrajectory, cfg: &GuidanceConfig) -> f64 {
    let n = tau_s.len().max(1) as f64;
    let mean = tau_s.speeds().sum::<f64>() / n;
    -(mean - cfg.v_d).abs()
}

fn j_as_grad(tau_s: &StateTrajectory, cfg: &GuidanceConfig, scale: f64, out: &mut [VehicleState]) {
    let n = tau_s.len().max(1) as f64;
    let mean = tau_s.speeds().sum::<f64>() / n;
    let g = -scale * sign(mean - cfg.v_d) / n;
    for s in out.iter_mut() {
        s.v += g;
    }
}

/// Off-road objective: summed signed boundary distance (positive inside).
pub fn j_or(tau_s: &StateTrajectory, map: &RoadMap) -> f64 {
    tau_s
        .positions()
        .map(|p| map.signed_boundary_distance(p))
        .sum()
}

fn j_or_grad(tau_s: &StateTrajectory, map: &RoadMap, scale: f64, out: &mut [VehicleState]) {
    for (s, o) in tau_s.states.iter().zip(out.iter_mut()) {
        let (_, g) = map.signed_boundary_distance_and_gradient(s.position());
        o.x += scale * g[0];
        o.y += scale * g[1];
    }
}

/// Value of the combined objective summed over jointly planned SVs.
fn joint_value(
    plans: &[StateTrajectory],
    fixed: &[StateTrajectory],
    ego_plan: &StateTrajectory,
    map: &RoadMap,
    cfg: &GuidanceConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for p in plans {
        if cfg.omega_b > 0.0 {
            total += cfg.omega_b * j_bc(p, cfg);
        }
        if cfg.omega_a > 0.0 {
            total += cfg.omega_a * j_as(p, cfg);
        }
        if cfg.omega_o > 0.0 {
            total += cfg.omega_o * j_or(p, map);
        }
    }
    if cfg.omega_d > 0.0 {
        let all: Vec<&StateTrajectory> = plans.iter().chain(fixed).collect();
        total += cfg.omega_d * j_dv_joint(&all, ego_plan, cfg)?;
    }
    Ok(total)
}

/// State-space gradient of [`joint_value`] for each planned SV.
fn joint_state_grads(
    plans: &[StateTrajectory],
    fixed: &[StateTrajectory],
    ego_plan: &StateTrajectory,
    map: &RoadMap,
    cfg: &GuidanceConfig,
) -> Result<Vec<Vec<VehicleState>>> {
    let mut out: Vec<Vec<VehicleState>> = plans.iter().map(|p| vec![VehicleState::default(); p.len()]).collect();
    for (p, o) in plans.iter().zip(out.iter_mut()) {
        if cfg.omega_b > 0.0 {
            j_bc_grad(p, cfg, cfg.omega_b, o);
        }
        if cfg.omega_a > 0.0 {
            j_as_grad(p, cfg, cfg.omega_a, o);
        }
        if cfg.omega_o > 0.0 {
            j_or_grad(p, map, cfg.omega_o, o);
        }
    }
    if cfg.omega_d > 0.0 {
        let all: Vec<&StateTrajectory> = plans.iter().chain(fixed).collect();
        j_dv_joint_grad(&all, ego_plan, cfg, cfg.omega_d, &mut out)?;
    }
    Ok(out)
}

fn action_norm(g: &[VehicleAction]) -> f64 {
    g.iter()
        .map(|a| a.accel * a.accel + a.yaw_rate * a.yaw_rate)
        .sum::<f64>()
        .sqrt()
}

fn clip(g: &mut [VehicleAction], limit: f64) {
    if limit <= 0.0 {
        return;
    }
    let n = action_norm(g);
    if n > limit {
        let f = limit / n;
        for a in g.iter_mut() {
            a.accel *= f;
            a.yaw_rate *= f;
        }
    }
}

/// Objective value and clipped action gradients of several SVs planned jointly.
pub fn joint_objective_and_grad(
    tau_a: &[ActionTrajectory],
    s0: &[VehicleState],
    fixed: &[StateTrajectory],
    ego_plan: &StateTrajectory,
    map: &RoadMap,
    cfg: &GuidanceConfig,
) -> Result<(f64, Vec<Vec<VehicleAction>>)> {
    if tau_a.len() != s0.len() {
        return Err(Error::validation("one initial state per SV trajectory required"));
    }
    let plans: Vec<StateTrajectory> = tau_a
        .iter()
        .zip(s0)
        .map(|(t, s)| dynamics::rollout(s, t))
        .collect::<Result<_>>()?;
    for p in plans.iter().chain(fixed) {
        if p.len() != ego_plan.len() {
            return Err(Error::validation("scene plans and SV trajectory lengths differ"));
        }
    }
    let value = joint_value(&plans, fixed, ego_plan, map, cfg)?;
    let state_grads = joint_state_grads(&plans, fixed, ego_plan, map, cfg)?;
    let mut grads = Vec::with_capacity(plans.len());
    for ((p, t), g) in plans.iter().zip(tau_a).zip(&state_grads) {
        let mut ga = dynamics::rollout_vjp_with_states(p, t, g)?;
        clip(&mut ga, cfg.grad_clip);
        grads.push(ga);
    }
    Ok((value, grads))
}

/// Combined objective of one SV as a function of its actions.
pub fn j_total(tau_a: &ActionTrajectory, s0: &VehicleState, scene: &SceneContext, cfg: &GuidanceConfig) -> Result<f64> {
    let plan = dynamics::rollout(s0, tau_a)?;
    scene.check(plan.len())?;
    joint_value(
        std::slice::from_ref(&plan),
        scene.other_sv_plans,
        scene.ego_plan,
        scene.map,
        cfg,
    )
}

/// Exact action gradient of [`j_total`], clipped to `cfg.grad_clip`.
pub fn grad_j_total(
    tau_a: &ActionTrajectory,
    s0: &VehicleState,
    scene: &SceneContext,
    cfg: &GuidanceConfig,
) -> Result<Vec<VehicleAction>> {
    let (_, mut g) = joint_objective_and_grad(
        std::slice::from_ref(tau_a),
        std::slice::from_ref(s0),
        scene.other_sv_plans,
        scene.ego_plan,
        scene.map,
        cfg,
    )?;
    Ok(g.remove(0))
}

/// Guided samples of jointly planned SVs plus the objective trace over steps.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidedSample {
    pub plans: Vec<(ActionTrajectory, StateTrajectory)>,
    /// Objective value at each guided step, from step `K` down to `1`.
    pub trace: Vec<f64>,
    /// Steps whose gradient was non-finite and therefore skipped.
    pub skipped_steps: Vec<usize>,
}

struct Guide<'a> {
    model: &'a DiffusionModel,
    s0: &'a [VehicleState],
    fixed: &'a [StateTrajectory],
    ego_plan: &'a StateTrajectory,
    map: &'a RoadMap,
    cfg: &'a GuidanceConfig,
    trace: Vec<f64>,
    skipped: Vec<usize>,
}

impl Guide<'_> {
    fn try_shift(&mut self, k: usize, at: &Array2<f64>, variance: f64) -> Result<Option<Array2<f64>>> {
        let stats = self.model.action_stats;
        let dt = self.model.config.dt;
        let taus: Vec<ActionTrajectory> = at
            .rows()
            .into_iter()
            .map(|r| stats.denormalize(r.as_slice().expect("contiguous row"), dt))
            .collect();
        let (value, grads) = joint_objective_and_grad(&taus, self.s0, self.fixed, self.ego_plan, self.map, self.cfg)?;
        let finite = value.is_finite()
            && grads
                .iter()
                .flatten()
                .all(|a| a.accel.is_finite() && a.yaw_rate.is_finite());
        if !finite {
            log::warn!("non-finite guidance gradient at diffusion step {k}; step left unguided");
            self.skipped.push(k);
            return Ok(None);
        }
        self.trace.push(value);
        let f = self.cfg.guidance_scale * variance;
        let mut shift = Array2::zeros(at.raw_dim());
        for (i, g) in grads.iter().enumerate() {
            for (j, a) in g.iter().enumerate() {
                shift[[i, 2 * j]] = f * a.accel * stats.std[0];
                shift[[i, 2 * j + 1]] = f * a.yaw_rate * stats.std[1];
            }
        }
        Ok(Some(shift))
    }
}

impl MeanShift for Guide<'_> {
    fn shift(&mut self, k: usize, x_k: &Array2<f64>, x0_hat: &Array2<f64>, variance: f64) -> Option<Array2<f64>> {
        let at = match self.cfg.eval_point {
            EvalPoint::CleanEstimate => x0_hat,
            EvalPoint::Noisy => x_k,
        };
        match self.try_shift(k, at, variance) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("guidance failed at diffusion step {k}: {e}; step left unguided");
                self.skipped.push(k);
                None
            }
        }
    }
}

/// Jointly sample all SVs of a scene with guidance.
///
/// `fixed` holds plans of SVs that are not resampled. With an inactive
/// configuration this is exactly [`DiffusionModel::sample_batch`].
#[allow(clippy::too_many_arguments)]
pub fn guided_sample_joint(
    model: &DiffusionModel,
    s0: &[VehicleState],
    ctx: &[ContextFeatures],
    fixed: &[StateTrajectory],
    ego_plan: &StateTrajectory,
    map: &RoadMap,
    cfg: &GuidanceConfig,
    rng_seed: u64,
) -> Result<GuidedSample> {
    cfg.validate()?;
    if !cfg.is_active() {
        return Ok(GuidedSample {
            plans: model.sample_batch(s0, ctx, rng_seed, None)?,
            trace: Vec::new(),
            skipped_steps: Vec::new(),
        });
    }
    if ego_plan.len() != model.horizon() + 1 {
        return Err(Error::validation(format!(
            "ego plan has {} states, horizon needs {}",
            ego_plan.len(),
            model.horizon() + 1
        )));
    }
    let mut guide = Guide {
        model,
        s0,
        fixed,
        ego_plan,
        map,
        cfg,
        trace: Vec::new(),
        skipped: Vec::new(),
    };
    let plans = model.sample_batch(s0, ctx, rng_seed, Some(&mut guide))?;
    Ok(GuidedSample {
        plans,
        trace: guide.trace,
        skipped_steps: guide.skipped,
    })
}

/// Guided sample of a single SV against a fixed scene.
pub fn guided_sample(
    model: &DiffusionModel,
    s0: &VehicleState,
    ctx: &ContextFeatures,
    scene: &SceneContext,
    cfg: &GuidanceConfig,
    rng_seed: u64,
) -> Result<(ActionTrajectory, StateTrajectory, Vec<f64>)> {
    let mut out = guided_sample_joint(
        model,
        std::slice::from_ref(s0),
        std::slice::from_ref(ctx),
        scene.other_sv_plans,
        scene.ego_plan,
        scene.map,
        cfg,
        rng_seed,
    )?;
    let (tau, traj) = out.plans.remove(0);
    Ok((tau, traj, out.trace))
}

/// Constant-velocity extrapolation used as the ego forecast while planning SVs.
pub fn constant_velocity_plan(s0: &VehicleState, horizon: usize, dt: f64) -> StateTrajectory {
    let states = (0..=horizon)
        .map(|t| {
            let d = s0.v * t as f64 * dt;
            VehicleState::new(s0.x + d * s0.theta.cos(), s0.y + d * s0.theta.sin(), s0.v, s0.theta)
        })
        .collect();
    StateTrajectory { states }
}
