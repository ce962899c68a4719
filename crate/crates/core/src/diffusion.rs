//! Denoising diffusion over action trajectories.
//!
//! The forward process corrupts a normalized action trajectory `x0` as
//! `x_k = sqrt(abar_k) x0 + sqrt(1 - abar_k) eps`. The denoiser is a
//! time-conditioned MLP that predicts the clean trajectory directly; the reverse
//! step uses the Gaussian posterior `q(x_{k-1} | x_k, x0_hat)`:
//!
//! ```text
//! mean = c_clean * x0_hat + c_noisy * x_k
//! c_clean = sqrt(abar_{k-1}) * beta_k / (1 - abar_k)
//! c_noisy = sqrt(alpha_k) * (1 - abar_{k-1}) / (1 - abar_k)
//! ```
//!
//! Both coefficients follow from completing the square in
//! `q(x_k | x_{k-1}) q(x_{k-1} | x0)`, two Gaussians in `x_{k-1}` with
//! precisions `alpha_k / beta_k` and `1 / (1 - abar_{k-1})`. With
//! `abar_0 = 1` the final step reduces to `mean = x0_hat` and no noise is added.

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::{self, ActionTrajectory, StateTrajectory, VehicleAction, VehicleState};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Mlp};
use crate::world::{ContextConfig, ContextFeatures};

/// Per-step variances and their running products.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub const DEFAULT_STEPS: usize = 100;
pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 0.11;

/// Linear schedule from `beta_min` to `beta_max` over `steps` steps.
pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::validation("diffusion needs at least one step"));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::validation(format!(
            "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut prod = 1.0;
    for b in &betas {
        prod *= 1.0 - b;
        alpha_bars.push(prod);
    }
    Ok(NoiseSchedule { betas, alpha_bars })
}

/// Which variance the reverse transition uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionVariance {
    /// `Sigma_k = beta_k I`.
    #[default]
    Beta,
    /// The true posterior variance `beta_k (1 - abar_{k-1}) / (1 - abar_k)`.
    Posterior,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `beta_k` for `k` in `1..=K`.
    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    /// `abar_k`, with `abar_0 = 1`.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.alpha_bars[k - 1]
        }
    }

    /// `(c_clean, c_noisy)` of the posterior mean at step `k`.
    pub fn posterior_coefficients(&self, k: usize) -> (f64, f64) {
        if k == 1 {
            return (1.0, 0.0);
        }
        let beta = self.beta(k);
        let ab = self.alpha_bar(k);
        let ab_prev = self.alpha_bar(k - 1);
        (
            ab_prev.sqrt() * beta / (1.0 - ab),
            (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab),
        )
    }

    pub fn posterior_variance(&self, k: usize) -> f64 {
        self.beta(k) * (1.0 - self.alpha_bar(k - 1)) / (1.0 - self.alpha_bar(k))
    }

    pub fn transition_variance(&self, k: usize, kind: TransitionVariance) -> f64 {
        match kind {
            TransitionVariance::Beta => self.beta(k),
            TransitionVariance::Posterior => self.posterior_variance(k),
        }
    }

    /// Whether the terminal marginal is close to the unit Gaussian prior.
    pub fn is_converged(&self) -> bool {
        self.alpha_bar(self.steps()) < 0.01
    }

    fn check_step(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.steps() {
            return Err(Error::validation(format!(
                "diffusion step {k} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// Closed-form forward corruption of a normalized trajectory.
pub fn q_sample(tau0: &[f64], k: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_step(k)?;
    if tau0.len() != eps.len() {
        return Err(Error::validation("noise and trajectory shapes differ"));
    }
    let ab = sched.alpha_bar(k);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(tau0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// Per-channel z-score statistics of actions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionStats {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

impl ActionStats {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 2],
            std: [1.0; 2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.std[0] > 0.0 && self.std[1] > 0.0) {
            return Err(Error::validation("action std must be strictly positive"));
        }
        Ok(())
    }

    pub fn normalize(&self, tau: &ActionTrajectory) -> Vec<f64> {
        tau.actions
            .iter()
            .flat_map(|a| {
                [
                    (a.accel - self.mean[0]) / self.std[0],
                    (a.yaw_rate - self.mean[1]) / self.std[1],
                ]
            })
            .collect()
    }

    pub fn denormalize(&self, flat: &[f64], dt: f64) -> ActionTrajectory {
        let actions = flat
            .chunks_exact(2)
            .map(|c| {
                VehicleAction::new(
                    c[0] * self.std[0] + self.mean[0],
                    c[1] * self.std[1] + self.mean[1],
                )
            })
            .collect();
        ActionTrajectory { actions, dt }
    }
}

/// Scales that normalize agent-frame states for the network input and state loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateScales {
    /// Position scale (m).
    pub position: f64,
    pub speed_mean: f64,
    pub speed_std: f64,
    /// Yaw scale (rad).
    pub yaw: f64,
}

impl StateScales {
    pub fn identity() -> Self {
        Self {
            position: 1.0,
            speed_mean: 0.0,
            speed_std: 1.0,
            yaw: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.position > 0.0 && self.speed_std > 0.0 && self.yaw > 0.0) {
            return Err(Error::validation("state scales must be strictly positive"));
        }
        Ok(())
    }

    fn normalize(&self, s: &VehicleState) -> [f64; 4] {
        [
            s.x / self.position,
            s.y / self.position,
            (s.v - self.speed_mean) / self.speed_std,
            s.theta / self.yaw,
        ]
    }

    fn inverse_scales(&self) -> [f64; 4] {
        [
            1.0 / self.position,
            1.0 / self.position,
            1.0 / self.speed_std,
            1.0 / self.yaw,
        ]
    }
}

/// Architecture and loss settings of the denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub horizon: usize,
    pub dt: f64,
    pub context: ContextConfig,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    /// Weight of the rolled-out state term in the loss.
    pub state_loss_weight: f64,
    pub variance: TransitionVariance,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            horizon: dynamics::DEFAULT_HORIZON,
            dt: dynamics::DEFAULT_DT,
            context: ContextConfig::default(),
            embed_dim: 32,
            hidden: vec![256, 256, 256],
            state_loss_weight: 0.1,
            variance: TransitionVariance::Beta,
        }
    }
}

impl DenoiserConfig {
    pub fn action_dim(&self) -> usize {
        2 * self.horizon
    }

    /// Network input: noisy actions, their rolled-out states, step embedding, context.
    pub fn input_dim(&self) -> usize {
        6 * self.horizon + self.embed_dim + self.context.dim()
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(&self.hidden);
        sizes.push(self.action_dim());
        sizes
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::validation("horizon must be positive"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::validation("dt must be positive"));
        }
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            return Err(Error::validation("embedding dimension must be a positive even number"));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::validation("hidden widths must be positive"));
        }
        if !(self.state_loss_weight >= 0.0) {
            return Err(Error::validation("state loss weight must be non-negative"));
        }
        self.context.validate()
    }
}

/// Sinusoidal embedding of the diffusion step.
pub fn step_embedding(k: usize, dim: usize, out: &mut [f64]) {
    let half = dim / 2;
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = k as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
}

/// A batch of clean training windows.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    /// Normalized clean actions, one row per window (`2T` columns).
    pub actions: Array2<f64>,
    /// Initial state of each window.
    pub s0: Vec<VehicleState>,
    /// Context features, one row per window.
    pub context: Array2<f64>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.s0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s0.is_empty()
    }
}

/// Loss value split into its two terms, with the parameter gradient.
pub struct LossOutput {
    pub loss: f64,
    pub action_loss: f64,
    pub state_loss: f64,
    pub grads: Mlp,
}

/// Trained denoiser plus everything needed to use it: schedule and normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionModel {
    pub config: DenoiserConfig,
    pub schedule: NoiseSchedule,
    pub action_stats: ActionStats,
    pub state_scales: StateScales,
    pub net: Mlp,
}

/// Hook that may shift the reverse-transition mean (guidance).
pub trait MeanShift {
    /// `x_k` and `x0_hat` are `(n, 2T)` in normalized space; `variance` is the
    /// transition variance of this step. Returns the additive mean shift.
    fn shift(
        &mut self,
        k: usize,
        x_k: &Array2<f64>,
        x0_hat: &Array2<f64>,
        variance: f64,
    ) -> Option<Array2<f64>>;
}

impl DiffusionModel {
    pub fn new<R: Rng>(
        config: DenoiserConfig,
        schedule: NoiseSchedule,
        action_stats: ActionStats,
        state_scales: StateScales,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let net = Mlp::new(&config.layer_sizes(), rng);
        let model = Self {
            config,
            schedule,
            action_stats,
            state_scales,
            net,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.action_stats.validate()?;
        self.state_scales.validate()?;
        self.net.validate()?;
        if self.net.sizes() != self.config.layer_sizes() {
            return Err(Error::validation(format!(
                "network layout {:?} does not match configuration {:?}",
                self.net.sizes(),
                self.config.layer_sizes()
            )));
        }
        if self.schedule.betas.len() != self.schedule.alpha_bars.len() || self.schedule.steps() == 0 {
            return Err(Error::validation("inconsistent noise schedule"));
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    /// Roll normalized actions out from the agent frame `(0, 0, v0, 0)`.
    fn local_rollout(&self, flat: ArrayView1<f64>, v0: f64) -> (ActionTrajectory, StateTrajectory) {
        let tau = self
            .action_stats
            .denormalize(flat.as_slice().expect("contiguous row"), self.config.dt);
        let s0 = VehicleState::new(0.0, 0.0, v0, 0.0);
        let mut states = Vec::with_capacity(tau.len() + 1);
        states.push(s0);
        let mut s = s0;
        for a in &tau.actions {
            // unchecked: the caller verifies finiteness of the network output
            let v = s.v + a.accel * tau.dt;
            let theta = s.theta + a.yaw_rate * tau.dt;
            s = VehicleState::new(
                s.x + v * theta.cos() * tau.dt,
                s.y + v * theta.sin() * tau.dt,
                v,
                theta,
            );
            states.push(s);
        }
        (tau, StateTrajectory { states })
    }

    fn fill_input(&self, row: &mut [f64], noisy: ArrayView1<f64>, k: usize, v0: f64, ctx: ArrayView1<f64>) {
        let t = self.config.horizon;
        let e = self.config.embed_dim;
        for (dst, src) in row[..2 * t].iter_mut().zip(noisy.iter()) {
            *dst = *src;
        }
        let (_, traj) = self.local_rollout(noisy, v0);
        for (i, s) in traj.states[1..].iter().enumerate() {
            let n = self.state_scales.normalize(s);
            row[2 * t + 4 * i..2 * t + 4 * i + 4].copy_from_slice(&n);
        }
        step_embedding(k, e, &mut row[6 * t..6 * t + e]);
        for (dst, src) in row[6 * t + e..].iter_mut().zip(ctx.iter()) {
            *dst = *src;
        }
    }

    fn build_inputs(
        &self,
        noisy: &Array2<f64>,
        ks: &[usize],
        v0: &[f64],
        ctx: &Array2<f64>,
    ) -> Array2<f64> {
        let mut input = Array2::zeros((noisy.nrows(), self.config.input_dim()));
        for (i, mut row) in input.rows_mut().into_iter().enumerate() {
            self.fill_input(
                row.as_slice_mut().expect("contiguous row"),
                noisy.row(i),
                ks[i],
                v0[i],
                ctx.row(i),
            );
        }
        input
    }

    fn check_shapes(&self, noisy_cols: usize, ctx_cols: usize) -> Result<()> {
        if noisy_cols != self.config.action_dim() {
            return Err(Error::validation(format!(
                "trajectory has {noisy_cols} values, model expects {}",
                self.config.action_dim()
            )));
        }
        if ctx_cols != self.config.context.dim() {
            return Err(Error::validation(format!(
                "context has {ctx_cols} values, model expects {}",
                self.config.context.dim()
            )));
        }
        Ok(())
    }

    /// Predicted clean normalized trajectory for a batch of noisy rows.
    pub fn predict_clean_batch(
        &self,
        noisy: &Array2<f64>,
        k: usize,
        s0: &[VehicleState],
        ctx: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        self.schedule.check_step(k)?;
        self.check_shapes(noisy.ncols(), ctx.ncols())?;
        if noisy.nrows() != s0.len() || ctx.nrows() != s0.len() {
            return Err(Error::validation("batch row counts differ"));
        }
        let v0: Vec<f64> = s0.iter().map(|s| s.v).collect();
        let input = self.build_inputs(noisy, &vec![k; s0.len()], &v0, ctx);
        Ok(self.net.forward(input.view()))
    }

    /// Predicted clean trajectory `x0_hat(x_k, k, c)` in normalized space.
    pub fn predict_clean(
        &self,
        tau_k: &[f64],
        k: usize,
        s0: &VehicleState,
        ctx: &ContextFeatures,
    ) -> Result<Vec<f64>> {
        let noisy = Array2::from_shape_vec((1, tau_k.len()), tau_k.to_vec())
            .map_err(|e| Error::validation(e.to_string()))?;
        let c = Array2::from_shape_vec((1, ctx.values.len()), ctx.values.clone())
            .map_err(|e| Error::validation(e.to_string()))?;
        let out = self.predict_clean_batch(&noisy, k, std::slice::from_ref(s0), &c)?;
        Ok(out.into_raw_vec_and_offset().0)
    }

    /// Training loss and its exact gradient; `rng_seed` fixes the sampled steps and noise.
    pub fn loss_and_grads(&self, batch: &TrainBatch, rng_seed: u64) -> Result<LossOutput> {
        let n = batch.len();
        if n == 0 {
            return Err(Error::validation("empty training batch"));
        }
        self.check_shapes(batch.actions.ncols(), batch.context.ncols())?;
        let t = self.config.horizon;
        let d = 2 * t;
        let big_k = self.schedule.steps();
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut ks = Vec::with_capacity(n);
        let mut noisy = Array2::zeros((n, d));
        for i in 0..n {
            let k = rng.random_range(1..=big_k);
            ks.push(k);
            let ab = self.schedule.alpha_bar(k);
            let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
            for j in 0..d {
                let e: f64 = rng.sample(StandardNormal);
                noisy[[i, j]] = a * batch.actions[[i, j]] + b * e;
            }
        }
        let v0: Vec<f64> = batch.s0.iter().map(|s| s.v).collect();
        let input = self.build_inputs(&noisy, &ks, &v0, &batch.context);
        let (pred, cache) = self.net.forward_with_cache(input.view());

        let residual = &pred - &batch.actions;
        let action_loss = residual.mapv(|r| r * r).sum() / (n * d) as f64;
        let mut grad_out = residual.mapv(|r| 2.0 * r / (n * d) as f64);

        let lambda = self.config.state_loss_weight;
        let mut state_loss = 0.0;
        if lambda > 0.0 {
            let inv = self.state_scales.inverse_scales();
            let denom = (n * t * 4) as f64;
            let std = self.action_stats.std;
            for i in 0..n {
                let (tau_hat, traj_hat) = self.local_rollout(pred.row(i), v0[i]);
                let (_, traj) = self.local_rollout(batch.actions.row(i), v0[i]);
                let mut cot = vec![VehicleState::default(); t + 1];
                for step in 1..=t {
                    let a = traj_hat.states[step].to_array();
                    let b = traj.states[step].to_array();
                    let mut g = [0.0; 4];
                    for c in 0..4 {
                        let e = (a[c] - b[c]) * inv[c];
                        state_loss += e * e;
                        g[c] = 2.0 * e * inv[c] / denom;
                    }
                    cot[step] = VehicleState::from_array(g);
                }
                let ga = dynamics::rollout_vjp_with_states(&traj_hat, &tau_hat, &cot)?;
                for (j, a) in ga.iter().enumerate() {
                    grad_out[[i, 2 * j]] += lambda * a.accel * std[0];
                    grad_out[[i, 2 * j + 1]] += lambda * a.yaw_rate * std[1];
                }
            }
            state_loss /= denom;
        }
        let loss = action_loss + lambda * state_loss;
        let grads = self.net.backward(&cache, &grad_out);
        Ok(LossOutput {
            loss,
            action_loss,
            state_loss,
            grads,
        })
    }

    /// Mean action-term loss over `draws` fixed noise draws; used to judge memorization.
    pub fn reconstruction_mse(&self, batch: &TrainBatch, seed: u64, draws: usize) -> Result<f64> {
        let mut total = 0.0;
        for i in 0..draws {
            total += self.loss_and_grads(batch, seed.wrapping_add(i as u64))?.action_loss;
        }
        Ok(total / draws as f64)
    }

    /// Ancestral sampling for a batch of agents, with an optional mean shift.
    ///
    /// Noise is drawn from one generator seeded by `seed`: first the `K`-step
    /// prior for every row, then one draw per row and element at each step.
    pub fn sample_batch(
        &self,
        s0: &[VehicleState],
        ctx: &[ContextFeatures],
        seed: u64,
        mut guidance: Option<&mut dyn MeanShift>,
    ) -> Result<Vec<(ActionTrajectory, StateTrajectory)>> {
        let n = s0.len();
        if ctx.len() != n {
            return Err(Error::validation("one context per agent required"));
        }
        if n == 0 {
            return Ok(Vec::new());
        }
        let d = self.config.action_dim();
        let c = self.config.context.dim();
        let mut ctx_rows = Array2::zeros((n, c));
        for (i, f) in ctx.iter().enumerate() {
            self.check_shapes(d, f.values.len())?;
            ctx_rows.row_mut(i).assign(&ArrayView1::from(&f.values));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Array2::from_shape_simple_fn((n, d), || rng.sample::<f64, _>(StandardNormal));
        let v0: Vec<f64> = s0.iter().map(|s| s.v).collect();
        for k in (1..=self.schedule.steps()).rev() {
            let input = self.build_inputs(&x, &vec![k; n], &v0, &ctx_rows);
            let x0_hat = self.net.forward(input.view());
            if x0_hat.iter().any(|v| !v.is_finite()) {
                return Err(Error::Sampling {
                    step: k,
                    reason: "denoiser produced a non-finite estimate".into(),
                });
            }
            let (c_clean, c_noisy) = self.schedule.posterior_coefficients(k);
            let variance = self.schedule.transition_variance(k, self.config.variance);
            let mut mean = &x0_hat * c_clean + &x * c_noisy;
            if let Some(hook) = guidance.as_deref_mut() {
                if let Some(shift) = hook.shift(k, &x, &x0_hat, variance) {
                    mean += &shift;
                }
            }
            if k > 1 {
                let sigma = variance.sqrt();
                mean.mapv_inplace(|m| m + sigma * rng.sample::<f64, _>(StandardNormal));
            }
            if mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::Sampling {
                    step: k,
                    reason: "non-finite intermediate trajectory".into(),
                });
            }
            x = mean;
        }
        (0..n)
            .map(|i| {
                let tau = self
                    .action_stats
                    .denormalize(x.row(i).as_slice().expect("contiguous row"), self.config.dt);
                let traj = dynamics::rollout(&s0[i], &tau)?;
                Ok((tau, traj))
            })
            .collect()
    }

    /// Unguided sample for one agent.
    pub fn sample(
        &self,
        s0: &VehicleState,
        ctx: &ContextFeatures,
        seed: u64,
    ) -> Result<(ActionTrajectory, StateTrajectory)> {
        let mut out = self.sample_batch(std::slice::from_ref(s0), std::slice::from_ref(ctx), seed, None)?;
        Ok(out.remove(0))
    }
}

/// Source of training batches, one pass per epoch.
pub trait BatchSource {
    fn epoch<'a>(
        &'a self,
        epoch: usize,
        batch_size: usize,
        seed: u64,
    ) -> Result<Box<dyn Iterator<Item = Result<TrainBatch>> + 'a>>;
}

/// Fixed in-memory batches, replayed every epoch.
impl BatchSource for Vec<TrainBatch> {
    fn epoch<'a>(
        &'a self,
        _epoch: usize,
        _batch_size: usize,
        _seed: u64,
    ) -> Result<Box<dyn Iterator<Item = Result<TrainBatch>> + 'a>> {
        Ok(Box::new(self.iter().cloned().map(Ok)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    /// Cosine decay target as a fraction of the initial learning rate; `1` keeps it constant.
    pub final_lr_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 64,
            adam: AdamConfig::default(),
            grad_clip: 10.0,
            final_lr_fraction: 0.05,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::validation("batch size must be positive"));
        }
        if !(self.adam.lr >= 0.0 && self.adam.eps > 0.0) {
            return Err(Error::validation("adam learning rate must be non-negative and eps positive"));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::validation("final learning-rate fraction must lie in [0, 1]"));
        }
        if !((0.0..1.0).contains(&self.adam.beta1) && (0.0..1.0).contains(&self.adam.beta2)) {
            return Err(Error::validation("adam betas must lie in [0, 1)"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::validation("gradient clip must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss of every optimizer step.
    pub losses: Vec<f64>,
    /// Mean loss of every completed (or final partial) epoch.
    pub epoch_losses: Vec<f64>,
}

const DIVERGENCE_LOSS: f64 = 1e3;

pub(crate) fn mix_seed(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Adam training loop. Deterministic for a given `cfg.seed`.
pub fn train(model: &mut DiffusionModel, source: &dyn BatchSource, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let mut adam = Adam::new(cfg.adam, model.net.num_params());
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut epoch_losses = Vec::new();
    let mut step = 0;
    let mut epoch = 0;
    while step < cfg.steps {
        let mut epoch_sum = 0.0;
        let mut epoch_n = 0;
        for batch in source.epoch(epoch, cfg.batch_size, mix_seed(cfg.seed, epoch as u64))? {
            let batch = batch?;
            let out = model.loss_and_grads(&batch, mix_seed(cfg.seed ^ 0xA5A5, step as u64))?;
            if !out.loss.is_finite() || out.loss > DIVERGENCE_LOSS {
                return Err(Error::Training {
                    step,
                    reason: format!(
                        "loss diverged: {} (action {}, state {}), batch of {} windows",
                        out.loss,
                        out.action_loss,
                        out.state_loss,
                        batch.len()
                    ),
                });
            }
            let mut grads = out.grads;
            let norm = grads.global_norm();
            if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
                grads.scale(cfg.grad_clip / norm);
            }
            let progress = step as f64 / cfg.steps as f64;
            let decay = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            adam.set_lr(cfg.adam.lr * (cfg.final_lr_fraction + (1.0 - cfg.final_lr_fraction) * decay));
            adam.step(&mut model.net, &grads);
            losses.push(out.loss);
            epoch_sum += out.loss;
            epoch_n += 1;
            step += 1;
            if step >= cfg.steps {
                break;
            }
        }
        if epoch_n == 0 {
            return Err(Error::Dataset("batch source produced an empty epoch".into()));
        }
        epoch_losses.push(epoch_sum / epoch_n as f64);
        log::info!(
            "epoch {epoch}: mean loss {:.5} after {step} steps",
            epoch_losses[epoch_losses.len() - 1]
        );
        epoch += 1;
    }
    Ok(TrainReport { losses, epoch_losses })
}

/// Versioned checkpoint container.
#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model: DiffusionModel,
}

const CHECKPOINT_FORMAT: &str = "critgen-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

impl DiffusionModel {
    pub fn to_checkpoint_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        })?)
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        ck.model
            .validate()
            .map_err(|e| Error::Checkpoint(format!("invalid checkpoint: {e}")))?;
        Ok(ck.model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_json(&text)
    }
}
