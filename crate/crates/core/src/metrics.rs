//! Effectiveness and realism metrics over closed-loop logs.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dynamics::VehicleState;
use crate::error::{Error, Result};
use crate::simulate::{Role, SimLog};
use crate::world::wrap_angle;

/// Driving property whose distribution enters the realism deviation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Property {
    LongitudinalAccel,
    LateralAccel,
    Jerk,
}

impl Property {
    pub const ALL: [Property; 3] = [Property::LongitudinalAccel, Property::LateralAccel, Property::Jerk];

    pub fn name(self) -> &'static str {
        match self {
            Property::LongitudinalAccel => "lon_accel",
            Property::LateralAccel => "lat_accel",
            Property::Jerk => "jerk",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub bins: usize,
    /// Upper histogram edge of |longitudinal accel| (m/s²).
    pub lon_accel_max: f64,
    /// Upper histogram edge of |lateral accel| (m/s²).
    pub lat_accel_max: f64,
    /// Upper histogram edge of |jerk| (m/s³).
    pub jerk_max: f64,
    /// Desired SV speed for speed satisfaction (m/s).
    pub desired_speed: f64,
    /// Count an episode as fully incomplete unless the route was finished.
    pub ir_binary: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            bins: 64,
            lon_accel_max: 8.0,
            lat_accel_max: 8.0,
            jerk_max: 40.0,
            desired_speed: 8.0,
            ir_binary: false,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 {
            return Err(Error::validation("histogram needs at least one bin"));
        }
        if !(self.lon_accel_max > 0.0 && self.lat_accel_max > 0.0 && self.jerk_max > 0.0) {
            return Err(Error::validation("histogram ranges must be positive"));
        }
        if !(self.desired_speed > 0.0) {
            return Err(Error::validation("desired speed must be positive"));
        }
        Ok(())
    }

    pub fn edges(&self, p: Property) -> Vec<f64> {
        let hi = match p {
            Property::LongitudinalAccel => self.lon_accel_max,
            Property::LateralAccel => self.lat_accel_max,
            Property::Jerk => self.jerk_max,
        };
        uniform_edges(0.0, hi, self.bins)
    }
}

pub fn uniform_edges(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect()
}

/// Normalized histogram on fixed edges; out-of-range values land in the end bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyHistogram {
    pub edges: Vec<f64>,
    pub mass: Vec<f64>,
}

impl PropertyHistogram {
    pub fn from_values(edges: Vec<f64>, values: &[f64]) -> Result<Self> {
        if edges.len() < 2 || edges.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::validation("histogram edges must be strictly increasing"));
        }
        if values.is_empty() {
            return Err(Error::Metric("empty property stream".into()));
        }
        let bins = edges.len() - 1;
        let mut counts = vec![0usize; bins];
        for &v in values {
            if !v.is_finite() {
                return Err(Error::Metric("non-finite property value".into()));
            }
            let i = edges.partition_point(|&e| e <= v).saturating_sub(1).min(bins - 1);
            counts[i] += 1;
        }
        let n = values.len() as f64;
        let mass = counts.into_iter().map(|c| c as f64 / n).collect();
        Ok(Self { edges, mass })
    }

    pub fn from_mass(edges: Vec<f64>, mass: Vec<f64>) -> Result<Self> {
        if edges.len() != mass.len() + 1 || edges.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::validation("histogram edges must be strictly increasing, one more than bins"));
        }
        let total: f64 = mass.iter().sum();
        if mass.iter().any(|m| !(*m >= 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::validation("histogram mass must be non-negative and sum to 1"));
        }
        Ok(Self { edges, mass })
    }
}

/// 1-D Wasserstein distance `Σ |CDF₁ − CDF₂| · width` on shared edges.
pub fn wasserstein_1d(h1: &PropertyHistogram, h2: &PropertyHistogram) -> Result<f64> {
    if h1.edges != h2.edges {
        return Err(Error::validation("histograms have different bin edges"));
    }
    let (mut c1, mut c2, mut w) = (0.0, 0.0, 0.0);
    for i in 0..h1.mass.len() {
        c1 += h1.mass[i];
        c2 += h2.mass[i];
        w += (c1 - c2).abs() * (h1.edges[i + 1] - h1.edges[i]);
    }
    Ok(w)
}

/// Per-timestep property streams.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PropertySamples {
    pub lon_accel: Vec<f64>,
    pub lat_accel: Vec<f64>,
    pub jerk: Vec<f64>,
}

impl PropertySamples {
    /// Append the properties of one state sequence.
    pub fn extend_from_states(&mut self, states: &[VehicleState], dt: f64) {
        let mut prev_lon: Option<f64> = None;
        for w in states.windows(2) {
            let lon = (w[1].v - w[0].v) / dt;
            self.lon_accel.push(lon.abs());
            self.lat_accel.push((w[0].v * wrap_angle(w[1].theta - w[0].theta) / dt).abs());
            if let Some(p) = prev_lon {
                self.jerk.push(((lon - p) / dt).abs());
            }
            prev_lon = Some(lon);
        }
    }

    pub fn from_states<'a>(trajs: impl IntoIterator<Item = &'a [VehicleState]>, dt: f64) -> Self {
        let mut out = Self::default();
        for t in trajs {
            out.extend_from_states(t, dt);
        }
        out
    }

    /// SV streams of valid logs.
    pub fn from_logs(logs: &[SimLog]) -> Self {
        let mut out = Self::default();
        for log in logs.iter().filter(|l| l.summary.valid) {
            for i in log.agents_with_role(Role::Sv) {
                out.extend_from_states(&log.agent_states(i), log.summary.dt);
            }
        }
        out
    }

    pub fn from_dataset(ds: &Dataset) -> Self {
        Self::from_states(ds.trajectories().map(|t| t.states.as_slice()), ds.dt)
    }

    pub fn get(&self, p: Property) -> &[f64] {
        match p {
            Property::LongitudinalAccel => &self.lon_accel,
            Property::LateralAccel => &self.lat_accel,
            Property::Jerk => &self.jerk,
        }
    }

    pub fn histogram(&self, p: Property, cfg: &MetricsConfig) -> Result<PropertyHistogram> {
        PropertyHistogram::from_values(cfg.edges(p), self.get(p))
            .map_err(|e| Error::Metric(format!("{}: {e}", p.name())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyDeviation {
    pub property: Property,
    pub wasserstein: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealismDeviation {
    pub rd: f64,
    pub per_property: Vec<PropertyDeviation>,
}

/// Mean W₁ over the three properties between simulated and reference streams.
pub fn realism_deviation(
    sim: &PropertySamples,
    reference: &PropertySamples,
    cfg: &MetricsConfig,
) -> Result<RealismDeviation> {
    cfg.validate()?;
    let per_property = Property::ALL
        .iter()
        .map(|&p| {
            let w = wasserstein_1d(&sim.histogram(p, cfg)?, &reference.histogram(p, cfg)?)?;
            Ok(PropertyDeviation { property: p, wasserstein: w })
        })
        .collect::<Result<Vec<_>>>()?;
    let rd = per_property.iter().map(|d| d.wasserstein).sum::<f64>() / per_property.len() as f64;
    Ok(RealismDeviation { rd, per_property })
}

fn valid_logs(logs: &[SimLog]) -> Result<Vec<&SimLog>> {
    let v: Vec<&SimLog> = logs.iter().filter(|l| l.summary.valid).collect();
    if v.is_empty() {
        return Err(Error::Metric("no valid episodes".into()));
    }
    Ok(v)
}

/// Fraction of valid episodes with at least one ego collision.
pub fn collision_rate(logs: &[SimLog]) -> Result<f64> {
    let v = valid_logs(logs)?;
    Ok(v.iter().filter(|l| l.ego_collided()).count() as f64 / v.len() as f64)
}

/// Uncovered fraction of one episode's route.
pub fn route_incompletion_of(log: &SimLog, binary: bool) -> Result<f64> {
    let s = &log.summary;
    if !(s.route_length > 0.0) {
        return Err(Error::validation(format!("episode {} has a zero-length route", s.scenario)));
    }
    if binary {
        return Ok(if s.route_completed { 0.0 } else { 1.0 });
    }
    if s.route_completed {
        return Ok(0.0);
    }
    Ok((1.0 - s.route_progress / s.route_length).clamp(0.0, 1.0))
}

/// Mean route incompletion over valid episodes.
pub fn route_incompletion(logs: &[SimLog], binary: bool) -> Result<f64> {
    let v = valid_logs(logs)?;
    let mut total = 0.0;
    for l in &v {
        total += route_incompletion_of(l, binary)?;
    }
    Ok(total / v.len() as f64)
}

fn episode_speed_satisfaction(log: &SimLog, v_d: f64) -> Option<f64> {
    let svs = log.agents_with_role(Role::Sv);
    let mut sum = 0.0;
    let mut n = 0usize;
    for step in &log.steps {
        for &i in &svs {
            sum += 1.0 - (step.states[i].v - v_d).abs() / v_d;
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Mean over episodes of the per-episode mean over SV timesteps of `1 − |v − v_d|/v_d`.
pub fn speed_satisfaction(logs: &[SimLog], v_d: f64) -> Result<f64> {
    if !(v_d > 0.0) {
        return Err(Error::validation("desired speed must be positive"));
    }
    let per: Vec<f64> = valid_logs(logs)?
        .iter()
        .filter_map(|l| episode_speed_satisfaction(l, v_d))
        .collect();
    if per.is_empty() {
        return Err(Error::Metric("no SV timesteps".into()));
    }
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Fraction of SV timesteps spent outside the drivable area.
pub fn offroad_fraction(logs: &[SimLog]) -> Result<f64> {
    let v = valid_logs(logs)?;
    let steps: usize = v.iter().map(|l| l.sv_steps()).sum();
    if steps == 0 {
        return Err(Error::Metric("no SV timesteps".into()));
    }
    Ok(v.iter().map(|l| l.summary.sv_offroad_steps).sum::<usize>() as f64 / steps as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub scenario: String,
    pub seed: u64,
    pub valid: bool,
    pub collided: bool,
    pub first_collision_time: Option<f64>,
    pub route_incompletion: Option<f64>,
    pub speed_satisfaction: Option<f64>,
    pub sv_offroad_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cr: f64,
    pub ir: f64,
    pub ss: f64,
    pub rd: f64,
    pub per_property: Vec<PropertyDeviation>,
    pub offroad_fraction: f64,
    pub episodes: usize,
    pub invalid_episodes: usize,
    pub ir_binary: bool,
    pub desired_speed: f64,
}

/// All metrics of a log set against reference property streams.
pub fn evaluate(logs: &[SimLog], reference: &PropertySamples, cfg: &MetricsConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let valid = valid_logs(logs)?;
    let invalid = logs.len() - valid.len();
    if invalid > 0 {
        log::warn!("{invalid} invalid episodes excluded from metrics");
    }
    let rd = realism_deviation(&PropertySamples::from_logs(logs), reference, cfg)?;
    Ok(MetricsReport {
        cr: collision_rate(logs)?,
        ir: route_incompletion(logs, cfg.ir_binary)?,
        ss: speed_satisfaction(logs, cfg.desired_speed)?,
        rd: rd.rd,
        per_property: rd.per_property,
        offroad_fraction: offroad_fraction(logs)?,
        episodes: valid.len(),
        invalid_episodes: invalid,
        ir_binary: cfg.ir_binary,
        desired_speed: cfg.desired_speed,
    })
}

pub fn episode_metrics(log: &SimLog, cfg: &MetricsConfig) -> EpisodeMetrics {
    let s = &log.summary;
    EpisodeMetrics {
        scenario: s.scenario.clone(),
        seed: s.seed,
        valid: s.valid,
        collided: log.ego_collided(),
        first_collision_time: log.first_ego_collision().map(|c| c.time),
        route_incompletion: route_incompletion_of(log, cfg.ir_binary).ok(),
        speed_satisfaction: episode_speed_satisfaction(log, cfg.desired_speed),
        sv_offroad_steps: s.sv_offroad_steps,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// CSV with one row per episode.
pub fn episodes_csv(logs: &[SimLog], cfg: &MetricsConfig) -> String {
    let mut out = String::from("scenario,seed,valid,collided,first_collision_time,route_incompletion,speed_satisfaction,sv_offroad_steps\n");
    for l in logs {
        let m = episode_metrics(l, cfg);
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            m.scenario,
            m.seed,
            m.valid,
            m.collided,
            opt(m.first_collision_time),
            opt(m.route_incompletion),
            opt(m.speed_satisfaction),
            m.sv_offroad_steps
        ));
    }
    out
}

/// CSV with the simulated and reference histograms of every property.
pub fn histograms_csv(sim: &PropertySamples, reference: &PropertySamples, cfg: &MetricsConfig) -> Result<String> {
    let mut out = String::from("property,bin,lower,upper,simulated,reference\n");
    for p in Property::ALL {
        let hs = sim.histogram(p, cfg)?;
        let hr = reference.histogram(p, cfg)?;
        for i in 0..hs.mass.len() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                p.name(),
                i,
                hs.edges[i],
                hs.edges[i + 1],
                hs.mass[i],
                hr.mass[i]
            ));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{SimSummary, StepRecord, CollisionEvent};
    use crate::world::VehicleDims;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fake_log(sv_speeds: &[f64], collided: bool, progress: f64) -> SimLog {
        let steps = sv_speeds
            .iter()
            .enumerate()
            .map(|(t, &v)| StepRecord {
                t,
                states: vec![VehicleState::default(), VehicleState::new(t as f64, 0.0, v, 0.0)],
                sv_actions: vec![],
            })
            .collect();
        SimLog {
            summary: SimSummary {
                format: "critgen-simlog".into(),
                version: 1,
                scenario: "fake".into(),
                map: "straight".into(),
                seed: 0,
                dt: 0.1,
                roles: vec![Role::Ego, Role::Sv],
                vehicle_dims: VehicleDims::default(),
                route: vec![[0.0, 0.0], [100.0, 0.0]],
                route_length: 100.0,
                route_progress: progress,
                route_completed: progress >= 100.0,
                completion_step: None,
                collisions: if collided {
                    vec![CollisionEvent {
                        a: 0,
                        b: 1,
                        step: 1,
                        time: 0.1,
                        penetration: 0.1,
                    }]
                } else {
                    vec![]
                },
                sv_offroad_steps: 0,
                valid: true,
                invalid_reason: None,
            },
            steps,
        }
    }

    fn random_hist(rng: &mut ChaCha8Rng, edges: &[f64]) -> PropertyHistogram {
        let raw: Vec<f64> = (0..edges.len() - 1).map(|_| rng.random::<f64>()).collect();
        let s: f64 = raw.iter().sum();
        PropertyHistogram {
            edges: edges.to_vec(),
            mass: raw.iter().map(|m| m / s).collect(),
        }
    }

    /// Monotone (north-west corner) transport between point masses at bin centres.
    fn greedy_transport(h1: &PropertyHistogram, h2: &PropertyHistogram) -> f64 {
        let centres: Vec<f64> = h1.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        let (mut a, mut b) = (h1.mass.clone(), h2.mass.clone());
        let (mut i, mut j, mut cost) = (0, 0, 0.0);
        while i < a.len() && j < b.len() {
            let f = a[i].min(b[j]);
            cost += f * (centres[i] - centres[j]).abs();
            a[i] -= f;
            b[j] -= f;
            if a[i] <= 1e-15 {
                i += 1;
            } else {
                j += 1;
            }
        }
        cost
    }

    #[test]
    fn wasserstein_closed_cases() {
        let edges = uniform_edges(0.0, 8.0, 64);
        let w = edges[1] - edges[0];
        let mut m1 = vec![0.0; 64];
        m1[10] = 1.0;
        let mut m2 = vec![0.0; 64];
        m2[11] = 1.0;
        let h1 = PropertyHistogram::from_mass(edges.clone(), m1).unwrap();
        let h2 = PropertyHistogram::from_mass(edges.clone(), m2).unwrap();
        assert_eq!(wasserstein_1d(&h1, &h1).unwrap(), 0.0);
        assert_abs_diff_eq!(wasserstein_1d(&h1, &h2).unwrap(), w, epsilon = 1e-15);
        let other = PropertyHistogram::from_mass(uniform_edges(0.0, 4.0, 64), h1.mass.clone()).unwrap();
        assert!(wasserstein_1d(&h1, &other).is_err());
    }

    #[test]
    fn wasserstein_matches_transport_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let bins = rng.random_range(1..40);
            let edges = uniform_edges(0.0, rng.random_range(1.0..50.0), bins);
            let h1 = random_hist(&mut rng, &edges);
            let h2 = random_hist(&mut rng, &edges);
            let w = wasserstein_1d(&h1, &h2).unwrap();
            assert_abs_diff_eq!(w, greedy_transport(&h1, &h2), epsilon = 1e-9);
        }
    }

    #[test]
    fn wasserstein_metric_axioms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let edges = uniform_edges(0.0, 8.0, 64);
        for _ in 0..1000 {
            let a = random_hist(&mut rng, &edges);
            let b = random_hist(&mut rng, &edges);
            let c = random_hist(&mut rng, &edges);
            let ab = wasserstein_1d(&a, &b).unwrap();
            assert!(ab > 0.0);
            assert!(wasserstein_1d(&a, &a).unwrap() <= 1e-12);
            assert_eq!(ab, wasserstein_1d(&b, &a).unwrap());
            let ac = wasserstein_1d(&a, &c).unwrap();
            let cb = wasserstein_1d(&c, &b).unwrap();
            assert!(ab <= ac + cb + 1e-12);
        }
    }

    #[test]
    fn histogram_overflow_and_mass() {
        let edges = uniform_edges(0.0, 8.0, 64);
        let h = PropertyHistogram::from_values(edges, &[-1.0, 0.0, 3.3, 8.0, 100.0]).unwrap();
        assert_abs_diff_eq!(h.mass.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert_eq!(h.mass[0], 0.4);
        assert_eq!(h.mass[63], 0.4);
        assert!(PropertyHistogram::from_values(vec![0.0, 1.0], &[]).is_err());
        assert!(PropertyHistogram::from_values(vec![1.0, 1.0], &[0.5]).is_err());
    }

    #[test]
    fn speed_satisfaction_cases() {
        for (v, expected) in [(8.0, 1.0), (0.0, 0.0), (12.0, 0.5), (24.0, -1.0)] {
            let logs = vec![fake_log(&[v; 20], false, 0.0)];
            assert_eq!(speed_satisfaction(&logs, 8.0).unwrap(), expected);
        }
        let logs = vec![fake_log(&[8.0, 8.0, 8.5], false, 0.0)];
        assert!(speed_satisfaction(&logs, 8.0).unwrap() < 1.0);
        assert!(speed_satisfaction(&logs, 0.0).is_err());
    }

    #[test]
    fn rate_metrics() {
        let logs: Vec<SimLog> = (0..10).map(|i| fake_log(&[8.0; 5], i < 3, 0.0)).collect();
        assert_abs_diff_eq!(collision_rate(&logs).unwrap(), 0.3, epsilon = 1e-15);
        let mut rev = logs.clone();
        rev.reverse();
        assert_eq!(collision_rate(&logs).unwrap(), collision_rate(&rev).unwrap());
        assert_eq!(collision_rate(&logs[3..]).unwrap(), 0.0);
        assert_eq!(collision_rate(&logs[..3]).unwrap(), 1.0);
        assert_eq!(route_incompletion(&logs, false).unwrap(), 1.0);
        assert_eq!(route_incompletion(&[fake_log(&[8.0], false, 50.0)], false).unwrap(), 0.5);
        assert_eq!(route_incompletion(&[fake_log(&[8.0], false, 50.0)], true).unwrap(), 1.0);
        assert_eq!(route_incompletion(&[fake_log(&[8.0], false, 100.0)], false).unwrap(), 0.0);
        let mut zero = fake_log(&[8.0], false, 0.0);
        zero.summary.route_length = 0.0;
        assert!(route_incompletion(&[zero], false).is_err());
        let mut bad = fake_log(&[8.0], false, 0.0);
        bad.summary.valid = false;
        assert!(collision_rate(&[bad]).is_err());
    }

    fn ramp(accels: &[f64], dt: f64) -> Vec<VehicleState> {
        let mut s = VehicleState::new(0.0, 0.0, 1.0, 0.0);
        let mut out = vec![s];
        for a in accels {
            s.v += a * dt;
            s.x += s.v * dt;
            out.push(s);
        }
        out
    }

    #[test]
    fn realism_self_and_translation() {
        let cfg = MetricsConfig::default();
        let dt = 0.1;
        let w = 8.0 / 64.0;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // accelerations at bin centres keep the translation exact after binning
        let accels: Vec<f64> = (0..400).map(|_| (rng.random_range(0..40) as f64 + 0.5) * w).collect();
        let reference = PropertySamples::from_states([ramp(&accels, dt).as_slice()], dt);
        let same = realism_deviation(&reference, &reference, &cfg).unwrap();
        assert_eq!(same.rd, 0.0);
        let delta = 3.0 * w;
        let shifted: Vec<f64> = accels.iter().map(|a| a + delta).collect();
        let sim = PropertySamples::from_states([ramp(&shifted, dt).as_slice()], dt);
        let rd = realism_deviation(&sim, &reference, &cfg).unwrap();
        let lon = &rd.per_property[0];
        assert_eq!(lon.property, Property::LongitudinalAccel);
        assert_abs_diff_eq!(lon.wasserstein, delta, epsilon = 1e-9);
        let hs = sim.histogram(Property::LongitudinalAccel, &cfg).unwrap();
        let hr = reference.histogram(Property::LongitudinalAccel, &cfg).unwrap();
        assert_abs_diff_eq!(greedy_transport(&hs, &hr), delta, epsilon = 1e-9);
        assert_eq!(rd.per_property[1].wasserstein, 0.0);
        for (a, b) in sim.jerk.iter().zip(&reference.jerk) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn realism_errors_on_empty_streams() {
        let cfg = MetricsConfig::default();
        let empty = PropertySamples::default();
        let one = PropertySamples::from_states([ramp(&[1.0, 2.0], 0.1).as_slice()], 0.1);
        assert!(realism_deviation(&empty, &one, &cfg).is_err());
    }

    #[test]
    fn report_csv_rows() {
        let logs: Vec<SimLog> = (0..4).map(|i| fake_log(&[8.0, 8.5, 9.0], i == 0, 40.0)).collect();
        let reference = PropertySamples::from_logs(&logs);
        let cfg = MetricsConfig::default();
        let rep = evaluate(&logs, &reference, &cfg).unwrap();
        assert_eq!(rep.cr, 0.25);
        assert_eq!(rep.rd, 0.0);
        assert_abs_diff_eq!(rep.ir, 0.6, epsilon = 1e-12);
        assert_eq!(episodes_csv(&logs, &cfg).lines().count(), 5);
        assert_eq!(histograms_csv(&reference, &reference, &cfg).unwrap().lines().count(), 1 + 3 * 64);
    }
}
