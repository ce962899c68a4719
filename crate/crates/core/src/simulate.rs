//! Closed-loop simulation: SVs replan with guided diffusion, non-adversarial
//! vehicles keep their lane at constant speed, and the ego follows a
//! deterministic rule-based policy.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, pure_pursuit};
use crate::diffusion::{mix_seed, DiffusionModel};
use crate::dynamics::{self, ActionLimits, ActionTrajectory, VehicleAction, VehicleState};
use crate::error::{Error, Result};
use crate::guidance::{self, GuidanceConfig};
use crate::world::{self, Lane, Point2, RoadMap, Route, Scenario, VehicleDims};

/// Parameters of the rule-based ego driver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EgoParams {
    pub cruise_speed: f64,
    /// Desired time headway to the leader (s).
    pub headway: f64,
    /// Gain of the headway braking rule; `0` disables it.
    pub brake_gain: f64,
    /// Pure-pursuit lookahead distance (m).
    pub lookahead: f64,
    /// Standstill bumper gap (m).
    pub min_gap: f64,
    pub speed_gain: f64,
    /// Lateral half-width of the corridor in which leaders are detected (m).
    pub corridor: f64,
}

impl Default for EgoParams {
    fn default() -> Self {
        Self {
            cruise_speed: 8.0,
            headway: 1.5,
            brake_gain: 1.0,
            lookahead: 8.0,
            min_gap: 3.0,
            speed_gain: 1.0,
            corridor: 2.0,
        }
    }
}

impl EgoParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.cruise_speed > 0.0) {
            return Err(Error::validation("ego cruise speed must be positive"));
        }
        if !(self.headway >= 0.0 && self.brake_gain >= 0.0 && self.min_gap >= 0.0 && self.speed_gain >= 0.0) {
            return Err(Error::validation("ego gains, headway and gap must be non-negative"));
        }
        if !(self.lookahead > 0.0 && self.corridor > 0.0) {
            return Err(Error::validation("ego lookahead and corridor must be positive"));
        }
        Ok(())
    }
}

/// Ego driver bound to a route polyline.
#[derive(Debug, Clone, PartialEq)]
pub struct EgoPolicy {
    pub params: EgoParams,
    pub route: Route,
    /// Route polyline: the ego start followed by the waypoints.
    path: Lane,
    pub limits: ActionLimits,
    pub length: f64,
}

impl EgoPolicy {
    pub fn new(params: EgoParams, start: Point2, route: Route, limits: ActionLimits, length: f64) -> Result<Self> {
        params.validate()?;
        let mut pts = vec![start];
        pts.extend(route.waypoints.iter().copied());
        let path = Lane {
            centerline: pts,
            speed: params.cruise_speed,
        };
        if !(path.length() > 0.0) {
            return Err(Error::validation("route has zero length"));
        }
        Ok(Self {
            params,
            route,
            path,
            limits,
            length,
        })
    }

    pub fn route_length(&self) -> f64 {
        self.path.length()
    }

    /// Arc-length progress of a position along the route.
    pub fn progress(&self, p: Point2) -> f64 {
        self.path.project(p).s
    }

    pub fn route_polyline(&self) -> &[Point2] {
        &self.path.centerline
    }
}

/// Pure-pursuit steering plus `min(cruise tracking, headway braking)`.
pub fn ego_step(policy: &EgoPolicy, ego: &VehicleState, others: &[VehicleState]) -> VehicleAction {
    let p = &policy.params;
    let yaw = pure_pursuit(&policy.path, ego, p.lookahead);
    let mut accel = p.speed_gain * (p.cruise_speed - ego.v);
    if p.brake_gain > 0.0 {
        if let Some(gap) = data::leader_gap(ego, others, p.corridor, policy.length) {
            accel = accel.min(p.brake_gain * (gap - (p.min_gap + p.headway * ego.v)));
        }
    }
    policy.limits.clamp(VehicleAction::new(accel, yaw))
}

/// Separating-axis overlap test of two oriented rectangles.
///
/// Returns the minimum translation distance when the footprints intersect.
pub fn check_collision(a: &VehicleState, b: &VehicleState, dims: &VehicleDims) -> Option<f64> {
    let half = [dims.length / 2.0, dims.width / 2.0];
    let axes = |s: &VehicleState| {
        let (sin, cos) = s.theta.sin_cos();
        [[cos, sin], [-sin, cos]]
    };
    let (ax_a, ax_b) = (axes(a), axes(b));
    let d = [b.x - a.x, b.y - a.y];
    let dot = |u: [f64; 2], v: [f64; 2]| u[0] * v[0] + u[1] * v[1];
    let mut depth = f64::INFINITY;
    for axis in ax_a.iter().chain(ax_b.iter()) {
        let ra = half[0] * dot(ax_a[0], *axis).abs() + half[1] * dot(ax_a[1], *axis).abs();
        let rb = half[0] * dot(ax_b[0], *axis).abs() + half[1] * dot(ax_b[1], *axis).abs();
        let overlap = ra + rb - dot(d, *axis).abs();
        if overlap <= 0.0 {
            return None;
        }
        depth = depth.min(overlap);
    }
    Some(depth)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Ego,
    Sv,
    NonAdversarial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMode {
    /// Keep simulating after collisions.
    Continue,
    /// End the episode at the first ego collision.
    #[default]
    StopOnEgoCollision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Maximum number of simulated steps.
    pub steps: usize,
    pub replan_every: usize,
    pub stop_mode: StopMode,
    pub ego: EgoParams,
    pub limits: ActionLimits,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            replan_every: 10,
            stop_mode: StopMode::StopOnEgoCollision,
            ego: EgoParams::default(),
            limits: ActionLimits::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.replan_every == 0 {
            return Err(Error::validation("simulation steps and replan interval must be positive"));
        }
        self.ego.validate()?;
        self.limits.validate()
    }
}

/// Input to an SV planner at a replanning instant.
pub struct PlanRequest<'a> {
    pub map: &'a RoadMap,
    /// Per-agent state history up to now, most recent last.
    pub histories: &'a [Vec<VehicleState>],
    pub ego: usize,
    pub svs: &'a [usize],
    pub dt: f64,
    pub seed: u64,
}

/// Produces one action plan per SV.
pub trait Planner: Sync {
    fn plan(&self, req: &PlanRequest) -> Result<Vec<ActionTrajectory>>;
    /// Minimum number of plan steps the planner returns.
    fn horizon(&self) -> usize;
}

/// SVs hold zero acceleration and yaw rate.
pub struct ConstantPlanner {
    pub horizon: usize,
}

impl Planner for ConstantPlanner {
    fn plan(&self, req: &PlanRequest) -> Result<Vec<ActionTrajectory>> {
        Ok(req
            .svs
            .iter()
            .map(|_| ActionTrajectory::zeros(self.horizon, req.dt))
            .collect())
    }

    fn horizon(&self) -> usize {
        self.horizon
    }
}

/// SVs follow jointly sampled guided-diffusion plans.
pub struct GuidedPlanner<'a> {
    pub model: &'a DiffusionModel,
    pub guidance: GuidanceConfig,
}

impl Planner for GuidedPlanner<'_> {
    fn plan(&self, req: &PlanRequest) -> Result<Vec<ActionTrajectory>> {
        let model = self.model;
        let ctx_cfg = model.config.context;
        let padded: Vec<Vec<VehicleState>> = req
            .histories
            .iter()
            .map(|h| world::pad_history(h, ctx_cfg.history, req.dt))
            .collect();
        let ctx = req
            .svs
            .iter()
            .map(|&i| world::encode_context(req.map, &padded, i, ctx_cfg))
            .collect::<Result<Vec<_>>>()?;
        let s0: Vec<VehicleState> = req.svs.iter().map(|&i| *padded[i].last().expect("history")).collect();
        let ego_now = *padded[req.ego].last().expect("history");
        let ego_plan = guidance::constant_velocity_plan(&ego_now, model.horizon(), req.dt);
        let out = guidance::guided_sample_joint(model, &s0, &ctx, &[], &ego_plan, req.map, &self.guidance, req.seed)?;
        Ok(out.plans.into_iter().map(|(tau, _)| tau).collect())
    }

    fn horizon(&self) -> usize {
        self.model.horizon()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionEvent {
    pub a: usize,
    pub b: usize,
    pub step: usize,
    pub time: f64,
    pub penetration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub states: Vec<VehicleState>,
    /// Actions executed by each SV from this step to the next (empty on the last step).
    pub sv_actions: Vec<VehicleAction>,
}

/// Episode summary; serialized as the header line of a log file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSummary {
    pub format: String,
    pub version: u32,
    pub scenario: String,
    pub map: String,
    pub seed: u64,
    pub dt: f64,
    pub roles: Vec<Role>,
    pub vehicle_dims: VehicleDims,
    pub route: Vec<Point2>,
    pub route_length: f64,
    /// Arc-length progress along the route at the end of the episode.
    pub route_progress: f64,
    pub route_completed: bool,
    pub completion_step: Option<usize>,
    /// Onsets of footprint overlap between any two agents.
    pub collisions: Vec<CollisionEvent>,
    /// SV steps with the vehicle centre outside the drivable area.
    pub sv_offroad_steps: usize,
    pub valid: bool,
    pub invalid_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimLog {
    pub summary: SimSummary,
    pub steps: Vec<StepRecord>,
}

const LOG_FORMAT: &str = "critgen-simlog";
const LOG_VERSION: u32 = 1;

impl SimLog {
    pub fn ego_collided(&self) -> bool {
        self.summary.collisions.iter().any(|c| c.a == 0 || c.b == 0)
    }

    pub fn first_ego_collision(&self) -> Option<&CollisionEvent> {
        self.summary.collisions.iter().find(|c| c.a == 0 || c.b == 0)
    }

    pub fn agents_with_role(&self, role: Role) -> Vec<usize> {
        (0..self.summary.roles.len())
            .filter(|&i| self.summary.roles[i] == role)
            .collect()
    }

    /// State trajectory of one agent over the logged timeline.
    pub fn agent_states(&self, agent: usize) -> Vec<VehicleState> {
        self.steps.iter().map(|s| s.states[agent]).collect()
    }

    /// Number of SV state samples in the log.
    pub fn sv_steps(&self) -> usize {
        self.agents_with_role(Role::Sv).len() * self.steps.len()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.summary)?;
        out.push('\n');
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::validation("empty log"))?;
        let summary: SimSummary = serde_json::from_str(header)?;
        if summary.format != LOG_FORMAT || summary.version != LOG_VERSION {
            return Err(Error::validation(format!(
                "unsupported log format {} v{}",
                summary.format, summary.version
            )));
        }
        let steps = lines
            .filter(|l| !l.is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<StepRecord>, _>>()?;
        Ok(Self { summary, steps })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        w.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut text = String::new();
        for line in std::io::BufReader::new(file).lines() {
            text.push_str(&line.map_err(|e| Error::io(path, e))?);
            text.push('\n');
        }
        Self::from_jsonl(&text)
    }
}

fn collisions_at(states: &[VehicleState], dims: &VehicleDims) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for i in 0..states.len() {
        for j in i + 1..states.len() {
            if let Some(d) = check_collision(&states[i], &states[j], dims) {
                out.push((i, j, d));
            }
        }
    }
    out
}

/// Run one closed-loop episode.
///
/// A failing planner does not abort: the log is returned marked invalid.
pub fn run_episode(
    scenario: &Scenario,
    name: &str,
    planner: &dyn Planner,
    cfg: &SimConfig,
    seed: u64,
) -> Result<SimLog> {
    scenario.validate()?;
    cfg.validate()?;
    if planner.horizon() < cfg.replan_every {
        return Err(Error::validation("planner horizon shorter than the replan interval"));
    }
    let map = &scenario.map;
    let dt = dynamics::DEFAULT_DT;
    let dims = scenario.vehicle_dims;
    let ego_policy = EgoPolicy::new(
        cfg.ego.clone(),
        scenario.ego_init.position(),
        scenario.ego_route.clone(),
        cfg.limits,
        dims.length,
    )?;
    let states0: Vec<VehicleState> = scenario.agents().copied().collect();
    let n = states0.len();
    let mut roles = vec![Role::Ego];
    roles.extend(std::iter::repeat_n(Role::Sv, scenario.sv_inits.len()));
    roles.extend(std::iter::repeat_n(Role::NonAdversarial, scenario.nonadv_inits.len()));
    let svs: Vec<usize> = (1..=scenario.sv_inits.len()).collect();
    let nonadv_lanes: Vec<usize> = scenario
        .nonadv_inits
        .iter()
        .map(|s| map.nearest_lane(s.position(), s.theta).map_or(0, |(i, _)| i))
        .collect();
    let route_length = ego_policy.route_length();
    let goal = *ego_policy.route_polyline().last().expect("route");

    let mut histories: Vec<Vec<VehicleState>> = states0.iter().map(|s| vec![*s]).collect();
    let mut steps = Vec::with_capacity(cfg.steps + 1);
    let mut collisions = Vec::new();
    let mut active: Vec<(usize, usize)> = Vec::new();
    let mut record_collisions = |t: usize, states: &[VehicleState], collisions: &mut Vec<CollisionEvent>| {
        let now = collisions_at(states, &dims);
        for &(a, b, d) in &now {
            if !active.contains(&(a, b)) {
                collisions.push(CollisionEvent {
                    a,
                    b,
                    step: t,
                    time: t as f64 * dt,
                    penetration: d,
                });
            }
        }
        active = now.into_iter().map(|(a, b, _)| (a, b)).collect();
    };
    record_collisions(0, &states0, &mut collisions);
    let mut offroad = svs.iter().filter(|&&i| !map.contains(states0[i].position())).count();
    let mut plans: Vec<ActionTrajectory> = Vec::new();
    let mut plan_start = 0;
    let mut invalid_reason = None;
    let mut completion_step = None;
    let mut states = states0.clone();
    let near_goal = |s: &VehicleState| {
        (s.x - goal[0]).hypot(s.y - goal[1]) <= scenario.ego_route.completion_radius
    };
    if near_goal(&states[0]) {
        completion_step = Some(0);
    }

    let mut t = 0;
    while t < cfg.steps && completion_step.is_none() {
        if cfg.stop_mode == StopMode::StopOnEgoCollision && collisions.iter().any(|c| c.a == 0) {
            break;
        }
        if !svs.is_empty() && t % cfg.replan_every == 0 {
            let req = PlanRequest {
                map,
                histories: &histories,
                ego: 0,
                svs: &svs,
                dt,
                seed: mix_seed(seed, t as u64),
            };
            match planner.plan(&req) {
                Ok(p) if p.len() == svs.len() && p.iter().all(|x| x.len() >= cfg.replan_every) => {
                    plans = p;
                    plan_start = t;
                }
                Ok(_) => {
                    invalid_reason = Some(format!("planner returned malformed plans at step {t}"));
                    break;
                }
                Err(e) => {
                    invalid_reason = Some(format!("planning failed at step {t}: {e}"));
                    break;
                }
            }
        }
        let mut actions = vec![VehicleAction::default(); n];
        let others: Vec<VehicleState> = states[1..].to_vec();
        actions[0] = ego_step(&ego_policy, &states[0], &others);
        for (k, &i) in svs.iter().enumerate() {
            actions[i] = plans[k].actions[t - plan_start];
        }
        for (k, lane) in nonadv_lanes.iter().enumerate() {
            let i = 1 + svs.len() + k;
            let s = &states[i];
            let lookahead = (s.v * 1.0).max(6.0);
            actions[i] = VehicleAction::new(0.0, pure_pursuit(&map.lanes[*lane], s, lookahead));
        }
        let mut next = Vec::with_capacity(n);
        for i in 0..n {
            actions[i] = cfg.limits.clamp_for_execution(&states[i], actions[i], dt);
            next.push(dynamics::step(&states[i], &actions[i], dt)?);
        }
        steps.push(StepRecord {
            t,
            states: states.clone(),
            sv_actions: svs.iter().map(|&i| actions[i]).collect(),
        });
        states = next;
        t += 1;
        for (h, s) in histories.iter_mut().zip(&states) {
            h.push(*s);
        }
        record_collisions(t, &states, &mut collisions);
        offroad += svs.iter().filter(|&&i| !map.contains(states[i].position())).count();
        if near_goal(&states[0]) {
            completion_step = Some(t);
        }
    }
    steps.push(StepRecord {
        t,
        states: states.clone(),
        sv_actions: Vec::new(),
    });
    let route_progress = if completion_step.is_some() {
        route_length
    } else {
        ego_policy.progress(states[0].position()).min(route_length)
    };
    Ok(SimLog {
        summary: SimSummary {
            format: LOG_FORMAT.into(),
            version: LOG_VERSION,
            scenario: name.into(),
            map: map.name.clone(),
            seed,
            dt,
            roles,
            vehicle_dims: dims,
            route: ego_policy.route_polyline().to_vec(),
            route_length,
            route_progress,
            route_completed: completion_step.is_some(),
            completion_step,
            collisions,
            sv_offroad_steps: offroad,
            valid: invalid_reason.is_none(),
            invalid_reason,
        },
        steps,
    })
}

/// A named scenario, e.g. one file of a battery directory.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedScenario {
    pub name: String,
    pub scenario: Scenario,
}

/// Run every (scenario, seed) pair in parallel; output order is scenario-major.
pub fn run_battery(
    scenarios: &[NamedScenario],
    seeds: &[u64],
    planner: &dyn Planner,
    cfg: &SimConfig,
) -> Result<Vec<SimLog>> {
    let jobs: Vec<(usize, u64)> = (0..scenarios.len())
        .flat_map(|i| seeds.iter().map(move |&s| (i, s)))
        .collect();
    jobs.par_iter()
        .map(|&(i, s)| run_episode(&scenarios[i].scenario, &scenarios[i].name, planner, cfg, s))
        .collect()
}

fn place(lane: &Lane, s: f64, v: f64) -> VehicleState {
    let (p, h) = lane.pose_at(s);
    VehicleState::new(p[0], p[1], v, h)
}

/// Fixed battery of evaluation scenarios around the ego on the procedural maps.
///
/// The ego starts in the right lane at 8 m/s with a route longer than it can
/// cover in the default episode; SVs start ahead of or beside it.
pub fn scenario_battery(count: usize, seed: u64) -> Vec<NamedScenario> {
    let maps = data::standard_maps();
    let mut out = Vec::with_capacity(count);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..count {
        let map = maps[i % maps.len()].clone();
        let ego_lane = &map.lanes[0];
        let s_ego = rng.random_range(30.0..50.0);
        let ego = place(ego_lane, s_ego, 8.0);
        let waypoints: Vec<Point2> = [50.0, 100.0, 140.0]
            .iter()
            .map(|d| ego_lane.pose_at(s_ego + d).0)
            .collect();
        let adj = map.adjacent_lane(0, s_ego, 1.0);
        let n_sv = 1 + i % 3;
        let mut svs = Vec::with_capacity(n_sv);
        let offset = rng.random_range(0..4usize);
        for k in 0..n_sv {
            let slot = (offset + k) % 4;
            let sv = match (slot, adj) {
                (1, Some(l)) => {
                    let s = map.lanes[l].project(ego.position()).s;
                    place(&map.lanes[l], s + rng.random_range(5.0..12.0), rng.random_range(7.0..8.5))
                }
                (2, Some(l)) => {
                    let s = map.lanes[l].project(ego.position()).s;
                    place(&map.lanes[l], s - rng.random_range(8.0..14.0), rng.random_range(7.0..8.0))
                }
                (0, _) => place(ego_lane, s_ego + rng.random_range(15.0..22.0), rng.random_range(7.0..8.5)),
                (1, None) => place(ego_lane, s_ego + rng.random_range(28.0..34.0), rng.random_range(7.0..8.5)),
                (2, None) => place(ego_lane, s_ego + rng.random_range(40.0..46.0), rng.random_range(7.0..8.5)),
                _ => place(ego_lane, s_ego + rng.random_range(52.0..60.0), rng.random_range(7.0..8.5)),
            };
            svs.push(sv);
        }
        let nonadv = match adj {
            Some(l) if i % 2 == 1 => {
                let s = map.lanes[l].project(ego.position()).s;
                vec![place(&map.lanes[l], s + 35.0, 7.0)]
            }
            _ => Vec::new(),
        };
        let scenario = Scenario {
            map,
            ego_init: ego,
            sv_inits: svs,
            nonadv_inits: nonadv,
            ego_route: Route {
                waypoints,
                completion_radius: 3.0,
            },
            vehicle_dims: VehicleDims::default(),
        };
        out.push(NamedScenario {
            name: format!("s{i:02}-{}", scenario.map.name),
            scenario,
        });
    }
    out
}

/// Write scenarios as `<name>.json` files.
pub fn save_scenarios(dir: &Path, scenarios: &[NamedScenario]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in scenarios {
        let path = dir.join(format!("{}.json", s.name));
        std::fs::write(&path, serde_json::to_vec_pretty(&s.scenario)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Load every `*.json` scenario of a directory, sorted by file name.
pub fn load_scenarios(dir: &Path) -> Result<Vec<NamedScenario>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let scenario = Scenario::from_json(&text)?;
            let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok(NamedScenario { name, scenario })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn open_road() -> RoadMap {
        data::straight_map()
    }

    fn straight_scenario(svs: Vec<VehicleState>) -> Scenario {
        Scenario {
            map: open_road(),
            ego_init: VehicleState::new(0.0, -1.75, 8.0, 0.0),
            sv_inits: svs,
            nonadv_inits: vec![],
            ego_route: Route {
                waypoints: vec![[60.0, -1.75]],
                completion_radius: 2.0,
            },
            vehicle_dims: VehicleDims::default(),
        }
    }

    fn policy(params: EgoParams) -> EgoPolicy {
        EgoPolicy::new(
            params,
            [0.0, -1.75],
            Route {
                waypoints: vec![[200.0, -1.75]],
                completion_radius: 2.0,
            },
            ActionLimits::default(),
            4.0,
        )
        .unwrap()
    }

    #[test]
    fn ego_cruises_on_empty_road() {
        let p = policy(EgoParams::default());
        let a = ego_step(&p, &VehicleState::new(0.0, -1.75, 8.0, 0.0), &[]);
        assert_eq!(a.accel, 0.0);
        assert_abs_diff_eq!(a.yaw_rate, 0.0, epsilon = 1e-12);
        let a = ego_step(&p, &VehicleState::new(0.0, -2.75, 8.0, 0.0), &[]);
        assert!(a.yaw_rate > 0.0);
    }

    #[test]
    fn ego_brakes_fully_for_close_stopped_leader() {
        let p = policy(EgoParams::default());
        let leader = VehicleState::new(6.0, -1.75, 0.0, 0.0);
        let a = ego_step(&p, &VehicleState::new(0.0, -1.75, 8.0, 0.0), &[leader]);
        assert_eq!(a.accel, -ActionLimits::default().max_accel);
    }

    #[test]
    fn ego_matches_rule_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = EgoParams::default();
        let p = policy(params.clone());
        for _ in 0..200 {
            let ego = VehicleState::new(
                rng.random_range(0.0..50.0),
                rng.random_range(-3.0..0.0),
                rng.random_range(0.0..12.0),
                rng.random_range(-0.3..0.3),
            );
            let others: Vec<VehicleState> = (0..3)
                .map(|_| {
                    VehicleState::new(
                        ego.x + rng.random_range(-10.0..40.0),
                        ego.y + rng.random_range(-4.0..4.0),
                        rng.random_range(0.0..10.0),
                        0.0,
                    )
                })
                .collect();
            // steering: chase the point `lookahead` beyond the projection on the route
            let target_s = (ego.x + params.lookahead).clamp(0.0, 200.0);
            let (dx, dy) = (target_s - ego.x, -1.75 - ego.y);
            let alpha = world::wrap_angle(dy.atan2(dx) - ego.theta);
            let yaw = ego.v * 2.0 * alpha.sin() / dx.hypot(dy);
            let mut accel = params.speed_gain * (params.cruise_speed - ego.v);
            let mut best: Option<f64> = None;
            for o in &others {
                let fx = (o.x - ego.x) * ego.theta.cos() + (o.y - ego.y) * ego.theta.sin();
                let fy = -(o.x - ego.x) * ego.theta.sin() + (o.y - ego.y) * ego.theta.cos();
                if fx > 0.0 && fy.abs() < params.corridor {
                    let g = fx - 4.0;
                    best = Some(best.map_or(g, |b: f64| b.min(g)));
                }
            }
            if let Some(g) = best {
                accel = accel.min(params.brake_gain * (g - params.min_gap - params.headway * ego.v));
            }
            let expected = ActionLimits::default().clamp(VehicleAction::new(accel, yaw));
            let got = ego_step(&p, &ego, &others);
            assert_abs_diff_eq!(got.accel, expected.accel, epsilon = 1e-9);
            assert_abs_diff_eq!(got.yaw_rate, expected.yaw_rate, epsilon = 1e-9);
        }
    }

    #[test]
    fn collision_closed_cases() {
        let dims = VehicleDims::default();
        let s = VehicleState::new(1.0, 2.0, 0.0, 0.7);
        assert_abs_diff_eq!(check_collision(&s, &s, &dims).unwrap(), 1.8, epsilon = 1e-12);
        let diag = dims.length.hypot(dims.width);
        let far = VehicleState::new(1.0 + diag + 0.01, 2.0, 0.0, 2.0);
        assert!(check_collision(&s, &far, &dims).is_none());
    }

    fn corners(s: &VehicleState, dims: &VehicleDims) -> [Point2; 4] {
        let (sin, cos) = s.theta.sin_cos();
        let (l, w) = (dims.length / 2.0, dims.width / 2.0);
        [(l, w), (-l, w), (-l, -w), (l, -w)].map(|(a, b)| [s.x + a * cos - b * sin, s.y + a * sin + b * cos])
    }

    fn inside(s: &VehicleState, dims: &VehicleDims, p: Point2) -> bool {
        let (sin, cos) = s.theta.sin_cos();
        let (dx, dy) = (p[0] - s.x, p[1] - s.y);
        let u = cos * dx + sin * dy;
        let v = -sin * dx + cos * dy;
        u.abs() <= dims.length / 2.0 && v.abs() <= dims.width / 2.0
    }

    #[test]
    fn collision_agrees_with_boundary_sampling() {
        let dims = VehicleDims::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut disagreements = 0;
        for _ in 0..500 {
            let a = VehicleState::new(0.0, 0.0, 0.0, rng.random_range(-3.2..3.2));
            let b = VehicleState::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                0.0,
                rng.random_range(-3.2..3.2),
            );
            let mut oracle = false;
            for (x, y) in [(&a, &b), (&b, &a)] {
                let c = corners(x, &dims);
                for e in 0..4 {
                    let (p, q) = (c[e], c[(e + 1) % 4]);
                    for i in 0..2500 {
                        let u = i as f64 / 2500.0;
                        if inside(y, &dims, [p[0] + u * (q[0] - p[0]), p[1] + u * (q[1] - p[1])]) {
                            oracle = true;
                        }
                    }
                }
            }
            let sat = check_collision(&a, &b, &dims);
            if sat.is_some() != oracle {
                // sampling can only miss razor-thin overlaps
                assert!(sat.unwrap() < 1e-2);
                disagreements += 1;
            }
        }
        assert!(disagreements <= 2);
    }

    #[test]
    fn zero_svs_complete_straight_route() {
        let sc = straight_scenario(vec![]);
        let log = run_episode(&sc, "empty", &ConstantPlanner { horizon: 40 }, &SimConfig::default(), 1).unwrap();
        assert!(log.summary.valid);
        assert!(log.summary.route_completed);
        assert!(log.summary.collisions.is_empty());
        assert_eq!(log.summary.route_progress, log.summary.route_length);
    }

    #[test]
    fn frozen_blocker_hit_at_closed_form_time() {
        let sc = straight_scenario(vec![VehicleState::new(50.0, -1.75, 0.0, 0.0)]);
        let cfg = SimConfig {
            ego: EgoParams {
                brake_gain: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let log = run_episode(&sc, "blocker", &ConstantPlanner { horizon: 40 }, &cfg, 1).unwrap();
        let hit = log.first_ego_collision().expect("collision");
        // contact once the ego front reaches the blocker's rear: x = 50 - 4
        let contact = 46.0 / 8.0;
        assert!(hit.time >= contact && hit.time < contact + log.summary.dt + 1e-9);
        let states = &log.steps[hit.step].states;
        assert!(check_collision(&states[0], &states[1], &log.summary.vehicle_dims).is_some());
    }

    #[test]
    fn episode_invariants_hold() {
        let sc = straight_scenario(vec![VehicleState::new(20.0, 1.75, 9.0, 0.0)]);
        let cfg = SimConfig::default();
        let a = run_episode(&sc, "x", &ConstantPlanner { horizon: 40 }, &cfg, 5).unwrap();
        let b = run_episode(&sc, "x", &ConstantPlanner { horizon: 40 }, &cfg, 5).unwrap();
        assert_eq!(a, b);
        let vmax = a.steps.iter().flat_map(|s| &s.states).map(|s| s.v).fold(0.0, f64::max);
        let bound = (vmax + cfg.limits.max_accel * a.summary.dt) * a.summary.dt + 1e-9;
        for (i, w) in a.steps.windows(2).enumerate() {
            assert_eq!(w[0].t, i);
            assert_eq!(w[1].t, i + 1);
            for (p, q) in w[0].states.iter().zip(&w[1].states) {
                assert!((p.x - q.x).hypot(p.y - q.y) <= bound);
            }
        }
        let text = a.to_jsonl().unwrap();
        assert_eq!(SimLog::from_jsonl(&text).unwrap(), a);
    }

    struct Failing;

    impl Planner for Failing {
        fn plan(&self, _: &PlanRequest) -> Result<Vec<ActionTrajectory>> {
            Err(Error::Sampling {
                step: 3,
                reason: "test".into(),
            })
        }

        fn horizon(&self) -> usize {
            40
        }
    }

    #[test]
    fn planner_failure_marks_log_invalid() {
        let sc = straight_scenario(vec![VehicleState::new(20.0, 1.75, 9.0, 0.0)]);
        let log = run_episode(&sc, "bad", &Failing, &SimConfig::default(), 0).unwrap();
        assert!(!log.summary.valid);
        assert!(log.summary.invalid_reason.is_some());
    }

    #[test]
    fn battery_is_valid_and_reproducible() {
        let a = scenario_battery(20, 7);
        assert_eq!(a, scenario_battery(20, 7));
        for s in &a {
            s.scenario.validate_for_generation().unwrap();
            let ego = &s.scenario.ego_init;
            for sv in &s.scenario.sv_inits {
                assert!(check_collision(ego, sv, &s.scenario.vehicle_dims).is_none());
            }
        }
        let dir = tempfile::tempdir().unwrap();
        save_scenarios(dir.path(), &a).unwrap();
        assert_eq!(load_scenarios(dir.path()).unwrap(), a);
    }
}
