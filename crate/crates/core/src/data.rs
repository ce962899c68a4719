//! Synthetic driving corpus: procedural maps, scripted behaviors, storage and
//! training-window extraction.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{mix_seed, ActionStats, BatchSource, StateScales, TrainBatch};
use crate::dynamics::{self, ActionLimits, ActionTrajectory, StateTrajectory, VehicleAction, VehicleState};
use crate::error::{Error, Result};
use crate::world::{self, ContextConfig, Lane, Point2, RoadMap};

const LANE_WIDTH: f64 = 3.5;

fn arc(center: Point2, radius: f64, from: f64, to: f64, step_deg: f64) -> Vec<Point2> {
    let n = ((to - from).abs().to_degrees() / step_deg).ceil().max(1.0) as usize;
    (0..=n)
        .map(|i| {
            let a = from + (to - from) * i as f64 / n as f64;
            [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
        })
        .collect()
}

/// Straight two-lane road, both lanes eastbound.
pub fn straight_map() -> RoadMap {
    let (x0, x1) = (-20.0, 320.0);
    RoadMap::new(
        "straight",
        vec![[x0, -LANE_WIDTH], [x1, -LANE_WIDTH], [x1, LANE_WIDTH], [x0, LANE_WIDTH]],
        vec![
            Lane {
                centerline: vec![[x0 + 1.0, -LANE_WIDTH / 2.0], [x1 - 1.0, -LANE_WIDTH / 2.0]],
                speed: 10.0,
            },
            Lane {
                centerline: vec![[x0 + 1.0, LANE_WIDTH / 2.0], [x1 - 1.0, LANE_WIDTH / 2.0]],
                speed: 10.0,
            },
        ],
    )
    .expect("straight map is valid")
}

/// Two-lane road with a 90 degree left curve of radius 40 m.
pub fn curve_map() -> RoadMap {
    let r = 40.0;
    let c = [0.0, r];
    let (lead, tail) = (-100.0, 140.0);
    let mut poly = vec![[lead, -LANE_WIDTH]];
    poly.extend(arc(c, r + LANE_WIDTH, -FRAC_PI_2, 0.0, 5.0));
    poly.push([r + LANE_WIDTH, r + tail]);
    poly.push([r - LANE_WIDTH, r + tail]);
    poly.extend(arc(c, r - LANE_WIDTH, 0.0, -FRAC_PI_2, 5.0));
    poly.push([lead, LANE_WIDTH]);
    let lane = |offset: f64| {
        let rr = r - offset;
        let mut pts = vec![[lead + 1.0, offset]];
        pts.extend(arc(c, rr, -FRAC_PI_2, 0.0, 3.0));
        pts.push([rr, r + tail - 1.0]);
        Lane {
            centerline: pts,
            speed: 8.0,
        }
    };
    RoadMap::new("curve", poly, vec![lane(-LANE_WIDTH / 2.0), lane(LANE_WIDTH / 2.0)]).expect("curve map is valid")
}

/// Eastbound two-lane main road with a northbound branch and a left-turn lane.
pub fn t_junction_map() -> RoadMap {
    let (x0, x1) = (-120.0, 200.0);
    let (bx0, bx1, top) = (24.0, 36.0, 140.0);
    let poly = vec![
        [x0, -LANE_WIDTH],
        [x1, -LANE_WIDTH],
        [x1, LANE_WIDTH],
        [bx1, LANE_WIDTH],
        [bx1, top],
        [bx0, top],
        [bx0, LANE_WIDTH + 4.0],
        [bx0 - 4.0, LANE_WIDTH],
        [x0, LANE_WIDTH],
    ];
    let mid = (bx0 + bx1) / 2.0;
    let radius = 12.0;
    let y = LANE_WIDTH / 2.0;
    let mut turn = vec![[x0 + 1.0, y]];
    turn.extend(arc([mid - radius, y + radius], radius, -FRAC_PI_2, 0.0, 5.0));
    turn.push([mid, top - 1.0]);
    RoadMap::new(
        "t_junction",
        poly,
        vec![
            Lane {
                centerline: vec![[x0 + 1.0, -y], [x1 - 1.0, -y]],
                speed: 10.0,
            },
            Lane {
                centerline: vec![[x0 + 1.0, y], [x1 - 1.0, y]],
                speed: 10.0,
            },
            Lane {
                centerline: turn,
                speed: 7.0,
            },
        ],
    )
    .expect("junction map is valid")
}

/// The three procedural maps, in a fixed order.
pub fn standard_maps() -> Vec<RoadMap> {
    vec![straight_map(), curve_map(), t_junction_map()]
}

/// Resolve a comma-separated list of map names (`straight`, `curve`, `t_junction`, or `all`).
pub fn maps_from_spec(spec: &str) -> Result<Vec<RoadMap>> {
    let mut out = Vec::new();
    for name in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match name {
            "all" => out.extend(standard_maps()),
            "straight" => out.push(straight_map()),
            "curve" => out.push(curve_map()),
            "t_junction" => out.push(t_junction_map()),
            other => return Err(Error::validation(format!("unknown map '{other}'"))),
        }
    }
    if out.is_empty() {
        return Err(Error::validation("map spec selects no maps"));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorKind {
    LaneKeep,
    LaneChange,
    Accelerate,
    Brake,
    StopAndGo,
    CurveFollow,
}

/// Scripted reference behavior tracked by the data-generation controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BehaviorScript {
    pub kind: BehaviorKind,
    /// Nominal target speed (m/s).
    pub target_speed: f64,
    /// Half-width of the uniform per-agent jitter on the target speed (m/s).
    pub speed_jitter: f64,
    /// Speed change applied by accelerate / brake scripts (m/s).
    pub speed_delta: f64,
    /// Scale of the OU control noise (dimensionless; 1 = 1 m/s^2 and 0.05 rad/s).
    pub noise: f64,
}

impl BehaviorScript {
    pub fn new(kind: BehaviorKind, target_speed: f64) -> Self {
        Self {
            kind,
            target_speed,
            speed_jitter: 0.0,
            speed_delta: 0.0,
            noise: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target_speed > 0.0 && self.speed_jitter >= 0.0 && self.speed_jitter < self.target_speed) {
            return Err(Error::validation("script speeds must satisfy 0 <= jitter < target"));
        }
        if !(self.speed_delta >= 0.0 && self.noise >= 0.0) {
            return Err(Error::validation("script delta and noise must be non-negative"));
        }
        Ok(())
    }
}

pub fn default_scripts() -> Vec<BehaviorScript> {
    let s = |kind, target_speed, speed_delta| BehaviorScript {
        kind,
        target_speed,
        speed_jitter: 1.0,
        speed_delta,
        noise: 0.3,
    };
    vec![
        s(BehaviorKind::LaneKeep, 9.0, 0.0),
        s(BehaviorKind::LaneKeep, 7.0, 0.0),
        s(BehaviorKind::LaneChange, 9.0, 0.0),
        s(BehaviorKind::Accelerate, 6.0, 4.0),
        s(BehaviorKind::Brake, 10.0, 5.0),
        s(BehaviorKind::StopAndGo, 7.0, 0.0),
        s(BehaviorKind::CurveFollow, 9.0, 0.0),
    ]
}

/// Controller and sampling settings of the corpus generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub episodes: usize,
    /// Simulated steps per episode.
    pub steps: usize,
    pub dt: f64,
    pub min_agents: usize,
    pub max_agents: usize,
    pub speed_gain: f64,
    pub lookahead_time: f64,
    pub min_lookahead: f64,
    pub headway: f64,
    pub min_gap: f64,
    pub brake_gain: f64,
    /// Mean reversion rate of the OU noise (1/s).
    pub noise_reversion: f64,
    /// Lateral acceleration bound used by curve following (m/s^2).
    pub max_lateral_accel: f64,
    pub limits: ActionLimits,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            episodes: 2000,
            steps: 100,
            dt: dynamics::DEFAULT_DT,
            min_agents: 2,
            max_agents: 6,
            speed_gain: 1.0,
            lookahead_time: 1.0,
            min_lookahead: 6.0,
            headway: 1.2,
            min_gap: 4.0,
            brake_gain: 0.8,
            noise_reversion: 1.0,
            max_lateral_accel: 2.0,
            limits: ActionLimits::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::validation("need at least one episode"));
        }
        if self.steps == 0 || !(self.dt > 0.0) {
            return Err(Error::validation("episode steps and dt must be positive"));
        }
        if self.min_agents == 0 || self.min_agents > self.max_agents {
            return Err(Error::validation("need 1 <= min_agents <= max_agents"));
        }
        self.limits.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentRecord {
    pub behavior: BehaviorKind,
    pub states: StateTrajectory,
    pub actions: ActionTrajectory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// Index into [`Dataset::maps`].
    pub map: usize,
    pub agents: Vec<AgentRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetStats {
    pub actions: ActionStats,
    pub states: StateScales,
    /// Horizon the position and yaw scales refer to.
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dt: f64,
    pub maps: Vec<RoadMap>,
    pub episodes: Vec<Episode>,
    pub stats: DatasetStats,
    /// Episodes dropped because a script was infeasible on its map.
    pub skipped: usize,
}

struct Agent {
    state: VehicleState,
    lane: usize,
    target_lane: usize,
    script: BehaviorScript,
    speed: f64,
    event_time: f64,
    noise: [f64; 2],
}

fn speed_reference(agent: &Agent, t: f64) -> f64 {
    let sc = &agent.script;
    let after = t >= agent.event_time;
    match sc.kind {
        BehaviorKind::Accelerate if after => agent.speed + sc.speed_delta,
        BehaviorKind::Brake if after => (agent.speed - sc.speed_delta).max(0.0),
        BehaviorKind::StopAndGo if after && t < agent.event_time + 2.0 => 0.0,
        _ => agent.speed,
    }
}

/// Pure-pursuit yaw rate toward a lookahead point on `lane`.
pub fn pure_pursuit(lane: &Lane, s: &VehicleState, lookahead: f64) -> f64 {
    let proj = lane.project(s.position());
    let (p, _) = lane.pose_at(proj.s + lookahead);
    let d = [p[0] - s.x, p[1] - s.y];
    let dist = d[0].hypot(d[1]);
    if dist < 1e-6 {
        return 0.0;
    }
    let alpha = world::wrap_angle(d[1].atan2(d[0]) - s.theta);
    s.v * 2.0 * alpha.sin() / dist
}

/// Distance gap to the nearest vehicle ahead within a lateral corridor.
pub fn leader_gap(s: &VehicleState, others: &[VehicleState], corridor: f64, length: f64) -> Option<f64> {
    let (sin, cos) = s.theta.sin_cos();
    others
        .iter()
        .filter_map(|o| {
            let dx = o.x - s.x;
            let dy = o.y - s.y;
            let ahead = cos * dx + sin * dy;
            let lateral = -sin * dx + cos * dy;
            (ahead > 0.0 && lateral.abs() < corridor).then_some(ahead - length)
        })
        .min_by(f64::total_cmp)
}

fn simulate_episode(
    map: &RoadMap,
    map_index: usize,
    scripts: &[BehaviorScript],
    cfg: &DatasetConfig,
    seed: u64,
) -> Option<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_agents = rng.random_range(cfg.min_agents..=cfg.max_agents);
    let travel = 14.0 * cfg.steps as f64 * cfg.dt;
    let mut agents: Vec<Agent> = Vec::with_capacity(n_agents);
    for _ in 0..n_agents {
        let script = scripts[rng.random_range(0..scripts.len())].clone();
        let lane_idx = rng.random_range(0..map.lanes.len());
        let lane = &map.lanes[lane_idx];
        let room = lane.length() - travel - 5.0;
        if room <= 5.0 {
            continue;
        }
        let mut placed = None;
        for _ in 0..20 {
            let s = rng.random_range(5.0..room);
            let (p, h) = lane.pose_at(s);
            let lat = rng.random_range(-0.3..0.3);
            let pos = [p[0] - lat * h.sin(), p[1] + lat * h.cos()];
            let clear = agents
                .iter()
                .all(|a| (a.state.x - pos[0]).hypot(a.state.y - pos[1]) > 12.0);
            if clear {
                placed = Some((pos, h));
                break;
            }
        }
        let Some((pos, heading)) = placed else {
            continue;
        };
        let jitter = if script.speed_jitter > 0.0 {
            rng.random_range(-script.speed_jitter..script.speed_jitter)
        } else {
            0.0
        };
        let speed = script.target_speed + jitter;
        let v0 = (speed + rng.random_range(-0.5..0.5)).max(0.0);
        let horizon_time = cfg.steps as f64 * cfg.dt;
        let event_time = rng.random_range(0.25 * horizon_time..0.75 * horizon_time);
        let mut target_lane = lane_idx;
        if script.kind == BehaviorKind::LaneChange {
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let s_now = lane.project(pos).s;
            let adjacent = map
                .adjacent_lane(lane_idx, s_now, side)
                .or_else(|| map.adjacent_lane(lane_idx, s_now, -side));
            match adjacent {
                Some(l) => target_lane = l,
                None => {
                    log::warn!(
                        "lane change infeasible on map '{}' lane {lane_idx}; episode skipped",
                        map.name
                    );
                    return None;
                }
            }
        }
        agents.push(Agent {
            state: VehicleState::new(pos[0], pos[1], v0, heading),
            lane: lane_idx,
            target_lane,
            script,
            speed,
            event_time,
            noise: [0.0; 2],
        });
    }
    if agents.len() < cfg.min_agents {
        return None;
    }

    let n = agents.len();
    let mut states: Vec<Vec<VehicleState>> = agents.iter().map(|a| vec![a.state]).collect();
    let mut actions: Vec<Vec<VehicleAction>> = vec![Vec::with_capacity(cfg.steps); n];
    let dt = cfg.dt;
    let rev = (-cfg.noise_reversion * dt).exp();
    let diff = (1.0 - rev * rev).sqrt();
    for step in 0..cfg.steps {
        let t = step as f64 * dt;
        let snapshot: Vec<VehicleState> = agents.iter().map(|a| a.state).collect();
        for (i, agent) in agents.iter_mut().enumerate() {
            let s = agent.state;
            let lane_idx = if t >= agent.event_time { agent.target_lane } else { agent.lane };
            let lane = &map.lanes[lane_idx];
            let lookahead = (cfg.lookahead_time * s.v).max(cfg.min_lookahead);
            let yaw = pure_pursuit(lane, &s, lookahead);

            let mut v_ref = speed_reference(agent, t);
            if agent.script.kind == BehaviorKind::CurveFollow {
                let proj = lane.project(s.position());
                let kappa = (0..4)
                    .map(|j| lane.curvature_at(proj.s + 5.0 * j as f64).abs())
                    .fold(0.0, f64::max);
                if kappa > 1e-6 {
                    v_ref = v_ref.min((cfg.max_lateral_accel / kappa).sqrt());
                }
            }
            let mut accel = cfg.speed_gain * (v_ref - s.v);
            let others: Vec<VehicleState> = snapshot
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, o)| *o)
                .collect();
            if let Some(gap) = leader_gap(&s, &others, 2.0, 4.0) {
                accel = accel.min(cfg.brake_gain * (gap - (cfg.min_gap + cfg.headway * s.v)));
            }
            let sigma = agent.script.noise;
            for (c, scale) in [1.0, 0.05].into_iter().enumerate() {
                let z: f64 = rng.sample(StandardNormal);
                agent.noise[c] = rev * agent.noise[c] + diff * sigma * scale * z;
            }
            let raw = VehicleAction::new(accel + agent.noise[0], yaw + agent.noise[1]);
            let a = cfg.limits.clamp_for_execution(&s, raw, dt);
            let next = dynamics::step(&s, &a, dt).ok()?;
            agent.state = next;
            states[i].push(next);
            actions[i].push(a);
        }
    }
    let agents = agents
        .iter()
        .zip(states)
        .zip(actions)
        .map(|((a, s), act)| AgentRecord {
            behavior: a.script.kind,
            states: StateTrajectory { states: s },
            actions: ActionTrajectory { actions: act, dt },
        })
        .collect();
    Some(Episode { map: map_index, agents })
}

/// Exact normalization statistics of a set of episodes.
pub fn compute_stats(episodes: &[Episode], horizon: usize, dt: f64) -> Result<DatasetStats> {
    let mut n_a = 0usize;
    let mut sum_a = [0.0; 2];
    for ep in episodes {
        for ag in &ep.agents {
            for a in &ag.actions.actions {
                sum_a[0] += a.accel;
                sum_a[1] += a.yaw_rate;
                n_a += 1;
            }
        }
    }
    if n_a == 0 {
        return Err(Error::Dataset("no recorded actions".into()));
    }
    let mean = [sum_a[0] / n_a as f64, sum_a[1] / n_a as f64];
    let mut var = [0.0; 2];
    let mut n_s = 0usize;
    let (mut sum_v, mut sum_v2) = (0.0, 0.0);
    for ep in episodes {
        for ag in &ep.agents {
            for a in &ag.actions.actions {
                var[0] += (a.accel - mean[0]).powi(2);
                var[1] += (a.yaw_rate - mean[1]).powi(2);
            }
            for v in ag.states.speeds() {
                sum_v += v;
                sum_v2 += v * v;
                n_s += 1;
            }
        }
    }
    let std = [
        (var[0] / n_a as f64).sqrt().max(1e-6),
        (var[1] / n_a as f64).sqrt().max(1e-6),
    ];
    let speed_mean = sum_v / n_s as f64;
    let mut var_v = 0.0;
    for ep in episodes {
        for ag in &ep.agents {
            for v in ag.states.speeds() {
                var_v += (v - speed_mean).powi(2);
            }
        }
    }
    let span = horizon as f64 * dt;
    let rms_speed = (sum_v2 / n_s as f64).sqrt();
    Ok(DatasetStats {
        actions: ActionStats { mean, std },
        states: StateScales {
            position: (rms_speed * span).max(1.0),
            speed_mean,
            speed_std: (var_v / n_s as f64).sqrt().max(1e-3),
            yaw: (std[1] * span).max(0.05),
        },
        horizon,
    })
}

/// Generate a corpus. Deterministic for a given seed, independent of thread count.
pub fn generate_dataset(
    maps: &[RoadMap],
    scripts: &[BehaviorScript],
    cfg: &DatasetConfig,
    horizon: usize,
    seed: u64,
) -> Result<Dataset> {
    cfg.validate()?;
    if maps.is_empty() || scripts.is_empty() {
        return Err(Error::validation("need at least one map and one script"));
    }
    for s in scripts {
        s.validate()?;
    }
    let results: Vec<Option<Episode>> = (0..cfg.episodes)
        .into_par_iter()
        .map(|i| {
            let m = i % maps.len();
            simulate_episode(&maps[m], m, scripts, cfg, mix_seed(seed, i as u64))
        })
        .collect();
    let skipped = results.iter().filter(|r| r.is_none()).count();
    let episodes: Vec<Episode> = results.into_iter().flatten().collect();
    if skipped > 0 {
        log::warn!("{skipped} of {} episodes skipped", cfg.episodes);
    }
    if episodes.is_empty() {
        return Err(Error::Dataset("every episode was infeasible".into()));
    }
    let stats = compute_stats(&episodes, horizon, cfg.dt)?;
    Ok(Dataset {
        dt: cfg.dt,
        maps: maps.to_vec(),
        episodes,
        stats,
        skipped,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    dt: f64,
    stats: DatasetStats,
    episodes: usize,
    skipped: usize,
    maps: Vec<String>,
    /// SHA-256 of every other file in the directory.
    checksums: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeLine {
    index: usize,
    agents: Vec<AgentLine>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentLine {
    behavior: BehaviorKind,
    /// Offset into the trajectory blob, in f64 values.
    offset: usize,
    steps: usize,
}

const DATASET_FORMAT: &str = "critgen-dataset";
const DATASET_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MAPS_FILE: &str = "maps.json";
pub const BLOB_FILE: &str = "trajectories.bin";

fn episodes_file(map: &str) -> String {
    format!("episodes-{map}.jsonl")
}

/// Lower-case hex SHA-256 digest.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Dataset {
    /// Write the dataset to `dir` (created if missing).
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob: Vec<u8> = Vec::new();
        let mut lines: Vec<String> = vec![String::new(); self.maps.len()];
        let mut offset = 0usize;
        for (index, ep) in self.episodes.iter().enumerate() {
            let mut agents = Vec::with_capacity(ep.agents.len());
            for ag in &ep.agents {
                for s in &ag.states.states {
                    for v in s.to_array() {
                        blob.extend_from_slice(&v.to_le_bytes());
                    }
                }
                for a in &ag.actions.actions {
                    blob.extend_from_slice(&a.accel.to_le_bytes());
                    blob.extend_from_slice(&a.yaw_rate.to_le_bytes());
                }
                let steps = ag.actions.len();
                agents.push(AgentLine {
                    behavior: ag.behavior,
                    offset,
                    steps,
                });
                offset += 4 * (steps + 1) + 2 * steps;
            }
            let line = serde_json::to_string(&EpisodeLine { index, agents })?;
            lines[ep.map].push_str(&line);
            lines[ep.map].push('\n');
        }
        let mut files: Vec<(String, Vec<u8>)> = vec![
            (MAPS_FILE.into(), serde_json::to_vec_pretty(&self.maps)?),
            (BLOB_FILE.into(), blob),
        ];
        for (m, text) in self.maps.iter().zip(lines) {
            files.push((episodes_file(&m.name), text.into_bytes()));
        }
        let mut checksums = BTreeMap::new();
        for (name, bytes) in &files {
            checksums.insert(name.clone(), sha256_hex(bytes));
            let path = dir.join(name);
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        let manifest = Manifest {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            dt: self.dt,
            stats: self.stats.clone(),
            episodes: self.episodes.len(),
            skipped: self.skipped,
            maps: self.maps.iter().map(|m| m.name.clone()).collect(),
            checksums,
        };
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    /// Load and verify a dataset directory written by [`Dataset::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let path = dir.join(name);
            std::fs::read(&path).map_err(|e| Error::io(&path, e))
        };
        let manifest: Manifest = serde_json::from_slice(&read(MANIFEST_FILE)?)
            .map_err(|e| Error::Dataset(format!("bad manifest: {e}")))?;
        if manifest.format != DATASET_FORMAT || manifest.version != DATASET_VERSION {
            return Err(Error::Dataset(format!(
                "unsupported dataset format {} v{}",
                manifest.format, manifest.version
            )));
        }
        let mut contents = BTreeMap::new();
        for (name, sum) in &manifest.checksums {
            let bytes = read(name)?;
            if &sha256_hex(&bytes) != sum {
                return Err(Error::Dataset(format!("checksum mismatch for {name}")));
            }
            contents.insert(name.clone(), bytes);
        }
        let take = |name: &str| {
            contents
                .get(name)
                .ok_or_else(|| Error::Dataset(format!("manifest does not list {name}")))
        };
        let maps: Vec<RoadMap> = serde_json::from_slice(take(MAPS_FILE)?)?;
        if maps.iter().map(|m| &m.name).ne(manifest.maps.iter()) {
            return Err(Error::Dataset("map list differs from manifest".into()));
        }
        let blob = take(BLOB_FILE)?;
        if blob.len() % 8 != 0 {
            return Err(Error::Dataset("trajectory blob is not a whole number of f64".into()));
        }
        let values: Vec<f64> = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let dt = manifest.dt;
        let mut slots: Vec<Option<Episode>> = (0..manifest.episodes).map(|_| None).collect();
        for (m, map) in maps.iter().enumerate() {
            let text = std::str::from_utf8(take(&episodes_file(&map.name))?)
                .map_err(|e| Error::Dataset(e.to_string()))?;
            for line in text.lines() {
                let rec: EpisodeLine = serde_json::from_str(line)?;
                let mut agents = Vec::with_capacity(rec.agents.len());
                for ag in rec.agents {
                    let ns = 4 * (ag.steps + 1);
                    let end = ag.offset + ns + 2 * ag.steps;
                    let Some(chunk) = values.get(ag.offset..end) else {
                        return Err(Error::Dataset(format!("episode {} points past the blob", rec.index)));
                    };
                    let states = chunk[..ns]
                        .chunks_exact(4)
                        .map(|c| VehicleState::new(c[0], c[1], c[2], c[3]))
                        .collect();
                    let actions = chunk[ns..]
                        .chunks_exact(2)
                        .map(|c| VehicleAction::new(c[0], c[1]))
                        .collect();
                    agents.push(AgentRecord {
                        behavior: ag.behavior,
                        states: StateTrajectory { states },
                        actions: ActionTrajectory { actions, dt },
                    });
                }
                match slots.get_mut(rec.index) {
                    Some(slot @ None) => *slot = Some(Episode { map: m, agents }),
                    _ => return Err(Error::Dataset(format!("duplicate or out-of-range episode {}", rec.index))),
                }
            }
        }
        let episodes: Vec<Episode> = slots
            .into_iter()
            .enumerate()
            .map(|(i, e)| e.ok_or_else(|| Error::Dataset(format!("episode {i} missing"))))
            .collect::<Result<_>>()?;
        let ds = Dataset {
            dt,
            maps,
            episodes,
            stats: manifest.stats,
            skipped: manifest.skipped,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Check that every recorded transition satisfies the dynamics exactly.
    pub fn validate(&self) -> Result<()> {
        for (i, ep) in self.episodes.iter().enumerate() {
            if ep.map >= self.maps.len() {
                return Err(Error::Dataset(format!("episode {i} references unknown map")));
            }
            for ag in &ep.agents {
                if ag.states.len() != ag.actions.len() + 1 {
                    return Err(Error::Dataset(format!("episode {i}: state/action counts differ")));
                }
                for (t, a) in ag.actions.actions.iter().enumerate() {
                    let next = dynamics::step(&ag.states.states[t], a, self.dt)?;
                    if next != ag.states.states[t + 1] {
                        return Err(Error::Dataset(format!("episode {i} step {t} violates the dynamics")));
                    }
                }
            }
        }
        Ok(())
    }

    /// All recorded state trajectories, in episode order.
    pub fn trajectories(&self) -> impl Iterator<Item = &StateTrajectory> {
        self.episodes.iter().flat_map(|e| e.agents.iter().map(|a| &a.states))
    }
}

/// Location of a training window: episode, agent, and anchor step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Anchor {
    pub episode: usize,
    pub agent: usize,
    /// Index of the window's initial state.
    pub t0: usize,
}

/// Lazily extracts training windows from a dataset.
///
/// A window at anchor `t0` uses the states `t0 - H + 1 ..= t0` of every agent
/// of the episode as context and the actions `t0 .. t0 + T` as target.
pub struct WindowSampler<'a> {
    ds: &'a Dataset,
    anchors: Vec<Anchor>,
    context: ContextConfig,
    horizon: usize,
}

impl<'a> WindowSampler<'a> {
    /// `target` restricts windows to agents with one behavior; `None` keeps all.
    pub fn new(
        ds: &'a Dataset,
        target: Option<BehaviorKind>,
        context: ContextConfig,
        horizon: usize,
    ) -> Result<Self> {
        context.validate()?;
        let h = context.history;
        let mut anchors = Vec::new();
        for (e, ep) in ds.episodes.iter().enumerate() {
            for (a, ag) in ep.agents.iter().enumerate() {
                if target.is_some_and(|b| b != ag.behavior) {
                    continue;
                }
                let n_states = ag.states.len();
                if n_states < h + horizon {
                    continue;
                }
                for t0 in h - 1..=n_states - 1 - horizon {
                    anchors.push(Anchor { episode: e, agent: a, t0 });
                }
            }
        }
        if anchors.is_empty() {
            return Err(Error::Dataset(format!(
                "no episode is long enough for {h} history and {horizon} future steps"
            )));
        }
        Ok(Self {
            ds,
            anchors,
            context,
            horizon,
        })
    }

    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }

    /// Build the batch for a list of anchors.
    pub fn batch(&self, anchors: &[Anchor]) -> Result<TrainBatch> {
        let t = self.horizon;
        let h = self.context.history;
        let stats = &self.ds.stats.actions;
        let mut actions = Array2::zeros((anchors.len(), 2 * t));
        let mut context = Array2::zeros((anchors.len(), self.context.dim()));
        let mut s0 = Vec::with_capacity(anchors.len());
        for (row, an) in anchors.iter().enumerate() {
            let ep = &self.ds.episodes[an.episode];
            let ag = &ep.agents[an.agent];
            let window = ActionTrajectory {
                actions: ag.actions.actions[an.t0..an.t0 + t].to_vec(),
                dt: ag.actions.dt,
            };
            for (j, v) in stats.normalize(&window).into_iter().enumerate() {
                actions[[row, j]] = v;
            }
            s0.push(ag.states.states[an.t0]);
            let histories: Vec<Vec<VehicleState>> = ep
                .agents
                .iter()
                .map(|a| a.states.states[an.t0 + 1 - h..=an.t0].to_vec())
                .collect();
            let feats = world::encode_context(&self.ds.maps[ep.map], &histories, an.agent, self.context)?;
            for (j, v) in feats.values.into_iter().enumerate() {
                context[[row, j]] = v;
            }
        }
        Ok(TrainBatch { actions, s0, context })
    }

    /// Deterministically shuffled anchor order for one pass.
    pub fn shuffled(&self, seed: u64) -> Vec<Anchor> {
        let mut order = self.anchors.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order
    }

    /// One shuffled pass as batches; the final batch may be smaller.
    pub fn batches(&self, batch_size: usize, seed: u64) -> impl Iterator<Item = Result<TrainBatch>> + '_ {
        let order = self.shuffled(seed);
        let size = batch_size.max(1);
        (0..order.len().div_ceil(size)).map(move |b| {
            let end = ((b + 1) * size).min(order.len());
            self.batch(&order[b * size..end])
        })
    }
}

impl BatchSource for WindowSampler<'_> {
    fn epoch<'b>(
        &'b self,
        _epoch: usize,
        batch_size: usize,
        seed: u64,
    ) -> Result<Box<dyn Iterator<Item = Result<TrainBatch>> + 'b>> {
        Ok(Box::new(self.batches(batch_size, seed)))
    }
}

/// Eagerly build every batch of one shuffled pass.
pub fn make_batches(
    ds: &Dataset,
    target: Option<BehaviorKind>,
    context: ContextConfig,
    horizon: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<TrainBatch>> {
    WindowSampler::new(ds, target, context, horizon)?
        .batches(batch_size, seed)
        .collect()
}
