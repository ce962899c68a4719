//! Road geometry, region-of-interest density and agent-centric context features.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::dynamics::VehicleState;
use crate::error::{Error, Result};

pub type Point2 = [f64; 2];

/// Fixed scale applied to positional features so the denoiser sees O(1) inputs.
pub const FEATURE_POS_SCALE: f64 = 10.0;
/// Fixed scale applied to speed features.
pub const FEATURE_SPEED_SCALE: f64 = 10.0;
/// Arc-length offsets (m) ahead of the target at which lane curvature is sampled.
pub const CURVATURE_LOOKAHEADS: [f64; 3] = [10.0, 20.0, 30.0];
const LANE_FEATURES: usize = 4 + CURVATURE_LOOKAHEADS.len();

fn sub(a: Point2, b: Point2) -> Point2 {
    [a[0] - b[0], a[1] - b[1]]
}

fn dot(a: Point2, b: Point2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn cross(a: Point2, b: Point2) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

fn norm(a: Point2) -> f64 {
    a[0].hypot(a[1])
}

/// Wrap an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Closest point on segment `[a, b]` to `p`, with its segment parameter.
fn closest_on_segment(p: Point2, a: Point2, b: Point2) -> (Point2, f64) {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    let u = if len2 > 0.0 {
        (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ([a[0] + u * ab[0], a[1] + u * ab[1]], u)
}

fn segments_intersect(p1: Point2, p2: Point2, q1: Point2, q2: Point2) -> bool {
    let d1 = cross(sub(q2, q1), sub(p1, q1));
    let d2 = cross(sub(q2, q1), sub(p2, q1));
    let d3 = cross(sub(p2, p1), sub(q1, p1));
    let d4 = cross(sub(p2, p1), sub(q2, p1));
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    let on = |a: Point2, b: Point2, c: Point2, d: f64| {
        d == 0.0
            && c[0] >= a[0].min(b[0])
            && c[0] <= a[0].max(b[0])
            && c[1] >= a[1].min(b[1])
            && c[1] <= a[1].max(b[1])
    };
    on(q1, q2, p1, d1) || on(q1, q2, p2, d2) || on(p1, p2, q1, d3) || on(p1, p2, q2, d4)
}

/// A lane centerline with its nominal speed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lane {
    pub centerline: Vec<Point2>,
    /// Nominal speed (m/s).
    pub speed: f64,
}

/// Projection of a point onto a lane centerline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneProjection {
    /// Arc length along the centerline (m).
    pub s: f64,
    /// Signed lateral offset, positive to the left of the direction of travel (m).
    pub offset: f64,
    /// Centerline heading at the projection (rad).
    pub heading: f64,
    pub point: Point2,
}

impl Lane {
    fn cumulative(&self) -> Vec<f64> {
        let mut acc = Vec::with_capacity(self.centerline.len());
        let mut s = 0.0;
        acc.push(0.0);
        for w in self.centerline.windows(2) {
            s += norm(sub(w[1], w[0]));
            acc.push(s);
        }
        acc
    }

    pub fn length(&self) -> f64 {
        self.centerline
            .windows(2)
            .map(|w| norm(sub(w[1], w[0])))
            .sum()
    }

    fn segment_heading(&self, i: usize) -> f64 {
        let d = sub(self.centerline[i + 1], self.centerline[i]);
        d[1].atan2(d[0])
    }

    pub fn project(&self, p: Point2) -> LaneProjection {
        let cum = self.cumulative();
        let mut best = (f64::INFINITY, 0usize, 0.0, [0.0, 0.0]);
        for i in 0..self.centerline.len() - 1 {
            let (q, u) = closest_on_segment(p, self.centerline[i], self.centerline[i + 1]);
            let d = norm(sub(p, q));
            if d < best.0 {
                best = (d, i, u, q);
            }
        }
        let (_, i, u, q) = best;
        let seg_len = cum[i + 1] - cum[i];
        let heading = self.segment_heading(i);
        let dir = [heading.cos(), heading.sin()];
        LaneProjection {
            s: cum[i] + u * seg_len,
            offset: cross(dir, sub(p, q)),
            heading,
            point: q,
        }
    }

    /// Point and heading at arc length `s` (clamped to the lane extent).
    pub fn pose_at(&self, s: f64) -> (Point2, f64) {
        let cum = self.cumulative();
        let total = *cum.last().unwrap();
        let s = s.clamp(0.0, total);
        let mut i = 0;
        while i + 2 < self.centerline.len() && cum[i + 1] < s {
            i += 1;
        }
        let seg = cum[i + 1] - cum[i];
        let u = if seg > 0.0 { (s - cum[i]) / seg } else { 0.0 };
        let a = self.centerline[i];
        let b = self.centerline[i + 1];
        (
            [a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])],
            self.segment_heading(i),
        )
    }

    /// Heading change per metre around arc length `s`, over a 5 m baseline.
    pub fn curvature_at(&self, s: f64) -> f64 {
        const BASE: f64 = 5.0;
        let (_, h0) = self.pose_at(s - BASE / 2.0);
        let (_, h1) = self.pose_at(s + BASE / 2.0);
        wrap_angle(h1 - h0) / BASE
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRoadMap {
    name: String,
    drivable_area: Vec<Point2>,
    lanes: Vec<Lane>,
}

/// Vector road map: a simple counterclockwise drivable polygon plus lanes.
///
/// Immutable after construction; all queries are read-only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRoadMap")]
pub struct RoadMap {
    pub name: String,
    pub drivable_area: Vec<Point2>,
    pub lanes: Vec<Lane>,
}

impl TryFrom<RawRoadMap> for RoadMap {
    type Error = Error;

    fn try_from(raw: RawRoadMap) -> Result<Self> {
        RoadMap::new(raw.name, raw.drivable_area, raw.lanes)
    }
}

impl RoadMap {
    pub fn new(name: impl Into<String>, drivable_area: Vec<Point2>, lanes: Vec<Lane>) -> Result<Self> {
        let map = Self {
            name: name.into(),
            drivable_area,
            lanes,
        };
        map.validate()?;
        Ok(map)
    }

    fn validate(&self) -> Result<()> {
        let poly = &self.drivable_area;
        let n = poly.len();
        if n < 3 {
            return Err(Error::validation("drivable area needs at least 3 vertices"));
        }
        if poly.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::validation("drivable area has non-finite vertices"));
        }
        for i in 0..n {
            for j in i + 1..n {
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                if adjacent {
                    continue;
                }
                if segments_intersect(poly[i], poly[(i + 1) % n], poly[j], poly[(j + 1) % n]) {
                    return Err(Error::validation(format!(
                        "drivable area of '{}' self-intersects (edges {i} and {j})",
                        self.name
                    )));
                }
            }
        }
        if self.signed_area() <= 0.0 {
            return Err(Error::validation("drivable area must be counterclockwise with positive area"));
        }
        for (li, lane) in self.lanes.iter().enumerate() {
            if lane.centerline.len() < 2 || lane.length() <= 0.0 {
                return Err(Error::validation(format!("lane {li} needs two distinct points")));
            }
            if !(lane.speed > 0.0) {
                return Err(Error::validation(format!("lane {li} needs a positive speed")));
            }
            // Check vertices and segment midpoints.
            let samples = lane
                .centerline
                .windows(2)
                .flat_map(|w| [w[0], [(w[0][0] + w[1][0]) / 2.0, (w[0][1] + w[1][1]) / 2.0], w[1]]);
            for p in samples {
                if self.signed_boundary_distance(p) < 0.0 {
                    return Err(Error::validation(format!(
                        "lane {li} leaves the drivable area at {p:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn signed_area(&self) -> f64 {
        let p = &self.drivable_area;
        let n = p.len();
        (0..n).map(|i| cross(p[i], p[(i + 1) % n])).sum::<f64>() / 2.0
    }

    fn edges(&self) -> impl Iterator<Item = (Point2, Point2)> + '_ {
        let n = self.drivable_area.len();
        (0..n).map(move |i| (self.drivable_area[i], self.drivable_area[(i + 1) % n]))
    }

    /// Even-odd containment test (strict interior, boundary handled by distance).
    pub fn contains(&self, p: Point2) -> bool {
        let mut inside = false;
        for (a, b) in self.edges() {
            if (a[1] > p[1]) != (b[1] > p[1]) {
                let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
                if p[0] < x {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Signed distance to the road boundary: positive inside, negative outside.
    pub fn signed_boundary_distance(&self, p: Point2) -> f64 {
        self.signed_boundary_distance_and_gradient(p).0
    }

    /// Signed distance and its gradient with respect to `p`.
    ///
    /// The gradient is the unit vector from the nearest boundary point towards
    /// `p`, flipped outside. On the boundary the inward edge normal is used.
    pub fn signed_boundary_distance_and_gradient(&self, p: Point2) -> (f64, Point2) {
        let mut best = (f64::INFINITY, [0.0, 0.0], [0.0, 0.0]);
        for (a, b) in self.edges() {
            let (q, _) = closest_on_segment(p, a, b);
            let d = norm(sub(p, q));
            if d < best.0 {
                best = (d, q, sub(b, a));
            }
        }
        let (d, q, edge) = best;
        if d == 0.0 {
            let l = norm(edge);
            // CCW polygon: interior lies to the left of each edge.
            return (0.0, [-edge[1] / l, edge[0] / l]);
        }
        let sign = if self.contains(p) { 1.0 } else { -1.0 };
        let dir = sub(p, q);
        (sign * d, [sign * dir[0] / d, sign * dir[1] / d])
    }

    /// Lane best matching a pose, scoring lateral distance plus a heading penalty.
    pub fn nearest_lane(&self, p: Point2, heading: f64) -> Option<(usize, LaneProjection)> {
        self.lanes
            .iter()
            .enumerate()
            .map(|(i, lane)| {
                let proj = lane.project(p);
                let along = norm(sub(p, proj.point));
                let score = along + 5.0 * wrap_angle(heading - proj.heading).abs();
                (score, i, proj)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|(_, i, proj)| (i, proj))
    }

    /// Index of a lane running alongside `lane` at arc length `s`, on the given
    /// side (`+1` left, `-1` right), between 2.5 and 4.5 m away and within 20
    /// degrees of heading.
    pub fn adjacent_lane(&self, lane: usize, s: f64, side: f64) -> Option<usize> {
        let (p, h) = self.lanes[lane].pose_at(s);
        self.lanes
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != lane)
            .find(|(_, other)| {
                let proj = other.project(p);
                let lateral = -proj.offset;
                let dist = norm(sub(p, proj.point));
                lateral * side > 0.0
                    && (2.5..=4.5).contains(&dist)
                    && wrap_angle(proj.heading - h).abs() < 20f64.to_radians()
            })
            .map(|(i, _)| i)
    }
}

/// Logistic function.
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn validate_roi(radius: f64, sharpness: f64) -> Result<()> {
    if !(radius > 0.0 && sharpness > 0.0) {
        return Err(Error::validation("roi radius and sharpness must be positive"));
    }
    Ok(())
}

/// Smoothed vehicle density inside a circle around the ego (vehicles per m^2).
///
/// Membership of each vehicle is `logistic((radius - dist) * sharpness)`.
pub fn roi_density(ego: Point2, svs: &[Point2], radius: f64, sharpness: f64) -> Result<f64> {
    Ok(roi_density_and_gradient(ego, svs, radius, sharpness)?.0)
}

/// Density and its gradient with respect to each vehicle position.
pub fn roi_density_and_gradient(
    ego: Point2,
    svs: &[Point2],
    radius: f64,
    sharpness: f64,
) -> Result<(f64, Vec<Point2>)> {
    validate_roi(radius, sharpness)?;
    let area = PI * radius * radius;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(svs.len());
    for &p in svs {
        let d = sub(p, ego);
        let dist = norm(d);
        let m = logistic((radius - dist) * sharpness);
        total += m;
        if dist > 0.0 {
            let dm = -m * (1.0 - m) * sharpness / area;
            grads.push([dm * d[0] / dist, dm * d[1] / dist]);
        } else {
            grads.push([0.0, 0.0]);
        }
    }
    Ok((total / area, grads))
}

/// Goal of the ego vehicle: ordered waypoints and a completion radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Route {
    pub waypoints: Vec<Point2>,
    pub completion_radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleDims {
    pub length: f64,
    pub width: f64,
}

impl Default for VehicleDims {
    fn default() -> Self {
        Self {
            length: 4.0,
            width: 1.8,
        }
    }
}

/// A traffic scene with agent roles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub map: RoadMap,
    pub ego_init: VehicleState,
    pub sv_inits: Vec<VehicleState>,
    pub nonadv_inits: Vec<VehicleState>,
    pub ego_route: Route,
    pub vehicle_dims: VehicleDims,
}

impl Scenario {
    /// Structural checks that hold for any simulated scene.
    pub fn validate(&self) -> Result<()> {
        if self.ego_route.waypoints.is_empty() {
            return Err(Error::validation("ego route needs at least one waypoint"));
        }
        if !(self.ego_route.completion_radius > 0.0) {
            return Err(Error::validation("route completion radius must be positive"));
        }
        if !(self.vehicle_dims.length > 0.0 && self.vehicle_dims.width > 0.0) {
            return Err(Error::validation("vehicle dimensions must be positive"));
        }
        for s in self.agents() {
            if !s.is_finite() {
                return Err(Error::validation("non-finite initial state"));
            }
            if self.map.signed_boundary_distance(s.position()) < 0.0 {
                return Err(Error::validation(format!(
                    "initial position {:?} lies outside the drivable area",
                    s.position()
                )));
            }
        }
        Ok(())
    }

    /// Checks for a scenario used for adversarial generation: at least one SV.
    pub fn validate_for_generation(&self) -> Result<()> {
        self.validate()?;
        if self.sv_inits.is_empty() {
            return Err(Error::validation("scenario needs at least one safety-critical vehicle"));
        }
        Ok(())
    }

    /// Initial states in agent order: ego, SVs, then non-adversarial vehicles.
    pub fn agents(&self) -> impl Iterator<Item = &VehicleState> {
        std::iter::once(&self.ego_init)
            .chain(&self.sv_inits)
            .chain(&self.nonadv_inits)
    }

    pub fn num_agents(&self) -> usize {
        1 + self.sv_inits.len() + self.nonadv_inits.len()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let sc: Scenario = serde_json::from_str(text)?;
        sc.validate_for_generation()?;
        Ok(sc)
    }
}

/// History length and neighbour count of the context encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContextConfig {
    pub history: usize,
    pub neighbors: usize,
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self {
            history: 10,
            neighbors: 4,
        }
    }
}

impl ContextConfig {
    /// Flat feature dimension: target history, neighbour slots, lane features.
    pub fn dim(&self) -> usize {
        4 * self.history + self.neighbors * (1 + 4 * self.history) + LANE_FEATURES
    }

    pub fn validate(&self) -> Result<()> {
        if self.history == 0 {
            return Err(Error::validation("context history must be at least one step"));
        }
        Ok(())
    }
}

/// Agent-centric context vector.
///
/// Layout: `history * [x, y, v, theta]` of the target in its own current frame,
/// then `neighbors` slots of `[valid, history * [x, y, v, theta]]` sorted
/// nearest-first and zero padded, then the lane block
/// `[offset, heading_error, curvature..., boundary_distance, lane_speed]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextFeatures {
    pub values: Vec<f64>,
    /// One flag per neighbour slot.
    pub valid: Vec<bool>,
}

struct Frame {
    origin: Point2,
    cos: f64,
    sin: f64,
    theta: f64,
}

impl Frame {
    fn of(s: &VehicleState) -> Self {
        Self {
            origin: s.position(),
            cos: s.theta.cos(),
            sin: s.theta.sin(),
            theta: s.theta,
        }
    }

    fn local(&self, s: &VehicleState) -> [f64; 4] {
        let d = sub(s.position(), self.origin);
        [
            (self.cos * d[0] + self.sin * d[1]) / FEATURE_POS_SCALE,
            (-self.sin * d[0] + self.cos * d[1]) / FEATURE_POS_SCALE,
            s.v / FEATURE_SPEED_SCALE,
            wrap_angle(s.theta - self.theta),
        ]
    }
}

/// Extend a history to at least `len` states by constant-velocity
/// back-extrapolation of its oldest state.
pub fn pad_history(history: &[VehicleState], len: usize, dt: f64) -> Vec<VehicleState> {
    let Some(first) = history.first() else {
        return Vec::new();
    };
    let missing = len.saturating_sub(history.len());
    let mut out = Vec::with_capacity(missing + history.len());
    for i in (1..=missing).rev() {
        let back = i as f64 * dt * first.v;
        out.push(VehicleState {
            x: first.x - back * first.theta.cos(),
            y: first.y - back * first.theta.sin(),
            ..*first
        });
    }
    out.extend_from_slice(history);
    out
}

/// Build the context of `target` from per-agent histories (most recent last).
pub fn encode_context(
    map: &RoadMap,
    histories: &[Vec<VehicleState>],
    target: usize,
    cfg: ContextConfig,
) -> Result<ContextFeatures> {
    cfg.validate()?;
    let h = cfg.history;
    let Some(own) = histories.get(target) else {
        return Err(Error::validation(format!(
            "unknown target index {target} ({} agents)",
            histories.len()
        )));
    };
    for (i, hist) in histories.iter().enumerate() {
        if hist.len() < h {
            return Err(Error::validation(format!(
                "agent {i} has {} past states, {h} required",
                hist.len()
            )));
        }
    }
    let current = own[own.len() - 1];
    let frame = Frame::of(&current);
    let mut values = Vec::with_capacity(cfg.dim());
    for s in &own[own.len() - h..] {
        values.extend(frame.local(s));
    }

    let mut others: Vec<(f64, usize)> = histories
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != target)
        .map(|(i, hist)| (norm(sub(hist[hist.len() - 1].position(), current.position())), i))
        .collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut valid = Vec::with_capacity(cfg.neighbors);
    for slot in 0..cfg.neighbors {
        match others.get(slot) {
            Some(&(_, i)) => {
                let hist = &histories[i];
                values.push(1.0);
                for s in &hist[hist.len() - h..] {
                    values.extend(frame.local(s));
                }
                valid.push(true);
            }
            None => {
                values.extend(std::iter::repeat_n(0.0, 1 + 4 * h));
                valid.push(false);
            }
        }
    }

    match map.nearest_lane(current.position(), current.theta) {
        Some((li, proj)) => {
            let lane = &map.lanes[li];
            values.push(proj.offset / FEATURE_POS_SCALE);
            values.push(wrap_angle(proj.heading - current.theta));
            for ahead in CURVATURE_LOOKAHEADS {
                values.push(lane.curvature_at(proj.s + ahead) * FEATURE_POS_SCALE);
            }
            values.push(map.signed_boundary_distance(current.position()) / FEATURE_POS_SCALE);
            values.push(lane.speed / FEATURE_SPEED_SCALE);
        }
        None => {
            values.extend([0.0; LANE_FEATURES - 2]);
            values.push(map.signed_boundary_distance(current.position()) / FEATURE_POS_SCALE);
            values.push(0.0);
        }
    }
    debug_assert_eq!(values.len(), cfg.dim());
    Ok(ContextFeatures { values, valid })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    pub(crate) fn unit_square() -> RoadMap {
        RoadMap::new(
            "unit",
            vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
            vec![],
        )
        .unwrap()
    }

    fn circle(n: usize, r: f64) -> RoadMap {
        let pts = (0..n)
            .map(|i| {
                let a = 2.0 * PI * i as f64 / n as f64;
                [r * a.cos(), r * a.sin()]
            })
            .collect();
        RoadMap::new("circle", pts, vec![]).unwrap()
    }

    fn straight_road() -> RoadMap {
        RoadMap::new(
            "straight",
            vec![[-50.0, -3.5], [150.0, -3.5], [150.0, 3.5], [-50.0, 3.5]],
            vec![
                Lane {
                    centerline: vec![[-49.0, -1.75], [149.0, -1.75]],
                    speed: 10.0,
                },
                Lane {
                    centerline: vec![[-49.0, 1.75], [149.0, 1.75]],
                    speed: 10.0,
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn square_signed_distance() {
        let m = unit_square();
        assert_abs_diff_eq!(m.signed_boundary_distance([0.5, 0.5]), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(m.signed_boundary_distance([1.5, 0.5]), -0.5, epsilon = 1e-15);
        assert_eq!(m.signed_boundary_distance([1.0, 0.5]), 0.0);
    }

    #[test]
    fn circle_polygon_distance_matches_brute_force() {
        let m = circle(20, 10.0);
        let p = [7.0 * 0.3f64.cos(), 7.0 * 0.3f64.sin()];
        let brute = (0..20)
            .map(|i| {
                let a = m.drivable_area[i];
                let b = m.drivable_area[(i + 1) % 20];
                let (q, _) = closest_on_segment(p, a, b);
                norm(sub(p, q))
            })
            .fold(f64::INFINITY, f64::min);
        let d = m.signed_boundary_distance(p);
        assert_abs_diff_eq!(d, brute, epsilon = 1e-12);
        // apothem of a 20-gon of circumradius 10 bounds the approximation error
        assert!((d - 3.0).abs() <= 10.0 * (1.0 - (PI / 20.0).cos()) + 1e-12);
    }

    #[test]
    fn rejects_degenerate_polygons() {
        assert!(RoadMap::new("two", vec![[0.0, 0.0], [1.0, 0.0]], vec![]).is_err());
        let bowtie = vec![[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]];
        assert!(RoadMap::new("bowtie", bowtie, vec![]).is_err());
        let cw = vec![[0.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]];
        assert!(RoadMap::new("cw", cw, vec![]).is_err());
        let lane = Lane {
            centerline: vec![[0.5, 0.5], [3.0, 0.5]],
            speed: 5.0,
        };
        assert!(RoadMap::new("lane-out", unit_square().drivable_area, vec![lane]).is_err());
    }

    #[test]
    fn map_json_round_trip_validates() {
        let m = straight_road();
        let text = serde_json::to_string(&m).unwrap();
        let back: RoadMap = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
        let bad = r#"{"name":"x","drivable_area":[[0,0],[1,0]],"lanes":[]}"#;
        assert!(serde_json::from_str::<RoadMap>(bad).is_err());
    }

    #[test]
    fn roi_density_cases() {
        let area = PI * 400.0;
        assert_eq!(roi_density([0.0, 0.0], &[], 20.0, 2.0).unwrap(), 0.0);
        let five = [[0.0, 0.0]; 5];
        let rho = roi_density([0.0, 0.0], &five, 20.0, 50.0).unwrap();
        assert_abs_diff_eq!(rho, 5.0 / area, epsilon = 1e-12);
        let rho = roi_density([0.0, 0.0], &[[20.0, 0.0]], 20.0, 2.0).unwrap();
        assert_abs_diff_eq!(rho, 0.5 / area, epsilon = 1e-15);
        assert!(roi_density([0.0, 0.0], &[], 0.0, 2.0).is_err());
    }

    #[test]
    fn roi_gradient_matches_finite_difference() {
        let ego = [1.0, -2.0];
        let svs = vec![[15.0, 8.0], [-12.0, 14.0]];
        let (_, g) = roi_density_and_gradient(ego, &svs, 20.0, 2.0).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            for c in 0..2 {
                let mut plus = svs.clone();
                plus[i][c] += h;
                let mut minus = svs.clone();
                minus[i][c] -= h;
                let fd = (roi_density(ego, &plus, 20.0, 2.0).unwrap()
                    - roi_density(ego, &minus, 20.0, 2.0).unwrap())
                    / (2.0 * h);
                assert!((fd - g[i][c]).abs() < 1e-6 * fd.abs().max(1e-8), "{fd} vs {}", g[i][c]);
            }
        }
    }

    fn scene(rot: f64, shift: Point2) -> (RoadMap, Vec<Vec<VehicleState>>) {
        let (c, s) = (rot.cos(), rot.sin());
        let tf = |p: Point2| [c * p[0] - s * p[1] + shift[0], s * p[0] + c * p[1] + shift[1]];
        let base = straight_road();
        let map = RoadMap::new(
            "rot",
            base.drivable_area.iter().map(|&p| tf(p)).collect(),
            base.lanes
                .iter()
                .map(|l| Lane {
                    centerline: l.centerline.iter().map(|&p| tf(p)).collect(),
                    speed: l.speed,
                })
                .collect(),
        )
        .unwrap();
        let agent = |x0: f64, y: f64, v: f64| -> Vec<VehicleState> {
            (0..10)
                .map(|t| {
                    let p = tf([x0 + v * 0.1 * t as f64, y]);
                    VehicleState::new(p[0], p[1], v, rot + 0.01 * t as f64)
                })
                .collect()
        };
        let hist = vec![
            agent(0.0, -1.75, 8.0),
            agent(12.0, 1.75, 9.0),
            agent(-20.0, -1.75, 7.0),
            agent(30.0, -1.5, 6.0),
            agent(5.0, 1.9, 10.0),
        ];
        (map, hist)
    }

    #[test]
    fn context_is_invariant_to_rigid_motion() {
        let cfg = ContextConfig::default();
        let (m0, h0) = scene(0.0, [0.0, 0.0]);
        let (m1, h1) = scene(PI / 2.0, [0.0, 0.0]);
        let (m2, h2) = scene(2.1, [31.0, -7.0]);
        let f0 = encode_context(&m0, &h0, 0, cfg).unwrap();
        for (m, h) in [(m1, h1), (m2, h2)] {
            let f = encode_context(&m, &h, 0, cfg).unwrap();
            assert_eq!(f.valid, f0.valid);
            for (a, b) in f.values.iter().zip(&f0.values) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn context_keeps_nearest_neighbours() {
        let cfg = ContextConfig {
            history: 3,
            neighbors: 2,
        };
        let (m, h) = scene(0.0, [0.0, 0.0]);
        let f = encode_context(&m, &h, 0, cfg).unwrap();
        // brute-force ordering by current distance
        let cur = h[0][9].position();
        let mut order: Vec<usize> = (1..h.len()).collect();
        order.sort_by(|&a, &b| {
            let da = norm(sub(h[a][9].position(), cur));
            let db = norm(sub(h[b][9].position(), cur));
            da.partial_cmp(&db).unwrap()
        });
        let frame = Frame::of(&h[0][9]);
        for (slot, &agent) in order.iter().take(2).enumerate() {
            let base = 4 * 3 + slot * (1 + 4 * 3);
            assert_eq!(f.values[base], 1.0);
            let last = frame.local(&h[agent][9]);
            assert_eq!(&f.values[base + 1 + 8..base + 1 + 12], &last[..]);
        }
        assert_eq!(f.valid, vec![true, true]);
        assert_eq!(f.values.len(), cfg.dim());
    }

    #[test]
    fn context_single_static_agent() {
        let cfg = ContextConfig::default();
        let m = straight_road();
        let hist = vec![vec![VehicleState::new(3.0, -1.75, 6.0, 0.0); 10]];
        let f = encode_context(&m, &hist, 0, cfg).unwrap();
        for t in 0..10 {
            assert_eq!(&f.values[4 * t..4 * t + 4], &[0.0, 0.0, 0.6, 0.0]);
        }
        assert_eq!(f.valid, vec![false; 4]);
        assert!(f.values[40..40 + 4 * 41].iter().all(|&v| v == 0.0));
        assert!(encode_context(&m, &hist, 1, cfg).is_err());
    }

    #[test]
    fn pad_history_back_extrapolates() {
        let s = VehicleState::new(10.0, 0.0, 5.0, 0.0);
        let h = pad_history(&[s], 3, 0.1);
        assert_eq!(h.len(), 3);
        assert_abs_diff_eq!(h[0].x, 9.0, epsilon = 1e-12);
        assert_abs_diff_eq!(h[1].x, 9.5, epsilon = 1e-12);
        assert_eq!(h[2], s);
    }

    #[test]
    fn lane_queries() {
        let m = straight_road();
        let p = m.lanes[0].project([10.0, -1.0]);
        assert_abs_diff_eq!(p.s, 59.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.offset, 0.75, epsilon = 1e-12);
        assert_eq!(m.adjacent_lane(0, 20.0, 1.0), Some(1));
        assert_eq!(m.adjacent_lane(0, 20.0, -1.0), None);
        assert_eq!(m.nearest_lane([0.0, 1.0], 0.0).unwrap().0, 1);
    }

    proptest! {
        #[test]
        fn boundary_distance_is_one_lipschitz(
            ax in -3.0..4.0f64, ay in -3.0..4.0f64, bx in -3.0..4.0f64, by in -3.0..4.0f64,
        ) {
            let m = RoadMap::new(
                "l",
                vec![[0.0, 0.0], [2.0, 0.0], [2.0, 1.0], [1.0, 1.0], [1.0, 2.0], [0.0, 2.0]],
                vec![],
            ).unwrap();
            let da = m.signed_boundary_distance([ax, ay]);
            let db = m.signed_boundary_distance([bx, by]);
            prop_assert!((da - db).abs() <= norm(sub([ax, ay], [bx, by])) + 1e-12);
        }

        #[test]
        fn roi_density_decreases_radially(r0 in 0.0..40.0f64, dr in 0.0..10.0f64, ang in 0.0..6.28f64) {
            let dir = [ang.cos(), ang.sin()];
            let others = [[3.0, 4.0], [-10.0, 2.0]];
            let at = |r: f64| {
                let mut v = vec![[r * dir[0], r * dir[1]]];
                v.extend_from_slice(&others);
                roi_density([0.0, 0.0], &v, 20.0, 2.0).unwrap()
            };
            prop_assert!(at(r0 + dr) <= at(r0) + 1e-18);
        }
    }
}
