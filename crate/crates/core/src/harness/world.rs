use std::collections::VecDeque;
use std::sync::Arc;

use super::idm::{idm_accel, integrate, IdmParams, Leader};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::scenario::{
    rotate_into, to_ego_frame, wrap_angle, EgoState, EgoTrajectory, LanePolyline, NeighborHistory, Obb, Pose,
    ScenarioFrame, StaticObject, DT, LANE_DIM, STATIC_DIM,
};

pub const EGO_LENGTH: f64 = 4.8;
pub const EGO_WIDTH: f64 = 2.0;
/// Length of the lane pieces handed to the encoder.
pub const LANE_PIECE: f64 = 30.0;
/// Entities farther than this from the ego are not observed.
pub const OBS_RADIUS: f64 = 60.0;
/// Lateral half-band (plus the other entity's half width) in which an
/// entity counts as being on a lane.
pub const LANE_BAND: f64 = 1.3;
/// Leaders farther ahead than this are ignored.
const LOOKAHEAD: f64 = 120.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Light {
    Green,
    Red,
    None,
}

impl Light {
    fn one_hot(self) -> [f64; 3] {
        match self {
            Light::Green => [1.0, 0.0, 0.0],
            Light::Red => [0.0, 1.0, 0.0],
            Light::None => [0.0, 0.0, 1.0],
        }
    }
}

/// Centreline polyline with arc length.
#[derive(Debug, Clone, PartialEq)]
pub struct Lane {
    points: Vec<[f64; 2]>,
    s: Vec<f64>,
    pub speed_limit: f64,
    pub width: f64,
    pub light: Light,
    /// Arc length of the stop line, if the lane has one.
    pub stop_s: Option<f64>,
}

impl Lane {
    pub fn new(points: Vec<[f64; 2]>, speed_limit: f64, width: f64) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Invalid("a lane needs at least two points".into()));
        }
        let mut s = vec![0.0];
        for w in points.windows(2) {
            let d = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
            if d <= 1e-9 {
                return Err(Error::Invalid("lane has repeated points".into()));
            }
            s.push(s.last().unwrap() + d);
        }
        Ok(Self { points, s, speed_limit, width, light: Light::None, stop_s: None })
    }

    /// Straight lane from `a` to `b` sampled every metre.
    pub fn straight(a: [f64; 2], b: [f64; 2], speed_limit: f64, width: f64) -> Result<Self> {
        let len = (b[0] - a[0]).hypot(b[1] - a[1]);
        let n = (len.ceil() as usize).max(1);
        let pts = (0..=n)
            .map(|i| {
                let t = i as f64 / n as f64;
                [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
            })
            .collect();
        Self::new(pts, speed_limit, width)
    }

    pub fn with_light(mut self, light: Light, stop_s: Option<f64>) -> Self {
        self.light = light;
        self.stop_s = stop_s;
        self
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn length(&self) -> f64 {
        *self.s.last().unwrap()
    }

    fn segment(&self, s: f64) -> usize {
        let i = self.s.partition_point(|&v| v <= s);
        i.saturating_sub(1).min(self.points.len() - 2)
    }

    /// Pose at arc length `s`, extrapolating linearly past either end.
    pub fn pose_at(&self, s: f64) -> Pose {
        let i = self.segment(s);
        let (a, b) = (self.points[i], self.points[i + 1]);
        let len = self.s[i + 1] - self.s[i];
        let t = (s - self.s[i]) / len;
        Pose::new(a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), (b[1] - a[1]).atan2(b[0] - a[0]))
    }

    /// Point at arc length `s` displaced `d` metres to the left.
    pub fn offset_pose(&self, s: f64, d: f64, heading_offset: f64) -> Pose {
        let p = self.pose_at(s);
        let (sn, cs) = p.heading.sin_cos();
        Pose::new(p.x - sn * d, p.y + cs * d, p.heading + heading_offset)
    }

    /// `(s, lateral)` of the closest centreline point; lateral is positive
    /// to the left. The end segments extend beyond the polyline.
    pub fn project(&self, x: f64, y: f64) -> (f64, f64) {
        let last = self.points.len() - 2;
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..=last {
            let (a, b) = (self.points[i], self.points[i + 1]);
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let len2 = dx * dx + dy * dy;
            let mut t = ((x - a[0]) * dx + (y - a[1]) * dy) / len2;
            if i > 0 {
                t = t.max(0.0);
            }
            if i < last {
                t = t.min(1.0);
            }
            let (px, py) = (a[0] + t * dx, a[1] + t * dy);
            let d2 = (x - px).powi(2) + (y - py).powi(2);
            if d2 < best.0 {
                let len = len2.sqrt();
                let lat = (dx * (y - a[1]) - dy * (x - a[0])) / len;
                best = (d2, self.s[i] + t * len, lat);
            }
        }
        (best.1, best.2)
    }

    /// Applies a rigid transform to the geometry.
    pub fn transformed(&self, f: impl Fn([f64; 2]) -> [f64; 2]) -> Self {
        Self { points: self.points.iter().map(|&p| f(p)).collect(), ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentKind {
    Vehicle,
    Pedestrian,
    Cyclist,
}

impl AgentKind {
    fn one_hot(self) -> [f64; 3] {
        match self {
            AgentKind::Vehicle => [1.0, 0.0, 0.0],
            AgentKind::Pedestrian => [0.0, 1.0, 0.0],
            AgentKind::Cyclist => [0.0, 0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Controller {
    /// Car following along a lane.
    Idm { lane: usize, s: f64, v0: f64 },
    /// Constant velocity between two ticks, standing still otherwise.
    Scripted { velocity: [f64; 2], start_tick: usize, stop_tick: usize },
    /// Replays recorded poses and speeds, holding the last one.
    Logged { track: Arc<[(Pose, f64)]> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub kind: AgentKind,
    pub length: f64,
    pub width: f64,
    pub pose: Pose,
    pub speed: f64,
    pub controller: Controller,
}

impl Agent {
    pub fn obb(&self) -> Obb {
        Obb::new(self.pose, self.length, self.width)
    }

    pub fn velocity(&self) -> [f64; 2] {
        let (s, c) = self.pose.heading.sin_cos();
        [self.speed * c, self.speed * s]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StaticBox {
    pub pose: Pose,
    pub length: f64,
    pub width: f64,
    /// 0 = parked vehicle, 1 = barrier.
    pub kind: usize,
}

/// The lanes the ego should follow.
#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    /// Lane the ego tracks and measures progress along.
    pub reference: usize,
    /// Lanes that count as on-route for the off-route metric.
    pub lanes: Vec<usize>,
    /// Lateral offset from `reference` held before `switch_tick`.
    pub pre_offset: f64,
    pub switch_tick: usize,
}

impl Route {
    pub fn single(lane: usize) -> Self {
        Self { reference: lane, lanes: vec![lane], pre_offset: 0.0, switch_tick: 0 }
    }

    pub fn target_offset(&self, tick: usize) -> f64 {
        if tick < self.switch_tick {
            self.pre_offset
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Snapshot {
    agents: Vec<(Pose, [f64; 2])>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub lanes: Arc<[Lane]>,
    pub route: Route,
    pub ego: EgoState,
    pub agents: Vec<Agent>,
    pub statics: Vec<StaticBox>,
    pub tick: usize,
    pub idm: IdmParams,
    history: VecDeque<Snapshot>,
    history_len: usize,
}

/// Something another road user may have to follow.
struct Body {
    pose: Pose,
    velocity: [f64; 2],
    length: f64,
    width: f64,
}

impl World {
    pub fn new(
        lanes: Arc<[Lane]>,
        route: Route,
        ego: EgoState,
        agents: Vec<Agent>,
        statics: Vec<StaticBox>,
        history_len: usize,
    ) -> Self {
        let mut w = Self {
            lanes,
            route,
            ego,
            agents,
            statics,
            tick: 0,
            idm: IdmParams::default(),
            history: VecDeque::new(),
            history_len: history_len.max(1),
        };
        w.record();
        w
    }

    pub fn time(&self) -> f64 {
        self.tick as f64 * DT
    }

    fn record(&mut self) {
        let snap = Snapshot { agents: self.agents.iter().map(|a| (a.pose, a.velocity())).collect() };
        self.history.push_back(snap);
        while self.history.len() > self.history_len {
            self.history.pop_front();
        }
    }

    pub fn ego_obb(&self) -> Obb {
        Obb::new(self.ego.pose, EGO_LENGTH, EGO_WIDTH)
    }

    /// Whether the ego overlaps any agent.
    pub fn collision(&self) -> bool {
        let e = self.ego_obb();
        self.agents.iter().any(|a| e.overlaps(&a.obb())) || self.statics.iter().any(|s| e.overlaps(&Obb::new(s.pose, s.length, s.width)))
    }

    /// Whether any two bodies (ego, agents, statics) overlap.
    pub fn any_overlap(&self) -> bool {
        let mut boxes = vec![self.ego_obb()];
        boxes.extend(self.agents.iter().map(Agent::obb));
        boxes.extend(self.statics.iter().map(|s| Obb::new(s.pose, s.length, s.width)));
        (0..boxes.len()).any(|i| (i + 1..boxes.len()).any(|j| boxes[i].overlaps(&boxes[j])))
    }

    pub fn reference_lane(&self) -> &Lane {
        &self.lanes[self.route.reference]
    }

    /// Arc length of the ego along the reference lane.
    pub fn route_s(&self) -> f64 {
        self.reference_lane().project(self.ego.pose.x, self.ego.pose.y).0
    }

    /// Distance from the ego to the nearest route centreline.
    pub fn off_route(&self) -> f64 {
        self.route
            .lanes
            .iter()
            .map(|&l| self.lanes[l].project(self.ego.pose.x, self.ego.pose.y).1.abs())
            .fold(f64::INFINITY, f64::min)
    }

    fn bodies(&self) -> Vec<Body> {
        let (s, c) = self.ego.pose.heading.sin_cos();
        let mut out = vec![Body {
            pose: self.ego.pose,
            velocity: [self.ego.speed * c, self.ego.speed * s],
            length: EGO_LENGTH,
            width: EGO_WIDTH,
        }];
        out.extend(self.agents.iter().map(|a| Body { pose: a.pose, velocity: a.velocity(), length: a.length, width: a.width }));
        out
    }

    /// Closest leader of a vehicle at `s` on `lane`; `skip` is its own
    /// index in [`bodies`](Self::bodies).
    fn leader(&self, bodies: &[Body], lane: usize, s: f64, length: f64, v: f64, skip: usize) -> Option<Leader> {
        let l = &self.lanes[lane];
        let mut best: Option<Leader> = None;
        let mut consider = |gap: f64, dv: f64| {
            if best.map_or(true, |b| gap < b.gap) {
                best = Some(Leader { gap, dv });
            }
        };
        for (i, b) in bodies.iter().enumerate() {
            if i == skip {
                continue;
            }
            let (sb, d) = l.project(b.pose.x, b.pose.y);
            let ahead = sb - s;
            if ahead <= 0.0 || ahead > LOOKAHEAD || d.abs() > LANE_BAND + b.width / 2.0 {
                continue;
            }
            let tangent = l.pose_at(sb).heading;
            let v_long = b.velocity[0] * tangent.cos() + b.velocity[1] * tangent.sin();
            consider(ahead - (length + b.length) / 2.0, v - v_long);
        }
        if let (Light::Red, Some(stop)) = (l.light, l.stop_s) {
            let front = s + length / 2.0;
            if front < stop + 0.5 {
                consider(stop - front, v);
            }
        }
        best
    }

    /// Advances one tick: agents react to the current state, then the ego
    /// jumps to `plan[1]` (world frame).
    pub fn step(&mut self, plan: &EgoTrajectory) -> Result<()> {
        let next = *plan
            .points
            .get(1)
            .ok_or_else(|| Error::Invalid("a plan needs at least two poses".into()))?;
        if !next.is_finite() {
            return Err(Error::NonFinite { what: "planned pose".into(), step: self.tick });
        }
        let bodies = self.bodies();
        let tick = self.tick;
        let mut updated = self.agents.clone();
        for (i, a) in updated.iter_mut().enumerate() {
            match &mut a.controller {
                Controller::Idm { lane, s, v0 } => {
                    let acc = idm_accel(a.speed, *v0, self.leader(&bodies, *lane, *s, a.length, a.speed, i + 1), &self.idm);
                    let (ds, v) = integrate(a.speed, acc, DT);
                    *s += ds;
                    a.speed = v;
                    a.pose = self.lanes[*lane].pose_at(*s);
                }
                Controller::Scripted { velocity, start_tick, stop_tick } => {
                    if tick >= *start_tick && tick < *stop_tick {
                        a.pose = Pose::new(a.pose.x + velocity[0] * DT, a.pose.y + velocity[1] * DT, velocity[1].atan2(velocity[0]));
                        a.speed = velocity[0].hypot(velocity[1]);
                    } else {
                        a.speed = 0.0;
                    }
                }
                Controller::Logged { track } => {
                    if let Some(&(p, v)) = track.get(tick + 1).or_else(|| track.last()) {
                        a.pose = p;
                        a.speed = v;
                    }
                }
            }
        }
        self.agents = updated;

        let speed = next.dist(&self.ego.pose) / DT;
        self.ego.accel = (speed - self.ego.speed) / DT;
        self.ego.speed = speed;
        self.ego.pose = Pose::new(next.x, next.y, next.heading);
        self.tick += 1;
        self.record();
        Ok(())
    }

    /// Ego-centric observation with metric features.
    pub fn observe(&self, cfg: &Config) -> ScenarioFrame {
        let ego = self.ego.pose;
        let t_len = cfg.num_past_steps;

        // Neighbors: nearest first.
        let mut order: Vec<(f64, usize)> = self
            .agents
            .iter()
            .enumerate()
            .map(|(i, a)| (a.pose.dist(&ego), i))
            .filter(|(d, _)| *d <= OBS_RADIUS)
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut neighbors: Vec<NeighborHistory> = Vec::with_capacity(cfg.num_neighbors);
        for &(_, i) in order.iter().take(cfg.num_neighbors) {
            let a = &self.agents[i];
            let mut h = NeighborHistory::empty(t_len);
            for (k, snap) in self.history.iter().rev().take(t_len).enumerate() {
                let slot = t_len - 1 - k;
                let (p, v) = snap.agents[i];
                let q = to_ego_frame(p, ego);
                let vr = rotate_into(v, ego);
                let (sn, cs) = q.heading.sin_cos();
                let oh = a.kind.one_hot();
                h.states[slot] = [q.x, q.y, cs, sn, vr[0], vr[1], a.length, a.width, oh[0], oh[1], oh[2]];
                h.valid[slot] = true;
            }
            neighbors.push(h);
        }
        neighbors.resize(cfg.num_neighbors, NeighborHistory::empty(t_len));

        // Lane pieces: nearest first.
        let n_pts = cfg.points_per_polyline;
        let mut pieces: Vec<(f64, usize, usize, LanePolyline)> = Vec::new();
        for (li, lane) in self.lanes.iter().enumerate() {
            let count = (lane.length() / LANE_PIECE).ceil() as usize;
            for k in 0..count {
                let a = k as f64 * LANE_PIECE;
                let b = (a + LANE_PIECE).min(lane.length());
                if b - a < 1.0 {
                    continue;
                }
                let poly = self.lane_piece(lane, a, b, n_pts);
                let d = poly
                    .points
                    .iter()
                    .map(|p| p[0].hypot(p[1]))
                    .fold(f64::INFINITY, f64::min);
                if d <= OBS_RADIUS {
                    pieces.push((d, li, k, poly));
                }
            }
        }
        pieces.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut lanes: Vec<LanePolyline> = pieces.into_iter().take(cfg.num_lanes).map(|p| p.3).collect();
        lanes.resize(cfg.num_lanes, LanePolyline::empty(n_pts));

        // Navigation: route pieces ahead of the ego.
        let rl = self.reference_lane();
        let s0 = self.route_s().max(0.0);
        let navigation = (0..cfg.num_nav_lanes)
            .map(|k| {
                let a = s0 + k as f64 * LANE_PIECE;
                let b = (a + LANE_PIECE).min(rl.length());
                if b - a < 1.0 {
                    LanePolyline::empty(n_pts)
                } else {
                    self.lane_piece(rl, a, b, n_pts)
                }
            })
            .collect();

        let mut st: Vec<(f64, usize)> = self
            .statics
            .iter()
            .enumerate()
            .map(|(i, s)| (s.pose.dist(&ego), i))
            .filter(|(d, _)| *d <= OBS_RADIUS)
            .collect();
        st.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut statics: Vec<StaticObject> = st
            .iter()
            .take(cfg.num_statics)
            .map(|&(_, i)| {
                let s = &self.statics[i];
                let q = to_ego_frame(s.pose, ego);
                let mut f = [0.0; STATIC_DIM];
                f[..6].copy_from_slice(&[q.x, q.y, q.heading.cos(), q.heading.sin(), s.length, s.width]);
                f[6 + s.kind.min(1)] = 1.0;
                StaticObject { features: f, valid: true }
            })
            .collect();
        statics.resize(cfg.num_statics, StaticObject::EMPTY);

        ScenarioFrame {
            ego: EgoState { pose: Pose::default(), speed: self.ego.speed, accel: self.ego.accel },
            neighbors,
            lanes,
            navigation,
            statics,
            future: None,
            norm: None,
        }
    }

    fn lane_piece(&self, lane: &Lane, a: f64, b: f64, n: usize) -> LanePolyline {
        let ego = self.ego.pose;
        let ss: Vec<f64> = if n == 1 {
            vec![(a + b) / 2.0]
        } else {
            (0..n).map(|j| a + (b - a) * j as f64 / (n - 1) as f64).collect()
        };
        let poses: Vec<Pose> = ss.iter().map(|&s| lane.pose_at(s)).collect();
        let local: Vec<Pose> = poses.iter().map(|&p| to_ego_frame(p, ego)).collect();
        let light = lane.light.one_hot();
        let points = (0..n)
            .map(|j| {
                let p = poses[j];
                let left = rotate_into([-p.heading.sin() * lane.width / 2.0, p.heading.cos() * lane.width / 2.0], ego);
                let conn = if n == 1 {
                    rotate_into([p.heading.cos(), p.heading.sin()], ego)
                } else if j + 1 < n {
                    [local[j + 1].x - local[j].x, local[j + 1].y - local[j].y]
                } else {
                    [local[j].x - local[j - 1].x, local[j].y - local[j - 1].y]
                };
                let mut f = [0.0; LANE_DIM];
                f[..9].copy_from_slice(&[
                    local[j].x,
                    local[j].y,
                    left[0],
                    left[1],
                    -left[0],
                    -left[1],
                    conn[0],
                    conn[1],
                    lane.speed_limit,
                ]);
                f[9..].copy_from_slice(&light);
                f
            })
            .collect();
        LanePolyline { points, valid: true }
    }
}

/// Heading of the lane tangent at the projection of `p`, and the signed
/// angle of `p` relative to it.
pub fn relative_heading(lane: &Lane, p: Pose) -> (f64, f64) {
    let (s, _) = lane.project(p.x, p.y);
    let h = lane.pose_at(s).heading;
    (h, wrap_angle(p.heading - h))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn road() -> Arc<[Lane]> {
        Arc::from(vec![Lane::straight([-50.0, 0.0], [300.0, 0.0], 12.0, 3.5).unwrap()])
    }

    fn hold(p: Pose) -> EgoTrajectory {
        EgoTrajectory { points: vec![p, p] }
    }

    #[test]
    fn lane_projection() {
        let l = Lane::new(vec![[0.0, 0.0], [10.0, 0.0], [10.0, 10.0]], 10.0, 3.5).unwrap();
        let (s, d) = l.project(5.0, 1.0);
        assert!((s - 5.0).abs() < 1e-12 && (d - 1.0).abs() < 1e-12);
        let (s, d) = l.project(11.0, 5.0);
        assert!((s - 15.0).abs() < 1e-12 && (d + 1.0).abs() < 1e-12);
        let (s, _) = l.project(-3.0, 0.0);
        assert!((s + 3.0).abs() < 1e-12);
        let p = l.pose_at(15.0);
        assert!((p.x - 10.0).abs() < 1e-12 && (p.y - 5.0).abs() < 1e-12);
    }

    #[test]
    fn stay_still_plan_keeps_pose() {
        let ego = EgoState { pose: Pose::new(3.0, 0.2, 0.1), speed: 0.0, accel: 0.0 };
        let mut w = World::new(road(), Route::single(0), ego, vec![], vec![], 21);
        w.step(&hold(ego.pose)).unwrap();
        assert_eq!(w.ego.pose, ego.pose);
        assert_eq!(w.ego.speed, 0.0);
    }

    #[test]
    fn follower_never_closer_than_jam_distance() {
        let lanes = road();
        let leader = Agent {
            kind: AgentKind::Vehicle,
            length: 4.5,
            width: 1.9,
            pose: lanes[0].pose_at(100.0),
            speed: 0.0,
            controller: Controller::Idm { lane: 0, s: 100.0, v0: 0.0 },
        };
        let follower = Agent {
            pose: lanes[0].pose_at(20.0),
            speed: 14.0,
            controller: Controller::Idm { lane: 0, s: 20.0, v0: 14.0 },
            ..leader.clone()
        };
        let ego = EgoState { pose: Pose::new(-40.0, 0.0, 0.0), ..EgoState::default() };
        let mut w = World::new(lanes, Route::single(0), ego, vec![leader, follower], vec![], 21);
        let mut min_gap = f64::INFINITY;
        for _ in 0..400 {
            w.step(&hold(ego.pose)).unwrap();
            let gap = w.agents[0].pose.x - w.agents[1].pose.x - 4.5;
            min_gap = min_gap.min(gap);
        }
        assert!(min_gap > w.idm.s0 - 0.1, "gap {min_gap}");
        assert!(w.agents[1].speed < 1e-6);
    }

    #[test]
    fn step_is_deterministic() {
        let lanes = road();
        let a = Agent {
            kind: AgentKind::Vehicle,
            length: 4.5,
            width: 1.9,
            pose: lanes[0].pose_at(30.0),
            speed: 8.0,
            controller: Controller::Idm { lane: 0, s: 30.0, v0: 12.0 },
        };
        let ego = EgoState { pose: Pose::default(), speed: 10.0, accel: 0.0 };
        let w0 = World::new(lanes, Route::single(0), ego, vec![a], vec![], 21);
        let plan = EgoTrajectory { points: vec![Pose::default(), Pose::new(1.0, 0.0, 0.0)] };
        let (mut w1, mut w2) = (w0.clone(), w0);
        w1.step(&plan).unwrap();
        w2.step(&plan).unwrap();
        assert_eq!(w1, w2);
        assert_eq!(w1.ego.speed, 10.0);
    }

    #[test]
    fn observation_is_ego_centric_and_padded() {
        let mut cfg = Config::desk();
        cfg.num_past_steps = 3;
        let lanes = road();
        let a = Agent {
            kind: AgentKind::Pedestrian,
            length: 0.5,
            width: 0.5,
            pose: Pose::new(20.0, -4.0, std::f64::consts::FRAC_PI_2),
            speed: 0.0,
            controller: Controller::Scripted { velocity: [0.0, 1.0], start_tick: 0, stop_tick: 100 },
        };
        let ego = EgoState { pose: Pose::new(10.0, 0.0, 0.0), speed: 0.0, accel: 0.0 };
        let mut w = World::new(lanes, Route::single(0), ego, vec![a], vec![], 3);
        w.step(&hold(ego.pose)).unwrap();
        let f = w.observe(&cfg);
        assert_eq!(f.neighbors.len(), cfg.num_neighbors);
        let n = &f.neighbors[0];
        assert_eq!(n.valid, vec![false, true, true]);
        assert!((n.states[2][0] - 10.0).abs() < 1e-12 && (n.states[2][1] + 3.9).abs() < 1e-12);
        assert_eq!(&n.states[2][8..], &[0.0, 1.0, 0.0]);
        assert!(!f.neighbors[1].is_valid());
        assert_eq!(f.lanes.len(), cfg.num_lanes);
        assert!(f.lanes[0].valid);
        let nav = &f.navigation[0];
        assert!(nav.points[0][0].abs() < 1e-9 && (nav.points[cfg.points_per_polyline - 1][0] - LANE_PIECE).abs() < 1e-9);
    }
}
