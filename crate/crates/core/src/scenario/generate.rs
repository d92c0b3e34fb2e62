//! Synthetic driving scenarios.
//!
//! Each suite is laid out in a canonical frame (ego driving along +x from
//! the origin), placed under a random rigid transform, then warmed up for
//! one history window with the scripted expert driving the ego. Layouts
//! that collide or leave neighbors unobserved are redrawn from a derived
//! seed, so a seed always maps to the same scenario.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{from_ego_frame, to_ego_frame, EgoState, EgoTrajectory, Pose, ScenarioFrame};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::harness::expert::expert_plan;
use crate::harness::world::{Agent, AgentKind, Controller, Lane, Light, Route, StaticBox, World, OBS_RADIUS};

const LANE_WIDTH: f64 = 3.5;
const ROAD_START: f64 = -80.0;
const ROAD_END: f64 = 360.0;
const MAX_ATTEMPTS: u64 = 64;
/// Minimum bumper-to-bumper gap between vehicles sharing a lane at spawn.
pub const MIN_SPAWN_GAP: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Suite {
    Straight,
    LaneChange,
    Merge,
    Intersection,
    Jaywalk,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Straight, Suite::LaneChange, Suite::Merge, Suite::Intersection, Suite::Jaywalk];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Straight => "straight",
            Suite::LaneChange => "lane-change",
            Suite::Merge => "merge",
            Suite::Intersection => "intersection",
            Suite::Jaywalk => "jaywalk",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| Error::UnknownSuite(s.to_string()))
    }
}

/// Suite plus its size parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SuiteSpec {
    pub suite: Suite,
    /// Road users other than the ego, including pedestrians.
    pub neighbors: usize,
    /// Upper bound on parked vehicles and barriers.
    pub max_statics: usize,
}

impl SuiteSpec {
    pub fn new(suite: Suite) -> Self {
        Self { suite, neighbors: 4, max_statics: 2 }
    }
}

/// A warmed-up world and the expert's closed-loop trajectory from it.
#[derive(Debug, Clone)]
pub struct Episode {
    /// The layout as spawned, before warm-up.
    pub spawn: World,
    pub world: World,
    /// Expert poses in world coordinates; index 0 is the start pose.
    pub expert: EgoTrajectory,
}

/// One frame per seed: the observation after warm-up plus the expert's
/// future in the ego frame.
pub fn gen_scenario(spec: &SuiteSpec, seed: u64, cfg: &Config) -> Result<ScenarioFrame> {
    let ep = prepare_episode(spec, seed, cfg)?;
    let mut frame = ep.world.observe(cfg);
    let ego = ep.world.ego.pose;
    frame.future = Some(EgoTrajectory { points: ep.expert.points.iter().map(|&p| to_ego_frame(p, ego)).collect() });
    Ok(frame)
}

pub fn prepare_episode(spec: &SuiteSpec, seed: u64, cfg: &Config) -> Result<Episode> {
    let warmup = cfg.num_past_steps.saturating_sub(1);
    'attempt: for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ attempt.rotate_left(32));
        let Some(mut w) = build_world(spec, cfg, &mut rng)? else { continue };
        if w.any_overlap() {
            continue;
        }
        let spawn = w.clone();
        for _ in 0..warmup {
            w.step(&expert_plan(&w, 2))?;
            if w.collision() {
                continue 'attempt;
            }
        }
        let observed = w.agents.iter().filter(|a| a.pose.dist(&w.ego.pose) <= OBS_RADIUS).count();
        if observed != w.agents.len() {
            continue;
        }
        let start = w.clone();
        let mut points = vec![w.ego.pose];
        for _ in 1..cfg.traj_len {
            w.step(&expert_plan(&w, 2))?;
            if w.collision() {
                continue 'attempt;
            }
            points.push(w.ego.pose);
        }
        return Ok(Episode { spawn, world: start, expert: EgoTrajectory { points } });
    }
    Err(Error::Invalid(format!("no feasible {} layout for seed {seed}", spec.suite)))
}

struct Layout {
    lanes: Vec<Lane>,
    route: Route,
    ego_lane: usize,
    ego_speed: f64,
    agents: Vec<Agent>,
    statics: Vec<StaticBox>,
}

fn vehicle(rng: &mut impl Rng, lane: &Lane, lane_idx: usize, s: f64, speed: f64, v0: f64) -> Agent {
    Agent {
        kind: AgentKind::Vehicle,
        length: rng.gen_range(4.2..5.0),
        width: rng.gen_range(1.8..2.0),
        pose: lane.pose_at(s),
        speed,
        controller: Controller::Idm { lane: lane_idx, s, v0 },
    }
}

/// Arc length of a vehicle on its lane, if IDM-controlled.
fn lane_pos(a: &Agent) -> Option<(usize, f64)> {
    match a.controller {
        Controller::Idm { lane, s, .. } => Some((lane, s)),
        _ => None,
    }
}

/// Whether `cand` keeps a safe spawn gap to every vehicle on its lane,
/// including the ego (`ego_lane`, `ego_s`).
fn spawn_ok(cand: &Agent, others: &[Agent], ego_lane: usize, ego_s: f64, ego_speed: f64) -> bool {
    let Some((lane, s)) = lane_pos(cand) else { return true };
    let mut bodies: Vec<(f64, f64, f64)> = others
        .iter()
        .filter_map(|o| lane_pos(o).filter(|(l, _)| *l == lane).map(|(_, so)| (so, o.length, o.speed)))
        .collect();
    if lane == ego_lane {
        bodies.push((ego_s, crate::harness::world::EGO_LENGTH, ego_speed));
    }
    bodies.iter().all(|&(so, len, v)| {
        let gap = (so - s).abs() - (len + cand.length) / 2.0;
        let follower_speed = if so < s { v } else { cand.speed };
        gap > MIN_SPAWN_GAP + 0.8 * follower_speed
    })
}

fn parked(rng: &mut impl Rng, count: usize, y: f64, avoid: Option<f64>) -> Vec<StaticBox> {
    let mut out: Vec<StaticBox> = Vec::new();
    for _ in 0..count {
        for _ in 0..20 {
            let x = rng.gen_range(-20.0..80.0);
            if avoid.map_or(false, |a: f64| (x - a).abs() < 6.0) || out.iter().any(|s| (s.pose.x - x).abs() < 6.0) {
                continue;
            }
            let kind = usize::from(rng.gen_bool(0.3));
            let (length, width) = if kind == 0 { (4.6, 1.9) } else { (2.0, 0.6) };
            out.push(StaticBox { pose: Pose::new(x, y, 0.0), length, width, kind });
            break;
        }
    }
    out
}

fn build_world(spec: &SuiteSpec, cfg: &Config, rng: &mut impl Rng) -> Result<Option<World>> {
    let limit = rng.gen_range(8.0..14.0);
    let ego_speed = rng.gen_range(0.6..1.0) * limit;
    let n_static = rng.gen_range(0..=spec.max_statics);
    let layout = match spec.suite {
        Suite::Straight | Suite::LaneChange => multi_lane(spec, rng, limit, ego_speed, n_static)?,
        Suite::Merge => merge(spec, rng, limit, ego_speed, n_static)?,
        Suite::Intersection => intersection(spec, rng, limit, ego_speed, n_static)?,
        Suite::Jaywalk => jaywalk(spec, rng, limit, ego_speed, n_static)?,
    };
    let Some(mut layout) = layout else { return Ok(None) };
    if layout.route.pre_offset != 0.0 {
        // Hold the original lane through the history window.
        layout.route.switch_tick = cfg.num_past_steps.saturating_sub(1);
    }

    // Random rigid placement.
    let frame = Pose::new(rng.gen_range(-200.0..200.0), rng.gen_range(-200.0..200.0), rng.gen_range(-PI..PI));
    let place = |p: Pose| from_ego_frame(p, frame);
    let lanes: Arc<[Lane]> = layout
        .lanes
        .iter()
        .map(|l| {
            l.transformed(|q| {
                let p = place(Pose::new(q[0], q[1], 0.0));
                [p.x, p.y]
            })
        })
        .collect();
    let agents = layout
        .agents
        .into_iter()
        .map(|mut a| {
            match &mut a.controller {
                Controller::Idm { lane, s, .. } => a.pose = lanes[*lane].pose_at(*s),
                Controller::Scripted { velocity, .. } => {
                    a.pose = place(a.pose);
                    let (sn, cs) = frame.heading.sin_cos();
                    *velocity = [velocity[0] * cs - velocity[1] * sn, velocity[0] * sn + velocity[1] * cs];
                }
                Controller::Logged { .. } => {}
            }
            a
        })
        .collect();
    let statics = layout.statics.into_iter().map(|s| StaticBox { pose: place(s.pose), ..s }).collect();
    let ego_s = -ROAD_START;
    let ego = EgoState { pose: lanes[layout.ego_lane].pose_at(ego_s), speed: layout.ego_speed, accel: 0.0 };
    Ok(Some(World::new(lanes, layout.route, ego, agents, statics, cfg.num_past_steps)))
}

fn straight_lanes(ys: &[f64], limit: f64) -> Result<Vec<Lane>> {
    ys.iter().map(|&y| Lane::straight([ROAD_START, y], [ROAD_END, y], limit, LANE_WIDTH)).collect()
}

/// Places `n` vehicles on `lanes` (indices) within `[lo, hi]` metres of the
/// ego along the road.
#[allow(clippy::too_many_arguments)]
fn fill_vehicles(
    rng: &mut impl Rng,
    all: &[Lane],
    lanes: &[usize],
    n: usize,
    range: (f64, f64),
    limit: f64,
    ego_lane: usize,
    ego_speed: f64,
    agents: &mut Vec<Agent>,
) -> bool {
    let ego_s = -ROAD_START;
    for _ in 0..n {
        let mut placed = false;
        for _ in 0..50 {
            let li = lanes[rng.gen_range(0..lanes.len())];
            let s = ego_s + rng.gen_range(range.0..range.1);
            let speed = rng.gen_range(0.5..1.0) * limit;
            let v0 = rng.gen_range(0.8..1.05) * limit;
            let cand = vehicle(rng, &all[li], li, s, speed, v0);
            if spawn_ok(&cand, agents, ego_lane, ego_s, ego_speed) {
                agents.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return false;
        }
    }
    true
}

fn multi_lane(spec: &SuiteSpec, rng: &mut impl Rng, limit: f64, ego_speed: f64, n_static: usize) -> Result<Option<Layout>> {
    let lanes = straight_lanes(&[-LANE_WIDTH, 0.0, LANE_WIDTH], limit)?;
    let (ego_lane, route) = if spec.suite == Suite::LaneChange {
        let target = if rng.gen_bool(0.5) { 0 } else { 2 };
        let pre = if target == 0 { LANE_WIDTH } else { -LANE_WIDTH };
        (1, Route { reference: target, lanes: vec![1, target], pre_offset: pre, switch_tick: 0 })
    } else {
        let l = rng.gen_range(0..3);
        (l, Route::single(l))
    };
    let mut agents = Vec::new();
    if !fill_vehicles(rng, &lanes, &[0, 1, 2], spec.neighbors, (-25.0, 60.0), limit, ego_lane, ego_speed, &mut agents) {
        return Ok(None);
    }
    let statics = parked(rng, n_static, -1.5 * LANE_WIDTH - 2.5, None);
    Ok(Some(Layout { lanes, route, ego_lane, ego_speed, agents, statics }))
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn merge(spec: &SuiteSpec, rng: &mut impl Rng, limit: f64, ego_speed: f64, n_static: usize) -> Result<Option<Layout>> {
    let merge_x = rng.gen_range(45.0..65.0);
    let mut lanes = straight_lanes(&[0.0, LANE_WIDTH], limit)?;
    let ramp_start = merge_x - 140.0;
    let mut pts: Vec<[f64; 2]> = Vec::new();
    let mut x = ramp_start;
    while x < ROAD_END {
        let y = -10.0 * (1.0 - smoothstep((x - (merge_x - 90.0)) / 90.0));
        pts.push([x, y]);
        x += 1.0;
    }
    lanes.push(Lane::new(pts, limit, LANE_WIDTH)?);
    let ramp = &lanes[2];
    let (merge_s, _) = ramp.project(merge_x, 0.0);

    let n_ramp = spec.neighbors.div_ceil(2).min(spec.neighbors);
    let ego_s = -ROAD_START;
    let mut agents = Vec::new();
    let t_ego = merge_x / ego_speed.max(1.0);
    for _ in 0..n_ramp {
        let mut placed = false;
        for _ in 0..50 {
            let speed = rng.gen_range(0.6..1.0) * limit;
            let dist = (speed * t_ego + rng.gen_range(-15.0..15.0)).max(5.0);
            let v0 = rng.gen_range(0.8..1.0) * limit;
            let cand = vehicle(rng, ramp, 2, merge_s - dist, speed, v0);
            if spawn_ok(&cand, &agents, 0, ego_s, ego_speed) {
                agents.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Ok(None);
        }
    }
    if !fill_vehicles(rng, &lanes, &[0, 1], spec.neighbors - n_ramp, (-25.0, 60.0), limit, 0, ego_speed, &mut agents) {
        return Ok(None);
    }
    let statics = parked(rng, n_static, LANE_WIDTH * 1.5 + 2.5, None);
    Ok(Some(Layout { lanes, route: Route::single(0), ego_lane: 0, ego_speed, agents, statics }))
}

fn intersection(spec: &SuiteSpec, rng: &mut impl Rng, limit: f64, ego_speed: f64, n_static: usize) -> Result<Option<Layout>> {
    let xc = rng.gen_range(45.0..65.0);
    let ego_red = rng.gen_bool(0.5);
    let (ego_light, cross_light) = if ego_red { (Light::Red, Light::Green) } else { (Light::Green, Light::Red) };
    let half = 150.0;
    let stop_offset = 6.0;
    let lanes = vec![
        Lane::straight([ROAD_START, 0.0], [ROAD_END, 0.0], limit, LANE_WIDTH)?
            .with_light(ego_light, Some(xc - stop_offset - ROAD_START)),
        Lane::straight([xc - LANE_WIDTH / 2.0, -half], [xc - LANE_WIDTH / 2.0, half], limit, LANE_WIDTH)?
            .with_light(cross_light, Some(half - stop_offset)),
        Lane::straight([xc + LANE_WIDTH / 2.0, half], [xc + LANE_WIDTH / 2.0, -half], limit, LANE_WIDTH)?
            .with_light(cross_light, Some(half - stop_offset)),
    ];
    let ego_s = -ROAD_START;
    let mut agents: Vec<Agent> = Vec::new();
    let n_cross = spec.neighbors.saturating_sub(1).max(spec.neighbors.min(1));
    for _ in 0..n_cross {
        let mut placed = false;
        for _ in 0..50 {
            let li = rng.gen_range(1..3);
            let s = rng.gen_range(half - 55.0..half - 12.0);
            let speed = rng.gen_range(0.4..1.0) * limit;
            let v0 = rng.gen_range(0.8..1.05) * limit;
            let cand = vehicle(rng, &lanes[li], li, s, speed, v0);
            let stop_room = half - stop_offset - s - cand.length / 2.0;
            let can_stop = cross_light == Light::Green || stop_room > speed * speed / (2.0 * 2.5) + 2.0;
            if can_stop && spawn_ok(&cand, &agents, 0, ego_s, ego_speed) {
                agents.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Ok(None);
        }
    }
    if !fill_vehicles(rng, &lanes, &[0], spec.neighbors - n_cross, (12.0, 40.0), limit, 0, ego_speed, &mut agents) {
        return Ok(None);
    }
    let statics = parked(rng, n_static, -LANE_WIDTH / 2.0 - 3.0, Some(xc));
    Ok(Some(Layout { lanes, route: Route::single(0), ego_lane: 0, ego_speed, agents, statics }))
}

fn jaywalk(spec: &SuiteSpec, rng: &mut impl Rng, limit: f64, ego_speed: f64, n_static: usize) -> Result<Option<Layout>> {
    let lanes = straight_lanes(&[0.0, LANE_WIDTH], limit)?;
    let xc = rng.gen_range(35.0..60.0);
    let v_p = rng.gen_range(1.0..1.6);
    let curb = -LANE_WIDTH / 2.0 - 3.5;
    let t_arrive = xc / ego_speed.max(1.0);
    let t_enter = (-LANE_WIDTH / 2.0 - curb) / v_p;
    let start = ((t_arrive - t_enter + rng.gen_range(-2.0..1.0)) / crate::scenario::DT).max(0.0) as usize;
    let walk_ticks = ((2.0 * LANE_WIDTH + 7.0) / v_p / crate::scenario::DT) as usize;
    let mut agents = vec![Agent {
        kind: AgentKind::Pedestrian,
        length: 0.5,
        width: 0.5,
        pose: Pose::new(xc, curb, PI / 2.0),
        speed: 0.0,
        controller: Controller::Scripted { velocity: [0.0, v_p], start_tick: start, stop_tick: start + walk_ticks },
    }];
    if spec.neighbors > 1
        && !fill_vehicles(rng, &lanes, &[0, 1], spec.neighbors - 1, (-25.0, 60.0), limit, 0, ego_speed, &mut agents)
    {
        return Ok(None);
    }
    let statics = parked(rng, n_static, curb + 0.5, Some(xc));
    Ok(Some(Layout { lanes, route: Route::single(0), ego_lane: 0, ego_speed, agents, statics }))
}

/// Comma-separated suite names, e.g. `straight,lane-change`.
pub fn parse_suites(s: &str) -> Result<Vec<Suite>> {
    let suites = s.split(',').map(|n| n.trim().parse()).collect::<Result<Vec<Suite>>>()?;
    if suites.is_empty() {
        return Err(Error::UnknownSuite(s.to_string()));
    }
    Ok(suites)
}

/// Scenario seed of dataset sample `index`. Spread over all of `u64`, so
/// small rollout seeds never coincide with training layouts in practice.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.rotate_left(17) ^ index.wrapping_mul(0x9FB2_1C65_1E98_DF25));
    rng.gen()
}

/// Draws a suite uniformly from `suites` for sample `index`.
pub fn pick_suite(suites: &[Suite], seed: u64, index: u64) -> Suite {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    suites[rng.gen_range(0..suites.len())]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::world::EGO_LENGTH;

    fn cfg() -> Config {
        Config::desk()
    }

    #[test]
    fn parse_suite_names() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!(matches!("roundabout".parse::<Suite>(), Err(Error::UnknownSuite(_))));
    }

    #[test]
    fn same_seed_same_frame() {
        let spec = SuiteSpec::new(Suite::LaneChange);
        assert_eq!(gen_scenario(&spec, 11, &cfg()).unwrap(), gen_scenario(&spec, 11, &cfg()).unwrap());
    }

    #[test]
    fn empty_straight_road_expert() {
        let spec = SuiteSpec { suite: Suite::Straight, neighbors: 0, max_statics: 0 };
        for seed in 0..5 {
            let ep = prepare_episode(&spec, seed, &cfg()).unwrap();
            let f = gen_scenario(&spec, seed, &cfg()).unwrap();
            let fut = f.future.unwrap();
            let limit = ep.world.reference_lane().speed_limit;
            for (a, b) in fut.points.iter().zip(&fut.points[1..]) {
                assert!(b.heading.abs() < 1e-9 && b.y.abs() < 1e-6, "{b:?}");
                assert!(a.dist(b) <= limit * crate::scenario::DT + 1e-9);
            }
        }
    }

    #[test]
    fn merge_seed_7_counts_and_gaps() {
        let spec = SuiteSpec::new(Suite::Merge);
        let c = cfg();
        let f = gen_scenario(&spec, 7, &c).unwrap();
        assert_eq!(f.valid_neighbor_count(), spec.neighbors);

        let w = prepare_episode(&spec, 7, &c).unwrap().spawn;
        let ego_s = w.lanes[0].project(w.ego.pose.x, w.ego.pose.y).0;
        let mut on_lane: Vec<(usize, f64, f64)> = vec![(0, ego_s, EGO_LENGTH)];
        on_lane.extend(w.agents.iter().filter_map(|a| lane_pos(a).map(|(l, s)| (l, s, a.length))));
        for (i, a) in on_lane.iter().enumerate() {
            for b in &on_lane[i + 1..] {
                if a.0 == b.0 {
                    assert!((a.1 - b.1).abs() - (a.2 + b.2) / 2.0 > MIN_SPAWN_GAP);
                }
            }
        }
    }

    #[test]
    fn every_suite_generates() {
        for s in Suite::ALL {
            let f = gen_scenario(&SuiteSpec::new(s), 3, &cfg()).unwrap();
            assert_eq!(f.future.as_ref().unwrap().len(), 80);
            assert_eq!(f.future.as_ref().unwrap().points[0], Pose::default());
            assert!(f.navigation[0].valid);
        }
    }
}
