//! Scripted expert: IDM speed profile along the reference lane and a
//! critically damped lateral controller toward the route offset.

use super::idm::{idm_accel, integrate, Leader};
use super::world::{AgentKind, Light, World, EGO_LENGTH, EGO_WIDTH};
use crate::scenario::{wrap_angle, EgoTrajectory, DT};

/// Natural frequency of the lateral response (rad/s).
const LATERAL_OMEGA: f64 = 1.2;
/// Extra lateral clearance kept from vehicles.
const VEHICLE_MARGIN: f64 = 0.4;
/// Extra lateral clearance kept from pedestrians, so the expert yields
/// before they step into the lane.
const PEDESTRIAN_MARGIN: f64 = 2.0;
/// Below this speed the heading no longer follows lateral motion.
const MIN_HEADING_SPEED: f64 = 2.0;

struct Obstacle {
    s: f64,
    d: f64,
    v_s: f64,
    v_d: f64,
    length: f64,
    band: f64,
}

/// Plans `horizon` poses (index 0 = current pose) in world coordinates.
pub fn expert_plan(world: &World, horizon: usize) -> EgoTrajectory {
    let lane = world.reference_lane();
    let ego = world.ego;
    let (mut s, mut d) = lane.project(ego.pose.x, ego.pose.y);
    let rel = wrap_angle(ego.pose.heading - lane.pose_at(s).heading);
    let mut v = (ego.speed * rel.cos()).max(0.0);
    let mut d_dot = ego.speed * rel.sin();

    let obstacles: Vec<Obstacle> = world
        .agents
        .iter()
        .map(|a| {
            let (so, dobs) = lane.project(a.pose.x, a.pose.y);
            let h = lane.pose_at(so).heading;
            let vel = a.velocity();
            let (sn, cs) = h.sin_cos();
            let margin = if a.kind == AgentKind::Pedestrian { PEDESTRIAN_MARGIN } else { VEHICLE_MARGIN };
            Obstacle {
                s: so,
                d: dobs,
                v_s: vel[0] * cs + vel[1] * sn,
                v_d: -vel[0] * sn + vel[1] * cs,
                length: a.length,
                band: (EGO_WIDTH + a.width) / 2.0 + margin,
            }
        })
        .collect();
    let stop = match (lane.light, lane.stop_s) {
        (Light::Red, Some(stop)) if s + EGO_LENGTH / 2.0 < stop + 0.5 => Some(stop),
        _ => None,
    };

    let mut points = Vec::with_capacity(horizon);
    points.push(ego.pose);
    for k in 1..horizon {
        let t = (k - 1) as f64 * DT;
        let mut leader: Option<Leader> = None;
        let mut consider = |gap: f64, dv: f64| {
            if leader.map_or(true, |l| gap < l.gap) {
                leader = Some(Leader { gap, dv });
            }
        };
        for o in &obstacles {
            let (so, dobs) = (o.s + o.v_s * t, o.d + o.v_d * t);
            if so > s && so - s < 120.0 && (dobs - d).abs() < o.band {
                consider(so - s - (EGO_LENGTH + o.length) / 2.0, v - o.v_s.max(0.0));
            }
        }
        if let Some(stop) = stop {
            consider(stop - s - EGO_LENGTH / 2.0, v);
        }
        let acc = idm_accel(v, lane.speed_limit, leader, &world.idm);
        let (ds, v_next) = integrate(v, acc, DT);
        s += ds;
        v = v_next;

        let target = world.route.target_offset(world.tick + k - 1);
        let lat_acc = -2.0 * LATERAL_OMEGA * d_dot - LATERAL_OMEGA * LATERAL_OMEGA * (d - target);
        d_dot += lat_acc * DT;
        d += d_dot * DT;
        points.push(lane.offset_pose(s, d, d_dot.atan2(v.max(MIN_HEADING_SPEED))));
    }
    EgoTrajectory { points }
}
