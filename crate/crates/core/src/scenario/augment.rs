use rand::Rng;

use super::{quintic_fit, wrap_angle, EgoTrajectory, Pose, ScenarioFrame, DT};
use crate::config::Config;
use crate::error::{Error, Result};

/// Index of the future frame where the re-fitted segment rejoins the
/// original trajectory.
pub const AUGMENT_FRAMES: usize = 20;

/// Below this speed the quintic velocity direction is too noisy to define a
/// heading, so heading is interpolated instead.
const HEADING_MIN_SPEED: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Perturbation {
    pub dx: f64,
    pub dy: f64,
    pub dheading: f64,
    pub dspeed: f64,
}

/// Half-widths of the uniform perturbation ranges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbRanges {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
}

impl PerturbRanges {
    pub fn from_config(cfg: &Config) -> Self {
        Self { x: cfg.perturb_x, y: cfg.perturb_y, heading: cfg.perturb_heading, speed: cfg.perturb_speed }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Perturbation {
        let mut u = |h: f64| if h > 0.0 { rng.gen_range(-h..=h) } else { 0.0 };
        Perturbation { dx: u(self.x), dy: u(self.y), dheading: u(self.heading), dspeed: u(self.speed) }
    }
}

pub fn augment(frame: &ScenarioFrame, ranges: &PerturbRanges, rng: &mut impl Rng) -> Result<ScenarioFrame> {
    augment_with(frame, ranges.sample(rng))
}

/// Perturbs the current ego state and re-fits future frames
/// `0..=AUGMENT_FRAMES` with a per-axis quintic that ends on the original
/// frame `AUGMENT_FRAMES` with matching velocity and acceleration.
pub fn augment_with(frame: &ScenarioFrame, p: Perturbation) -> Result<ScenarioFrame> {
    let future = frame.future.as_ref().ok_or_else(|| Error::Invalid("augmentation needs a ground-truth future".into()))?;
    let pts = &future.points;
    let n = AUGMENT_FRAMES;
    if pts.len() < n + 2 {
        return Err(Error::Invalid(format!("augmentation needs at least {} future frames, got {}", n + 2, pts.len())));
    }

    let ego = frame.ego;
    let start = Pose::new(ego.pose.x + p.dx, ego.pose.y + p.dy, ego.pose.heading + p.dheading);
    let speed = (ego.speed + p.dspeed).max(0.0);
    let (s, c) = start.heading.sin_cos();

    let (prev, end, next) = (pts[n - 1], pts[n], pts[n + 1]);
    let vel = |a: f64, b: f64| (b - a) / (2.0 * DT);
    let acc = |a: f64, m: f64, b: f64| (b - 2.0 * m + a) / (DT * DT);
    let duration = n as f64 * DT;
    let qx = quintic_fit(
        [start.x, speed * c, ego.accel * c],
        [end.x, vel(prev.x, next.x), acc(prev.x, end.x, next.x)],
        duration,
    );
    let qy = quintic_fit(
        [start.y, speed * s, ego.accel * s],
        [end.y, vel(prev.y, next.y), acc(prev.y, end.y, next.y)],
        duration,
    );

    let mut points = pts.clone();
    points[0] = start;
    let dh = wrap_angle(end.heading - start.heading);
    for (i, slot) in points.iter_mut().enumerate().take(n).skip(1) {
        let t = i as f64 * DT;
        let (vx, vy) = (qx.vel(t), qy.vel(t));
        let heading = if vx.hypot(vy) > HEADING_MIN_SPEED {
            vy.atan2(vx)
        } else {
            start.heading + dh * i as f64 / n as f64
        };
        *slot = Pose::new(qx.pos(t), qy.pos(t), heading);
    }

    let mut out = frame.clone();
    out.ego.pose = start;
    out.ego.speed = speed;
    out.future = Some(EgoTrajectory { points });
    Ok(out)
}
