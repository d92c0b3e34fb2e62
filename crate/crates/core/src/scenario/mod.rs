//! Planning-instant data model, coordinate transforms, normalization,
//! augmentation and synthetic scenario generation.
//!
//! All geometry in a [`ScenarioFrame`] is expressed in the ego frame of the
//! current instant. The entity feature arrays are either metric or, after
//! [`ScenarioFrame::normalized`], scaled by the attached [`NormStats`]. The
//! ego state and the ground-truth future always stay metric.

mod augment;
pub mod dataset;
mod generate;
mod geometry;
mod norm;
mod quintic;

pub use augment::{augment, augment_with, Perturbation, PerturbRanges, AUGMENT_FRAMES};
pub use generate::{gen_scenario, parse_suites, pick_suite, prepare_episode, sample_seed, Episode, Suite, SuiteSpec};
pub use geometry::{from_ego_frame, rotate_into, to_ego_frame, wrap_angle, Obb, Pose};
pub use norm::{NormStats, StepStats};
pub use quintic::{quintic_fit, AxisState, Quintic};

use crate::error::{Error, Result};

/// Simulation and trajectory sampling period in seconds.
pub const DT: f64 = 0.1;
/// Per-step neighbor features: x, y, cos, sin, vx, vy, length, width and a
/// vehicle/pedestrian/cyclist one-hot.
pub const NEIGHBOR_DIM: usize = 11;
/// Per-point lane features: centre x/y, left and right boundary offsets,
/// vector to the next centre point, speed limit and a green/red/none
/// traffic-light one-hot.
pub const LANE_DIM: usize = 12;
/// Static object features: x, y, cos, sin, length, width and a
/// parked-vehicle/barrier one-hot.
pub const STATIC_DIM: usize = 8;
/// Ego features: x, y, cos, sin, speed. Acceleration stays out: under
/// closed-loop execution it is a second difference of executed poses and
/// amplifies small plan errors a hundredfold.
pub const EGO_DIM: usize = 5;
/// Model-facing trajectory channels: x, y, cos, sin.
pub const STATE_DIM: usize = 4;

const SPEED_SCALE: f64 = 10.0;
const SIZE_SCALE: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Col {
    PosX,
    PosY,
    VecX,
    VecY,
    Scale(f64),
    Keep,
}

impl Col {
    fn forward(self, s: &NormStats, v: f64) -> f64 {
        match self {
            Col::PosX => s.norm_x(v),
            Col::PosY => s.norm_y(v),
            Col::VecX => v / s.x_std,
            Col::VecY => v / s.y_scale,
            Col::Scale(k) => v / k,
            Col::Keep => v,
        }
    }

    fn inverse(self, s: &NormStats, v: f64) -> f64 {
        match self {
            Col::PosX => s.denorm_x(v),
            Col::PosY => s.denorm_y(v),
            Col::VecX => v * s.x_std,
            Col::VecY => v * s.y_scale,
            Col::Scale(k) => v * k,
            Col::Keep => v,
        }
    }
}

use Col::{Keep, PosX, PosY, Scale, VecX, VecY};

const NEIGHBOR_COLS: [Col; NEIGHBOR_DIM] = [
    PosX,
    PosY,
    Keep,
    Keep,
    Scale(SPEED_SCALE),
    Scale(SPEED_SCALE),
    Scale(SIZE_SCALE),
    Scale(SIZE_SCALE),
    Keep,
    Keep,
    Keep,
];
const LANE_COLS: [Col; LANE_DIM] = [PosX, PosY, VecX, VecY, VecX, VecY, VecX, VecY, Scale(SPEED_SCALE), Keep, Keep, Keep];
const STATIC_COLS: [Col; STATIC_DIM] = [PosX, PosY, Keep, Keep, Scale(SIZE_SCALE), Scale(SIZE_SCALE), Keep, Keep];

fn map_row<const N: usize>(row: &mut [f64; N], cols: &[Col; N], f: impl Fn(Col, f64) -> f64) {
    for (v, c) in row.iter_mut().zip(cols) {
        *v = f(*c, *v);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EgoState {
    pub pose: Pose,
    pub speed: f64,
    pub accel: f64,
}

/// `T` past steps, oldest first; the last step is the current instant.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborHistory {
    pub states: Vec<[f64; NEIGHBOR_DIM]>,
    pub valid: Vec<bool>,
}

impl NeighborHistory {
    pub fn empty(steps: usize) -> Self {
        Self { states: vec![[0.0; NEIGHBOR_DIM]; steps], valid: vec![false; steps] }
    }

    pub fn is_valid(&self) -> bool {
        self.valid.iter().any(|&v| v)
    }

    /// Most recent valid position.
    pub fn anchor(&self) -> Option<[f64; 2]> {
        self.valid.iter().rposition(|&v| v).map(|i| [self.states[i][0], self.states[i][1]])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanePolyline {
    pub points: Vec<[f64; LANE_DIM]>,
    pub valid: bool,
}

impl LanePolyline {
    pub fn empty(points: usize) -> Self {
        Self { points: vec![[0.0; LANE_DIM]; points], valid: false }
    }

    /// Mean of the centreline points.
    pub fn anchor(&self) -> [f64; 2] {
        let n = self.points.len().max(1) as f64;
        let (sx, sy) = self.points.iter().fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
        [sx / n, sy / n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StaticObject {
    pub features: [f64; STATIC_DIM],
    pub valid: bool,
}

impl StaticObject {
    pub const EMPTY: StaticObject = StaticObject { features: [0.0; STATIC_DIM], valid: false };
}

/// Ego poses at 10 Hz; index 0 is the current instant.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EgoTrajectory {
    pub points: Vec<Pose>,
}

impl EgoTrajectory {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(Pose::is_finite)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioFrame {
    pub ego: EgoState,
    pub neighbors: Vec<NeighborHistory>,
    pub lanes: Vec<LanePolyline>,
    pub navigation: Vec<LanePolyline>,
    pub statics: Vec<StaticObject>,
    pub future: Option<EgoTrajectory>,
    /// Set when the entity feature arrays are normalized.
    pub norm: Option<NormStats>,
}

impl ScenarioFrame {
    /// Copy with entity features scaled by `stats`. Invalid slots stay zero.
    pub fn normalized(&self, stats: &NormStats) -> Result<Self> {
        stats.validate()?;
        if self.norm.is_some() {
            return Err(Error::Invalid("frame is already normalized".into()));
        }
        let mut out = self.clone();
        out.apply(stats, Col::forward);
        out.norm = Some(stats.clone());
        Ok(out)
    }

    /// Inverse of [`normalized`](Self::normalized).
    pub fn denormalized(&self) -> Result<Self> {
        let stats = self.norm.as_ref().ok_or(Error::NotNormalized)?;
        let mut out = self.clone();
        out.apply(stats, Col::inverse);
        out.norm = None;
        Ok(out)
    }

    fn apply(&mut self, s: &NormStats, f: fn(Col, &NormStats, f64) -> f64) {
        let g = |c: Col, v: f64| f(c, s, v);
        for n in &mut self.neighbors {
            for (row, &ok) in n.states.iter_mut().zip(&n.valid) {
                if ok {
                    map_row(row, &NEIGHBOR_COLS, g);
                }
            }
        }
        for l in self.lanes.iter_mut().chain(self.navigation.iter_mut()).filter(|l| l.valid) {
            for p in &mut l.points {
                map_row(p, &LANE_COLS, g);
            }
        }
        for o in self.statics.iter_mut().filter(|o| o.valid) {
            map_row(&mut o.features, &STATIC_COLS, g);
        }
    }

    /// Ego feature vector, normalized with `stats`.
    pub fn ego_features(&self, stats: &NormStats) -> [f64; EGO_DIM] {
        let p = self.ego.pose;
        [
            stats.norm_x(p.x),
            stats.norm_y(p.y),
            p.heading.cos(),
            p.heading.sin(),
            self.ego.speed / SPEED_SCALE,
        ]
    }

    /// Metric position of a normalized `(x, y)` anchor.
    pub fn metric_anchor(&self, a: [f64; 2]) -> [f64; 2] {
        match &self.norm {
            Some(s) => [s.denorm_x(a[0]), s.denorm_y(a[1])],
            None => a,
        }
    }

    pub fn valid_neighbor_count(&self) -> usize {
        self.neighbors.iter().filter(|n| n.is_valid()).count()
    }

    /// The same frame with every neighbor slot invalidated and zeroed.
    pub fn without_neighbors(&self) -> Self {
        let mut out = self.clone();
        for n in &mut out.neighbors {
            *n = NeighborHistory::empty(n.states.len());
        }
        out
    }
}
