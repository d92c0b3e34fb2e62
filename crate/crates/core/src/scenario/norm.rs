use numgrad::Tensor;

use super::{EgoTrajectory, Pose, STATE_DIM};
use crate::error::{Error, Result};

/// Affine map of the four trajectory channels at one horizon step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub mean: [f64; STATE_DIM],
    pub std: [f64; STATE_DIM],
}

/// Scene scaling plus per-step trajectory statistics.
///
/// Scene positions use the scalars: `x` is z-scored, `y` is divided by
/// `y_scale`, free vectors use `x_std` and `y_scale`. Trajectories are
/// z-scored per horizon step and channel with `steps`, so near-term points,
/// whose spread is centimetres, weigh as much as distant ones. An empty
/// `steps` falls back to the scalar map with raw `cos`/`sin`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub x_mean: f64,
    pub x_std: f64,
    pub y_scale: f64,
    pub steps: Vec<StepStats>,
}

/// Lower bound for fitted scene scales so degenerate datasets stay invertible.
const MIN_SCALE: f64 = 1.0;
/// Lower bounds for per-step spreads: metres for positions, unit-circle
/// components for the heading. The first step is constant and hits them.
const MIN_POS_STD: f64 = 0.05;
const MIN_ANGLE_STD: f64 = 0.01;

impl NormStats {
    /// Scalar-only statistics (no per-step trajectory table).
    pub fn new(x_mean: f64, x_std: f64, y_scale: f64) -> Result<Self> {
        let s = Self { x_mean, x_std, y_scale, steps: Vec::new() };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.x_mean.is_finite()
            && self.x_std.is_finite()
            && self.y_scale.is_finite()
            && self.x_std > 0.0
            && self.y_scale > 0.0
            && self.steps.iter().all(|s| {
                s.mean.iter().all(|m| m.is_finite()) && s.std.iter().all(|d| d.is_finite() && *d > 0.0)
            });
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("invalid normalization statistics {self:?}")))
        }
    }

    /// Equality of every stored bit, as checkpoints and datasets must agree.
    pub fn bitwise_eq(&self, other: &NormStats) -> bool {
        let bits = |s: &NormStats| {
            let mut v = vec![s.x_mean.to_bits(), s.x_std.to_bits(), s.y_scale.to_bits()];
            for st in &s.steps {
                v.extend(st.mean.iter().chain(&st.std).map(|x| x.to_bits()));
            }
            v
        };
        bits(self) == bits(other)
    }

    /// Scene scalars: mean and standard deviation of every future `x`, root
    /// mean square of every future `y`, both floored at 1. Per-step table:
    /// mean and standard deviation of each channel at each step, floored.
    /// All trajectories must have the same length.
    pub fn fit<'a>(trajs: impl IntoIterator<Item = &'a EgoTrajectory>) -> Result<Self> {
        let trajs: Vec<&EgoTrajectory> = trajs.into_iter().collect();
        let pts: Vec<&Pose> = trajs.iter().flat_map(|t| t.points.iter()).collect();
        if pts.is_empty() {
            return Err(Error::Invalid("cannot fit normalization on an empty dataset".into()));
        }
        let n = pts.len() as f64;
        let mean = pts.iter().map(|p| p.x).sum::<f64>() / n;
        let std = (pts.iter().map(|p| (p.x - mean) * (p.x - mean)).sum::<f64>() / n).sqrt().max(MIN_SCALE);
        let y_scale = (pts.iter().map(|p| p.y * p.y).sum::<f64>() / n).sqrt().max(MIN_SCALE);

        let len = trajs[0].len();
        if trajs.iter().any(|t| t.len() != len) {
            return Err(Error::Invalid("cannot fit per-step normalization on trajectories of different lengths".into()));
        }
        let m = trajs.len() as f64;
        let steps = (0..len)
            .map(|k| {
                let rows: Vec<[f64; STATE_DIM]> = trajs.iter().map(|t| channels(&t.points[k])).collect();
                let mut st = StepStats { mean: [0.0; STATE_DIM], std: [0.0; STATE_DIM] };
                for c in 0..STATE_DIM {
                    let mu = rows.iter().map(|r| r[c]).sum::<f64>() / m;
                    let var = rows.iter().map(|r| (r[c] - mu) * (r[c] - mu)).sum::<f64>() / m;
                    let floor = if c < 2 { MIN_POS_STD } else { MIN_ANGLE_STD };
                    st.mean[c] = mu;
                    st.std[c] = var.sqrt().max(floor);
                }
                st
            })
            .collect();
        let s = Self { x_mean: mean, x_std: std, y_scale, steps };
        s.validate()?;
        Ok(s)
    }

    pub fn norm_x(&self, x: f64) -> f64 {
        (x - self.x_mean) / self.x_std
    }

    pub fn norm_y(&self, y: f64) -> f64 {
        y / self.y_scale
    }

    pub fn denorm_x(&self, x: f64) -> f64 {
        x * self.x_std + self.x_mean
    }

    pub fn denorm_y(&self, y: f64) -> f64 {
        y * self.y_scale
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if !self.steps.is_empty() && self.steps.len() != len {
            return Err(Error::Invalid(format!(
                "trajectory has {len} points, normalization statistics cover {}",
                self.steps.len()
            )));
        }
        Ok(())
    }

    /// Normalized channels of `p` at horizon step `k`.
    pub fn norm_point(&self, k: usize, p: &Pose) -> [f64; STATE_DIM] {
        let raw = channels(p);
        match self.steps.get(k) {
            Some(st) => std::array::from_fn(|c| (raw[c] - st.mean[c]) / st.std[c]),
            None => [self.norm_x(raw[0]), self.norm_y(raw[1]), raw[2], raw[3]],
        }
    }

    /// Metric `(x, y)` of normalized row `row` at horizon step `k`.
    pub fn denorm_xy(&self, k: usize, row: &[f64]) -> [f64; 2] {
        match self.steps.get(k) {
            Some(st) => [row[0] * st.std[0] + st.mean[0], row[1] * st.std[1] + st.mean[1]],
            None => [self.denorm_x(row[0]), self.denorm_y(row[1])],
        }
    }

    /// `L × 4` tensor of normalized `(x, y, cos θ, sin θ)`.
    pub fn normalize_traj(&self, traj: &EgoTrajectory) -> Result<Tensor> {
        self.validate()?;
        self.check_len(traj.len())?;
        let mut data = Vec::with_capacity(traj.len() * STATE_DIM);
        for (k, p) in traj.points.iter().enumerate() {
            data.extend_from_slice(&self.norm_point(k, p));
        }
        Ok(Tensor::matrix(traj.len(), STATE_DIM, data))
    }

    /// Inverse of [`normalize_traj`](Self::normalize_traj); heading is
    /// recovered with `atan2`.
    pub fn denormalize_traj(&self, t: &Tensor) -> Result<EgoTrajectory> {
        self.validate()?;
        if t.cols() != STATE_DIM {
            return Err(Error::Invalid(format!("trajectory tensor has {} columns, expected {STATE_DIM}", t.cols())));
        }
        self.check_len(t.rows())?;
        let points = (0..t.rows())
            .map(|k| {
                let row = t.row_slice(k);
                let [x, y] = self.denorm_xy(k, row);
                let (c, s) = match self.steps.get(k) {
                    Some(st) => (row[2] * st.std[2] + st.mean[2], row[3] * st.std[3] + st.mean[3]),
                    None => (row[2], row[3]),
                };
                Pose::new(x, y, s.atan2(c))
            })
            .collect();
        Ok(EgoTrajectory { points })
    }
}

fn channels(p: &Pose) -> [f64; STATE_DIM] {
    let (s, c) = p.heading.sin_cos();
    [p.x, p.y, c, s]
}
