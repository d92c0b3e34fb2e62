//! Conditional optimal-transport flow matching with clean-trajectory
//! prediction, neighbor dropout, guided velocities and midpoint sampling.

use numgrad::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{forward, predict_cached, Conditioning, Model, SceneCache};
use crate::params::{Cx, ParamStore};
use crate::scenario::{EgoTrajectory, ScenarioFrame, STATE_DIM};

/// `τ_t = t·τ₁ + (1 − t)·τ₀`.
pub fn interpolate(tau0: &Tensor, tau1: &Tensor, t: f64) -> Result<Tensor> {
    same_shape(tau0, tau1)?;
    let data = tau0.data().iter().zip(tau1.data()).map(|(a, b)| t * b + (1.0 - t) * a).collect();
    Ok(Tensor::new(tau0.shape().to_vec(), data)?)
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Invalid(format!("shape {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Velocity implied by a clean-trajectory prediction:
/// `(τ̂₁ − τ_t) / (1 − t)` with `t` clamped to at most `1 − eps`.
pub fn predicted_velocity(tau1_hat: &Tensor, tau_t: &Tensor, t: f64, eps: f64) -> Result<Tensor> {
    same_shape(tau1_hat, tau_t)?;
    let denom = 1.0 - t.min(1.0 - eps);
    let data = tau1_hat.data().iter().zip(tau_t.data()).map(|(a, b)| (a - b) / denom).collect();
    Ok(Tensor::new(tau_t.shape().to_vec(), data)?)
}

/// `(1 − ω)·v_u + ω·v_c`. The two endpoint scales return the matching
/// input unchanged.
pub fn guided_velocity(v_uncond: &Tensor, v_cond: &Tensor, omega: f64) -> Result<Tensor> {
    same_shape(v_uncond, v_cond)?;
    if omega == 1.0 {
        return Ok(v_cond.clone());
    }
    if omega == 0.0 {
        return Ok(v_uncond.clone());
    }
    let data = v_uncond.data().iter().zip(v_cond.data()).map(|(u, c)| (1.0 - omega) * u + omega * c).collect();
    Ok(Tensor::new(v_cond.shape().to_vec(), data)?)
}

/// Explicit midpoint integration of `dx/dt = f(x, t)` over `steps` equal
/// steps from `t0` to `t1`. Stops with the step index on a non-finite state.
pub fn midpoint<F>(x0: &Tensor, t0: f64, t1: f64, steps: usize, mut f: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    if steps == 0 {
        return Err(Error::Invalid("the solver needs at least one step".into()));
    }
    let h = (t1 - t0) / steps as f64;
    let mut x = x0.clone();
    for i in 0..steps {
        let t = t0 + i as f64 * h;
        let k1 = f(&x, t)?;
        let mut mid = x.clone();
        mid.axpy(0.5 * h, &k1);
        let k2 = f(&mid, t + 0.5 * h)?;
        x.axpy(h, &k2);
        if !x.is_finite() {
            return Err(Error::NonFinite { what: "ODE state".into(), step: i });
        }
    }
    Ok(x)
}

/// Seeds a per-purpose RNG from a tuple of keys.
pub fn keyed_rng(keys: &[u64]) -> ChaCha8Rng {
    let mut h: u64 = 0x243F_6A88_85A3_08D3;
    for &k in keys {
        h ^= k;
        h = h.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(29);
        h ^= h >> 31;
    }
    ChaCha8Rng::seed_from_u64(h)
}

pub fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
}

/// Randomness for one training item.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemDraw {
    pub t: f64,
    pub noise: Tensor,
    /// Whether the neighbor condition is dropped.
    pub masked: bool,
}

impl ItemDraw {
    pub fn sample(rng: &mut impl Rng, len: usize, mask_prob: f64) -> Self {
        let t = rng.gen::<f64>();
        let noise = gaussian(len, STATE_DIM, 1.0, rng);
        let masked = rng.gen::<f64>() < mask_prob;
        Self { t, noise, masked }
    }
}

/// Loss components of one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    /// Mean squared error of the clean-trajectory prediction.
    pub flow: f64,
    pub consistency: f64,
}

/// Training objective on normalized frames with normalized targets
/// (`L × 4` each). Frames whose draw is masked lose their neighbors.
/// Returns the loss parts and the parameter gradients.
pub fn flow_loss(
    model: &Model,
    store: &ParamStore,
    frames: &[&ScenarioFrame],
    targets: &[Tensor],
    draws: &[ItemDraw],
) -> Result<(LossParts, Vec<(usize, Tensor)>)> {
    let items = frames.len();
    if targets.len() != items || draws.len() != items {
        return Err(Error::Invalid("frames, targets and draws differ in length".into()));
    }
    let dropped: Vec<ScenarioFrame> =
        frames.iter().zip(draws).filter(|(_, d)| d.masked).map(|(f, _)| f.without_neighbors()).collect();
    let mut it = dropped.iter();
    let cond_frames: Vec<&ScenarioFrame> =
        frames.iter().zip(draws).map(|(f, d)| if d.masked { it.next().expect("counted") } else { *f }).collect();
    let cond = Conditioning::new(&cond_frames, &model.cfg)?;

    let len = model.segments.len;
    let mut tau_t = Vec::with_capacity(items * len * STATE_DIM);
    let mut tau1 = Vec::with_capacity(items * len * STATE_DIM);
    for (target, d) in targets.iter().zip(draws) {
        if target.shape() != [len, STATE_DIM] {
            return Err(Error::Invalid(format!("target shape {:?}", target.shape())));
        }
        tau_t.extend(interpolate(&d.noise, target, d.t)?.into_data());
        tau1.extend_from_slice(target.data());
    }
    let tau_t = Tensor::matrix(items * len, STATE_DIM, tau_t);
    let t: Vec<f64> = draws.iter().map(|d| d.t).collect();

    let mut g = Graph::new();
    let mut cx = Cx::new(&mut g, store);
    let out = forward(&mut cx, model, &cond, &tau_t, &t)?;
    let target = g.constant(Tensor::matrix(items * len, STATE_DIM, tau1));
    let err = g.sub(out.pred, target)?;
    let sq = g.mul(err, err)?;
    let flow = g.mean(sq)?;
    let (rows, terms) = model.segments.overlap_diff_terms(items);
    let (loss, consistency) = if rows > 0 && model.cfg.consistency_weight > 0.0 {
        let diff = g.combine_rows(out.segments, rows, terms)?;
        let dsq = g.mul(diff, diff)?;
        let c = g.mean(dsq)?;
        let weighted = g.scale(c, model.cfg.consistency_weight)?;
        (g.add(flow, weighted)?, Some(c))
    } else {
        (flow, None)
    };
    let parts = LossParts {
        total: g.value(loss).item(),
        flow: g.value(flow).item(),
        consistency: consistency.map_or(0.0, |c| g.value(c).item()),
    };
    if !parts.total.is_finite() {
        return Err(Error::NonFinite { what: format!("loss (flow {}, consistency {})", parts.flow, parts.consistency), step: 0 });
    }
    let grads = g.backward(loss)?.into_param_grads();
    Ok((parts, grads))
}

/// Sampling options.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOptions {
    pub omega: f64,
    pub steps: usize,
    pub t_clamp: f64,
    pub temperature: f64,
}

impl SampleOptions {
    pub fn from_config(cfg: &crate::config::Config) -> Self {
        Self { omega: cfg.guidance_scale, steps: cfg.ode_steps, t_clamp: cfg.t_clamp, temperature: cfg.temperature }
    }
}

/// Guided velocity field of one normalized frame.
pub struct VelocityField<'a> {
    model: &'a Model,
    store: &'a ParamStore,
    cond: Option<(Conditioning, SceneCache)>,
    uncond: Option<(Conditioning, SceneCache)>,
    opts: SampleOptions,
}

impl<'a> VelocityField<'a> {
    pub fn new(model: &'a Model, store: &'a ParamStore, frame: &ScenarioFrame, opts: SampleOptions) -> Result<Self> {
        if opts.omega < 0.0 {
            return Err(Error::Invalid("guidance scale must be non-negative".into()));
        }
        let prepare = |f: &ScenarioFrame| -> Result<(Conditioning, SceneCache)> {
            let c = Conditioning::new(&[f], &model.cfg)?;
            let cache = SceneCache::new(model, store, &c)?;
            Ok((c, cache))
        };
        let cond = (opts.omega != 0.0).then(|| prepare(frame)).transpose()?;
        let uncond = (opts.omega != 1.0).then(|| prepare(&frame.without_neighbors())).transpose()?;
        Ok(Self { model, store, cond, uncond, opts })
    }

    fn branch(&self, cond: &Option<(Conditioning, SceneCache)>, tau: &Tensor, t: f64) -> Result<Option<Tensor>> {
        match cond {
            Some((c, cache)) => {
                let pred = predict_cached(self.model, self.store, c, cache, tau, &[t])?;
                Ok(Some(predicted_velocity(&pred, tau, t, self.opts.t_clamp)?))
            }
            None => Ok(None),
        }
    }

    pub fn eval(&self, tau: &Tensor, t: f64) -> Result<Tensor> {
        let vc = self.branch(&self.cond, tau, t)?;
        let vu = self.branch(&self.uncond, tau, t)?;
        match (vu, vc) {
            (Some(u), Some(c)) => guided_velocity(&u, &c, self.opts.omega),
            (None, Some(c)) => Ok(c),
            (Some(u), None) => Ok(u),
            (None, None) => unreachable!("at least one branch is active"),
        }
    }
}

/// Draws one trajectory for a normalized frame. Returns the final
/// normalized `L × 4` state; [`sample`] converts it to metric poses.
pub fn sample_state(model: &Model, store: &ParamStore, frame: &ScenarioFrame, opts: SampleOptions, rng: &mut impl Rng) -> Result<Tensor> {
    let field = VelocityField::new(model, store, frame, opts)?;
    let x0 = gaussian(model.segments.len, STATE_DIM, opts.temperature, rng);
    midpoint(&x0, 0.0, 1.0 - opts.t_clamp, opts.steps, |x, t| field.eval(x, t))
}

/// Draws one trajectory in the frame's metric ego coordinates.
pub fn sample(model: &Model, store: &ParamStore, frame: &ScenarioFrame, opts: SampleOptions, rng: &mut impl Rng) -> Result<EgoTrajectory> {
    let stats = frame.norm.as_ref().ok_or(Error::NotNormalized)?;
    let state = sample_state(model, store, frame, opts, rng)?;
    stats.denormalize_traj(&state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let a = Tensor::row(vec![0.0, 1.0]);
        let b = Tensor::row(vec![2.0, -1.0]);
        assert_eq!(interpolate(&a, &b, 0.0).unwrap(), a);
        assert_eq!(interpolate(&a, &b, 1.0).unwrap(), b);
        assert_eq!(interpolate(&a, &b, 0.5).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn exact_prediction_recovers_path_velocity() {
        let t0 = Tensor::row(vec![0.3, -1.0, 2.0]);
        let t1 = Tensor::row(vec![1.5, 0.5, -0.25]);
        for t in [0.0, 0.2, 0.7, 0.95] {
            let tt = interpolate(&t0, &t1, t).unwrap();
            let v = predicted_velocity(&t1, &tt, t, 1e-3).unwrap();
            for ((v, a), b) in v.data().iter().zip(t0.data()).zip(t1.data()) {
                assert!((v - (b - a)).abs() < 1e-12);
            }
        }
        let tt = Tensor::row(vec![1.0, 2.0]);
        assert_eq!(predicted_velocity(&tt, &tt, 0.4, 1e-3).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn guidance_combination() {
        let u = Tensor::row(vec![1.0]);
        let c = Tensor::row(vec![2.0]);
        assert!((guided_velocity(&u, &c, 1.8).unwrap().item() - 2.8).abs() < 1e-12);
        assert_eq!(guided_velocity(&u, &c, 1.0).unwrap(), c);
        assert_eq!(guided_velocity(&u, &c, 0.0).unwrap(), u);
    }

    #[test]
    fn midpoint_is_exact_on_linear_in_time_fields() {
        let x0 = Tensor::row(vec![1.0, -2.0]);
        let c = Tensor::row(vec![0.5, 3.0]);
        for steps in [1, 3, 4, 7] {
            let x = midpoint(&x0, 0.0, 1.0, steps, |_, _| Ok(c.clone())).unwrap();
            assert!((x.data()[0] - 1.5).abs() < 1e-12 && (x.data()[1] - 1.0).abs() < 1e-12);
            let x = midpoint(&x0, 0.0, 1.0, steps, |_, t| Ok(Tensor::row(vec![t, t]))).unwrap();
            assert!((x.data()[0] - 1.5).abs() < 1e-12);
        }
    }

    #[test]
    fn keyed_rng_depends_on_every_key() {
        let a: u64 = keyed_rng(&[1, 2, 3]).gen();
        assert_eq!(a, keyed_rng(&[1, 2, 3]).gen::<u64>());
        assert_ne!(a, keyed_rng(&[1, 2, 4]).gen::<u64>());
        assert_ne!(a, keyed_rng(&[2, 1, 3]).gen::<u64>());
    }
}
