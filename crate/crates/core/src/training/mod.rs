//! Optimization loop, EMA tracking, batching with augmentation and
//! checkpoints.

pub mod checkpoint;
pub mod optim;

use std::borrow::Cow;
use std::ops::ControlFlow;

use numgrad::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::flow::{flow_loss, keyed_rng, ItemDraw, LossParts};
use crate::model::{predict, Conditioning, Model};
use crate::params::{ParamId, ParamStore};
use crate::scenario::{augment, PerturbRanges};
use crate::scenario::dataset::Dataset;
use crate::scenario::{NormStats, ScenarioFrame, STATE_DIM};

pub use optim::{ema_decay_at, ema_update, zeros_like, AdamW};

// Stream identifiers for keyed randomness.
const KEY_EPOCH: u64 = 1;
const KEY_DRAW: u64 = 2;
const KEY_AUGMENT: u64 = 3;
const KEY_EVAL: u64 = 4;

/// Everything a training run carries from step to step. Randomness is keyed
/// by `(cfg.seed, step)`, so no generator state needs saving.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub params: ParamStore,
    pub ema: ParamStore,
    pub adam_m: ParamStore,
    pub adam_v: ParamStore,
    pub step: u64,
    pub stats: NormStats,
}

impl TrainState {
    /// Fresh parameters from `cfg.seed`; EMA starts equal to them.
    pub fn new(cfg: &Config, stats: NormStats) -> Result<Self> {
        stats.validate()?;
        let (model, params) = Model::init(cfg, cfg.seed)?;
        let adam_m = zeros_like(&params);
        let adam_v = zeros_like(&params);
        Ok(Self { model, ema: params.clone(), params, adam_m, adam_v, step: 0, stats })
    }

    pub fn cfg(&self) -> &Config {
        &self.model.cfg
    }
}

/// One normalized training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub frame: ScenarioFrame,
    /// Normalized ground truth, `L × 4`.
    pub target: Tensor,
}

impl Sample {
    /// Normalizes a metric frame that carries a future.
    pub fn new(metric: &ScenarioFrame, stats: &NormStats) -> Result<Self> {
        let future = metric.future.as_ref().ok_or_else(|| Error::Invalid("training frames need a future".into()))?;
        Ok(Self { frame: metric.normalized(stats)?, target: stats.normalize_traj(future)? })
    }
}

/// Dataset frames ready for batching. Unperturbed samples are normalized
/// once; augmented ones are rebuilt per use.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub stats: NormStats,
    metric: Vec<ScenarioFrame>,
    samples: Vec<Sample>,
}

impl TrainData {
    pub fn new(ds: &Dataset, cfg: &Config) -> Result<Self> {
        ds.check_config(cfg)?;
        if ds.is_empty() {
            return Err(Error::Invalid("empty dataset".into()));
        }
        let samples = ds.frames.iter().map(|f| Sample::new(f, &ds.stats)).collect::<Result<Vec<_>>>()?;
        for s in &samples {
            if s.target.rows() != cfg.traj_len {
                return Err(Error::Invalid(format!("future of {} points, config expects {}", s.target.rows(), cfg.traj_len)));
            }
        }
        Ok(Self { stats: ds.stats.clone(), metric: ds.frames.clone(), samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    /// Dataset indices for `step`: consecutive slices of per-epoch
    /// permutations, so every sample is seen once per epoch.
    pub fn batch_indices(&self, seed: u64, step: u64, batch: usize) -> Vec<usize> {
        let n = self.len();
        let start = step as u128 * batch as u128;
        let mut out = Vec::with_capacity(batch);
        let mut cached: Option<(u128, Vec<usize>)> = None;
        for i in start..start + batch as u128 {
            let epoch = i / n as u128;
            if cached.as_ref().map_or(true, |(e, _)| *e != epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut keyed_rng(&[seed, KEY_EPOCH, epoch as u64]));
                cached = Some((epoch, perm));
            }
            out.push(cached.as_ref().expect("just set").1[(i % n as u128) as usize]);
        }
        out
    }

    /// Samples for `step`, perturbed with probability `augment_prob` when
    /// augmentation is on.
    pub fn batch(&self, cfg: &Config, step: u64) -> Result<Vec<Cow<'_, Sample>>> {
        let ranges = PerturbRanges::from_config(cfg);
        self.batch_indices(cfg.seed, step, cfg.batch_size)
            .into_iter()
            .enumerate()
            .map(|(j, idx)| {
                if !cfg.augment {
                    return Ok(Cow::Borrowed(&self.samples[idx]));
                }
                let mut rng = keyed_rng(&[cfg.seed, KEY_AUGMENT, step, j as u64]);
                if rng.gen::<f64>() >= cfg.augment_prob {
                    return Ok(Cow::Borrowed(&self.samples[idx]));
                }
                let frame = augment(&self.metric[idx], &ranges, &mut rng)?;
                Ok(Cow::Owned(Sample::new(&frame, &self.stats)?))
            })
            .collect()
    }
}

/// Per-item noise, time and condition mask for `step`.
pub fn step_draws(cfg: &Config, step: u64, items: usize) -> Vec<ItemDraw> {
    (0..items)
        .map(|j| ItemDraw::sample(&mut keyed_rng(&[cfg.seed, KEY_DRAW, step, j as u64]), cfg.traj_len, cfg.mask_prob))
        .collect()
}

/// Loss, backward pass, AdamW update of the online weights, then EMA.
pub fn train_step(state: &mut TrainState, batch: &[&Sample]) -> Result<LossParts> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let cfg = state.model.cfg.clone();
    let frames: Vec<&ScenarioFrame> = batch.iter().map(|s| &s.frame).collect();
    let targets: Vec<Tensor> = batch.iter().map(|s| s.target.clone()).collect();
    let draws = step_draws(&cfg, state.step, batch.len());
    let (parts, grads) = flow_loss(&state.model, &state.params, &frames, &targets, &draws).map_err(|e| match e {
        Error::NonFinite { what, .. } => Error::NonFinite { what, step: state.step as usize },
        e => e,
    })?;
    let mut by_id: Vec<Option<Tensor>> = vec![None; state.params.len()];
    for (key, g) in grads {
        if !g.is_finite() {
            return Err(Error::NonFinite {
                what: format!("gradient of {} (loss {})", state.params.name(ParamId(key)), parts.total),
                step: state.step as usize,
            });
        }
        by_id[key] = Some(g);
    }
    let opt = AdamW::from_config(&cfg);
    let next = state.step + 1;
    for (i, g) in by_id.into_iter().enumerate() {
        let id = ParamId(i);
        let g = match g {
            Some(g) => g,
            None => {
                let shape = state.params.get(id).shape().to_vec();
                Tensor::new(shape.clone(), vec![0.0; shape.iter().product()])?
            }
        };
        opt.update(state.params.get_mut(id), &g, state.adam_m.get_mut(id), state.adam_v.get_mut(id), next)?;
    }
    ema_update(&mut state.ema, &state.params, ema_decay_at(cfg.ema_decay, next))?;
    state.step = next;
    Ok(parts)
}

/// Runs up to `steps` further steps. `on_step` sees the state after each
/// update and may stop early.
pub fn train(
    state: &mut TrainState,
    data: &TrainData,
    steps: u64,
    mut on_step: impl FnMut(&TrainState, &LossParts) -> ControlFlow<()>,
) -> Result<()> {
    if data.stats != state.stats {
        return Err(Error::StatsMismatch);
    }
    for _ in 0..steps {
        let cfg = state.model.cfg.clone();
        let batch = data.batch(&cfg, state.step)?;
        let refs: Vec<&Sample> = batch.iter().map(|c| c.as_ref()).collect();
        let parts = train_step(state, &refs)?;
        if on_step(state, &parts).is_break() {
            break;
        }
    }
    Ok(())
}

/// Mean squared error of the clean-trajectory prediction in normalized
/// units, with the full condition and one fixed `(t, noise)` draw per
/// sample keyed by `seed`.
pub fn eval_mse(model: &Model, store: &ParamStore, samples: &[Sample], seed: u64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Invalid("nothing to evaluate".into()));
    }
    let len = model.segments.len;
    let mut total = 0.0;
    for (c, chunk) in samples.chunks(model.cfg.batch_size.max(1)).enumerate() {
        let frames: Vec<&ScenarioFrame> = chunk.iter().map(|s| &s.frame).collect();
        let cond = Conditioning::new(&frames, &model.cfg)?;
        let mut tau = Vec::with_capacity(chunk.len() * len * STATE_DIM);
        let mut t = Vec::with_capacity(chunk.len());
        for (j, s) in chunk.iter().enumerate() {
            let mut rng = keyed_rng(&[seed, KEY_EVAL, c as u64, j as u64]);
            let d = ItemDraw::sample(&mut rng, len, 0.0);
            tau.extend(crate::flow::interpolate(&d.noise, &s.target, d.t)?.into_data());
            t.push(d.t);
        }
        let pred = predict(model, store, &cond, &Tensor::matrix(chunk.len() * len, STATE_DIM, tau), &t)?;
        let truth = chunk.iter().flat_map(|s| s.target.data().iter().copied());
        total += pred.data().iter().zip(truth).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
    }
    Ok(total / (samples.len() * len * STATE_DIM) as f64)
}
