//! AdamW with decoupled weight decay, and the EMA weight tracker.

use numgrad::Tensor;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn from_config(cfg: &Config) -> Self {
        Self { lr: cfg.lr, beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.adam_eps, weight_decay: cfg.weight_decay }
    }

    /// One update of `p` in place. `step` counts from 1 and drives the bias
    /// correction.
    pub fn update(&self, p: &mut Tensor, g: &Tensor, m: &mut Tensor, v: &mut Tensor, step: u64) -> Result<()> {
        if p.shape() != g.shape() || p.shape() != m.shape() || p.shape() != v.shape() {
            return Err(Error::Invalid(format!("optimizer shapes {:?} / {:?}", p.shape(), g.shape())));
        }
        let c1 = 1.0 - self.beta1.powf(step as f64);
        let c2 = 1.0 - self.beta2.powf(step as f64);
        let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
        for ((p, &g), (m, v)) in it {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *p);
        }
        Ok(())
    }
}

/// Decay actually applied after `step` updates: `min(decay, (1+step)/(10+step))`.
/// Early on this tracks the online weights instead of staying anchored to
/// the initialization for thousands of steps.
pub fn ema_decay_at(decay: f64, step: u64) -> f64 {
    let s = step as f64;
    decay.min((1.0 + s) / (10.0 + s))
}

/// `ema ← decay·ema + (1 − decay)·params`.
pub fn ema_update(ema: &mut ParamStore, params: &ParamStore, decay: f64) -> Result<()> {
    ema.check_same_layout(params)?;
    for (e, p) in ema.tensors_mut().iter_mut().zip(params.tensors()) {
        for (e, p) in e.data_mut().iter_mut().zip(p.data()) {
            *e = decay * *e + (1.0 - decay) * p;
        }
    }
    Ok(())
}

/// Same names and shapes as `store`, every value zero.
pub fn zeros_like(store: &ParamStore) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, t) in store.iter() {
        out.add(name, Tensor::new(t.shape().to_vec(), vec![0.0; t.len()]).expect("shape of an existing tensor"));
    }
    out
}

#[cfg(test)]
mod tests {
    #[test]
    fn ema_warmup_ramps_to_the_configured_decay() {
        assert_eq!(super::ema_decay_at(0.999, 0), 0.1);
        assert!((super::ema_decay_at(0.999, 90) - 0.91).abs() < 1e-12);
        assert_eq!(super::ema_decay_at(0.999, 100_000), 0.999);
    }

    use super::*;

    fn store(vals: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::row(vals.to_vec()));
        s
    }

    #[test]
    fn zero_gradient_applies_only_weight_decay() {
        let opt = AdamW { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 };
        let mut p = Tensor::row(vec![2.0, -1.0]);
        let (mut m, mut v) = (Tensor::zeros(1, 2), Tensor::zeros(1, 2));
        opt.update(&mut p, &Tensor::zeros(1, 2), &mut m, &mut v, 1).unwrap();
        assert_eq!(p.data(), &[2.0 - 0.1 * 0.01 * 2.0, -1.0 + 0.1 * 0.01]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // With bias correction the first step is lr·g/(|g| + eps).
        let opt = AdamW { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 0.0, weight_decay: 0.0 };
        let mut p = Tensor::row(vec![0.0, 0.0]);
        let (mut m, mut v) = (Tensor::zeros(1, 2), Tensor::zeros(1, 2));
        opt.update(&mut p, &Tensor::row(vec![3.0, -0.5]), &mut m, &mut v, 1).unwrap();
        assert!((p.data()[0] + 0.01).abs() < 1e-15 && (p.data()[1] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn ema_fixed_point_and_zero_decay() {
        let p = store(&[1.0, 2.0]);
        let mut e = p.clone();
        ema_update(&mut e, &p, 0.999).unwrap();
        assert_eq!(e, p);
        let mut e = store(&[5.0, 5.0]);
        ema_update(&mut e, &p, 0.0).unwrap();
        assert_eq!(e, p);
        assert!(ema_update(&mut store(&[1.0]), &p, 0.5).is_err());
    }

    #[test]
    fn ema_converges_geometrically() {
        let target = store(&[1.0]);
        let mut e = store(&[0.0]);
        for n in 1..=2000u32 {
            ema_update(&mut e, &target, 0.999).unwrap();
            // Closed form of the geometric series: 1 − 0.999ⁿ.
            let want = 1.0 - 0.999f64.powi(n as i32);
            assert!((e.tensors()[0].item() - want).abs() < 1e-12, "n = {n}");
        }
    }
}
