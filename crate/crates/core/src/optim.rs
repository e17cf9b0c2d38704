//! AdamW with decoupled weight decay and global-norm gradient clipping.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tape::Grads;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    /// Fine-tuning defaults for a full-size detector: lr 5e-5,
    /// weight decay 0.01, gradients clipped to L2 norm 35.
    pub fn fine_tuning() -> Self {
        Self { lr: 5e-5, weight_decay: 0.01, clip_norm: Some(35.0), beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn with_lr(self, lr: f64) -> Self {
        Self { lr, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(config_err!("invalid optimizer settings {self:?}"));
        }
        Ok(())
    }
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self::fine_tuning()
    }
}

/// Moment accumulators keyed by parameter, plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamW<T = f32> {
    pub config: AdamWConfig,
    m: BTreeMap<ParamId, Vec<T>>,
    v: BTreeMap<ParamId, Vec<T>>,
    step: u64,
}

/// What a step did to the gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub grad_norm: f64,
    pub clipped: bool,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, m: BTreeMap::new(), v: BTreeMap::new(), step: 0 })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> Option<(&[T], &[T])> {
        Some((self.m.get(&id)?.as_slice(), self.v.get(&id)?.as_slice()))
    }

    /// Global L2 norm over all gradients.
    pub fn grad_norm(grads: &Grads<T>) -> f64 {
        libm::sqrt(
            grads
                .params()
                .flat_map(|(_, g)| g.data().iter())
                .map(|&v| {
                    let v = v.as_f64();
                    v * v
                })
                .sum::<f64>(),
        )
    }

    /// Update every trainable parameter that has a gradient. Gradients for
    /// frozen parameters are ignored.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>) -> Result<StepInfo> {
        for (id, g) in grads.params() {
            if !g.data().iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(alloc::format!("gradient of {}", store.param(id).path)));
            }
            if g.shape() != store.value(id).shape() {
                return Err(Error::Shape(alloc::format!("gradient shape mismatch for {}", store.param(id).path)));
            }
        }
        let norm = Self::grad_norm(grads);
        let (scale, clipped) = match self.config.clip_norm {
            Some(c) if norm > c => (c / norm, true),
            _ => (1.0, false),
        };
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(c.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, t as f64);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (lr, wd, eps) = (T::of(c.lr), T::of(c.weight_decay), T::of(c.eps));
        let (bc1, bc2, scale) = (T::of(bc1), T::of(bc2), T::of(scale));
        for (id, g) in grads.params() {
            if !store.param(id).trainable {
                continue;
            }
            let n = g.numel();
            let m = self.m.entry(id).or_insert_with(|| vec![T::zero(); n]);
            let v = self.v.entry(id).or_insert_with(|| vec![T::zero(); n]);
            let theta = store.value_mut(id).data_mut();
            for i in 0..n {
                let gi = g.data()[i] * scale;
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                theta[i] = theta[i] - lr * wd * theta[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(StepInfo { grad_norm: norm, clipped })
    }
}

/// Scale gradients in place so their global norm is at most `max_norm`.
pub fn clip_grad_norm<T: Real>(grads: &mut BTreeMap<ParamId, crate::tensor::Tensor<T>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>();
    let norm = libm::sqrt(norm);
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;
    use crate::tape::Tape;
    use crate::tensor::Tensor;

    fn store(vals: &[f64]) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::new(&[vals.len()], vals.to_vec()).unwrap(), ParamKind::Weight).unwrap();
        s.set_trainable(id, true);
        (s, id)
    }

    /// Gradients for `loss = Σ g_i · w_i`, i.e. constant gradient `g`.
    fn grads(s: &ParamStore<f64>, id: ParamId, g: &[f64]) -> Grads<f64> {
        let mut tape = Tape::new();
        let w = tape.param(id, s.value(id).clone(), true);
        let c = tape.constant(Tensor::new(&[g.len()], g.to_vec()).unwrap());
        let p = tape.mul(w, c).unwrap();
        let l = tape.sum(p).unwrap();
        tape.backward(l).unwrap()
    }

    #[test]
    fn zero_grad_no_decay_is_noop() {
        let (mut s, id) = store(&[1.0, -2.0]);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..AdamWConfig::fine_tuning() }).unwrap();
        let g = grads(&s, id, &[0.0, 0.0]);
        opt.step(&mut s, &g).unwrap();
        assert_eq!(s.value(id).data(), &[1.0, -2.0]);
    }

    #[test]
    fn zero_grad_with_decay_is_pure_decay() {
        let (mut s, id) = store(&[1.0, -2.0]);
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.01, ..AdamWConfig::fine_tuning() };
        let mut opt = AdamW::new(cfg).unwrap();
        let g = grads(&s, id, &[0.0, 0.0]);
        opt.step(&mut s, &g).unwrap();
        let f = 1.0 - 0.1 * 0.01;
        assert_eq!(s.value(id).data(), &[f, -2.0 * f]);
    }

    #[test]
    fn two_steps_match_reference() {
        // Independent scalar AdamW written out longhand.
        fn reference(mut theta: f64, g: f64, steps: i32) -> f64 {
            let (lr, wd, b1, b2, eps) = (1e-2, 0.01, 0.9, 0.999, 1e-8);
            let (mut m, mut v) = (0.0, 0.0);
            for t in 1..=steps {
                m = b1 * m + (1.0 - b1) * g;
                v = b2 * v + (1.0 - b2) * g * g;
                let mh = m / (1.0 - f64::powi(b1, t));
                let vh = v / (1.0 - f64::powi(b2, t));
                theta = theta - lr * wd * theta - lr * mh / (vh.sqrt() + eps);
            }
            theta
        }
        let (mut s, id) = store(&[0.5]);
        let mut opt = AdamW::new(AdamWConfig { lr: 1e-2, ..AdamWConfig::fine_tuning() }).unwrap();
        for _ in 0..2 {
            let g = grads(&s, id, &[0.3]);
            opt.step(&mut s, &g).unwrap();
        }
        assert!((s.value(id).data()[0] - reference(0.5, 0.3, 2)).abs() < 1e-15);
        assert_eq!(opt.step_count(), 2);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let (s, id) = store(&[0.0, 0.0]);
        let g = grads(&s, id, &[30.0, 40.0]);
        let mut map = g.into_params();
        let before = clip_grad_norm(&mut map, 35.0);
        assert_eq!(before, 50.0);
        let after: f64 = map.values().flat_map(|t| t.data().iter()).map(|v| v * v).sum::<f64>().sqrt();
        assert!((after - 35.0).abs() < 1e-12);

        let g = grads(&s, id, &[3.0, 4.0]);
        let mut map = g.into_params();
        clip_grad_norm(&mut map, 35.0);
        assert_eq!(map[&id].data(), &[3.0, 4.0]);
    }

    #[test]
    fn clipped_step_reports_norm() {
        let (mut s, id) = store(&[0.0, 0.0]);
        let mut opt = AdamW::new(AdamWConfig::fine_tuning()).unwrap();
        let g = grads(&s, id, &[30.0, 40.0]);
        let info = opt.step(&mut s, &g).unwrap();
        assert!(info.clipped);
        assert_eq!(info.grad_norm, 50.0);
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(AdamW::<f32>::new(AdamWConfig { lr: 0.0, ..AdamWConfig::fine_tuning() }).is_err());
    }
}
