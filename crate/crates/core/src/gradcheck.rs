//! Central finite-difference check of tape gradients with respect to the
//! trainable parameters of a store.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{config_err, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub h: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Entries probed per parameter; larger tensors are sampled at evenly
    /// spaced indices.
    pub max_per_param: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { h: 1e-6, rel_tol: 1e-4, abs_tol: 1e-6, max_per_param: 8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradMismatch {
    pub path: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub params: usize,
    pub entries: usize,
    /// Largest `|fd − analytic| / (rel_tol·max(|fd|, |analytic|) + abs_tol)`;
    /// at most 1 when every entry passes.
    pub worst: f64,
    pub mismatches: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

fn probe_indices(numel: usize, max: usize) -> Vec<usize> {
    if numel <= max {
        return (0..numel).collect();
    }
    let mut v: Vec<usize> = (0..max).map(|i| i * (numel - 1) / (max - 1).max(1)).collect();
    v.dedup();
    v
}

/// Compare the gradient of `loss` (a scalar built from `store`) against
/// central differences for every trainable parameter.
pub fn check_params(
    store: &ParamStore<f64>,
    cfg: &GradCheck,
    loss: impl Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
) -> Result<GradCheckReport> {
    if !(cfg.h > 0.0) || cfg.max_per_param == 0 {
        return Err(config_err!("finite-difference step and probe count must be positive"));
    }
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let out = loss(&mut tape, s)?;
        Ok(tape.value(out).data()[0])
    };
    let mut tape = Tape::new();
    let out = loss(&mut tape, store)?;
    let grads = tape.backward(out)?;
    let ids = store.trainable_ids();
    if ids.is_empty() {
        return Err(config_err!("no trainable parameters to check"));
    }
    let mut report = GradCheckReport { params: ids.len(), ..GradCheckReport::default() };
    let mut probe = store.clone();
    for id in ids {
        let numel = store.value(id).numel();
        for j in probe_indices(numel, cfg.max_per_param) {
            let x = store.value(id).data()[j];
            probe.value_mut(id).data_mut()[j] = x + cfg.h;
            let plus = eval(&probe)?;
            probe.value_mut(id).data_mut()[j] = x - cfg.h;
            let minus = eval(&probe)?;
            probe.value_mut(id).data_mut()[j] = x;
            let numeric = (plus - minus) / (2.0 * cfg.h);
            let analytic = grads.param(id).map_or(0.0, |g| g.data()[j]);
            let allowed = cfg.rel_tol * numeric.abs().max(analytic.abs()) + cfg.abs_tol;
            let excess = (numeric - analytic).abs() / allowed;
            report.worst = report.worst.max(excess);
            report.entries += 1;
            if excess > 1.0 {
                report.mismatches.push(GradMismatch { path: store.param(id).path.clone(), index: j, analytic, numeric });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;
    use crate::tensor::Tensor;

    #[test]
    fn detects_correct_and_wrong_gradients() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", Tensor::new(&[3], alloc::vec![0.5, -1.0, 2.0]).unwrap(), ParamKind::Weight).unwrap();
        s.set_trainable(id, true);
        let square = |t: &mut Tape<f64>, s: &ParamStore<f64>| {
            let id = s.id("w")?;
            let w = t.param(id, s.value(id).clone(), true);
            let sq = t.mul(w, w)?;
            t.sum(sq)
        };
        let r = check_params(&s, &GradCheck::default(), square).unwrap();
        assert!(r.passed() && r.entries == 3);
        // A loss whose tape hides part of its dependence on w.
        let wrong = |t: &mut Tape<f64>, s: &ParamStore<f64>| {
            let id = s.id("w")?;
            let w = t.param(id, s.value(id).clone(), true);
            let c = t.constant(s.value(id).clone());
            let p = t.mul(w, c)?;
            t.sum(p)
        };
        let r = check_params(&s, &GradCheck::default(), wrong).unwrap();
        assert_eq!(r.mismatches.len(), 3);
        assert_eq!(probe_indices(100, 4), alloc::vec![0, 33, 66, 99]);
    }
}
