//! Supervised detector training and evaluation.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Error, Result};
use crate::metrics::{mean_ap, MapReport, MatchConfig};
use crate::model::{apply_bn_updates, FusionModel};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{ParamSource, ParamStore};
use crate::scene::{Label, MultimodalSample};
use crate::tape::Tape;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Cosine decay from the configured rate to zero over the run.
    Cosine,
}

impl LrSchedule {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "cosine" => Ok(Self::Cosine),
            other => Err(config_err!("unknown learning-rate schedule {other:?}")),
        }
    }

    pub fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            Self::Constant => 1.0,
            Self::Cosine => 0.5 * (1.0 + libm::cos(core::f64::consts::PI * step as f64 / total.max(1) as f64)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 8, batch_size: 16, optimizer: AdamWConfig::fine_tuning().with_lr(2e-3), schedule: LrSchedule::Cosine, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config_err!("batch size must be positive"));
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub trainable_fraction: f64,
}

/// Shuffled mini-batch order for one epoch.
pub fn batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(crate::scene::mix_seed(seed, epoch as u64));
    idx.shuffle(&mut rng);
    idx.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

/// One detection-loss step on `batch`; returns the loss value.
pub fn detection_step(
    model: &FusionModel,
    store: &mut ParamStore,
    opt: &mut AdamW,
    batch: &[&MultimodalSample],
) -> Result<f64> {
    let input = model.prepare::<f32>(batch)?;
    let mut tape = Tape::new();
    let out = model.run(&mut tape, &*store, &input, true)?;
    let labels: Vec<&[Label]> = batch.iter().map(|s| s.labels.as_slice()).collect();
    let targets = model.targets::<f32>(&labels);
    let loss = model.detection_loss(&mut tape, out.head, &targets)?;
    let value = tape.value(loss).data()[0] as f64;
    if !value.is_finite() {
        return Err(Error::Diverged(alloc::format!("detection loss became {value}")));
    }
    let grads = tape.backward(loss)?;
    opt.step(store, &grads)?;
    apply_bn_updates(store, &out.bn_updates);
    Ok(value)
}

/// Train the parameters currently flagged trainable in `store` on the
/// detection loss. `on_epoch` sees each epoch's stats as they complete.
pub fn train_detector(
    model: &FusionModel,
    store: &mut ParamStore,
    data: &[MultimodalSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if store.trainable_ids().is_empty() {
        return Err(config_err!("no trainable parameters"));
    }
    if data.is_empty() && cfg.epochs > 0 {
        return Err(config_err!("empty training set"));
    }
    let mut opt = AdamW::new(cfg.optimizer)?;
    let fraction = store.trainable_numel() as f64 / store.base_numel() as f64;
    let mut curve = Vec::with_capacity(cfg.epochs);
    let total_steps = cfg.epochs * data.len().div_ceil(cfg.batch_size);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let order = batches(data.len(), cfg.batch_size, cfg.seed, epoch);
        for b in &order {
            opt.config.lr = cfg.optimizer.lr * cfg.schedule.factor(step, total_steps);
            step += 1;
            let batch: Vec<&MultimodalSample> = b.iter().map(|&i| &data[i]).collect();
            total += detection_step(model, store, &mut opt, &batch)?;
        }
        let stats = EpochStats { epoch, loss: total / order.len() as f64, trainable_fraction: fraction };
        on_epoch(&stats);
        curve.push(stats);
    }
    Ok(curve)
}

/// Mean detection loss in inference mode.
pub fn eval_loss(model: &FusionModel, src: &dyn ParamSource<f32>, data: &[MultimodalSample], batch: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(config_err!("empty evaluation set"));
    }
    let mut total = 0.0;
    for chunk in data.chunks(batch.max(1)) {
        let refs: Vec<&MultimodalSample> = chunk.iter().collect();
        let input = model.prepare::<f32>(&refs)?;
        let mut tape = Tape::new();
        let out = model.run(&mut tape, src, &input, false)?;
        let labels: Vec<&[Label]> = chunk.iter().map(|s| s.labels.as_slice()).collect();
        let targets = model.targets::<f32>(&labels);
        let loss = model.detection_loss(&mut tape, out.head, &targets)?;
        total += tape.value(loss).data()[0] as f64 * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Detection threshold used for mAP: low enough that the ranking, not the
/// cutoff, decides precision and recall.
pub const EVAL_SCORE_THRESHOLD: f32 = 0.05;

pub fn evaluate(model: &FusionModel, src: &dyn ParamSource<f32>, data: &[MultimodalSample], config: &MatchConfig) -> Result<MapReport> {
    let refs: Vec<&MultimodalSample> = data.iter().collect();
    let dets = model.detect(src, &refs, 32, EVAL_SCORE_THRESHOLD)?;
    let labels: Vec<Vec<Label>> = data.iter().map(|s| s.labels.clone()).collect();
    mean_ap(&dets, &labels, config)
}
