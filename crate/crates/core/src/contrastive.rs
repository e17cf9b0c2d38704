//! Cross-modal contrastive pretraining. Each sample is paired with a copy
//! whose modalities were randomly dropped; a projection head maps both fused
//! BEV maps to a latent space where the pair is pulled together and the
//! other samples of the batch pushed away (NT-Xent over cosine similarity).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{config_err, Error, Result};
use crate::model::{apply_bn_updates, FusionModel};
use crate::optim::AdamW;
use crate::params::{ParamKind, ParamStore};
use crate::real::Real;
use crate::scene::{mix_seed, Label, MultimodalSample};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::{batches, TrainConfig};

pub const PROJ_PREFIX: &str = "proj.";

/// Which modalities an augmentation removed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DropRecord {
    pub camera: bool,
    pub lidar: bool,
}

/// Drop each modality independently with probability `p`: its presence flag
/// is cleared and its payload replaced by zeros (a black image, no points).
pub fn augment_drop_modality<R: Rng + ?Sized>(sample: &MultimodalSample, p: f64, rng: &mut R) -> Result<(MultimodalSample, DropRecord)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(config_err!("drop probability {p} outside [0, 1]"));
    }
    let rec = DropRecord { camera: rng.random::<f64>() < p, lidar: rng.random::<f64>() < p };
    let mut out = sample.clone();
    if rec.camera {
        out.present.camera = false;
        out.image = Tensor::zeros(sample.image.shape());
    }
    if rec.lidar {
        out.present.lidar = false;
        out.points.clear();
    }
    Ok((out, rec))
}

/// One-hidden-layer perceptron `z = W2·relu(W1·x + b1) + b2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProjectionHead {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl ProjectionHead {
    /// Hidden width half the flattened input, 64 outputs.
    pub fn for_model(model: &FusionModel) -> Self {
        let input = model.cfg.bev_numel();
        Self { input, hidden: input / 2, output: 64 }
    }

    pub fn install<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        let mut normal = |shape: &[usize], fan_in: usize| {
            let std = libm::sqrt(2.0 / fan_in as f64);
            Tensor::from_fn(shape, |_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(z * std)
            })
        };
        let w1 = normal(&[self.hidden, self.input], self.input);
        let w2 = normal(&[self.output, self.hidden], self.hidden);
        store.add("proj.W1", w1, ParamKind::Projection)?;
        store.add("proj.b1", Tensor::zeros(&[self.hidden]), ParamKind::Projection)?;
        store.add("proj.W2", w2, ParamKind::Projection)?;
        store.add("proj.b2", Tensor::zeros(&[self.output]), ParamKind::Projection)?;
        Ok(())
    }

    /// Remove the head from a store after pretraining.
    pub fn remove<T: Real>(store: &mut ParamStore<T>) -> usize {
        store.remove_prefix(PROJ_PREFIX)
    }
}

/// Project flattened features `[B, input]` to `[B, output]`; no normalisation.
pub fn project<T: Real>(ctx: &mut crate::model::Ctx<'_, T>, features: Var) -> Result<Var> {
    let h = ctx.linear(features, "proj.W1", Some("proj.b1"))?;
    let h = ctx.tape.relu(h)?;
    ctx.linear(h, "proj.W2", Some("proj.b2"))
}

/// Denominator of the contrastive softmax.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum LossForm {
    /// Negatives only (`k ≠ i`), as the loss is literally written; the loss
    /// can be negative.
    Literal,
    /// Positive included: standard NT-Xent.
    Standard,
}

impl LossForm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(Self::Literal),
            "standard" => Ok(Self::Standard),
            other => Err(config_err!("unknown loss form {other:?}")),
        }
    }
}

/// Mean over anchors `m` of
/// `-log(exp(s(ẑ_m, z_{p_m})/τ) / Σ_k exp(s(ẑ_m, z_k)/τ))`, where `z: [N, q]`
/// are full-modality embeddings, `zhat: [M, q]` augmented ones, `p_m` the
/// positive index of anchor `m`, and the sum runs over `k ≠ p_m` for
/// [`LossForm::Literal`] and over all `k` for [`LossForm::Standard`].
pub fn nt_xent<T: Real>(tape: &mut Tape<T>, z: Var, zhat: Var, positives: &[usize], tau: f64, form: LossForm) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(config_err!("temperature must be positive, got {tau}"));
    }
    let (n, m) = (tape.shape(z)[0], tape.shape(zhat)[0]);
    if positives.len() != m || positives.iter().any(|&p| p >= n) {
        return Err(Error::Contract(format!("{m} anchors need positive indices below {n}")));
    }
    if form == LossForm::Literal && n < 2 {
        return Err(Error::Contract("the negatives-only form needs at least two samples".into()));
    }
    let zn = tape.l2_normalize_rows(z)?;
    let hn = tape.l2_normalize_rows(zhat)?;
    let sim = tape.matmul_t(hn, zn, false, true)?;
    let logits = tape.scale(sim, T::of(1.0 / tau))?;
    let mut pos_mask = vec![false; m * n];
    let mut den_mask = vec![true; m * n];
    for (r, &p) in positives.iter().enumerate() {
        pos_mask[r * n + p] = true;
        if form == LossForm::Literal {
            den_mask[r * n + p] = false;
        }
    }
    let pos = tape.masked_logsumexp(logits, &pos_mask)?;
    let den = tape.masked_logsumexp(logits, &den_mask)?;
    let per = tape.sub(den, pos)?;
    tape.mean(per)
}

/// Value-level [`nt_xent`].
pub fn nt_xent_loss<T: Real>(z: &Tensor<T>, zhat: &Tensor<T>, positives: &[usize], tau: f64, form: LossForm) -> Result<T> {
    let mut tape = Tape::new();
    let z = tape.constant(z.clone());
    let zhat = tape.constant(zhat.clone());
    let l = nt_xent(&mut tape, z, zhat, positives, tau, form)?;
    Ok(tape.value(l).data()[0])
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub drop_p: f64,
    pub form: LossForm,
    /// Weight of the detection loss on the full-modality copy, which keeps
    /// the detector usable while the encoders move.
    pub anchor_weight: f64,
    pub train: TrainConfig,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { tau: 0.1, drop_p: 0.1, form: LossForm::Standard, anchor_weight: 1.0, train: TrainConfig { epochs: 4, ..TrainConfig::default() } }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastiveEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub pos_sim: f64,
    pub neg_sim: f64,
}

/// Mean cosine similarity of matching rows and of non-matching rows.
pub fn similarity_stats(z: &Tensor<f32>, zhat: &Tensor<f32>) -> (f64, f64) {
    let (n, q) = (z.shape()[0], z.shape()[1]);
    let norm = |v: &[f32]| libm::sqrt(v.iter().map(|x| *x as f64 * *x as f64).sum::<f64>()).max(1e-12);
    let (mut pos, mut neg, mut nn) = (0.0, 0.0, 0usize);
    for i in 0..n {
        let a = &zhat.data()[i * q..(i + 1) * q];
        for k in 0..n {
            let b = &z.data()[k * q..(k + 1) * q];
            let s = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum::<f64>() / (norm(a) * norm(b));
            if i == k {
                pos += s;
            } else {
                neg += s;
                nn += 1;
            }
        }
    }
    (pos / n as f64, if nn == 0 { 0.0 } else { neg / nn as f64 })
}

/// Embeddings of `samples` and of their augmented copies in inference mode.
pub fn embed_pairs(model: &FusionModel, store: &ParamStore, full: &[MultimodalSample], aug: &[MultimodalSample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let embed = |data: &[MultimodalSample]| -> Result<Tensor<f32>> {
        let refs: Vec<&MultimodalSample> = data.iter().collect();
        let input = model.prepare::<f32>(&refs)?;
        let mut tape = Tape::new();
        let mut ctx = crate::model::Ctx::new(&mut tape, store, false);
        let (bev, _) = model.forward(&mut ctx, &input)?;
        let flat = ctx.tape.reshape(bev, &[data.len(), model.cfg.bev_numel()])?;
        let z = project(&mut ctx, flat)?;
        Ok(tape.value(z).clone())
    };
    Ok((embed(full)?, embed(aug)?))
}

/// Pretrain encoders, fusion layers and the projection head, then remove
/// the head. Parameters flagged trainable on entry are ignored; every
/// non-buffer base parameter is trained.
pub fn contrastive_pretrain(
    model: &FusionModel,
    store: &mut ParamStore,
    data: &[MultimodalSample],
    cfg: &ContrastiveConfig,
    mut on_epoch: impl FnMut(&ContrastiveEpoch),
) -> Result<Vec<ContrastiveEpoch>> {
    cfg.train.validate()?;
    if !(cfg.tau > 0.0) {
        return Err(config_err!("temperature must be positive, got {}", cfg.tau));
    }
    if cfg.train.epochs == 0 {
        return Ok(Vec::new());
    }
    if data.len() < 2 || cfg.train.batch_size < 2 {
        return Err(config_err!("contrastive pretraining needs batches of at least two samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.train.seed, 0xC0));
    let head = ProjectionHead::for_model(model);
    if !store.contains("proj.W1") {
        head.install(store, &mut rng)?;
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let kind = store.param(id).kind;
        store.set_trainable(id, kind != ParamKind::RunningStat);
    }
    let mut opt = AdamW::new(cfg.train.optimizer)?;
    let mut curve = Vec::with_capacity(cfg.train.epochs);
    let total_steps = cfg.train.epochs * data.len().div_ceil(cfg.train.batch_size);
    let mut step = 0;
    for epoch in 0..cfg.train.epochs {
        let (mut total, mut pos, mut neg, mut steps) = (0.0, 0.0, 0.0, 0usize);
        for b in batches(data.len(), cfg.train.batch_size, cfg.train.seed, epoch) {
            opt.config.lr = cfg.train.optimizer.lr * cfg.train.schedule.factor(step, total_steps);
            step += 1;
            if b.len() < 2 {
                continue;
            }
            let full: Vec<&MultimodalSample> = b.iter().map(|&i| &data[i]).collect();
            let aug: Vec<MultimodalSample> =
                full.iter().map(|s| augment_drop_modality(s, cfg.drop_p, &mut rng).map(|a| a.0)).collect::<Result<_>>()?;
            let mut both = full.clone();
            both.extend(aug.iter());
            let bs = full.len();
            let input = model.prepare::<f32>(&both)?;
            let mut tape = Tape::new();
            let mut ctx = crate::model::Ctx::new(&mut tape, &*store, true);
            let (bev, head_out) = model.forward(&mut ctx, &input)?;
            let flat = ctx.tape.reshape(bev, &[2 * bs, model.cfg.bev_numel()])?;
            let emb = project(&mut ctx, flat)?;
            let bn_updates = core::mem::take(&mut ctx.bn_updates);
            let z = tape.slice(emb, 0, 0, bs)?;
            let zhat = tape.slice(emb, 0, bs, bs)?;
            let positives: Vec<usize> = (0..bs).collect();
            let mut loss = nt_xent(&mut tape, z, zhat, &positives, cfg.tau, cfg.form)?;
            if cfg.anchor_weight > 0.0 {
                let head_full = tape.slice(head_out, 0, 0, bs)?;
                let labels: Vec<&[Label]> = full.iter().map(|s| s.labels.as_slice()).collect();
                let targets = model.targets::<f32>(&labels);
                let det = model.detection_loss(&mut tape, head_full, &targets)?;
                let det = tape.scale(det, cfg.anchor_weight as f32)?;
                loss = tape.add(loss, det)?;
            }
            let value = tape.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::Diverged(format!("contrastive loss became {value}")));
            }
            let (p, n) = similarity_stats(tape.value(z), tape.value(zhat));
            let grads = tape.backward(loss)?;
            opt.step(store, &grads)?;
            apply_bn_updates(store, &bn_updates);
            total += value;
            pos += p;
            neg += n;
            steps += 1;
        }
        let s = steps.max(1) as f64;
        let stats = ContrastiveEpoch { epoch, loss: total / s, pos_sim: pos / s, neg_sim: neg / s };
        on_epoch(&stats);
        curve.push(stats);
    }
    ProjectionHead::remove(store);
    store.freeze_all();
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Presence;

    fn t(rows: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::new(&[rows, data.len() / rows], data.to_vec()).unwrap()
    }

    #[test]
    fn closed_form_examples() {
        let z = t(2, &[1.0, 0.0, 0.0, 1.0]);
        let zhat = t(1, &[1.0, 0.0]);
        let lit = nt_xent_loss(&z, &zhat, &[0], 1.0, LossForm::Literal).unwrap();
        assert!((lit + 1.0).abs() < 1e-12);
        let std_ = nt_xent_loss(&z, &zhat, &[0], 1.0, LossForm::Standard).unwrap();
        let e = core::f64::consts::E;
        assert!((std_ + (e / (e + 1.0)).ln()).abs() < 1e-12);
        assert!((std_ - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn identical_embeddings_give_log_n_minus_one() {
        for n in 2..=8 {
            let z = Tensor::<f64>::from_fn(&[n, 3], |i| [0.3, -1.0, 2.0][i % 3]);
            let zhat = z.clone();
            let pos: Vec<usize> = (0..n).collect();
            let l = nt_xent_loss(&z, &zhat, &pos, 0.1, LossForm::Literal).unwrap();
            assert!((l - ((n - 1) as f64).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn errors() {
        let z = t(2, &[1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(nt_xent_loss(&z, &t(1, &[1.0, 0.0]), &[0], 0.0, LossForm::Standard), Err(Error::Config(_))));
        assert!(matches!(nt_xent_loss(&z, &t(1, &[0.0, 0.0]), &[0], 1.0, LossForm::Standard), Err(Error::Contract(_))));
    }

    #[test]
    fn drop_probability_extremes_and_frequency() {
        let s = MultimodalSample {
            image: Tensor::full(&[4, 4], 0.5),
            points: vec![crate::scene::LidarPoint { x: 1.0, y: 1.0, range: 1.0, intensity: 0.5 }],
            labels: vec![],
            present: Presence::ALL,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(augment_drop_modality(&s, 0.0, &mut rng).unwrap().0, s);
        let (d, rec) = augment_drop_modality(&s, 1.0, &mut rng).unwrap();
        assert!(rec.camera && rec.lidar && d.points.is_empty() && d.image.data().iter().all(|&v| v == 0.0));
        assert_eq!(d.present, Presence { camera: false, lidar: false });
        let trials = 10_000;
        let (mut cam, mut lid) = (0, 0);
        for _ in 0..trials {
            let (_, r) = augment_drop_modality(&s, 0.1, &mut rng).unwrap();
            cam += r.camera as usize;
            lid += r.lidar as usize;
        }
        assert!((cam as f64 / trials as f64 - 0.1).abs() <= 0.01);
        assert!((lid as f64 / trials as f64 - 0.1).abs() <= 0.01);
        assert!(augment_drop_modality(&s, 1.5, &mut rng).is_err());
    }

    #[test]
    fn projection_hand_weights() {
        let mut store = ParamStore::<f64>::new();
        store.add("proj.W1", t(2, &[1.0, 2.0, -1.0, 0.5]), ParamKind::Projection).unwrap();
        store.add("proj.b1", Tensor::new(&[2], vec![0.0, 0.1]).unwrap(), ParamKind::Projection).unwrap();
        store.add("proj.W2", t(2, &[1.0, 1.0, 2.0, -1.0]), ParamKind::Projection).unwrap();
        store.add("proj.b2", Tensor::new(&[2], vec![0.5, 0.0]).unwrap(), ParamKind::Projection).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(t(1, &[1.0, 1.0]));
        let mut ctx = crate::model::Ctx::new(&mut tape, &store, false);
        let z = project(&mut ctx, x).unwrap();
        // hidden = relu([3, -0.5 + 0.1]) = [3, 0]; out = [3 + 0.5, 6]
        assert_eq!(tape.value(z).data(), &[3.5, 6.0]);
    }
}
