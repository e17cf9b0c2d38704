//! Experiment pipelines: distortion sweeps, missing-modality pretraining,
//! cross-domain interpolation, the adaptation ablation and the attention
//! eigen profile.
//!
//! Every pipeline is a pure function of its [`Config`]: independent levels
//! run on worker threads, and results are gathered in level order before
//! the report is assembled, so output files are byte-identical across runs
//! and worker counts.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use readi_core::adapt::{adapt, install_sites, AdaptConfig, Adapted, Scope, TrainablePolicy};
use readi_core::contrastive::{contrastive_pretrain, ContrastiveConfig};
use readi_core::distort::{apply_all, DistortionSpec};
use readi_core::model::{eigen_energy_profile, AttentionLayer, EigenProfile, FusionModel};
use readi_core::scene::{mix_seed, MultimodalSample};
use readi_core::synth::generate_dataset;
use readi_core::train::{evaluate, train_detector, EpochStats};
use readi_core::variant::{InterpolationMode, KeyEncoder, VariantDelta, VariationKey};
use readi_core::{ParamSource, ParamStore, Tensor};

use crate::config::{Config, Pipeline};
use crate::error::{config_err, Result, StageExt};
use crate::report::{Report, Table};
use crate::row;
use crate::store::{MissPolicy, StoreConfig, VariantStore};

/// Offsets added to the experiment seed for each random stream.
mod stream {
    pub const TRAIN: u64 = 1;
    pub const TEST: u64 = 3;
    pub const ADAPT_DISTORT: u64 = 5;
    pub const TEST_DISTORT: u64 = 6;
    pub const CAMERA_DISTORT: u64 = 7;
    pub const LIDAR_DISTORT: u64 = 9;
    pub const JOINT_DISTORT: u64 = 10;
    pub const EIGEN: u64 = 0xE16;
}

fn seeded(seed: u64, offset: u64) -> u64 {
    seed.wrapping_add(offset)
}

/// Map `f` over `items` on up to `workers` threads; results keep item
/// order and the first failing item (by index) decides the error.
pub fn parallel_map<T: Sync, R: Send>(workers: usize, items: &[T], f: impl Fn(usize, &T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<R>>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().unwrap().expect("every item is visited")).collect()
}

/// Data, model and trained base shared by all pipelines.
pub struct Workbench {
    pub cfg: Config,
    pub model: FusionModel,
    pub train: Vec<MultimodalSample>,
    pub test: Vec<MultimodalSample>,
    pub base: ParamStore,
    pub encoder: KeyEncoder,
    pub base_curve: Vec<EpochStats>,
}

/// Train a detector from scratch on `data`.
pub fn train_base(model: &FusionModel, data: &[MultimodalSample], cfg: &Config) -> Result<(ParamStore, Vec<EpochStats>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store: ParamStore = model.init(&mut rng)?;
    readi_core::adapt::select_trainable(&mut store, TrainablePolicy::All, Scope::All);
    let t = Instant::now();
    let curve = train_detector(model, &mut store, data, &cfg.base, |e| {
        log::info!("base epoch {} loss {:.4} ({:.0?})", e.epoch, e.loss, t.elapsed())
    })?;
    store.freeze_all();
    Ok((store, curve))
}

impl Workbench {
    /// Generate data and train the base, or load it from `cfg.base_model`
    /// when that file exists (a missing file is written after training).
    pub fn prepare(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let model = FusionModel::new(cfg.model.clone()).stage("model")?;
        let d = &cfg.data;
        let train = generate_dataset(&d.scene, d.n_train, seeded(cfg.seed, stream::TRAIN)).stage("datagen")?;
        let test = generate_dataset(&d.scene, d.n_test, seeded(cfg.seed, stream::TEST)).stage("datagen")?;
        let encoder = KeyEncoder::calibrate(&train).stage("key calibration")?;
        let (base, base_curve) = match &cfg.base_model {
            Some(path) if path.exists() => {
                let (mcfg, store) = crate::io::load_model(path).stage("load base")?;
                if mcfg != cfg.model {
                    return Err(config_err!("{} was built with a different model config", path.display()));
                }
                (store, Vec::new())
            }
            other => {
                let (store, curve) = train_base(&model, &train, cfg).stage("train-base")?;
                if let Some(path) = other {
                    crate::io::save_model(path, &cfg.model, &store).stage("save base")?;
                }
                (store, curve)
            }
        };
        Ok(Self { cfg: cfg.clone(), model, train, test, base, encoder, base_curve })
    }

    pub fn map(&self, src: &dyn ParamSource<f32>, data: &[MultimodalSample]) -> Result<f64> {
        Ok(evaluate(&self.model, src, data, &self.cfg.matching)?.map)
    }

    pub fn adapt_set(&self) -> &[MultimodalSample] {
        &self.train[..self.cfg.data.n_adapt]
    }

    /// Distorted copies of the adaptation set and of the test set.
    pub fn distorted(&self, spec: &DistortionSpec) -> Result<(Vec<MultimodalSample>, Vec<MultimodalSample>)> {
        let origin = self.cfg.data.scene.origin;
        let a = apply_all(self.adapt_set(), &DistortionSpec { seed: seeded(self.cfg.seed, stream::ADAPT_DISTORT), ..*spec }, origin)?;
        let t = apply_all(&self.test, &DistortionSpec { seed: seeded(self.cfg.seed, stream::TEST_DISTORT), ..*spec }, origin)?;
        Ok((a, t))
    }

    pub fn adapt(&self, data: &[MultimodalSample], key: VariationKey, cfg: &AdaptConfig, label: &str) -> Result<Adapted> {
        let t = Instant::now();
        Ok(adapt(&self.model, &self.base, data, key, cfg, |e| {
            log::info!("{label} epoch {} loss {:.4} ({:.0?})", e.epoch, e.loss, t.elapsed())
        })?)
    }

    pub fn dominant_key(&self, data: &[MultimodalSample]) -> VariationKey {
        self.encoder.dominant(data)
    }

    fn report(&self, pipeline: Pipeline, tables: Vec<Table>) -> Result<Report> {
        let mut cfg = self.cfg.clone();
        cfg.pipeline = Some(pipeline);
        Ok(Report { pipeline: pipeline.name().to_string(), seed: cfg.seed, config: serde_json::to_value(&cfg)?, tables })
    }
}

/// `base` with `delta` applied, adding any injected parameters the base
/// lacks.
pub fn materialize(base: &ParamStore, delta: &VariantDelta) -> Result<ParamStore> {
    if delta.base_hash != readi_core::variant::base_hash(base) {
        return Err(readi_core::Error::IncompatibleVariant(format!("variant {} was made for a different base model", delta.key)).into());
    }
    let mut out = base.clone();
    for (path, e) in &delta.entries {
        match out.get(path) {
            Some(id) => out.set_value(id, e.value.clone())?,
            None if e.kind.is_injected() => {
                out.add(path, e.value.clone(), e.kind)?;
            }
            None => return Err(readi_core::Error::IncompatibleVariant(format!("{path} is not in the base model")).into()),
        }
    }
    out.freeze_all();
    Ok(out)
}

/// Full fine-tuning with the same schedule as `cfg`.
pub fn full_finetune(cfg: &AdaptConfig) -> AdaptConfig {
    AdaptConfig { k: None, r: None, policy: TrainablePolicy::All, scope: Scope::All, ..cfg.clone() }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den.abs() < 1e-12 {
        f64::NAN
    } else {
        num / den
    }
}

fn points(a: f64) -> f64 {
    100.0 * a
}

/// Run the pipeline named in `cfg`.
pub fn run(cfg: &Config) -> Result<Report> {
    let pipeline = cfg.pipeline.ok_or_else(|| config_err!("no pipeline selected"))?;
    cfg.validate_levels(pipeline)?;
    let wb = Workbench::prepare(cfg)?;
    run_on(&wb, pipeline)
}

pub fn run_on(wb: &Workbench, pipeline: Pipeline) -> Result<Report> {
    wb.cfg.validate_levels(pipeline)?;
    let t = Instant::now();
    let report = match pipeline {
        Pipeline::FogSweep | Pipeline::SnowSweep | Pipeline::BlurSweep | Pipeline::ExposureSweep => sweep(wb, pipeline),
        Pipeline::MissingModality => missing_modality(wb),
        Pipeline::CrossDomain => cross_domain(wb),
        Pipeline::Ablation => ablation(wb),
        Pipeline::EigenProfile => eigen_profile(wb),
    }?;
    log::info!("{} finished in {:.1?}", pipeline.name(), t.elapsed());
    Ok(report)
}

/// Distortion for one sweep level.
pub fn sweep_spec(pipeline: Pipeline, level: f64) -> Result<DistortionSpec> {
    let d = DistortionSpec::default();
    Ok(match pipeline {
        Pipeline::FogSweep => DistortionSpec { fog: level as f32, ..d },
        Pipeline::SnowSweep => DistortionSpec { snow: level as f32, ..d },
        Pipeline::BlurSweep => DistortionSpec { blur: level as usize, ..d },
        Pipeline::ExposureSweep => DistortionSpec { gamma: level as f32, ..d },
        other => return Err(config_err!("{} is not a sweep", other.name())),
    })
}

fn sweep(wb: &Workbench, pipeline: Pipeline) -> Result<Report> {
    let cfg = &wb.cfg;
    let clean = wb.map(&wb.base, &wb.test).stage("evaluate clean")?;
    let levels = cfg.levels(pipeline);
    let rows = parallel_map(cfg.workers(), &levels, |_, &level| {
        let stage = format!("{} level {level}", pipeline.name());
        let spec = sweep_spec(pipeline, level)?;
        let (adapt_set, test) = wb.distorted(&spec).stage(&stage)?;
        let key = wb.dominant_key(&adapt_set);
        let no_ft = wb.map(&wb.base, &test).stage(&stage)?;
        let ours = wb.adapt(&adapt_set, key, &cfg.adapt, &stage).stage(&stage)?;
        let ours_map = wb.map(&ours.store, &test).stage(&stage)?;
        let full = wb.adapt(&adapt_set, key, &full_finetune(&cfg.adapt), &stage).stage(&stage)?;
        let full_map = wb.map(&full.store, &test).stage(&stage)?;
        let base_numel = wb.base.base_numel();
        Ok(row![
            level,
            key.to_string(),
            clean,
            no_ft,
            ours_map,
            full_map,
            points(clean - no_ft),
            ratio(ours_map - no_ft, full_map - no_ft),
            ours.delta.numel(),
            ours.delta.numel() as f64 / base_numel as f64,
            ours.curve.last().map(|e| e.loss),
        ])
    })?;
    let mut t = Table::new(
        "levels",
        &[
            "level",
            "key",
            "clean_map",
            "no_ft_map",
            "adapted_map",
            "full_ft_map",
            "drop_points",
            "gap_recovered",
            "delta_params",
            "delta_fraction",
            "final_loss",
        ],
    );
    rows.into_iter().for_each(|r| t.push(r));
    wb.report(pipeline, vec![t])
}

/// `data` with the given modalities marked absent.
pub fn without(data: &[MultimodalSample], camera: bool, lidar: bool) -> Vec<MultimodalSample> {
    data.iter()
        .cloned()
        .map(|mut s| {
            s.present.camera &= !camera;
            s.present.lidar &= !lidar;
            s
        })
        .collect()
}

const CONDITIONS: [(&str, bool, bool); 3] = [("full", false, false), ("no_camera", true, false), ("no_lidar", false, true)];

fn missing_modality(wb: &Workbench) -> Result<Report> {
    let cfg = &wb.cfg;
    let sets: Vec<(&str, Vec<MultimodalSample>)> = CONDITIONS.iter().map(|&(n, c, l)| (n, without(&wb.test, c, l))).collect();
    let eval_all = |src: &ParamStore, stage: &str| -> Result<Vec<f64>> { sets.iter().map(|(_, d)| wb.map(src, d).stage(stage)).collect() };
    let baseline = eval_all(&wb.base, "evaluate zero-fill")?;
    let levels = cfg.levels(Pipeline::MissingModality);
    let runs = parallel_map(cfg.workers(), &levels, |_, &p| {
        let stage = format!("contrastive p={p}");
        let ccfg = ContrastiveConfig { drop_p: p, ..cfg.contrastive.clone() };
        let mut store = wb.base.clone();
        let t = Instant::now();
        let curve = contrastive_pretrain(&wb.model, &mut store, &wb.train, &ccfg, |e| {
            log::info!("{stage} epoch {} loss {:.4} pos {:.3} neg {:.3} ({:.0?})", e.epoch, e.loss, e.pos_sim, e.neg_sim, t.elapsed())
        })
        .stage(&stage)?;
        Ok((curve, eval_all(&store, &stage)?))
    })?;

    let mut maps = Table::new("map", &["model", "drop_p", "condition", "map"]);
    for (i, (n, _)) in sets.iter().enumerate() {
        maps.push(row!["zero_fill", 0.0, *n, baseline[i]]);
    }
    let mut curves = Table::new("curve", &["drop_p", "epoch", "loss", "pos_sim", "neg_sim"]);
    let mut summary = Table::new("summary", &["drop_p", "full_change_points", "no_camera_gain_points", "no_lidar_gain_points"]);
    for (&p, (curve, m)) in levels.iter().zip(&runs) {
        for (i, (n, _)) in sets.iter().enumerate() {
            maps.push(row!["contrastive", p, *n, m[i]]);
        }
        for e in curve {
            curves.push(row![p, e.epoch, e.loss, e.pos_sim, e.neg_sim]);
        }
        summary.push(row![p, points(m[0] - baseline[0]), points(m[1] - baseline[1]), points(m[2] - baseline[2])]);
    }
    wb.report(Pipeline::MissingModality, vec![maps, curves, summary])
}

/// Keep only the camera bins (`camera == true`) or only the lidar bins.
fn branch_key(key: VariationKey, camera: bool) -> VariationKey {
    if camera {
        VariationKey { fog: 0, snow: 0, ..key }
    } else {
        VariationKey { exposure: 0, blur: 0, ..key }
    }
}

/// Interpolation weights `0, step, .., 1`, with the step rounded so the
/// grid ends exactly at 1.
pub fn lambda_grid(step: f64) -> Vec<f64> {
    let n = (1.0 / step).round().max(1.0) as usize;
    (0..=n).map(|i| i as f64 / n as f64).collect()
}

/// Paths present in both deltas.
pub fn overlap(a: &VariantDelta, b: &VariantDelta) -> Vec<String> {
    a.entries.keys().filter(|k| b.entries.contains_key(*k)).cloned().collect()
}

fn bit_equal(a: &Tensor<f32>, b: &Tensor<f32>) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn cross_domain(wb: &Workbench) -> Result<Report> {
    let cfg = &wb.cfg;
    let cd = &cfg.cross_domain;
    let origin = cfg.data.scene.origin;
    let spec = |offset, gamma, fog| DistortionSpec { gamma, fog, seed: seeded(cfg.seed, offset), ..DistortionSpec::default() };
    let stage = "cross_domain";
    let cam_set = apply_all(wb.adapt_set(), &spec(stream::CAMERA_DISTORT, cd.gamma, 0.0), origin).stage(stage)?;
    let lidar_set = apply_all(wb.adapt_set(), &spec(stream::LIDAR_DISTORT, 1.0, cd.fog), origin).stage(stage)?;
    let joint_set = apply_all(wb.adapt_set(), &spec(stream::JOINT_DISTORT, cd.gamma, cd.fog), origin).stage(stage)?;
    let test = apply_all(&wb.test, &spec(stream::TEST_DISTORT, cd.gamma, cd.fog), origin).stage(stage)?;

    let cam_key = branch_key(wb.dominant_key(&cam_set), true);
    let lidar_key = branch_key(wb.dominant_key(&lidar_set), false);
    if cam_key == lidar_key {
        return Err(config_err!("camera and lidar conditions both map to key {cam_key}; strengthen gamma or fog"));
    }
    let joint_key = cam_key.combine(&lidar_key);
    if joint_key == cam_key || joint_key == lidar_key {
        return Err(config_err!("combined key {joint_key} coincides with a single-domain key; strengthen gamma or fog"));
    }
    let jobs = [
        ("camera", &cam_set, cam_key, Scope::Camera),
        ("lidar", &lidar_set, lidar_key, Scope::Lidar),
        ("joint", &joint_set, joint_key, Scope::All),
    ];
    let mut adapted = parallel_map(cfg.workers(), &jobs, |_, &(name, data, key, scope)| {
        let acfg = AdaptConfig { scope, ..cfg.adapt.clone() };
        wb.adapt(data, key, &acfg, &format!("cross_domain {name}")).stage(&format!("adapt {name}"))
    })?;
    let joint = adapted.pop().expect("three jobs");
    let lidar = adapted.pop().expect("three jobs");
    let cam = adapted.pop().expect("three jobs");

    let mut graph = wb.base.clone();
    install_sites(&wb.model, &mut graph, &AdaptConfig { scope: Scope::All, ..cfg.adapt.clone() }).stage("store")?;
    let store = VariantStore::new(graph, StoreConfig { miss: MissPolicy::Strict, ..cfg.store.clone() });
    store.register(cam.delta.clone()).stage("register camera")?;
    store.register(lidar.delta.clone()).stage("register lidar")?;
    let eval_active = |stage: &str| -> Result<f64> {
        let snap = store.snapshot();
        wb.map(&snap.source(), &test).stage(stage)
    };

    let mut maps = Table::new("map", &["method", "lambda_c", "key", "map", "delta_params"]);
    maps.push(row!["no_ft", Option::<f64>::None, "base", wb.map(&wb.base, &test).stage("evaluate base")?, 0usize]);
    for (name, d) in [("camera_only", &cam.delta), ("lidar_only", &lidar.delta)] {
        store.activate(&d.key).stage(name)?;
        maps.push(row![name, Option::<f64>::None, d.key.to_string(), eval_active(name)?, d.numel()]);
    }
    let key = store.interpolate(&cam_key, &lidar_key, 0.5, 0.5, InterpolationMode::ExclusiveOnly).stage("exclusive-only")?;
    store.activate(&key).stage("exclusive-only")?;
    let je_numel = store.get(&key).map_or(0, |d| d.numel());
    maps.push(row!["exclusive_only", Option::<f64>::None, key.to_string(), eval_active("exclusive-only")?, je_numel]);
    store.unregister(&key);

    let shared = overlap(&cam.delta, &lidar.delta);
    let mut endpoints = Table::new("endpoints", &["lambda_c", "reference", "overlap_layers", "bit_exact"]);
    for lc in lambda_grid(cd.lambda_step) {
        let stage = format!("interpolate lambda_c={lc}");
        let key = store.interpolate(&cam_key, &lidar_key, lc, 1.0 - lc, InterpolationMode::Weighted).stage(&stage)?;
        store.activate(&key).stage(&stage)?;
        let merged = store.get(&key).expect("just registered");
        maps.push(row!["interpolated", lc, key.to_string(), eval_active(&stage)?, merged.numel()]);
        let reference = if lc == 1.0 {
            Some(("camera", &cam.delta))
        } else if lc == 0.0 {
            Some(("lidar", &lidar.delta))
        } else {
            None
        };
        if let Some((name, d)) = reference {
            let exact = shared.iter().all(|p| match (merged.get(p), d.get(p)) {
                (Some(a), Some(b)) => bit_equal(a, b),
                _ => false,
            });
            endpoints.push(row![lc, name, shared.len(), exact]);
        }
        store.unregister(&key);
    }
    maps.push(row!["joint_training", Option::<f64>::None, joint_key.to_string(), wb.map(&joint.store, &test).stage("evaluate joint")?, joint.delta.numel()]);
    wb.report(Pipeline::CrossDomain, vec![maps, endpoints])
}

/// Ablation rows: name, LoRA rank, adapter ratio, trainable set.
pub const ABLATION_RUNS: [(&str, Option<usize>, Option<usize>, TrainablePolicy); 6] = [
    ("just_pred", None, None, TrainablePolicy::HeadsOnly),
    ("kr_null", None, None, TrainablePolicy::HeadsBn),
    ("k4_r2", Some(4), Some(2), TrainablePolicy::HeadsBnInjected),
    ("k4_r4", Some(4), Some(4), TrainablePolicy::HeadsBnInjected),
    ("k8_r2", Some(8), Some(2), TrainablePolicy::HeadsBnInjected),
    ("full_ft", None, None, TrainablePolicy::All),
];

fn ablation(wb: &Workbench) -> Result<Report> {
    let cfg = &wb.cfg;
    let spec = DistortionSpec { fog: cfg.ablation.fog, ..DistortionSpec::default() };
    let (adapt_set, test) = wb.distorted(&spec).stage("ablation")?;
    let key = wb.dominant_key(&adapt_set);
    let clean = wb.map(&wb.base, &wb.test).stage("evaluate clean")?;
    let no_op = wb.map(&wb.base, &test).stage("evaluate no_op")?;
    let seeds = cfg.ablation.seeds;
    let jobs: Vec<(usize, u64)> = (0..ABLATION_RUNS.len()).flat_map(|r| (0..seeds as u64).map(move |s| (r, s))).collect();
    let results = parallel_map(cfg.workers(), &jobs, |_, &(run, s)| {
        let (name, k, r, policy) = ABLATION_RUNS[run];
        let train = readi_core::train::TrainConfig { seed: cfg.adapt.train.seed.wrapping_add(s), ..cfg.adapt.train.clone() };
        let acfg = AdaptConfig { k, r, policy, scope: Scope::All, train, ..cfg.adapt.clone() };
        let stage = format!("ablation {name} seed {s}");
        let a = wb.adapt(&adapt_set, key, &acfg, &stage).stage(&stage)?;
        let map = wb.map(&a.store, &test).stage(&stage)?;
        Ok((map, a.delta.numel(), a.curve.last().map(|e| e.loss)))
    })?;

    let base_numel = wb.base.base_numel() as f64;
    let mut runs = Table::new("runs", &["run", "k", "r", "policy", "map", "map_std", "delta_params", "delta_fraction"]);
    let mut per_seed = Table::new("seeds", &["run", "seed", "map", "final_loss"]);
    runs.push(row!["no_op", Option::<usize>::None, Option::<usize>::None, "none", no_op, 0.0, 0usize, 0.0]);
    let mut means = BTreeMap::new();
    for (run, &(name, k, r, policy)) in ABLATION_RUNS.iter().enumerate() {
        let mine: Vec<_> = jobs.iter().zip(&results).filter(|(j, _)| j.0 == run).collect();
        let maps: Vec<f64> = mine.iter().map(|(_, r)| r.0).collect();
        let mean = maps.iter().sum::<f64>() / maps.len() as f64;
        let std = (maps.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / maps.len() as f64).sqrt();
        let numel = mine[0].1 .1;
        runs.push(row![name, k, r, policy.name(), mean, std, numel, numel as f64 / base_numel]);
        for ((_, s), (m, _, loss)) in &mine {
            per_seed.push(row![name, *s, *m, *loss]);
        }
        means.insert(name, mean);
    }
    let mut summary = Table::new("summary", &["metric", "value"]);
    summary.push(row!["key", key.to_string()]);
    summary.push(row!["clean_map", clean]);
    summary.push(row!["fog_map", no_op]);
    summary.push(row!["fog_drop_points", points(clean - no_op)]);
    summary.push(row!["gap_recovered", ratio(means["k4_r2"] - no_op, means["full_ft"] - no_op)]);
    wb.report(Pipeline::Ablation, vec![runs, per_seed, summary])
}

/// Share of the total magnitude carried by the leading `share` fraction
/// of eigenvalues (at least one).
pub fn top_share(profile: &EigenProfile, share: f64) -> f64 {
    let n = profile.cumulative.len();
    let k = ((share * n as f64).ceil() as usize).clamp(1, n.max(1));
    profile.cumulative.get(k - 1).copied().unwrap_or(0.0)
}

fn eigen_profile(wb: &Workbench) -> Result<Report> {
    let cfg = &wb.cfg;
    let e = &cfg.eigen;
    let mut table = Table::new(
        "profiles",
        &["source", "condition", "item", "block", "head", "tokens", "numerical_rank", "count_for_share", "top3pct_share", "symmetrized"],
    );
    let mut curves: BTreeMap<(String, String), (Vec<f64>, usize)> = BTreeMap::new();
    let mut record = |table: &mut Table, source: &str, cond: &str, item: usize, block: usize, head: usize, p: &EigenProfile| {
        table.push(row![
            source,
            cond,
            item,
            block,
            head,
            p.magnitudes.len(),
            p.numerical_rank(e.rank_tol),
            p.count_for_share(e.energy_share),
            top_share(p, 0.03),
            p.symmetrized,
        ]);
        let c = curves.entry((source.to_string(), cond.to_string())).or_insert_with(|| (vec![0.0; p.cumulative.len()], 0));
        if c.0.len() == p.cumulative.len() {
            c.0.iter_mut().zip(&p.cumulative).for_each(|(a, b)| *a += b);
            c.1 += 1;
        }
    };

    let draws: Vec<usize> = (0..e.random_draws).collect();
    let random = parallel_map(cfg.workers(), &draws, |_, &i| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seeded(cfg.seed, stream::EIGEN), i as u64));
        let layer = AttentionLayer::<f32>::random(e.random_feat, e.random_head_dim, 1, &mut rng).stage("eigen random")?;
        let x = Tensor::from_fn(&[e.random_feat, e.random_tokens], |_| StandardNormal.sample(&mut rng));
        eigen_energy_profile(&x, &layer, 0).stage("eigen random")
    })?;
    for (i, p) in random.iter().enumerate() {
        record(&mut table, "random", "gaussian", i, 0, 0, p);
    }

    let origin = cfg.data.scene.origin;
    let n = e.samples.min(wb.test.len());
    let conditions = [
        ("clean", DistortionSpec::default()),
        ("blur", DistortionSpec { blur: e.blur, ..DistortionSpec::default() }),
        ("exposure", DistortionSpec { gamma: e.gamma, ..DistortionSpec::default() }),
    ];
    let layers: Vec<AttentionLayer> = (0..cfg.model.blocks).map(|b| wb.model.attention_layer(&wb.base, b)).collect::<readi_core::Result<_>>()?;
    for (name, spec) in conditions {
        let spec = DistortionSpec { seed: seeded(cfg.seed, stream::TEST_DISTORT), ..spec };
        let data = apply_all(&wb.test[..n], &spec, origin).stage("eigen distort")?;
        let profiles = parallel_map(cfg.workers(), &data, |_, s| {
            let inputs = wb.model.attention_inputs(&wb.base, s).stage("eigen inputs")?;
            let mut out = Vec::new();
            for (b, x) in inputs.iter().enumerate() {
                for h in 0..cfg.model.heads {
                    out.push((b, h, eigen_energy_profile(x, &layers[b], h).stage("eigen profile")?));
                }
            }
            Ok(out)
        })?;
        for (i, ps) in profiles.iter().enumerate() {
            for (b, h, p) in ps {
                record(&mut table, "model", name, i, *b, *h, p);
            }
        }
    }

    let mut curve = Table::new("curve", &["source", "condition", "index", "mean_cumulative"]);
    for ((source, cond), (sum, count)) in &curves {
        for (i, v) in sum.iter().enumerate() {
            curve.push(row![source.as_str(), cond.as_str(), i + 1, v / (*count).max(1) as f64]);
        }
    }
    wb.report(Pipeline::EigenProfile, vec![table, curve])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_map_keeps_order_and_first_error() {
        let items: Vec<usize> = (0..20).collect();
        let out = parallel_map(3, &items, |i, &v| Ok(i * 10 + v)).unwrap();
        assert_eq!(out, (0..20).map(|i| i * 11).collect::<Vec<_>>());
        let err = parallel_map(4, &items, |_, &v| if v % 7 == 3 { Err(config_err!("item {v}")) } else { Ok(v) }).unwrap_err();
        assert_eq!(err.to_string(), "config error: item 3");
        assert!(parallel_map(2, &[] as &[usize], |_, &v| Ok(v)).unwrap().is_empty());
    }

    #[test]
    fn lambda_grid_hits_endpoints() {
        let g = lambda_grid(0.1);
        assert_eq!(g.len(), 11);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[10], 1.0);
        assert_eq!(g[3], 0.3);
        assert_eq!(lambda_grid(1.0), vec![0.0, 1.0]);
    }

    #[test]
    fn without_masks_modalities() {
        let cfg = Config::default();
        let data = generate_dataset(&cfg.data.scene, 2, 0).unwrap();
        let d = without(&data, true, false);
        assert!(d.iter().all(|s| !s.present.camera && s.present.lidar));
    }
}
