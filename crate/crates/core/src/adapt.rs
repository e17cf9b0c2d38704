//! Parameter-efficient adaptation: LoRA pairs beside attention projections,
//! bottleneck adapters inside residual blocks, and trainable-set policies.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{config_err, Error, Result};
use crate::model::FusionModel;
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::real::Real;
use crate::scene::{mix_seed, MultimodalSample};
use crate::tensor::Tensor;
use crate::train::{train_detector, EpochStats, TrainConfig};
use crate::variant::{VariantDelta, VariationKey};

/// Which parameters an adaptation run may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum TrainablePolicy {
    HeadsOnly,
    HeadsBn,
    HeadsBnInjected,
    /// Full fine-tuning (every non-buffer parameter).
    All,
}

impl TrainablePolicy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "heads_only" => Ok(Self::HeadsOnly),
            "heads_bn" => Ok(Self::HeadsBn),
            "heads_bn_injected" => Ok(Self::HeadsBnInjected),
            "all" => Ok(Self::All),
            other => Err(config_err!("unknown trainable policy {other:?}")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::HeadsOnly => "heads_only",
            Self::HeadsBn => "heads_bn",
            Self::HeadsBnInjected => "heads_bn_injected",
            Self::All => "all",
        }
    }
}

/// Restricts a policy to one sensor branch plus the shared fusion layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum Scope {
    #[default]
    All,
    Camera,
    Lidar,
}

impl Scope {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "camera" => Ok(Self::Camera),
            "lidar" => Ok(Self::Lidar),
            other => Err(config_err!("unknown scope {other:?}")),
        }
    }

    pub fn contains(self, path: &str) -> bool {
        match self {
            Scope::All => true,
            Scope::Camera => !path.starts_with("lidar."),
            Scope::Lidar => !path.starts_with("cam."),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraInfo {
    pub target: String,
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub added: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterInfo {
    pub block: String,
    pub bottleneck: usize,
    pub added: usize,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

fn is_attention_projection(path: &str) -> bool {
    path.starts_with("cam.") && path.contains(".attn.") && ["W_Q", "W_K", "W_V", "W_O"].iter().any(|w| path.ends_with(w))
}

/// Add a LoRA pair beside each target projection `W: [out, in]`:
/// `A: [k, in]` random, `B: [out, k]` zero, so outputs are unchanged.
pub fn inject_lora<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    targets: &[String],
    k: usize,
    rng: &mut R,
) -> Result<Vec<LoraInfo>> {
    if k == 0 {
        return Err(config_err!("LoRA rank must be at least 1"));
    }
    let mut out = Vec::with_capacity(targets.len());
    for target in targets {
        if !is_attention_projection(target) {
            return Err(Error::Injection(format!("{target} is not an attention projection")));
        }
        let id = store.get(target).ok_or_else(|| Error::Injection(format!("{target} does not exist")))?;
        let a_path = format!("{target}.lora_A");
        if store.contains(&a_path) {
            return Err(Error::Injection(format!("{target} already has a LoRA pair")));
        }
        let shape = store.value(id).shape().to_vec();
        let (rows, cols) = (shape[0], shape[1]);
        let std = 1.0 / libm::sqrt(cols as f64);
        let a = Tensor::from_fn(&[k, cols], |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        });
        let a = store.add(&a_path, a, ParamKind::Lora)?;
        let b = store.add(&format!("{target}.lora_B"), Tensor::zeros(&[rows, k]), ParamKind::Lora)?;
        out.push(LoraInfo { target: target.clone(), a, b, rank: k, added: k * (rows + cols) });
    }
    Ok(out)
}

/// Insert `down (C→C/r) → ReLU → up (C/r→C)` with a skip connection before
/// the second batch norm of each block; `up` starts at zero.
pub fn inject_adapter<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    blocks: &[String],
    r: usize,
    rng: &mut R,
) -> Result<Vec<AdapterInfo>> {
    if r == 0 {
        return Err(config_err!("squeeze ratio must be at least 1"));
    }
    let mut out = Vec::with_capacity(blocks.len());
    for block in blocks {
        let conv = store
            .get(&format!("{block}.conv2.W"))
            .filter(|_| store.contains(&format!("{block}.bn2.gamma")))
            .ok_or_else(|| Error::Injection(format!("{block} is not a residual block")))?;
        if store.contains(&format!("{block}.adapter.down.W")) {
            return Err(Error::Injection(format!("{block} already has an adapter")));
        }
        let c = store.value(conv).shape()[0];
        if c % r != 0 {
            return Err(config_err!("{c} channels in {block} not divisible by squeeze ratio {r}"));
        }
        let m = c / r;
        let std = libm::sqrt(2.0 / c as f64);
        let down = Tensor::from_fn(&[m, c, 1, 1], |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        });
        let p = format!("{block}.adapter");
        store.add(&format!("{p}.down.W"), down, ParamKind::Adapter)?;
        store.add(&format!("{p}.down.b"), Tensor::zeros(&[m]), ParamKind::Adapter)?;
        store.add(&format!("{p}.up.W"), Tensor::zeros(&[c, m, 1, 1]), ParamKind::Adapter)?;
        store.add(&format!("{p}.up.b"), Tensor::zeros(&[c]), ParamKind::Adapter)?;
        out.push(AdapterInfo { block: block.clone(), bottleneck: m, added: 2 * c * m + m + c });
    }
    Ok(out)
}

/// Flag exactly the policy's parameters (within `scope`) as trainable and
/// freeze everything else. Running statistics are never trainable.
pub fn select_trainable<T: Real>(store: &mut ParamStore<T>, policy: TrainablePolicy, scope: Scope) -> Vec<ParamId> {
    let ids: Vec<ParamId> = store.ids().collect();
    let mut selected = Vec::new();
    for id in ids {
        let p = store.param(id);
        let by_kind = match p.kind {
            ParamKind::RunningStat | ParamKind::Projection => false,
            ParamKind::Head => true,
            ParamKind::Norm => policy >= TrainablePolicy::HeadsBn,
            ParamKind::Lora | ParamKind::Adapter => policy >= TrainablePolicy::HeadsBnInjected,
            ParamKind::Weight | ParamKind::Bias | ParamKind::Embedding => policy == TrainablePolicy::All,
        };
        let on = by_kind && scope.contains(&p.path);
        store.set_trainable(id, on);
        if on {
            selected.push(id);
        }
    }
    selected
}

/// Fold every LoRA pair into its base weight (`W += B·A`) and remove it.
pub fn merge_lora<T: Real>(store: &ParamStore<T>) -> Result<ParamStore<T>> {
    let mut merged = ParamStore::new();
    for (_, p) in store.iter() {
        if p.kind == ParamKind::Lora {
            continue;
        }
        let mut value = p.value.clone();
        if store.contains(&format!("{}.lora_A", p.path)) {
            let w = crate::model::effective_weight(store, &p.path)?;
            value = Tensor::new(p.value.shape(), w.into_iter().map(T::of).collect())?;
        }
        let id = merged.add(&p.path, value, p.kind)?;
        merged.set_trainable(id, p.trainable);
    }
    Ok(merged)
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct AdaptConfig {
    /// LoRA rank bound; `None` disables LoRA.
    pub k: Option<usize>,
    /// Adapter squeeze ratio; `None` disables adapters.
    pub r: Option<usize>,
    /// Projection names receiving LoRA pairs.
    pub lora_targets: Vec<String>,
    pub policy: TrainablePolicy,
    pub scope: Scope,
    pub train: TrainConfig,
    /// Seeds the initial values of injected parameters. Each site draws
    /// from its own stream, so a site starts identical across runs that
    /// share this seed whatever else they inject.
    pub init_seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            k: Some(4),
            r: Some(2),
            lora_targets: alloc::vec!["W_Q".to_string(), "W_K".to_string()],
            policy: TrainablePolicy::HeadsBnInjected,
            scope: Scope::All,
            train: TrainConfig { epochs: 8, optimizer: TrainConfig::default().optimizer.with_lr(1e-2), ..TrainConfig::default() },
            init_seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == Some(0) || self.r == Some(0) {
            return Err(config_err!("k and r must be at least 1 when enabled"));
        }
        self.train.validate()
    }
}

/// Install the configured LoRA pairs and adapters that are not already
/// present. Injection leaves outputs unchanged.
pub fn install_sites(model: &FusionModel, store: &mut ParamStore, cfg: &AdaptConfig) -> Result<(Vec<LoraInfo>, Vec<AdapterInfo>)> {
    let site_rng = |path: &str| ChaCha8Rng::seed_from_u64(mix_seed(cfg.init_seed, fnv1a(path.as_bytes())));
    let mut lora = Vec::new();
    let mut adapters = Vec::new();
    if let Some(k) = cfg.k {
        let names: Vec<&str> = cfg.lora_targets.iter().map(|s| s.as_str()).collect();
        let targets: Vec<String> = model
            .attention_projections(&names)
            .into_iter()
            .filter(|t| cfg.scope.contains(t) && !store.contains(&format!("{t}.lora_A")))
            .collect();
        for t in targets {
            lora.extend(inject_lora(store, core::slice::from_ref(&t), k, &mut site_rng(&t))?);
        }
    }
    if let Some(r) = cfg.r {
        let blocks: Vec<String> = model
            .residual_blocks()
            .into_iter()
            .filter(|b| cfg.scope.contains(b) && !store.contains(&format!("{b}.adapter.down.W")))
            .collect();
        for b in blocks {
            adapters.extend(inject_adapter(store, core::slice::from_ref(&b), r, &mut site_rng(&b))?);
        }
    }
    Ok((lora, adapters))
}

/// Result of one adaptation run.
#[derive(Clone, Debug)]
pub struct Adapted {
    pub delta: VariantDelta,
    /// The adapted model (base + sites + tuned values).
    pub store: ParamStore,
    pub curve: Vec<EpochStats>,
}

/// Adapt `base` to `data`: install sites, train only the policy's set, and
/// return the tuned parameters (plus the batch-norm statistics they moved)
/// as a delta keyed by `key`. Parameters outside the set stay bit-identical.
pub fn adapt(
    model: &FusionModel,
    base: &ParamStore,
    data: &[MultimodalSample],
    key: VariationKey,
    cfg: &AdaptConfig,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<Adapted> {
    cfg.validate()?;
    let base_hash = crate::variant::base_hash(base);
    let mut store = base.clone();
    install_sites(model, &mut store, cfg)?;
    let selected = select_trainable(&mut store, cfg.policy, cfg.scope);
    if selected.is_empty() {
        return Err(config_err!("policy {} selects no parameters", cfg.policy.name()));
    }
    let curve = if cfg.train.epochs > 0 { train_detector(model, &mut store, data, &cfg.train, on_epoch)? } else { Vec::new() };

    let mut paths: BTreeMap<String, ()> = BTreeMap::new();
    for &id in &selected {
        let path = &store.param(id).path;
        paths.insert(path.clone(), ());
        if let Some(prefix) = path.strip_suffix(".gamma") {
            for stat in ["running_mean", "running_var"] {
                let p = format!("{prefix}.{stat}");
                if store.contains(&p) {
                    paths.insert(p, ());
                }
            }
        }
    }
    let mut delta = VariantDelta::new(key, base_hash, format!("adapt policy={} scope={:?} k={:?} r={:?}", cfg.policy.name(), cfg.scope, cfg.k, cfg.r));
    for path in paths.keys() {
        let id = store.id(path)?;
        delta.insert(path, store.param(id).kind, store.value(id).clone());
    }
    store.freeze_all();
    Ok(Adapted { delta, store, curve })
}
