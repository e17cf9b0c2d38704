use std::sync::OnceLock;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use readi_core::adapt::{adapt, install_sites, select_trainable, AdaptConfig, Scope, TrainablePolicy};
use readi_core::contrastive::{contrastive_pretrain, ContrastiveConfig};
use readi_core::distort::{apply_all, DistortionSpec};
use readi_core::model::{FusionModel, ModelConfig};
use readi_core::synth::{generate_dataset, SceneConfig};
use readi_core::train::{train_detector, TrainConfig};
use readi_core::variant::VariationKey;
use readi_core::{ParamKind, ParamStore};

struct Fixture {
    model: FusionModel,
    base: ParamStore,
    fogged: Vec<readi_core::scene::MultimodalSample>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let scene = SceneConfig::default();
        let model = FusionModel::new(ModelConfig::default()).unwrap();
        let mut base: ParamStore = model.init(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let train = generate_dataset(&scene, 160, 1).unwrap();
        select_trainable(&mut base, TrainablePolicy::All, Scope::All);
        let cfg = TrainConfig { epochs: 2, ..TrainConfig::default() };
        train_detector(&model, &mut base, &train, &cfg, |_| {}).unwrap();
        base.freeze_all();
        let fogged = apply_all(&train[..64], &DistortionSpec { fog: 0.06, seed: 5, ..DistortionSpec::default() }, scene.origin).unwrap();
        Fixture { model, base, fogged }
    })
}

fn short(policy: TrainablePolicy, k: Option<usize>, r: Option<usize>) -> AdaptConfig {
    let d = AdaptConfig::default();
    AdaptConfig { k, r, policy, train: TrainConfig { epochs: 1, ..d.train }, ..d }
}

#[test]
fn adaptation_touches_only_the_delta() {
    let f = fixture();
    let cfg = short(TrainablePolicy::HeadsBnInjected, Some(4), Some(2));
    let out = adapt(&f.model, &f.base, &f.fogged, VariationKey::NOMINAL, &cfg, |_| {}).unwrap();
    let mut fresh = f.base.clone();
    install_sites(&f.model, &mut fresh, &cfg).unwrap();
    assert_eq!(fresh.len(), out.store.len());
    let mut moved = 0;
    for (id, p) in out.store.iter() {
        let before = fresh.value(id);
        let same = before.data().iter().zip(p.value.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if out.delta.get(&p.path).is_none() {
            assert!(same, "{} changed outside the delta", p.path);
        } else {
            assert_eq!(out.delta.get(&p.path).unwrap(), &p.value);
            moved += !same as usize;
        }
        assert!(!p.trainable);
    }
    assert!(moved > 0);
    let fraction = out.delta.numel() as f64 / f.base.base_numel() as f64;
    assert!(fraction <= 0.05, "delta holds {fraction} of the base");
    assert_eq!(out.curve.len(), 1);
}

#[test]
fn lora_update_has_rank_at_most_k() {
    let f = fixture();
    for k in [1, 2, 4] {
        let cfg = short(TrainablePolicy::HeadsBnInjected, Some(k), None);
        let out = adapt(&f.model, &f.base, &f.fogged, VariationKey::NOMINAL, &cfg, |_| {}).unwrap();
        let mut checked = 0;
        for (_, p) in out.store.iter().filter(|(_, p)| p.path.ends_with(".lora_B")) {
            let a = out.store.value(out.store.id(&p.path.replace(".lora_B", ".lora_A")).unwrap());
            let b = &p.value;
            let (rows, inner, cols) = (b.shape()[0], b.shape()[1], a.shape()[1]);
            assert_eq!(inner, k);
            let bm = DMatrix::from_row_slice(rows, inner, &b.data().iter().map(|&v| v as f64).collect::<Vec<_>>());
            let am = DMatrix::from_row_slice(inner, cols, &a.data().iter().map(|&v| v as f64).collect::<Vec<_>>());
            let prod = bm * am;
            assert!(prod.amax() > 0.0, "{} did not move", p.path);
            assert!(prod.rank(1e-9 * prod.amax()) <= k);
            checked += 1;
        }
        assert!(checked > 0);
    }
}

#[test]
fn larger_trainable_sets_fit_faster() {
    let f = fixture();
    let first = |cfg: AdaptConfig| adapt(&f.model, &f.base, &f.fogged, VariationKey::NOMINAL, &cfg, |_| {}).unwrap().curve[0].loss;
    let heads = first(short(TrainablePolicy::HeadsOnly, None, None));
    let bn = first(short(TrainablePolicy::HeadsBn, None, None));
    let injected = first(short(TrainablePolicy::HeadsBnInjected, Some(4), Some(2)));
    assert!(injected <= bn && bn <= heads, "{injected} {bn} {heads}");
}

#[test]
fn contrastive_pretraining_aligns_views() {
    let f = fixture();
    let data = generate_dataset(&SceneConfig::default(), 96, 9).unwrap();
    let mut store = f.base.clone();
    let cfg = ContrastiveConfig { drop_p: 0.5, train: TrainConfig { epochs: 3, ..ContrastiveConfig::default().train }, ..ContrastiveConfig::default() };
    let curve = contrastive_pretrain(&f.model, &mut store, &data, &cfg, |_| {}).unwrap();
    assert_eq!(curve.len(), 3);
    let margin = |e: usize| curve[e].pos_sim - curve[e].neg_sim;
    assert!(margin(2) > margin(0) && margin(2) > 0.0, "{curve:?}");
    assert!(curve[2].loss < curve[0].loss);
    assert!(!store.contains("proj.W1"));
    assert!(store.iter().all(|(_, p)| p.kind != ParamKind::Projection && !p.trainable));
}
