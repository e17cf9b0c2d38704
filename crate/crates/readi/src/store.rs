//! Memory-resident registry of variant deltas.
//!
//! Readers take a [`Snapshot`] (one `Arc` clone under a read lock) and run
//! inference through its overlay; `activate` swaps the published snapshot.
//! A reader therefore sees either the whole previous variant or the whole
//! new one. Switching allocates one small `Arc`, independent of model size.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, RwLock};

use readi_core::variant::{base_hash, interpolate, prune_frozen, InterpolationMode, PruneReport, VariantDelta, VariationKey};
use readi_core::{Overlay, Overrides, ParamStore};
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// What `activate` does with a key that has no registered variant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissPolicy {
    Strict,
    /// Use the registered key nearest by bin-wise L1 distance (ties go to
    /// the smaller key); the base model when nothing is registered.
    #[default]
    Nearest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoreConfig {
    pub miss: MissPolicy,
    /// Largest accepted delta, as a fraction of base parameters.
    pub budget: Option<f64>,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self { miss: MissPolicy::Nearest, budget: Some(0.05) }
    }
}

/// Bytes charged per resident variant for the index itself.
pub const INDEX_ENTRY_BYTES: usize = 128;

/// A consistent view for inference.
#[derive(Debug)]
pub struct Snapshot {
    key: Option<VariationKey>,
    base: Arc<ParamStore>,
    overrides: Arc<Overrides>,
}

impl Snapshot {
    /// Active variant key; `None` for the unadapted base.
    pub fn key(&self) -> Option<VariationKey> {
        self.key
    }

    pub fn source(&self) -> Overlay<'_> {
        Overlay { base: &self.base, overrides: &self.overrides }
    }
}

struct Resident {
    delta: Arc<VariantDelta>,
    overrides: Arc<Overrides>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemoryReport {
    pub variants: usize,
    pub variant_params: usize,
    /// Sum of per-variant resident bytes (values plus per-entry overhead).
    pub variant_bytes: usize,
    pub index_bytes: usize,
    pub base_params: usize,
    pub base_bytes: usize,
}

impl MemoryReport {
    /// Variant parameters relative to one base model.
    pub fn param_fraction(&self) -> f64 {
        self.variant_params as f64 / self.base_params as f64
    }

    pub fn total_bytes(&self) -> usize {
        self.variant_bytes + self.index_bytes
    }
}

pub struct VariantStore {
    cfg: StoreConfig,
    base: RwLock<Arc<ParamStore>>,
    /// Hashes of every base this store has held; deltas made for an earlier
    /// (unpruned) base stay valid.
    lineage: RwLock<Vec<[u8; 32]>>,
    empty: Arc<Overrides>,
    residents: RwLock<BTreeMap<VariationKey, Resident>>,
    active: RwLock<Arc<Snapshot>>,
    writer: Mutex<()>,
}

impl VariantStore {
    /// `base` must already carry every injection site the variants use.
    pub fn new(mut base: ParamStore, cfg: StoreConfig) -> Self {
        base.freeze_all();
        let hash = base_hash(&base);
        let base = Arc::new(base);
        let empty = Arc::new(Overrides::new(0));
        let snap = Snapshot { key: None, base: base.clone(), overrides: empty.clone() };
        Self {
            cfg,
            base: RwLock::new(base),
            lineage: RwLock::new(vec![hash]),
            empty,
            residents: RwLock::new(BTreeMap::new()),
            active: RwLock::new(Arc::new(snap)),
            writer: Mutex::new(()),
        }
    }

    pub fn config(&self) -> &StoreConfig {
        &self.cfg
    }

    pub fn base(&self) -> Arc<ParamStore> {
        self.base.read().unwrap().clone()
    }

    pub fn lineage(&self) -> Vec<[u8; 32]> {
        self.lineage.read().unwrap().clone()
    }

    /// Accept deltas made for an ancestor of the current base.
    pub fn extend_lineage(&self, hashes: impl IntoIterator<Item = [u8; 32]>) {
        let mut l = self.lineage.write().unwrap();
        for h in hashes {
            if !l.contains(&h) {
                l.push(h);
            }
        }
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.active.read().unwrap().clone()
    }

    pub fn active_key(&self) -> Option<VariationKey> {
        self.snapshot().key
    }

    pub fn keys(&self) -> Vec<VariationKey> {
        self.residents.read().unwrap().keys().copied().collect()
    }

    pub fn get(&self, key: &VariationKey) -> Option<Arc<VariantDelta>> {
        self.residents.read().unwrap().get(key).map(|r| r.delta.clone())
    }

    fn check(&self, base: &ParamStore, delta: &VariantDelta) -> Result<()> {
        if !self.lineage.read().unwrap().contains(&delta.base_hash) {
            return Err(readi_core::Error::IncompatibleVariant(format!("variant {} was made for a different base model", delta.key)).into());
        }
        delta.key.validate()?;
        delta.validate_shapes(base)?;
        if let Some(budget) = self.cfg.budget {
            let limit = budget * base.base_numel() as f64;
            if delta.numel() as f64 > limit {
                return Err(readi_core::Error::IncompatibleVariant(format!(
                    "variant {} holds {} parameters, over the budget of {limit:.0}",
                    delta.key,
                    delta.numel()
                ))
                .into());
            }
        }
        Ok(())
    }

    fn overrides(base: &ParamStore, delta: &VariantDelta) -> Result<Overrides> {
        let mut o = Overrides::new(base.len());
        for (path, e) in &delta.entries {
            o.set(base.id(path)?, e.value.clone());
        }
        Ok(o)
    }

    /// Make `delta` resident. Returns the variant it replaced, if any; an
    /// active variant that gets replaced is republished.
    pub fn register(&self, delta: VariantDelta) -> Result<Option<Arc<VariantDelta>>> {
        let _w = self.writer.lock().unwrap();
        let base = self.base();
        self.check(&base, &delta)?;
        let key = delta.key;
        let resident = Resident { overrides: Arc::new(Self::overrides(&base, &delta)?), delta: Arc::new(delta) };
        let snap = Snapshot { key: Some(key), base, overrides: resident.overrides.clone() };
        let old = self.residents.write().unwrap().insert(key, resident);
        if old.is_some() {
            log::warn!("variant {key} replaced an existing registration");
            if self.active_key() == Some(key) {
                *self.active.write().unwrap() = Arc::new(snap);
            }
        }
        Ok(old.map(|r| r.delta))
    }

    pub fn unregister(&self, key: &VariationKey) -> Option<Arc<VariantDelta>> {
        let _w = self.writer.lock().unwrap();
        let old = self.residents.write().unwrap().remove(key)?;
        if self.active_key() == Some(*key) {
            self.publish_base();
        }
        Some(old.delta)
    }

    /// The registered key `activate(key)` would use.
    pub fn resolve(&self, key: &VariationKey) -> Result<Option<VariationKey>> {
        let residents = self.residents.read().unwrap();
        if residents.contains_key(key) {
            return Ok(Some(*key));
        }
        match self.cfg.miss {
            MissPolicy::Strict => Err(readi_core::Error::Lookup(format!("no variant registered for {key}")).into()),
            MissPolicy::Nearest => Ok(residents.keys().min_by_key(|k| (k.distance(key), **k)).copied()),
        }
    }

    /// Publish the variant for `key` (after fallback). Returns the key
    /// actually activated; `None` means the base model.
    pub fn activate(&self, key: &VariationKey) -> Result<Option<VariationKey>> {
        let _w = self.writer.lock().unwrap();
        let Some(resolved) = self.resolve(key)? else {
            self.publish_base();
            return Ok(None);
        };
        let overrides = self.residents.read().unwrap()[&resolved].overrides.clone();
        let snap = Arc::new(Snapshot { key: Some(resolved), base: self.base(), overrides });
        *self.active.write().unwrap() = snap;
        Ok(Some(resolved))
    }

    pub fn activate_base(&self) {
        let _w = self.writer.lock().unwrap();
        self.publish_base();
    }

    fn publish_base(&self) {
        let snap = Arc::new(Snapshot { key: None, base: self.base(), overrides: self.empty.clone() });
        *self.active.write().unwrap() = snap;
    }

    /// Blend the camera-domain variant `c` with the lidar-domain variant
    /// `l` and register the result under their combined key.
    pub fn interpolate(
        &self,
        c: &VariationKey,
        l: &VariationKey,
        lambda_c: f64,
        lambda_l: f64,
        mode: InterpolationMode,
    ) -> Result<VariationKey> {
        let lookup = |k: &VariationKey| self.get(k).ok_or_else(|| readi_core::Error::Lookup(format!("no variant registered for {k}")));
        let (dc, dl) = (lookup(c)?, lookup(l)?);
        let merged = interpolate(&dc, &dl, lambda_c, lambda_l, mode)?;
        let key = merged.key;
        self.register(merged)?;
        Ok(key)
    }

    pub fn memory(&self) -> MemoryReport {
        let residents = self.residents.read().unwrap();
        let base = self.base();
        MemoryReport {
            variants: residents.len(),
            variant_params: residents.values().map(|r| r.delta.numel()).sum(),
            variant_bytes: residents.values().map(|r| r.delta.memory_bytes()).sum(),
            index_bytes: INDEX_ENTRY_BYTES * residents.len(),
            base_params: base.base_numel(),
            base_bytes: 4 * base.base_numel(),
        }
    }

    /// Zero small frozen base weights. Parameters any resident variant
    /// overrides are left alone. The pruned base joins the lineage, so
    /// existing variants stay valid.
    pub fn prune_base(&self, threshold: f32) -> Result<PruneReport> {
        let _w = self.writer.lock().unwrap();
        let mut pruned = (*self.base()).clone();
        let protected: Vec<String> = {
            let residents = self.residents.read().unwrap();
            let mut v: Vec<String> = residents.values().flat_map(|r| r.delta.entries.keys().cloned()).collect();
            v.sort();
            v.dedup();
            v
        };
        let report = prune_frozen(&mut pruned, threshold, |p| protected.binary_search_by(|x| x.as_str().cmp(p)).is_ok())?;
        let hash = base_hash(&pruned);
        let pruned = Arc::new(pruned);
        *self.base.write().unwrap() = pruned.clone();
        {
            let mut l = self.lineage.write().unwrap();
            if !l.contains(&hash) {
                l.push(hash);
            }
        }
        let current = self.snapshot();
        let snap = Snapshot { key: current.key, base: pruned, overrides: current.overrides.clone() };
        *self.active.write().unwrap() = Arc::new(snap);
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use readi_core::params::ParamKind;
    use readi_core::Tensor;

    fn base() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.W", Tensor::from_fn(&[4, 4], |i| i as f32 * 0.1), ParamKind::Weight).unwrap();
        s.add("a.bn.gamma", Tensor::ones(&[4]), ParamKind::Norm).unwrap();
        s.add("a.bn.beta", Tensor::zeros(&[4]), ParamKind::Norm).unwrap();
        s
    }

    fn delta(store: &ParamStore, key: VariationKey, v: f32) -> VariantDelta {
        let mut d = VariantDelta::new(key, base_hash(store), "test");
        d.insert("a.bn.gamma", ParamKind::Norm, Tensor::full(&[4], v));
        d
    }

    fn key(fog: u8) -> VariationKey {
        VariationKey { fog, ..VariationKey::NOMINAL }
    }

    fn gamma(store: &VariantStore) -> f32 {
        let snap = store.snapshot();
        let src = snap.source();
        let id = src.base.id("a.bn.gamma").unwrap();
        readi_core::ParamSource::value(&src, id).data()[0]
    }

    #[test]
    fn register_activate_fallback() {
        let b = base();
        let store = VariantStore::new(b.clone(), StoreConfig { budget: None, ..StoreConfig::default() });
        assert_eq!(store.activate(&key(1)).unwrap(), None);
        store.register(delta(&b, key(1), 2.0)).unwrap();
        store.register(delta(&b, key(3), 3.0)).unwrap();
        assert_eq!(store.activate(&key(1)).unwrap(), Some(key(1)));
        assert_eq!(gamma(&store), 2.0);
        // fog 2 is equidistant from 1 and 3; the smaller key wins.
        assert_eq!(store.activate(&key(2)).unwrap(), Some(key(1)));
        store.activate_base();
        assert_eq!(gamma(&store), 1.0);
        assert!(store.register(delta(&b, key(1), 5.0)).unwrap().is_some());
        let strict = VariantStore::new(b.clone(), StoreConfig { miss: MissPolicy::Strict, budget: None });
        assert!(strict.activate(&key(1)).is_err());
    }

    #[test]
    fn rejects_foreign_unknown_and_oversized() {
        let b = base();
        let store = VariantStore::new(b.clone(), StoreConfig::default());
        let mut other = b.clone();
        other.set_value(other.id("a.W").unwrap(), Tensor::zeros(&[4, 4])).unwrap();
        assert!(store.register(delta(&other, key(1), 2.0)).is_err());
        let mut d = delta(&b, key(1), 2.0);
        d.insert("b.W", ParamKind::Weight, Tensor::zeros(&[1]));
        assert!(store.register(d).is_err());
        // 4 of 24 parameters is over 5%.
        assert!(store.register(delta(&b, key(1), 2.0)).is_err());
        assert!(store.keys().is_empty());
    }

    #[test]
    fn memory_accounting_and_prune_keeps_variants_valid() {
        let mut b = base();
        b.set_value(b.id("a.W").unwrap(), Tensor::new(&[4, 4], vec![1e-4; 16]).unwrap()).unwrap();
        let store = VariantStore::new(b.clone(), StoreConfig { budget: None, ..StoreConfig::default() });
        store.register(delta(&b, key(1), 2.0)).unwrap();
        let m = store.memory();
        assert_eq!(m.variant_bytes, 4 * 4 + readi_core::variant::ENTRY_OVERHEAD_BYTES);
        store.activate(&key(1)).unwrap();
        let r = store.prune_base(1e-3).unwrap();
        assert_eq!(r.pruned, 16);
        assert_eq!(gamma(&store), 2.0);
        assert_eq!(store.lineage().len(), 2);
        store.register(delta(&b, key(2), 3.0)).unwrap();
    }
}
