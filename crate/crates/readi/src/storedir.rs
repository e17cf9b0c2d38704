//! A variant store persisted in a directory: the base graph (`base.rdm`,
//! injection sites included), one file per resident variant under
//! `variants/`, and `manifest.json` naming the active variant and the base
//! lineage.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use readi_core::adapt::{install_sites, AdaptConfig, Scope};
use readi_core::model::{FusionModel, ModelConfig};
use readi_core::variant::{InterpolationMode, PruneReport, VariantDelta, VariationKey};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::io::{load_model, load_variant, save_model, save_variant, write_atomic};
use crate::report::Table;
use crate::row;
use crate::store::{StoreConfig, VariantStore};

const MANIFEST: &str = "manifest.json";
const BASE: &str = "base.rdm";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub store: StoreConfig,
    /// Site layout the base graph was built with.
    pub sites: AdaptConfig,
    /// Hex hashes of every base the directory has held.
    pub lineage: Vec<String>,
    /// Key to file name under `variants/`.
    pub variants: BTreeMap<String, String>,
    pub active: Option<String>,
}

pub struct StoreDir {
    root: PathBuf,
    pub manifest: Manifest,
}

fn parse_key(s: &str) -> Result<VariationKey> {
    Ok(s.parse()?)
}

impl StoreDir {
    pub fn exists(root: &Path) -> bool {
        root.join(MANIFEST).is_file()
    }

    /// Create a store from a trained model, installing every injection
    /// site `sites` describes (over both branches).
    pub fn create(root: &Path, model_path: &Path, sites: &AdaptConfig, store: StoreConfig) -> Result<Self> {
        if Self::exists(root) {
            return Err(config_err!("{} already holds a variant store", root.display()));
        }
        let (mcfg, mut base) = load_model(model_path)?;
        let sites = AdaptConfig { scope: Scope::All, ..sites.clone() };
        install_sites(&FusionModel::new(mcfg.clone())?, &mut base, &sites)?;
        save_model(&root.join(BASE), &mcfg, &base)?;
        let lineage = vec![hex::encode(readi_core::variant::base_hash(&base))];
        let dir = Self { root: root.to_path_buf(), manifest: Manifest { store, sites, lineage, variants: BTreeMap::new(), active: None } };
        dir.save()?;
        Ok(dir)
    }

    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        if !path.is_file() {
            return Err(config_err!("{} is not a variant store (no {MANIFEST})", root.display()));
        }
        let manifest = serde_json::from_slice(&crate::io::read(&path)?)
            .map_err(|e| Error::Core(readi_core::Error::Corrupt(format!("{}: {e}", path.display()))))?;
        Ok(Self { root: root.to_path_buf(), manifest })
    }

    fn save(&self) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(&self.manifest)?;
        bytes.push(b'\n');
        write_atomic(&self.root.join(MANIFEST), &bytes)
    }

    fn variant_path(&self, file: &str) -> PathBuf {
        self.root.join("variants").join(file)
    }

    /// Rebuild the in-memory store: base, lineage, residents, active key.
    pub fn load(&self) -> Result<(ModelConfig, VariantStore)> {
        let (mcfg, base) = load_model(&self.root.join(BASE))?;
        let store = VariantStore::new(base, self.manifest.store.clone());
        let mut hashes = Vec::new();
        for h in &self.manifest.lineage {
            let bytes = hex::decode(h).ok().and_then(|b| <[u8; 32]>::try_from(b).ok());
            hashes.push(bytes.ok_or_else(|| readi_core::Error::Corrupt(format!("bad lineage hash {h:?}")))?);
        }
        store.extend_lineage(hashes);
        for file in self.manifest.variants.values() {
            store.register(load_variant(&self.variant_path(file))?)?;
        }
        if let Some(k) = &self.manifest.active {
            store.activate(&parse_key(k)?)?;
        }
        Ok((mcfg, store))
    }

    fn persist(&mut self, delta: &VariantDelta) -> Result<()> {
        let key = delta.key.to_string();
        let file = format!("{key}.rdv");
        save_variant(&self.variant_path(&file), delta)?;
        self.manifest.variants.insert(key, file);
        Ok(())
    }

    /// Validate and add a variant file; a variant already under the same
    /// key is replaced.
    pub fn register(&mut self, variant: &Path) -> Result<VariationKey> {
        let (_, store) = self.load()?;
        let delta = load_variant(variant)?;
        store.register(delta.clone())?;
        self.persist(&delta)?;
        self.save()?;
        Ok(delta.key)
    }

    /// Activate `key` (with the store's miss policy); returns the key
    /// actually used, `None` for the base model. `"base"` deactivates.
    pub fn activate(&mut self, key: &str) -> Result<Option<VariationKey>> {
        let (_, store) = self.load()?;
        let used = if key == "base" { None } else { store.activate(&parse_key(key)?)? };
        self.manifest.active = used.map(|k| k.to_string());
        self.save()?;
        Ok(used)
    }

    pub fn interpolate(&mut self, camera: &str, lidar: &str, lambda_c: f64, mode: InterpolationMode) -> Result<VariationKey> {
        let (_, store) = self.load()?;
        let key = store.interpolate(&parse_key(camera)?, &parse_key(lidar)?, lambda_c, 1.0 - lambda_c, mode)?;
        let delta = store.get(&key).expect("interpolation registers its result");
        self.persist(&delta)?;
        self.save()?;
        Ok(key)
    }

    /// Prune the stored base; resident variants stay loadable.
    pub fn prune(&mut self, threshold: f32) -> Result<PruneReport> {
        let (mcfg, store) = self.load()?;
        let report = store.prune_base(threshold)?;
        save_model(&self.root.join(BASE), &mcfg, &store.base())?;
        self.manifest.lineage = store.lineage().iter().map(hex::encode).collect();
        self.save()?;
        Ok(report)
    }

    pub fn report(&self) -> Result<Vec<Table>> {
        let (_, store) = self.load()?;
        let active = store.active_key();
        let mut variants = Table::new("variants", &["key", "entries", "params", "bytes", "active", "provenance"]);
        for key in store.keys() {
            let d = store.get(&key).expect("listed key is resident");
            variants.push(row![key.to_string(), d.len(), d.numel(), d.memory_bytes(), active == Some(key), d.provenance.as_str()]);
        }
        let m = store.memory();
        let mut memory = Table::new("memory", &["metric", "value"]);
        memory.push(row!["variants", m.variants]);
        memory.push(row!["variant_params", m.variant_params]);
        memory.push(row!["variant_bytes", m.variant_bytes]);
        memory.push(row!["index_bytes", m.index_bytes]);
        memory.push(row!["base_params", m.base_params]);
        memory.push(row!["base_bytes", m.base_bytes]);
        memory.push(row!["param_fraction", m.param_fraction()]);
        Ok(vec![variants, memory])
    }
}
