//! Files on disk: datasets, variants and model bundles, all written
//! atomically (temp file in the target directory, then rename).

use std::fs;
use std::io::Write;
use std::path::Path;

use readi_core::codec::{Reader, Writer};
use readi_core::model::ModelConfig;
use readi_core::scene::MultimodalSample;
use readi_core::synth::{decode_dataset, encode_dataset};
use readi_core::variant::VariantDelta;
use readi_core::ParamStore;

use crate::error::{Error, Result};

const BUNDLE_MAGIC: &[u8; 4] = b"RDMB";
const BUNDLE_VERSION: u32 = 1;

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_dataset(path: &Path, samples: &[MultimodalSample]) -> Result<()> {
    write_atomic(path, &encode_dataset(samples))
}

pub fn load_dataset(path: &Path) -> Result<Vec<MultimodalSample>> {
    decode_dataset(&read(path)?).map_err(|e| tag(path, e))
}

pub fn save_variant(path: &Path, delta: &VariantDelta) -> Result<()> {
    write_atomic(path, &delta.encode())
}

pub fn load_variant(path: &Path) -> Result<VariantDelta> {
    VariantDelta::decode(&read(path)?).map_err(|e| tag(path, e))
}

/// A model file: the architecture as JSON followed by a parameter
/// checkpoint.
pub fn encode_model(cfg: &ModelConfig, store: &ParamStore) -> Result<Vec<u8>> {
    let mut w = Writer::new(BUNDLE_MAGIC, BUNDLE_VERSION);
    w.str(&serde_json::to_string(cfg)?);
    let ck = store.to_checkpoint();
    w.u64(ck.len() as u64);
    w.bytes(&ck);
    Ok(w.finish())
}

pub fn decode_model(bytes: &[u8]) -> Result<(ModelConfig, ParamStore)> {
    let mut r = Reader::open(bytes, BUNDLE_MAGIC, BUNDLE_VERSION)?;
    let cfg: ModelConfig =
        serde_json::from_str(&r.str()?).map_err(|e| readi_core::Error::Corrupt(format!("model config: {e}")))?;
    let n = r.u64()? as usize;
    let store = ParamStore::from_checkpoint(r.bytes(n)?)?;
    r.expect_done()?;
    Ok((cfg, store))
}

pub fn save_model(path: &Path, cfg: &ModelConfig, store: &ParamStore) -> Result<()> {
    write_atomic(path, &encode_model(cfg, store)?)
}

pub fn load_model(path: &Path) -> Result<(ModelConfig, ParamStore)> {
    decode_model(&read(path)?).map_err(|e| match e {
        Error::Core(c) => tag(path, c),
        other => other,
    })
}

fn tag(path: &Path, e: readi_core::Error) -> Error {
    match e {
        readi_core::Error::Corrupt(m) => readi_core::Error::Corrupt(format!("{}: {m}", path.display())).into(),
        other => other.into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use readi_core::model::FusionModel;

    #[test]
    fn model_bundle_round_trip_and_truncation() {
        let cfg = ModelConfig { blocks: 1, ..ModelConfig::default() };
        let m = FusionModel::new(cfg.clone()).unwrap();
        let store: ParamStore = m.init(&mut rand_chacha::ChaCha8Rng::seed_from_u64(0)).unwrap();
        let bytes = encode_model(&cfg, &store).unwrap();
        let (c2, s2) = decode_model(&bytes).unwrap();
        assert_eq!(c2, cfg);
        assert_eq!(s2.to_checkpoint(), store.to_checkpoint());
        assert!(matches!(decode_model(&bytes[..bytes.len() - 3]), Err(Error::Core(readi_core::Error::Corrupt(_)))));
    }

    #[test]
    fn atomic_write_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/x.bin");
        write_atomic(&p, b"abc").unwrap();
        assert_eq!(read(&p).unwrap(), b"abc");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
