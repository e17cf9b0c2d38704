//! Named parameter storage, trainability flags and checkpoint persistence.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::codec::{Reader, Writer};
use crate::error::{config_err, Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    /// Affine scale/shift of a batch or layer normalisation.
    Norm,
    /// Running mean/variance buffers; never receive gradients.
    RunningStat,
    /// Detection head weights and biases.
    Head,
    Lora,
    Adapter,
    Embedding,
    /// Contrastive projection head, removed after pretraining.
    Projection,
}

impl ParamKind {
    pub(crate) fn code(self) -> u8 {
        self as u8
    }

    pub(crate) fn from_code(c: u8) -> Result<Self> {
        use ParamKind::*;
        Ok(match c {
            0 => Weight,
            1 => Bias,
            2 => Norm,
            3 => RunningStat,
            4 => Head,
            5 => Lora,
            6 => Adapter,
            7 => Embedding,
            8 => Projection,
            _ => return Err(Error::Corrupt(alloc::format!("unknown parameter kind {c}"))),
        })
    }

    /// Injected parameters exist only after LoRA/adapter injection.
    pub fn is_injected(self) -> bool {
        matches!(self, ParamKind::Lora | ParamKind::Adapter)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T = f32> {
    pub path: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
    pub trainable: bool,
}

/// Ordered parameter collection addressed by unique path strings.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T = f32> {
    params: Vec<Param<T>>,
    index: BTreeMap<String, ParamId>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: BTreeMap::new() }
    }

    pub fn add(&mut self, path: &str, value: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        if self.index.contains_key(path) {
            return Err(config_err!("duplicate parameter path {path}"));
        }
        let id = ParamId(self.params.len());
        self.params.push(Param { path: path.to_string(), value, kind, trainable: false });
        self.index.insert(path.to_string(), id);
        Ok(id)
    }

    pub fn get(&self, path: &str) -> Option<ParamId> {
        self.index.get(path).copied()
    }

    pub fn id(&self, path: &str) -> Result<ParamId> {
        self.get(path).ok_or_else(|| Error::Lookup(alloc::format!("no parameter named {path}")))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.index.contains_key(path)
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    /// Replace a value, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Shape(alloc::format!(
                "{}: expected {:?}, got {:?}",
                p.path,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        let p = &mut self.params[id.0];
        p.trainable = trainable && p.kind != ParamKind::RunningStat;
    }

    pub fn freeze_all(&mut self) {
        self.params.iter_mut().for_each(|p| p.trainable = false);
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    /// Number of scalar entries over all parameters and buffers.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Number of learnable scalars (buffers and injected modules excluded):
    /// the size of the model as originally defined.
    pub fn base_numel(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind != ParamKind::RunningStat && !p.kind.is_injected() && p.kind != ParamKind::Projection)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    /// Drop every parameter whose path starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) -> usize {
        let before = self.params.len();
        self.params.retain(|p| !p.path.starts_with(prefix));
        self.index = self.params.iter().enumerate().map(|(i, p)| (p.path.clone(), ParamId(i))).collect();
        before - self.params.len()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { path: p.path.clone(), value: p.value.cast(), kind: p.kind, trainable: p.trainable })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// SHA-256 over paths, shapes and little-endian 32-bit values.
    pub fn content_hash(&self) -> [u8; 32] {
        self.content_hash_where(|_| true)
    }

    /// [`content_hash`](Self::content_hash) restricted to the parameters `keep` accepts.
    pub fn content_hash_where(&self, keep: impl Fn(&Param<T>) -> bool) -> [u8; 32] {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| keep(p)) {
            h.update((p.path.len() as u32).to_le_bytes());
            h.update(p.path.as_bytes());
            h.update((p.value.shape().len() as u32).to_le_bytes());
            for &d in p.value.shape() {
                h.update((d as u32).to_le_bytes());
            }
            for &v in p.value.data() {
                h.update(v.to_le_f32());
            }
        }
        h.finalize().into()
    }
}

/// Read access to parameter values, possibly through an overlay.
pub trait ParamSource<T: Real> {
    fn store(&self) -> &ParamStore<T>;

    fn value(&self, id: ParamId) -> &Tensor<T> {
        self.store().value(id)
    }
}

impl<T: Real> ParamSource<T> for ParamStore<T> {
    fn store(&self) -> &ParamStore<T> {
        self
    }
}

/// Replacement values for a subset of a store's parameters, indexed by id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides<T = f32> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Overrides<T> {
    pub fn new(len: usize) -> Self {
        Self { slots: (0..len).map(|_| None).collect() }
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) {
        self.slots[id.0] = Some(value);
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }

    pub fn len(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A base store seen through a set of overrides.
pub struct Overlay<'a, T: Real = f32> {
    pub base: &'a ParamStore<T>,
    pub overrides: &'a Overrides<T>,
}

impl<T: Real> ParamSource<T> for Overlay<'_, T> {
    fn store(&self) -> &ParamStore<T> {
        self.base
    }

    fn value(&self, id: ParamId) -> &Tensor<T> {
        self.overrides.get(id).unwrap_or_else(|| self.base.value(id))
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"RDCK";
const CHECKPOINT_VERSION: u32 = 1;

impl ParamStore<f32> {
    pub fn to_checkpoint(&self) -> Vec<u8> {
        let mut w = Writer::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
        w.u32(self.params.len() as u32);
        for p in &self.params {
            w.str(&p.path);
            w.u8(p.kind.code());
            w.u8(p.trainable as u8);
            w.shape(p.value.shape());
            w.f32s(p.value.data());
        }
        w.finish()
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let n = r.u32()? as usize;
        let mut store = Self::new();
        for _ in 0..n {
            let path = r.str()?;
            let kind = ParamKind::from_code(r.u8()?)?;
            let trainable = r.u8()? != 0;
            let shape = r.shape()?;
            let numel = shape.iter().product();
            let data = r.f32s(numel)?;
            let value = Tensor::new(&shape, data).map_err(|e| Error::Corrupt(e.to_string()))?;
            let id = store.add(&path, value, kind).map_err(|e| Error::Corrupt(e.to_string()))?;
            store.params[id.0].trainable = trainable;
        }
        r.expect_done()?;
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.W", Tensor::from_fn(&[2, 3], |i| i as f32 - 2.5), ParamKind::Weight).unwrap();
        let b = s.add("a.bn.gamma", Tensor::new(&[1], alloc::vec![-0.0]).unwrap(), ParamKind::Norm).unwrap();
        s.set_trainable(b, true);
        s.add("a.bn.running_mean", Tensor::zeros(&[1]), ParamKind::RunningStat).unwrap();
        s
    }

    #[test]
    fn duplicate_paths_rejected() {
        let mut s = sample();
        assert!(s.add("a.W", Tensor::zeros(&[1]), ParamKind::Weight).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let s = sample();
        let bytes = s.to_checkpoint();
        let back = ParamStore::from_checkpoint(&bytes).unwrap();
        assert_eq!(back.content_hash(), s.content_hash());
        assert_eq!(back.value(ParamId(1)).data()[0].to_bits(), (-0.0f32).to_bits());
        assert!(back.param(ParamId(1)).trainable);
        assert!(ParamStore::from_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn running_stats_never_trainable() {
        let mut s = sample();
        let id = s.id("a.bn.running_mean").unwrap();
        s.set_trainable(id, true);
        assert!(!s.param(id).trainable);
    }

    #[test]
    fn overlay_prefers_overrides() {
        let s = sample();
        let mut o = Overrides::new(s.len());
        o.set(ParamId(0), Tensor::ones(&[2, 3]));
        let view = Overlay { base: &s, overrides: &o };
        assert_eq!(view.value(ParamId(0)), &Tensor::ones(&[2, 3]));
        assert_eq!(view.value(ParamId(1)), s.value(ParamId(1)));
    }

    #[test]
    fn hash_changes_with_values() {
        let mut s = sample();
        let h = s.content_hash();
        s.value_mut(ParamId(0)).data_mut()[0] += 1.0;
        assert_ne!(h, s.content_hash());
    }
}
