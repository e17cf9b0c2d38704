//! Variation keys, variant deltas and the operations on them: validation
//! against a base graph, cross-domain interpolation, magnitude pruning of
//! frozen weights and a self-describing binary format.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::codec::{Reader, Writer};
use crate::distort::CLUTTER_RANGE;
use crate::error::{config_err, Error, Result};
use crate::params::{Overrides, Param, ParamKind, ParamStore};
use crate::scene::MultimodalSample;
use crate::tensor::Tensor;

pub const EXPOSURE_BINS: u8 = 3;
pub const BLUR_BINS: u8 = 3;
pub const FOG_BINS: u8 = 4;
pub const SNOW_BINS: u8 = 3;

/// Quantised sensing condition. Bin 0 is nominal on every axis; exposure
/// bin 1 is dark and bin 2 bright.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VariationKey {
    pub exposure: u8,
    pub blur: u8,
    pub fog: u8,
    pub snow: u8,
    pub camera: bool,
    pub lidar: bool,
}

impl Default for VariationKey {
    fn default() -> Self {
        Self::NOMINAL
    }
}

impl VariationKey {
    pub const NOMINAL: Self = Self { exposure: 0, blur: 0, fog: 0, snow: 0, camera: true, lidar: true };

    pub fn validate(&self) -> Result<()> {
        if self.exposure >= EXPOSURE_BINS || self.blur >= BLUR_BINS || self.fog >= FOG_BINS || self.snow >= SNOW_BINS {
            return Err(config_err!("key {self} has a bin out of range"));
        }
        Ok(())
    }

    /// Bin-wise L1 distance, with each modality mismatch counting one.
    pub fn distance(&self, other: &Self) -> u32 {
        let d = |a: u8, b: u8| (a as i32 - b as i32).unsigned_abs();
        d(self.exposure, other.exposure)
            + d(self.blur, other.blur)
            + d(self.fog, other.fog)
            + d(self.snow, other.snow)
            + (self.camera != other.camera) as u32
            + (self.lidar != other.lidar) as u32
    }

    /// Key for a condition combining both: the stronger bin on each axis and
    /// a modality present only if present in both.
    pub fn combine(&self, other: &Self) -> Self {
        Self {
            exposure: self.exposure.max(other.exposure),
            blur: self.blur.max(other.blur),
            fog: self.fog.max(other.fog),
            snow: self.snow.max(other.snow),
            camera: self.camera && other.camera,
            lidar: self.lidar && other.lidar,
        }
    }

    fn to_bytes(self) -> [u8; 6] {
        [self.exposure, self.blur, self.fog, self.snow, self.camera as u8, self.lidar as u8]
    }

    fn from_bytes(b: &[u8]) -> Result<Self> {
        let k = Self { exposure: b[0], blur: b[1], fog: b[2], snow: b[3], camera: b[4] != 0, lidar: b[5] != 0 };
        k.validate().map_err(|e| Error::Corrupt(e.to_string()))?;
        Ok(k)
    }
}

impl fmt::Display for VariationKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "e{}.b{}.f{}.s{}.m{}{}",
            self.exposure, self.blur, self.fog, self.snow, self.camera as u8, self.lidar as u8
        )
    }
}

impl FromStr for VariationKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || config_err!("malformed variation key {s:?}, expected e.g. e0.b0.f1.s0.m11");
        let parts: Vec<&str> = s.split('.').collect();
        if parts.len() != 5 {
            return Err(bad());
        }
        let bin = |p: &str, tag: char| -> Result<u8> {
            p.strip_prefix(tag).and_then(|v| v.parse().ok()).ok_or_else(bad)
        };
        let m = parts[4].strip_prefix('m').filter(|m| m.len() == 2).ok_or_else(bad)?;
        let flag = |c: u8| match c {
            b'0' => Ok(false),
            b'1' => Ok(true),
            _ => Err(bad()),
        };
        let key = Self {
            exposure: bin(parts[0], 'e')?,
            blur: bin(parts[1], 'b')?,
            fog: bin(parts[2], 'f')?,
            snow: bin(parts[3], 's')?,
            camera: flag(m.as_bytes()[0])?,
            lidar: flag(m.as_bytes()[1])?,
        };
        key.validate()?;
        Ok(key)
    }
}

/// Live-sample statistics the key is quantised from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleStats {
    pub mean_luminance: f32,
    /// Mean absolute horizontal plus vertical pixel difference.
    pub sharpness: f32,
    /// Share of returns with intensity at least [`DENSITY_INTENSITY`].
    pub point_density: f32,
    /// Share of returns that are bright and within clutter range of the sensor.
    pub clutter_ratio: f32,
}

pub const DENSITY_INTENSITY: f32 = 0.15;

pub fn sample_stats(sample: &MultimodalSample) -> SampleStats {
    let img = sample.image.data();
    let (h, w) = (sample.image.shape()[0], sample.image.shape()[1]);
    let mean_luminance = img.iter().sum::<f32>() / img.len().max(1) as f32;
    let mut grad = 0.0f32;
    let mut terms = 0usize;
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                grad += (img[y * w + x + 1] - img[y * w + x]).abs();
                terms += 1;
            }
            if y + 1 < h {
                grad += (img[(y + 1) * w + x] - img[y * w + x]).abs();
                terms += 1;
            }
        }
    }
    let n = sample.points.len();
    let dense = sample.points.iter().filter(|p| p.intensity >= DENSITY_INTENSITY).count();
    let clutter = sample.points.iter().filter(|p| p.intensity >= 0.7 && p.range <= CLUTTER_RANGE.1).count();
    SampleStats {
        mean_luminance,
        sharpness: grad / terms.max(1) as f32,
        point_density: if n == 0 { 0.0 } else { dense as f32 / n as f32 },
        clutter_ratio: if n == 0 { 0.0 } else { clutter as f32 / n as f32 },
    }
}

/// Bin edges for [`VariationKey`] quantisation.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KeyEncoder {
    /// Luminance below `[0]` is dark, above `[1]` bright.
    pub exposure: [f32; 2],
    /// Sharpness at or above `[0]` is nominal, above `[1]` mild blur.
    pub blur: [f32; 2],
    /// Point density thresholds, descending.
    pub fog: [f32; 3],
    /// Clutter ratio thresholds, ascending.
    pub snow: [f32; 2],
}

fn percentile(values: &mut [f32], q: f32) -> f32 {
    values.sort_by(|a, b| a.total_cmp(b));
    let i = libm::roundf((values.len() - 1) as f32 * q) as usize;
    values[i]
}

impl KeyEncoder {
    /// Place the nominal bins around the 1st/99th percentiles of a clean
    /// corpus (5th for point density, which sparse scenes spread wide) and
    /// the stronger bins at fixed fractions beyond them.
    pub fn calibrate(clean: &[MultimodalSample]) -> Result<Self> {
        if clean.is_empty() {
            return Err(config_err!("key calibration needs a non-empty corpus"));
        }
        let stats: Vec<SampleStats> = clean.iter().map(sample_stats).collect();
        let col = |f: fn(&SampleStats) -> f32| stats.iter().map(f).collect::<Vec<f32>>();
        let mut lum = col(|s| s.mean_luminance);
        let mut sharp = col(|s| s.sharpness);
        let mut dens = col(|s| s.point_density);
        let mut clut = col(|s| s.clutter_ratio);
        let (lum_lo, lum_hi) = (percentile(&mut lum, 0.01), percentile(&mut lum, 0.99));
        let sharp_lo = percentile(&mut sharp, 0.01);
        let dens_lo = percentile(&mut dens, 0.05);
        let clut_hi = percentile(&mut clut, 0.99);
        Ok(Self {
            exposure: [lum_lo * 0.85, lum_hi + 0.15 * (1.0 - lum_hi)],
            blur: [sharp_lo * 0.8, sharp_lo * 0.45],
            fog: [dens_lo * 0.85, dens_lo * 0.55, dens_lo * 0.25],
            snow: [clut_hi + 0.05, clut_hi + 0.2],
        })
    }

    pub fn encode(&self, stats: &SampleStats, camera: bool, lidar: bool) -> VariationKey {
        let exposure = if stats.mean_luminance < self.exposure[0] {
            1
        } else if stats.mean_luminance > self.exposure[1] {
            2
        } else {
            0
        };
        let blur = self.blur.iter().filter(|&&e| stats.sharpness < e).count() as u8;
        let fog = self.fog.iter().filter(|&&e| stats.point_density < e).count() as u8;
        let snow = self.snow.iter().filter(|&&e| stats.clutter_ratio > e).count() as u8;
        VariationKey { exposure, blur, fog, snow, camera, lidar }
    }

    pub fn encode_sample(&self, sample: &MultimodalSample) -> VariationKey {
        self.encode(&sample_stats(sample), sample.present.camera, sample.present.lidar)
    }

    /// Key of a whole set: the median bin on each ordinal axis, the most
    /// common exposure bin (dark and bright sit on opposite sides of
    /// nominal), modality flags by majority. Nominal for an empty set.
    pub fn dominant(&self, data: &[MultimodalSample]) -> VariationKey {
        if data.is_empty() {
            return VariationKey::NOMINAL;
        }
        let keys: Vec<VariationKey> = data.iter().map(|s| self.encode_sample(s)).collect();
        let median = |f: fn(&VariationKey) -> u8| {
            let mut v: Vec<u8> = keys.iter().map(f).collect();
            v.sort_unstable();
            v[(v.len() - 1) / 2]
        };
        let mut exposure = [0usize; EXPOSURE_BINS as usize];
        for k in &keys {
            exposure[k.exposure as usize] += 1;
        }
        let exposure = (0..EXPOSURE_BINS).rev().max_by_key(|&b| exposure[b as usize]).unwrap_or(0);
        let majority = |f: fn(&VariationKey) -> bool| 2 * keys.iter().filter(|k| f(k)).count() >= keys.len();
        VariationKey {
            exposure,
            blur: median(|k| k.blur),
            fog: median(|k| k.fog),
            snow: median(|k| k.snow),
            camera: majority(|k| k.camera),
            lidar: majority(|k| k.lidar),
        }
    }
}

/// Fixed bookkeeping cost charged per delta entry in memory accounting.
pub const ENTRY_OVERHEAD_BYTES: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct DeltaEntry {
    pub kind: ParamKind,
    pub value: Tensor<f32>,
}

/// Replacement values for a subset of a base graph's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantDelta {
    pub key: VariationKey,
    pub base_hash: [u8; 32],
    pub provenance: String,
    pub entries: BTreeMap<String, DeltaEntry>,
}

/// Hash identifying the base graph a delta applies to: every parameter
/// except injected modules and training-only projection heads.
pub fn base_hash(store: &ParamStore) -> [u8; 32] {
    store.content_hash_where(|p: &Param<f32>| !p.kind.is_injected() && p.kind != ParamKind::Projection)
}

impl VariantDelta {
    pub fn new(key: VariationKey, base_hash: [u8; 32], provenance: impl Into<String>) -> Self {
        Self { key, base_hash, provenance: provenance.into(), entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, path: &str, kind: ParamKind, value: Tensor<f32>) {
        self.entries.insert(path.to_string(), DeltaEntry { kind, value });
    }

    pub fn get(&self, path: &str) -> Option<&Tensor<f32>> {
        self.entries.get(path).map(|e| &e.value)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    /// Resident size: 4 bytes per value plus a fixed cost per entry.
    pub fn memory_bytes(&self) -> usize {
        4 * self.numel() + ENTRY_OVERHEAD_BYTES * self.len()
    }

    /// Check that `store` is the graph this delta was made for and that every
    /// entry names an existing parameter of the same shape.
    pub fn validate_against(&self, store: &ParamStore) -> Result<()> {
        if base_hash(store) != self.base_hash {
            return Err(Error::IncompatibleVariant(format!("variant {} was made for a different base model", self.key)));
        }
        self.validate_shapes(store)
    }

    /// The path and shape half of [`Self::validate_against`], for callers
    /// that track base lineage themselves.
    pub fn validate_shapes(&self, store: &ParamStore) -> Result<()> {
        for (path, e) in &self.entries {
            let id = store
                .get(path)
                .ok_or_else(|| Error::IncompatibleVariant(format!("variant {} references unknown parameter {path}", self.key)))?;
            if store.value(id).shape() != e.value.shape() {
                return Err(Error::IncompatibleVariant(format!(
                    "{path}: variant shape {:?} vs model {:?}",
                    e.value.shape(),
                    store.value(id).shape()
                )));
            }
        }
        Ok(())
    }

    pub fn to_overrides(&self, store: &ParamStore) -> Result<Overrides> {
        self.validate_against(store)?;
        let mut o = Overrides::new(store.len());
        for (path, e) in &self.entries {
            o.set(store.id(path)?, e.value.clone());
        }
        Ok(o)
    }

    /// Copy the delta's values into `store`.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        self.validate_against(store)?;
        for (path, e) in &self.entries {
            let id = store.id(path)?;
            store.set_value(id, e.value.clone())?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum InterpolationMode {
    /// Overlapping layers become `λ_c·P_c + λ_l·P_l`.
    Weighted,
    /// Overlapping layers are left out (keep their base values).
    ExclusiveOnly,
}

/// Combine a camera-domain and a lidar-domain delta: layers tuned by only
/// one are copied, layers tuned by both are blended (or skipped).
pub fn interpolate(
    c: &VariantDelta,
    l: &VariantDelta,
    lambda_c: f64,
    lambda_l: f64,
    mode: InterpolationMode,
) -> Result<VariantDelta> {
    if !(lambda_c.is_finite() && lambda_l.is_finite()) || (lambda_c + lambda_l - 1.0).abs() > 1e-6 {
        return Err(config_err!("interpolation weights must sum to 1, got {lambda_c} + {lambda_l}"));
    }
    if c.base_hash != l.base_hash {
        return Err(Error::IncompatibleVariant("deltas were made for different base models".into()));
    }
    let provenance = match mode {
        InterpolationMode::Weighted => format!("interpolate {} x {lambda_c} + {} x {lambda_l}", c.key, l.key),
        InterpolationMode::ExclusiveOnly => format!("exclusive-only {} + {}", c.key, l.key),
    };
    let mut out = VariantDelta::new(c.key.combine(&l.key), c.base_hash, provenance);
    for (path, e) in &c.entries {
        match l.entries.get(path) {
            None => {
                out.entries.insert(path.clone(), e.clone());
            }
            Some(other) => {
                if other.value.shape() != e.value.shape() {
                    return Err(Error::IncompatibleVariant(format!("{path} has different shapes in the two deltas")));
                }
                if mode == InterpolationMode::ExclusiveOnly {
                    continue;
                }
                let value = if lambda_c == 1.0 {
                    e.value.clone()
                } else if lambda_l == 1.0 {
                    other.value.clone()
                } else {
                    let (wc, wl) = (lambda_c as f32, lambda_l as f32);
                    let data = e.value.data().iter().zip(other.value.data()).map(|(a, b)| wc * a + wl * b).collect();
                    Tensor::new(e.value.shape(), data)?
                };
                out.entries.insert(path.clone(), DeltaEntry { kind: e.kind, value });
            }
        }
    }
    for (path, e) in &l.entries {
        if !c.entries.contains_key(path) {
            out.entries.insert(path.clone(), e.clone());
        }
    }
    Ok(out)
}

/// Blend several deltas by left-folding pairwise with renormalised weights.
pub fn interpolate_many(deltas: &[(&VariantDelta, f64)]) -> Result<VariantDelta> {
    let (first, rest) = deltas.split_first().ok_or_else(|| config_err!("nothing to interpolate"))?;
    if deltas.iter().any(|(_, w)| !(*w > 0.0)) {
        return Err(config_err!("interpolation weights must be positive"));
    }
    let mut acc = first.0.clone();
    let mut acc_w = first.1;
    for (d, w) in rest {
        let total = acc_w + w;
        acc = interpolate(&acc, d, acc_w / total, 1.0 - acc_w / total, InterpolationMode::Weighted)?;
        acc_w = total;
    }
    Ok(acc)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PruneReport {
    pub pruned: usize,
    pub frozen_total: usize,
    pub fraction: f64,
}

/// Zero every non-zero entry with `|w| < threshold` in frozen weights.
/// Trainable, injected, buffer and projection parameters are skipped, as is
/// anything `protect` accepts (e.g. paths some variant overrides).
pub fn prune_frozen(store: &mut ParamStore, threshold: f32, protect: impl Fn(&str) -> bool) -> Result<PruneReport> {
    if !(threshold > 0.0) {
        return Err(config_err!("pruning threshold must be positive"));
    }
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| {
            !p.trainable
                && !p.kind.is_injected()
                && !matches!(p.kind, ParamKind::RunningStat | ParamKind::Projection)
                && !protect(&p.path)
        })
        .map(|(id, _)| id)
        .collect();
    let mut pruned = 0;
    let mut frozen_total = 0;
    for id in ids {
        let v = store.value_mut(id).data_mut();
        frozen_total += v.len();
        for w in v.iter_mut() {
            if *w != 0.0 && w.abs() < threshold {
                *w = 0.0;
                pruned += 1;
            }
        }
    }
    let fraction = if frozen_total == 0 { 0.0 } else { pruned as f64 / frozen_total as f64 };
    Ok(PruneReport { pruned, frozen_total, fraction })
}

const VARIANT_MAGIC: &[u8; 4] = b"RDVD";
const VARIANT_VERSION: u32 = 1;

impl VariantDelta {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new(VARIANT_MAGIC, VARIANT_VERSION);
        w.bytes(&self.key.to_bytes());
        w.bytes(&self.base_hash);
        w.str(&self.provenance);
        w.u32(self.entries.len() as u32);
        for (path, e) in &self.entries {
            w.str(path);
            w.u8(e.kind.code());
            w.shape(e.value.shape());
            w.f32s(e.value.data());
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, VARIANT_MAGIC, VARIANT_VERSION)?;
        let key = VariationKey::from_bytes(r.bytes(6)?)?;
        let base_hash: [u8; 32] = r.bytes(32)?.try_into().unwrap();
        let provenance = r.str()?;
        let n = r.u32()? as usize;
        let mut d = Self::new(key, base_hash, provenance);
        for _ in 0..n {
            let path = r.str()?;
            let kind = ParamKind::from_code(r.u8()?)?;
            let shape = r.shape()?;
            let data = r.f32s(shape.iter().product())?;
            let value = Tensor::new(&shape, data).map_err(|e| Error::Corrupt(e.to_string()))?;
            d.insert(&path, kind, value);
        }
        r.expect_done()?;
        Ok(d)
    }

    /// Encoded size: header, key, hash, provenance, then per entry the path,
    /// kind, shape and 4 bytes per value.
    pub fn encoded_len(&self) -> usize {
        let entries: usize = self
            .entries
            .iter()
            .map(|(p, e)| 4 + p.len() + 1 + 4 + 4 * e.value.shape().len() + 4 * e.value.numel())
            .sum();
        8 + 6 + 32 + 4 + self.provenance.len() + 4 + entries + 4
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(&[3], vec![1e-4, -5e-4, 0.5]).unwrap(), ParamKind::Weight).unwrap();
        s.add("head.b", Tensor::new(&[2], vec![0.0, 1.0]).unwrap(), ParamKind::Head).unwrap();
        s.add("x.lora_B", Tensor::zeros(&[2]), ParamKind::Lora).unwrap();
        s
    }

    fn delta(key: VariationKey, s: &ParamStore, entries: &[(&str, Vec<f32>)]) -> VariantDelta {
        let mut d = VariantDelta::new(key, base_hash(s), "test");
        for (p, v) in entries {
            d.insert(p, ParamKind::Head, Tensor::new(&[v.len()], v.clone()).unwrap());
        }
        d
    }

    #[test]
    fn key_display_parse_and_distance() {
        let k = VariationKey { exposure: 1, fog: 2, camera: false, ..VariationKey::NOMINAL };
        assert_eq!(k.to_string(), "e1.b0.f2.s0.m01");
        assert_eq!(k.to_string().parse::<VariationKey>().unwrap(), k);
        assert!("e9.b0.f0.s0.m11".parse::<VariationKey>().is_err());
        assert!("e0.b0.f0.m11".parse::<VariationKey>().is_err());
        assert_eq!(k.distance(&VariationKey::NOMINAL), 4);
    }

    #[test]
    fn prune_definition_and_idempotence() {
        let mut s = store();
        let r = prune_frozen(&mut s, 1e-3, |_| false).unwrap();
        assert_eq!(r.pruned, 2);
        assert_eq!(s.value(s.id("w").unwrap()).data(), &[0.0, 0.0, 0.5]);
        assert_eq!(prune_frozen(&mut s, 1e-3, |_| false).unwrap().pruned, 0);
        let mut t = store();
        assert_eq!(prune_frozen(&mut t, 1e-3, |p| p == "w").unwrap().pruned, 0);
    }

    #[test]
    fn interpolation_rules() {
        let s = store();
        let c = delta(VariationKey { exposure: 1, ..Default::default() }, &s, &[("head.b", vec![2.0, -0.0]), ("w", vec![1.0, 1.0, 1.0])]);
        let l = delta(VariationKey { fog: 2, ..Default::default() }, &s, &[("head.b", vec![4.0, 1.0])]);
        let mid = interpolate(&c, &l, 0.5, 0.5, InterpolationMode::Weighted).unwrap();
        assert_eq!(mid.get("head.b").unwrap().data(), &[3.0, 0.5]);
        assert_eq!(mid.get("w"), c.get("w"));
        assert_eq!(mid.key, VariationKey { exposure: 1, fog: 2, ..Default::default() });
        let end = interpolate(&c, &l, 1.0, 0.0, InterpolationMode::Weighted).unwrap();
        assert_eq!(end.get("head.b").unwrap().data()[1].to_bits(), (-0.0f32).to_bits());
        let je = interpolate(&c, &l, 0.5, 0.5, InterpolationMode::ExclusiveOnly).unwrap();
        assert!(je.get("head.b").is_none() && je.get("w").is_some());
        assert!(matches!(interpolate(&c, &l, 0.5, 0.6, InterpolationMode::Weighted), Err(Error::Config(_))));
    }

    #[test]
    fn validation_and_codec() {
        let s = store();
        let d = delta(VariationKey::NOMINAL, &s, &[("head.b", vec![1.0, 2.0])]);
        d.validate_against(&s).unwrap();
        assert!(delta(VariationKey::NOMINAL, &s, &[("nope", vec![1.0])]).validate_against(&s).is_err());
        assert!(delta(VariationKey::NOMINAL, &s, &[("head.b", vec![1.0])]).validate_against(&s).is_err());
        let mut other = s.clone();
        other.value_mut(other.id("w").unwrap()).data_mut()[2] = 0.25;
        assert!(matches!(d.validate_against(&other), Err(Error::IncompatibleVariant(_))));
        let mut injected = s.clone();
        injected.value_mut(injected.id("x.lora_B").unwrap()).data_mut()[0] = 1.0;
        d.validate_against(&injected).unwrap();

        let bytes = d.encode();
        assert_eq!(bytes.len(), d.encoded_len());
        assert_eq!(VariantDelta::decode(&bytes).unwrap(), d);
        assert!(VariantDelta::decode(&bytes[..bytes.len() - 1]).is_err());
        assert_eq!(d.memory_bytes(), 8 + ENTRY_OVERHEAD_BYTES);
    }
}
