//! Variant switch latency against full checkpoint reload, plus resident
//! memory against one full model per variant.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{config_err, Result};
use crate::report::Table;
use crate::row;
use crate::store::{MemoryReport, VariantStore};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Trial {
    pub index: usize,
    pub key: String,
    pub switch_us: f64,
    pub reload_us: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencyStats {
    pub count: usize,
    pub mean_us: f64,
    pub p90_us: f64,
    pub min_us: f64,
    pub max_us: f64,
}

impl LatencyStats {
    /// Summary of `samples`; p90 is the nearest-rank percentile. Empty
    /// input gives NaN statistics.
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self { count: 0, mean_us: f64::NAN, p90_us: f64::NAN, min_us: f64::NAN, max_us: f64::NAN };
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let rank = ((0.9 * s.len() as f64).ceil() as usize).max(1);
        Self {
            count: s.len(),
            mean_us: s.iter().sum::<f64>() / s.len() as f64,
            p90_us: s[rank - 1],
            min_us: s[0],
            max_us: s[s.len() - 1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnvFingerprint {
    pub os: String,
    pub arch: String,
    pub cpus: usize,
    pub version: String,
    pub optimized: bool,
    pub base_params: usize,
    pub checkpoint_bytes: u64,
}

impl EnvFingerprint {
    pub fn capture(base_params: usize, checkpoint_bytes: u64) -> Self {
        Self {
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            version: env!("CARGO_PKG_VERSION").to_string(),
            optimized: !cfg!(debug_assertions),
            base_params,
            checkpoint_bytes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub trials: Vec<Trial>,
    pub switch: LatencyStats,
    pub reload: LatencyStats,
    /// Reload p90 over switch p90.
    pub p90_ratio: f64,
    pub mean_ratio: f64,
    pub memory: MemoryReport,
    /// One full model per resident variant.
    pub full_models_bytes: usize,
    /// Resident variant bytes over `full_models_bytes`.
    pub memory_ratio: f64,
    pub env: EnvFingerprint,
}

impl BenchReport {
    pub fn tables(&self) -> Vec<Table> {
        let mut trials = Table::new("trials", &["index", "key", "switch_us", "reload_us"]);
        for t in &self.trials {
            trials.push(row![t.index, t.key.as_str(), t.switch_us, t.reload_us]);
        }
        let mut summary = Table::new("summary", &["metric", "value"]);
        for (name, v) in [
            ("switch_mean_us", self.switch.mean_us),
            ("switch_p90_us", self.switch.p90_us),
            ("reload_mean_us", self.reload.mean_us),
            ("reload_p90_us", self.reload.p90_us),
            ("p90_ratio", self.p90_ratio),
            ("mean_ratio", self.mean_ratio),
            ("variant_bytes", self.memory.total_bytes() as f64),
            ("full_models_bytes", self.full_models_bytes as f64),
            ("memory_ratio", self.memory_ratio),
            ("variant_param_fraction", self.memory.param_fraction()),
        ] {
            summary.push(row![name, v]);
        }
        vec![trials, summary]
    }
}

fn micros(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e6
}

/// Alternate `trials` timed switches to a random resident variant with
/// timed loads of the full model at `checkpoint` (read, decode, install).
pub fn switch_vs_reload(store: &VariantStore, checkpoint: &Path, trials: usize, seed: u64) -> Result<BenchReport> {
    let keys = store.keys();
    if keys.len() < 2 && trials > 0 {
        return Err(config_err!("benchmark needs at least two registered variants, found {}", keys.len()));
    }
    let checkpoint_bytes = std::fs::metadata(checkpoint).map_err(|e| crate::error::Error::io(checkpoint, e))?.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(trials);
    let mut installed = None;
    for index in 0..trials {
        let key = keys[rng.random_range(0..keys.len())];
        let t = Instant::now();
        store.activate(&key)?;
        let snap = store.snapshot();
        let switch_us = micros(t);
        std::hint::black_box(&snap);

        let t = Instant::now();
        let (_, mut params) = crate::io::load_model(checkpoint)?;
        params.freeze_all();
        installed = Some(Arc::new(params));
        let reload_us = micros(t);
        std::hint::black_box(&installed);
        out.push(Trial { index, key: key.to_string(), switch_us, reload_us });
    }
    drop(installed);
    let switch = LatencyStats::from_samples(&out.iter().map(|t| t.switch_us).collect::<Vec<_>>());
    let reload = LatencyStats::from_samples(&out.iter().map(|t| t.reload_us).collect::<Vec<_>>());
    let memory = store.memory();
    let full_models_bytes = memory.variants * memory.base_bytes;
    let env = EnvFingerprint::capture(memory.base_params, checkpoint_bytes);
    Ok(BenchReport {
        trials: out,
        p90_ratio: reload.p90_us / switch.p90_us,
        mean_ratio: reload.mean_us / switch.mean_us,
        switch,
        reload,
        memory_ratio: memory.total_bytes() as f64 / full_models_bytes as f64,
        full_models_bytes,
        memory,
        env,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_p90() {
        let s: Vec<f64> = (1..=10).map(|v| v as f64).collect();
        let st = LatencyStats::from_samples(&s);
        assert_eq!(st.p90_us, 9.0);
        assert_eq!(st.mean_us, 5.5);
        assert_eq!(LatencyStats::from_samples(&[3.0]).p90_us, 3.0);
        assert!(LatencyStats::from_samples(&[]).p90_us.is_nan());
    }
}
