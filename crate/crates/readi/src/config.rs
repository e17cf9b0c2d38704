//! TOML experiment configuration.

use std::path::{Path, PathBuf};

use readi_core::adapt::AdaptConfig;
use readi_core::contrastive::ContrastiveConfig;
use readi_core::metrics::MatchConfig;
use readi_core::model::ModelConfig;
use readi_core::synth::SceneConfig;
use readi_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::store::StoreConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Pipeline {
    FogSweep,
    SnowSweep,
    BlurSweep,
    ExposureSweep,
    MissingModality,
    CrossDomain,
    Ablation,
    EigenProfile,
}

impl Pipeline {
    pub const ALL: [Pipeline; 8] = [
        Self::FogSweep,
        Self::SnowSweep,
        Self::BlurSweep,
        Self::ExposureSweep,
        Self::MissingModality,
        Self::CrossDomain,
        Self::Ablation,
        Self::EigenProfile,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::FogSweep => "fog_sweep",
            Self::SnowSweep => "snow_sweep",
            Self::BlurSweep => "blur_sweep",
            Self::ExposureSweep => "exposure_sweep",
            Self::MissingModality => "missing_modality",
            Self::CrossDomain => "cross_domain",
            Self::Ablation => "ablation",
            Self::EigenProfile => "eigen_profile",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| config_err!("unknown pipeline {s:?}; expected one of {}", Self::ALL.map(|p| p.name()).join(", ")))
    }

    /// Sweep levels used when the config gives none.
    pub fn default_levels(self) -> Vec<f64> {
        match self {
            Self::FogSweep => vec![0.01, 0.02, 0.03, 0.06, 0.1, 0.12, 0.15],
            Self::SnowSweep => vec![0.5, 1.0, 1.5, 2.0, 2.5],
            Self::BlurSweep => vec![5.0, 10.0, 15.0, 20.0, 30.0],
            Self::ExposureSweep => vec![0.25, 0.5, 1.0, 2.0, 4.0],
            Self::MissingModality => vec![0.1],
            Self::CrossDomain | Self::Ablation | Self::EigenProfile => Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    /// Adaptation runs see the first `n_adapt` training scenes, distorted.
    pub n_adapt: usize,
    pub n_test: usize,
    pub scene: SceneConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n_train: 1000, n_adapt: 200, n_test: 1000, scene: SceneConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Adaptation runs per row, each with its own shuffling seed.
    pub seeds: usize,
    pub fog: f32,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { seeds: 3, fog: 0.06 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossDomainConfig {
    pub gamma: f32,
    pub fog: f32,
    pub lambda_step: f64,
}

impl Default for CrossDomainConfig {
    fn default() -> Self {
        Self { gamma: 0.5, fog: 0.03, lambda_step: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EigenConfig {
    /// Test scenes profiled per condition.
    pub samples: usize,
    pub blur: usize,
    pub gamma: f32,
    /// Random single-head layers for the rank check.
    pub random_draws: usize,
    pub random_tokens: usize,
    pub random_feat: usize,
    pub random_head_dim: usize,
    pub energy_share: f64,
    /// Magnitudes below this fraction of the largest count as zero.
    pub rank_tol: f64,
}

impl Default for EigenConfig {
    fn default() -> Self {
        Self {
            samples: 8,
            blur: 15,
            gamma: 0.25,
            random_draws: 10,
            random_tokens: 200,
            random_feat: 64,
            random_head_dim: 16,
            energy_share: 0.85,
            rank_tol: 1e-9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub pipeline: Option<Pipeline>,
    pub seed: u64,
    /// Worker threads for sweep levels; 0 uses every available core.
    pub workers: usize,
    pub levels: Option<Vec<f64>>,
    /// Load the base detector from here instead of training it.
    pub base_model: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub base: TrainConfig,
    pub adapt: AdaptConfig,
    pub contrastive: ContrastiveConfig,
    pub matching: MatchConfig,
    pub store: StoreConfig,
    pub ablation: AblationConfig,
    pub cross_domain: CrossDomainConfig,
    pub eigen: EigenConfig,
    pub prune_threshold: f32,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            pipeline: None,
            seed: 0,
            workers: 0,
            levels: None,
            base_model: None,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            base: TrainConfig::default(),
            adapt: AdaptConfig::default(),
            contrastive: ContrastiveConfig::default(),
            matching: MatchConfig::default(),
            store: StoreConfig::default(),
            ablation: AblationConfig::default(),
            cross_domain: CrossDomainConfig::default(),
            eigen: EigenConfig::default(),
            prune_threshold: 1e-3,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = toml::from_str(&text).map_err(|source| Error::Toml { path: path.to_path_buf(), source })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err!("{e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn workers(&self) -> usize {
        match self.workers {
            0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
            n => n,
        }
    }

    pub fn levels(&self, pipeline: Pipeline) -> Vec<f64> {
        self.levels.clone().unwrap_or_else(|| pipeline.default_levels())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.base.validate()?;
        self.adapt.validate()?;
        self.contrastive.train.validate()?;
        self.matching.validate()?;
        let d = &self.data;
        if d.n_train == 0 || d.n_test == 0 {
            return Err(config_err!("data sets must not be empty"));
        }
        if d.n_adapt == 0 || d.n_adapt > d.n_train {
            return Err(config_err!("n_adapt must be in 1..={}, got {}", d.n_train, d.n_adapt));
        }
        if d.scene.image_size != self.model.image_size || d.scene.world != self.model.world {
            return Err(config_err!("scene and model disagree on image size or world extent"));
        }
        if self.ablation.seeds == 0 {
            return Err(config_err!("ablation needs at least one seed"));
        }
        let step = self.cross_domain.lambda_step;
        if !(step > 0.0 && step <= 1.0) {
            return Err(config_err!("lambda_step must be in (0, 1], got {step}"));
        }
        if !(self.prune_threshold >= 0.0) {
            return Err(config_err!("prune threshold must be non-negative"));
        }
        if let Some(p) = self.pipeline {
            self.validate_levels(p)?;
        }
        Ok(())
    }

    pub fn validate_levels(&self, pipeline: Pipeline) -> Result<()> {
        for level in self.levels(pipeline) {
            let ok = match pipeline {
                Pipeline::FogSweep | Pipeline::SnowSweep => level >= 0.0 && level.is_finite(),
                Pipeline::BlurSweep => level >= 1.0 && level.fract() == 0.0,
                Pipeline::ExposureSweep => level > 0.0 && level.is_finite(),
                Pipeline::MissingModality => (0.0..=1.0).contains(&level),
                Pipeline::CrossDomain | Pipeline::Ablation | Pipeline::EigenProfile => true,
            };
            if !ok {
                return Err(config_err!("level {level} is not valid for {}", pipeline.name()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = Config::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(Config::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_config_and_errors() {
        let cfg = Config::parse("pipeline = \"fog_sweep\"\nseed = 3\n[data]\nn_train = 20\nn_adapt = 5\n").unwrap();
        assert_eq!(cfg.pipeline, Some(Pipeline::FogSweep));
        assert_eq!(cfg.data.n_test, 1000);
        assert!(Config::parse("pipeline = \"nope\"").is_err());
        assert!(Config::parse("bogus = 1").is_err());
        assert!(Config::parse("[data]\nn_adapt = 0").is_err());
        assert!(Config::parse("pipeline = \"blur_sweep\"\nlevels = [2.5]").is_err());
        assert_eq!(Pipeline::parse("eigen_profile").unwrap(), Pipeline::EigenProfile);
        assert_eq!(Pipeline::parse("x").unwrap_err().exit_code(), 2);
    }
}
