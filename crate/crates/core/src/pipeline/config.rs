use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attribution::OcclusionSpec;
use crate::error::{Error, Result};
use crate::model::{ArchConfig, TrainSchedule};
use crate::perturb::{FilterKind, SweepConfig, SHUFFLE_GRID, SIGMA_GRID};
use crate::seeds;
use crate::synthgen::ParamDistribution;

/// Everything a run needs. Loaded from TOML; missing keys take defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Top-level seed; every random stream is derived from it.
    pub seed: u64,
    /// Worker threads; 0 uses every core. Does not affect outputs.
    pub jobs: usize,
    pub out_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub head: HeadConfig,
    pub explain: ExplainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_sites: usize,
    pub distribution: ParamDistribution,
    /// Nightlight radiance floor applied before the training label.
    pub noise_floor: f64,
    /// Sites whose nine tiles are written as PNG previews.
    pub preview_sites: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub dark_fraction: Option<f64>,
    pub dark_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub folds: usize,
    pub lambda_grid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    /// Leading corpus sites used by the perturbation sweeps.
    pub sweep_sites: usize,
    pub repetitions: usize,
    pub shuffle_grid: Vec<usize>,
    pub sigma_grid: Vec<f64>,
    pub filter_kinds: Vec<FilterKind>,
    pub k_min: usize,
    pub k_max: usize,
    pub color_samples_per_image: usize,
    /// Leading corpus sites used for the attribution-output correlation.
    pub correlation_sites: usize,
    /// Sites shown in the attribution figure, spread over the wealth range.
    pub panel_sites: usize,
    pub occlusion: OcclusionSpec,
    pub featviz_seeds: usize,
    pub featviz_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            jobs: 0,
            out_dir: PathBuf::from("run"),
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            head: HeadConfig::default(),
            explain: ExplainConfig::default(),
        }
    }
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_sites: 2000,
            distribution: ParamDistribution::default(),
            noise_floor: 0.0,
            preview_sites: 1,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { feature_dim: 64 }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 10,
            stage2_epochs: 10,
            stage1_lr: 0.01,
            stage2_lr: 0.01,
            l2: 0.001,
            batch_size: 32,
            val_fraction: 0.1,
            dark_fraction: Some(0.58),
            dark_threshold: 1.0,
        }
    }
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            folds: crate::head::DEFAULT_FOLDS,
            lambda_grid: crate::head::default_lambda_grid(),
        }
    }
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            sweep_sites: 300,
            repetitions: 5,
            shuffle_grid: SHUFFLE_GRID.to_vec(),
            sigma_grid: SIGMA_GRID.to_vec(),
            filter_kinds: vec![FilterKind::Low, FilterKind::High, FilterKind::Band],
            k_min: 1,
            k_max: 8,
            color_samples_per_image: crate::perturb::DEFAULT_SAMPLE_PER_IMAGE,
            correlation_sites: 200,
            panel_sites: 9,
            occlusion: OcclusionSpec::default(),
            featviz_seeds: 10,
            featviz_steps: 512,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.corpus.n_sites == 0 {
            return bad("corpus.n_sites must be positive");
        }
        if self.model.feature_dim == 0 {
            return bad("model.feature_dim must be positive");
        }
        if self.head.folds < 2 || self.corpus.n_sites < 2 * self.head.folds {
            return bad("head.folds must be at least 2 and leave two sites per fold");
        }
        if self.head.lambda_grid.is_empty() || self.head.lambda_grid.iter().any(|l| !(*l > 0.0)) {
            return bad("head.lambda_grid must hold positive values");
        }
        let e = &self.explain;
        if e.sweep_sites < 2 * self.head.folds || e.correlation_sites < 3 {
            return bad("explain.sweep_sites must cover the folds and correlation_sites must be at least 3");
        }
        if e.repetitions == 0 || e.shuffle_grid.is_empty() || e.sigma_grid.is_empty() {
            return bad("explain grids and repetitions must be non-empty");
        }
        if e.shuffle_grid.iter().any(|&p| p == 0 || !crate::raster::TILE_SIDE.is_multiple_of(p)) {
            return bad("explain.shuffle_grid entries must divide the tile side");
        }
        if e.sigma_grid.iter().any(|s| !(*s > 0.0)) {
            return bad("explain.sigma_grid must hold positive values");
        }
        if e.k_min == 0 || e.k_min > e.k_max || e.color_samples_per_image == 0 {
            return bad("explain.k_min..=k_max must be a non-empty range starting at 1 or more");
        }
        if e.panel_sites == 0 || e.featviz_seeds == 0 {
            return bad("explain.panel_sites and featviz_seeds must be positive");
        }
        Ok(())
    }

    /// Seed of stream `label`; see [`crate::seeds`].
    pub fn seed_for(&self, label: &str) -> u64 {
        seeds::derive(self.seed, label, 0)
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig::standard(self.model.feature_dim)
    }

    pub fn schedule(&self) -> TrainSchedule {
        let t = &self.train;
        TrainSchedule {
            stage1_epochs: t.stage1_epochs,
            stage2_epochs: t.stage2_epochs,
            stage1_lr: t.stage1_lr,
            stage2_lr: t.stage2_lr,
            l2: t.l2,
            batch_size: t.batch_size,
            val_fraction: t.val_fraction,
            dark_fraction: t.dark_fraction,
            dark_threshold: t.dark_threshold,
            seed: self.seed_for("train"),
            ..TrainSchedule::default()
        }
    }

    /// Sweep settings sharing the head's folds and grid.
    pub fn sweep_config(&self, repetitions: usize) -> SweepConfig {
        SweepConfig {
            repetitions,
            folds: self.head.folds,
            lambda_grid: self.head.lambda_grid.clone(),
            seed: self.seed_for("sweep"),
        }
    }

    /// Corpus indices used by the sweeps.
    pub fn sweep_sites(&self) -> Vec<usize> {
        (0..self.explain.sweep_sites.min(self.corpus.n_sites)).collect()
    }

    pub fn correlation_sites(&self) -> Vec<usize> {
        (0..self.explain.correlation_sites.min(self.corpus.n_sites)).collect()
    }
}
