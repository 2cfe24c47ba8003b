//! Run configuration: every hyperparameter in one TOML document.

use crate::data::{LengthFilter, SynthConfig};
use crate::error::{Error, Result};
use crate::hexgrid::HexGridSpec;
use crate::jepa::{MaskConfig, ModelConfig};
use crate::losses::LossConfig;
use crate::region_embed::WalkConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub center_lon: f64,
    pub center_lat: f64,
    pub half_extent_m: f64,
    pub edge_len_m: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            center_lon: -8.61,
            center_lat: 41.15,
            half_extent_m: 3_000.0,
            edge_len_m: 60.0,
        }
    }
}

impl GridConfig {
    pub fn spec(&self) -> HexGridSpec {
        HexGridSpec::around(self.center_lon, self.center_lat, self.half_extent_m, self.edge_len_m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub filter: LengthFilter,
    pub synth: SynthConfig,
    /// Trajectories produced by the synthetic generator.
    pub synth_count: usize,
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            filter: LengthFilter::default(),
            synth: SynthConfig::default(),
            synth_count: 2000,
            test_fraction: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_halve_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub ema_tau: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 20,
            lr: 1e-4,
            lr_halve_every: 5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            ema_tau: 0.996,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMetric {
    Euclidean,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfSimConfig {
    pub query_count: usize,
    pub db_size: usize,
    pub db_fractions: Vec<f64>,
    pub rho_s_grid: Vec<f64>,
    pub rho_d_grid: Vec<f64>,
    pub distort_std_m: f64,
    pub metric: EmbeddingMetric,
}

impl Default for SelfSimConfig {
    fn default() -> Self {
        Self {
            query_count: 200,
            db_size: 2000,
            db_fractions: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            rho_s_grid: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            rho_d_grid: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            distort_std_m: 50.0,
            metric: EmbeddingMetric::Euclidean,
        }
    }
}

impl SelfSimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.query_count == 0 || self.db_size < self.query_count {
            return Err(Error::Config("need 0 < query_count <= db_size".into()));
        }
        if self.db_fractions.is_empty() || self.rho_s_grid.is_empty() || self.rho_d_grid.is_empty() {
            return Err(Error::Config("evaluation grids must be non-empty".into()));
        }
        if self.db_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Error::Config("db fractions must lie in (0, 1]".into()));
        }
        if self
            .rho_s_grid
            .iter()
            .chain(&self.rho_d_grid)
            .any(|r| !(0.0..=0.9).contains(r))
        {
            return Err(Error::Config("augmentation rates must lie in [0, 0.9]".into()));
        }
        if !(self.distort_std_m >= 0.0) {
            return Err(Error::Config("distort_std_m must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub pool_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_pairs: usize,
    /// EDR/LCSS matching threshold; 0 means the grid edge length.
    pub eps_m: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            pool_size: 1000,
            epochs: 20,
            lr: 1e-3,
            batch_pairs: 256,
            eps_m: 0.0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pool_size < 10 || self.epochs == 0 || self.batch_pairs == 0 || !(self.lr > 0.0) {
            return Err(Error::Config(
                "finetune needs pool_size >= 10 and positive epochs, batch_pairs, lr".into(),
            ));
        }
        if !(self.eps_m >= 0.0) {
            return Err(Error::Config("finetune eps_m must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub grid: GridConfig,
    pub data: DataConfig,
    pub walk: WalkConfig,
    pub model: ModelConfig,
    pub mask: MaskConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub selfsim: SelfSimConfig,
    pub finetune: FinetuneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            grid: GridConfig::default(),
            data: DataConfig::default(),
            walk: WalkConfig::default(),
            model: ModelConfig::default(),
            mask: MaskConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            selfsim: SelfSimConfig::default(),
            finetune: FinetuneConfig::default(),
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
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// SHA-256 of the canonical TOML rendering, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.spec().validate()?;
        if !(self.grid.half_extent_m > 0.0) {
            return Err(Error::Config("half_extent_m must be positive".into()));
        }
        self.data.filter.validate()?;
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            return Err(Error::Config("test_fraction must lie in (0, 1)".into()));
        }
        self.walk.validate()?;
        self.model.validate()?;
        if self.data.filter.max_len > self.model.max_len {
            return Err(Error::Config(
                "data max_len exceeds the model's positional tables".into(),
            ));
        }
        if self.model.levels == 3 && self.data.filter.min_len < 8 {
            return Err(Error::Config("three levels need min_len >= 8".into()));
        }
        self.mask.validate()?;
        self.loss.validate()?;
        let t = &self.train;
        if t.batch_size == 0 || t.epochs == 0 || t.lr_halve_every == 0 || !(t.lr > 0.0) {
            return Err(Error::Config(
                "batch_size, epochs, lr_halve_every and lr must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || !(t.adam_eps > 0.0) {
            return Err(Error::Config(
                "Adam betas must lie in [0, 1) and eps be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&t.ema_tau) {
            return Err(Error::Config("ema_tau must lie in [0, 1]".into()));
        }
        self.selfsim.validate()?;
        self.finetune.validate()
    }
}
