//! TOML run configuration. Every field has a default, unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::overlap::OverlapParams;
use super::triplets::TripletSpec;
use crate::aggregation::{DustbinMarginal, DEFAULT_CLUSTERS, DEFAULT_PROJ_DIM, DEFAULT_SINKHORN_ITERS, DEFAULT_TEMPERATURE};
use crate::fusion::{MatchConfig, PatchGrid, ThresholdMode, DEFAULT_MATCH_THRESHOLD};
use crate::pose::{RansacConfig, RerankMode};
use crate::retrieval::{IndexMode, DEFAULT_N1, DEFAULT_N2, DEFAULT_N_PROBE};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregationConfig {
    pub clusters: usize,
    pub proj_dim: usize,
    pub iterations: usize,
    pub temperature: f64,
    pub dustbin_score: f64,
    pub dustbin_marginal: DustbinMarginal,
    /// Cluster-bank file; when absent a bank is fitted on the run's patches.
    pub bank_file: Option<PathBuf>,
    pub fit_seed: u64,
    /// Upper bound on patches sampled for fitting.
    pub fit_max_samples: usize,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            clusters: DEFAULT_CLUSTERS,
            proj_dim: DEFAULT_PROJ_DIM,
            iterations: DEFAULT_SINKHORN_ITERS,
            temperature: DEFAULT_TEMPERATURE,
            dustbin_score: 0.0,
            dustbin_marginal: DustbinMarginal::Uniform,
            bank_file: None,
            fit_seed: 0,
            fit_max_samples: 50_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexKind {
    #[default]
    Exact,
    InvertedFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub n1: usize,
    pub n2: usize,
    /// Database frames closer in time than this to the query are ignored.
    pub exclusion_window_s: f64,
    pub mode: IndexKind,
    /// 0 selects `√N`.
    pub n_lists: usize,
    pub n_probe: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            n1: DEFAULT_N1,
            n2: DEFAULT_N2,
            exclusion_window_s: 30.0,
            mode: IndexKind::Exact,
            n_lists: 0,
            n_probe: DEFAULT_N_PROBE,
        }
    }
}

impl RetrievalConfig {
    pub fn index_mode(&self) -> IndexMode {
        match self.mode {
            IndexKind::Exact => IndexMode::Exact,
            IndexKind::InvertedFile => IndexMode::InvertedFile {
                n_lists: self.n_lists,
                n_probe: self.n_probe,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub threshold: f64,
    pub threshold_mode: ThresholdMode,
    pub patch_rows: usize,
    pub patch_cols: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        let grid = PatchGrid::default();
        Self {
            threshold: DEFAULT_MATCH_THRESHOLD,
            threshold_mode: ThresholdMode::After,
            patch_rows: grid.rows,
            patch_cols: grid.cols,
        }
    }
}

impl FusionConfig {
    pub fn grid(&self) -> PatchGrid {
        PatchGrid {
            rows: self.patch_rows,
            cols: self.patch_cols,
        }
    }

    pub fn match_config(&self) -> MatchConfig {
        MatchConfig {
            threshold: self.threshold,
            threshold_mode: self.threshold_mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcpConfig {
    pub enabled: bool,
    pub max_corr_dist: f64,
    pub max_iters: usize,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            max_corr_dist: 0.1,
            max_iters: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub rerank: RerankMode,
    /// Mixed into every per-candidate RANSAC seed.
    pub seed: u64,
    /// Only score queries that have at least one true match outside the
    /// exclusion window.
    pub eval_require_positive: bool,
    /// Worker threads; 0 uses all cores.
    pub threads: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            rerank: RerankMode::Pose,
            seed: 0,
            eval_require_positive: true,
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub aggregation: AggregationConfig,
    pub retrieval: RetrievalConfig,
    pub fusion: FusionConfig,
    pub ransac: RansacConfig,
    pub icp: IcpConfig,
    pub overlap: OverlapParams,
    pub triplets: TripletSpec,
    pub pipeline: PipelineConfig,
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads and validates; a relative `bank_file` is resolved against the
    /// config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let (Some(bank), Some(dir)) = (&cfg.aggregation.bank_file, path.parent()) {
            if bank.is_relative() {
                cfg.aggregation.bank_file = Some(dir.join(bank));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        let a = &self.aggregation;
        if a.clusters == 0 || a.proj_dim == 0 {
            return bad("aggregation.clusters and aggregation.proj_dim must be positive");
        }
        if !(a.temperature > 0.0) {
            return bad("aggregation.temperature must be positive");
        }
        let r = &self.retrieval;
        if r.n2 == 0 || r.n2 > r.n1 {
            return bad("retrieval requires 1 <= n2 <= n1");
        }
        if !(r.exclusion_window_s >= 0.0) {
            return bad("retrieval.exclusion_window_s must be non-negative");
        }
        if r.mode == IndexKind::InvertedFile && r.n_probe == 0 {
            return bad("retrieval.n_probe must be positive");
        }
        let f = &self.fusion;
        if !(-1.0..=1.0).contains(&f.threshold) {
            return bad("fusion.threshold must lie in [-1, 1]");
        }
        if f.patch_rows == 0 || f.patch_cols == 0 {
            return bad("fusion patch grid must be non-empty");
        }
        self.ransac.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.icp.enabled && !(self.icp.max_corr_dist > 0.0) {
            return bad("icp.max_corr_dist must be positive");
        }
        self.overlap.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.triplets.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }
}
