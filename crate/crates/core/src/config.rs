//! Experiment configuration.
//!
//! The configuration is a TOML document with a few top-level keys and one
//! section per subsystem. Every knob has a default, unknown keys are rejected
//! and a `[sweep]` section expands into a parameter grid.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domains::TaskKind;
use crate::error::{CasaError, Result};
use crate::iforest::ForestParams;
use crate::learner::{Init, LearnerSpec};
use crate::style::{LayerSpec, Nonlinearity};
use crate::stream::StreamSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoKeyword {
    Auto,
}

/// Neighbourhood radius for discovery: a fixed value, or `"auto"` to derive
/// it from the pretraining embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DistanceThreshold {
    Fixed(f64),
    Auto(AutoKeyword),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StyleConfig {
    pub layers: Vec<LayerSpec>,
    pub bank_seed: u64,
    pub embedding_dim: usize,
    pub projection_seed: u64,
    /// Projection sparsity `s`; defaults to `sqrt(raw dimension)` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<f64>,
}

impl Default for StyleConfig {
    fn default() -> Self {
        let layer = LayerSpec {
            kernels: 8,
            kernel_size: 3,
            stride: 2,
            nonlinearity: Nonlinearity::Relu,
            zero_mean: true,
        };
        Self {
            layers: vec![layer, layer],
            bank_seed: 7,
            embedding_dim: 64,
            projection_seed: 11,
            sparsity: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CasaConfig {
    /// Label budget as a fraction of the continual stream.
    pub beta: f64,
    /// Training memory capacity `M`.
    pub memory_size: usize,
    /// Completion threshold on the running task metric.
    pub k: f64,
    pub task: TaskKind,
    /// Running performance window `P`.
    pub window: usize,
    /// Outlier count `o` that triggers discovery. The default equals the
    /// input batch, so only a batch that is entirely unassigned can open a
    /// new pseudo-domain.
    pub discovery_size: usize,
    pub distance_threshold: DistanceThreshold,
    /// Multiplier on the median pretraining distance when the threshold is `"auto"`.
    pub auto_threshold_scale: f64,
    pub min_group: usize,
    /// Outlier lifetime in controller steps. Short lifetimes stop stray
    /// rejections of an already known style from piling up into a
    /// duplicate pseudo-domain.
    pub max_age: u64,
    /// Input mini-batch size `B`.
    pub input_batch: usize,
    /// Training mini-batch size `T`.
    pub train_batch: usize,
    /// Training mini-batches per input batch `n`.
    pub train_steps: usize,
    /// Intermediate evaluation checkpoint every this many input batches.
    pub eval_every: usize,
}

impl Default for CasaConfig {
    fn default() -> Self {
        Self {
            beta: 0.05,
            memory_size: 32,
            k: 5.0,
            task: TaskKind::Regression,
            window: 5,
            discovery_size: 8,
            distance_threshold: DistanceThreshold::Auto(AutoKeyword::Auto),
            auto_threshold_scale: 1.5,
            min_group: 4,
            max_age: 1,
            input_batch: 8,
            train_batch: 8,
            train_steps: 1,
            eval_every: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub init: Init,
    pub pretrain_epochs: usize,
    pub pretrain_batch: usize,
    /// Epochs for the joint and per-domain upper-bound models.
    pub offline_epochs: usize,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        let spec = LearnerSpec::default();
        Self {
            hidden: spec.hidden,
            learning_rate: spec.learning_rate,
            init: spec.init,
            pretrain_epochs: 100,
            pretrain_batch: 8,
            offline_epochs: 100,
        }
    }
}

impl LearnerConfig {
    pub fn spec(&self) -> LearnerSpec {
        LearnerSpec {
            hidden: self.hidden.clone(),
            learning_rate: self.learning_rate,
            init: self.init,
        }
    }
}

/// Parameter grid; empty lists fall back to the base configuration's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub beta: Vec<f64>,
    pub k: Vec<f64>,
    pub memory_size: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub stream: StreamSpec,
    pub style: StyleConfig,
    pub forest: ForestParams,
    pub casa: CasaConfig,
    pub learner: LearnerConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3],
            output_dir: PathBuf::from("runs"),
            stream: StreamSpec::default(),
            style: StyleConfig::default(),
            forest: ForestParams::default(),
            casa: CasaConfig::default(),
            learner: LearnerConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// One point of the sweep grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub beta: f64,
    pub k: f64,
    pub memory_size: usize,
}

fn bad(key: &str, msg: impl std::fmt::Display) -> CasaError {
    CasaError::Config(format!("{key}: {msg}"))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CasaError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CasaError::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.casa;
        if !(c.beta > 0.0 && c.beta <= 1.0) {
            return Err(bad("casa.beta", format!("must lie in (0, 1], got {}", c.beta)));
        }
        if c.memory_size == 0 {
            return Err(bad("casa.memory_size", "must be >= 1"));
        }
        if !c.k.is_finite() {
            return Err(bad("casa.k", "must be finite"));
        }
        for (key, v) in [
            ("casa.window", c.window),
            ("casa.discovery_size", c.discovery_size),
            ("casa.input_batch", c.input_batch),
            ("casa.train_batch", c.train_batch),
            ("casa.eval_every", c.eval_every),
        ] {
            if v == 0 {
                return Err(bad(key, "must be >= 1"));
            }
        }
        if c.min_group < 2 {
            return Err(bad("casa.min_group", "must be >= 2"));
        }
        match c.distance_threshold {
            DistanceThreshold::Fixed(t) if !(t > 0.0) => {
                return Err(bad("casa.distance_threshold", "must be positive or \"auto\""));
            }
            _ => {}
        }
        if !(c.auto_threshold_scale > 0.0) {
            return Err(bad("casa.auto_threshold_scale", "must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(bad("seeds", "list at least one seed"));
        }
        if self.forest.n_trees == 0 {
            return Err(bad("forest.n_trees", "must be >= 1"));
        }
        if self.forest.sample_size < 2 {
            return Err(bad("forest.sample_size", "must be >= 2"));
        }
        if self.style.layers.is_empty() {
            return Err(bad("style.layers", "need at least one layer"));
        }
        if self.style.embedding_dim == 0 {
            return Err(bad("style.embedding_dim", "must be >= 1"));
        }
        let l = &self.learner;
        if !(l.learning_rate > 0.0) {
            return Err(bad("learner.learning_rate", "must be positive"));
        }
        if l.hidden.contains(&0) {
            return Err(bad("learner.hidden", "widths must be positive"));
        }
        if l.pretrain_batch == 0 {
            return Err(bad("learner.pretrain_batch", "must be >= 1"));
        }
        if self.stream.pretrain < l.pretrain_batch {
            return Err(bad("stream.pretrain", "must be at least learner.pretrain_batch"));
        }
        self.stream.validate().map_err(|e| match e {
            CasaError::Config(m) => CasaError::Config(m),
            other => other,
        })?;
        for &b in &self.sweep.beta {
            if !(b > 0.0 && b <= 1.0) {
                return Err(bad("sweep.beta", format!("{b} outside (0, 1]")));
            }
        }
        if self.sweep.memory_size.contains(&0) {
            return Err(bad("sweep.memory_size", "entries must be >= 1"));
        }
        Ok(())
    }

    /// Cartesian product of the sweep lists, in `beta`, `k`, `memory_size` order.
    pub fn grid(&self) -> Vec<GridPoint> {
        let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
        let betas = or(&self.sweep.beta, self.casa.beta);
        let ks = or(&self.sweep.k, self.casa.k);
        let ms = if self.sweep.memory_size.is_empty() {
            vec![self.casa.memory_size]
        } else {
            self.sweep.memory_size.clone()
        };
        let mut out = Vec::with_capacity(betas.len() * ks.len() * ms.len());
        for &beta in &betas {
            for &k in &ks {
                for &memory_size in &ms {
                    out.push(GridPoint { beta, k, memory_size });
                }
            }
        }
        out
    }

    /// Copy of this configuration at one grid point.
    pub fn at(&self, p: GridPoint) -> Self {
        let mut cfg = self.clone();
        cfg.casa.beta = p.beta;
        cfg.casa.k = p.k;
        cfg.casa.memory_size = p.memory_size;
        cfg
    }
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CasaError::io(path, e))?;
    ExperimentConfig::from_toml_str(&text).map_err(|e| match e {
        CasaError::Config(m) => CasaError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn round_trip() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);

        let mut fixed = cfg.clone();
        fixed.casa.distance_threshold = DistanceThreshold::Fixed(0.25);
        fixed.style.sparsity = Some(3.0);
        fixed.sweep.beta = vec![0.05, 0.1];
        let text = fixed.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), fixed);
    }

    #[test]
    fn rejects_bad_beta_and_unknown_keys() {
        let err = ExperimentConfig::from_toml_str("[casa]\nbeta = 0.0\n").unwrap_err();
        assert!(err.to_string().contains("casa.beta"), "{err}");
        let err = ExperimentConfig::from_toml_str("[casa]\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        assert!(ExperimentConfig::from_toml_str("nope = 3\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[casa]\ndistance_threshold = \"sometimes\"\n").is_err());
    }

    #[test]
    fn threshold_forms() {
        let cfg = ExperimentConfig::from_toml_str("[casa]\ndistance_threshold = 0.5\n").unwrap();
        assert_eq!(cfg.casa.distance_threshold, DistanceThreshold::Fixed(0.5));
        let cfg = ExperimentConfig::from_toml_str("[casa]\ndistance_threshold = \"auto\"\n").unwrap();
        assert_eq!(cfg.casa.distance_threshold, DistanceThreshold::Auto(AutoKeyword::Auto));
    }

    #[test]
    fn sweep_grid_expansion() {
        let cfg = ExperimentConfig::from_toml_str(
            "[sweep]\nbeta = [0.05, 0.1, 0.125, 0.2]\nk = [5.0, 7.0]\n",
        )
        .unwrap();
        let grid = cfg.grid();
        assert_eq!(grid.len(), 8);
        assert!(grid.iter().all(|p| p.memory_size == cfg.casa.memory_size));
        assert_eq!(ExperimentConfig::default().grid().len(), 1);
    }
}
