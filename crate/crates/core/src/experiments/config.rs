//! Run configuration, read from a flat TOML file.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interventions::{Nc1RegConfig, ShrinkPerturbParams};
use crate::nn::SgdConfig;

pub const DATA_DIR_ENV: &str = "PLAB_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    Continual,
    FirstTaskSweep,
    NcThreshold,
    Warmstart,
}

impl Protocol {
    pub fn as_str(&self) -> &'static str {
        match self {
            Protocol::Continual => "continual",
            Protocol::FirstTaskSweep => "first-task-sweep",
            Protocol::NcThreshold => "nc-threshold",
            Protocol::Warmstart => "warmstart",
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}
fn default_hidden() -> Vec<usize> {
    vec![100, 100]
}
fn default_lr() -> f64 {
    0.01
}
fn default_batch() -> usize {
    64
}
fn default_tasks() -> usize {
    20
}
fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn default_sweep() -> Vec<usize> {
    vec![1, 2, 5, 10, 50, 100]
}
fn default_thresholds() -> Vec<f64> {
    vec![0.22, 0.20, 0.18]
}
fn default_threshold_cap() -> usize {
    500
}
fn default_convergence() -> f64 {
    0.99
}
fn default_phase2_cap() -> usize {
    200
}
fn default_sp_lambda() -> f64 {
    0.6
}
fn default_sp_b() -> f64 {
    0.01
}
fn default_reg_weight() -> f64 {
    0.05
}
fn two() -> usize {
    2
}
fn default_train_subset() -> usize {
    10_000
}

/// Every key is optional; defaults reproduce the desk-scale Permuted MNIST
/// setup (784-100-100-10, lr 0.01, batch 64, 20 tasks, 10k images).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub protocol: Protocol,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_hidden")]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,

    /// Number of permuted tasks `T`.
    #[serde(default = "default_tasks")]
    pub tasks: usize,
    /// Epochs on the first task `E0`.
    #[serde(default = "one")]
    pub first_task_epochs: usize,
    /// Epochs on every later task.
    #[serde(default = "one")]
    pub task_epochs: usize,
    #[serde(default = "yes")]
    pub identity_first_task: bool,
    #[serde(default = "default_sweep")]
    pub first_task_epoch_sweep: Vec<usize>,
    /// Training budget of the plasticity probe on the next task.
    #[serde(default = "one")]
    pub probe_epochs: usize,
    /// Descending NC1 thresholds for the threshold protocol.
    #[serde(default = "default_thresholds")]
    pub nc1_thresholds: Vec<f64>,
    #[serde(default = "default_threshold_cap")]
    pub threshold_epoch_cap: usize,
    /// Samples used for collapse metrics (0 = the whole training set).
    #[serde(default)]
    pub metric_samples: usize,

    /// Longest warm-up, in epochs.
    #[serde(default)]
    pub warmup_epochs: usize,
    /// Warm-up lengths from which a full-data phase is run (empty = every epoch
    /// from 0 to `warmup_epochs`).
    #[serde(default)]
    pub warmup_sweep: Vec<usize>,
    #[serde(default = "default_convergence")]
    pub convergence_accuracy: f64,
    #[serde(default = "default_phase2_cap")]
    pub phase2_epoch_cap: usize,
    #[serde(default)]
    pub shrink_perturb: bool,
    #[serde(default = "default_sp_lambda")]
    pub sp_lambda: f64,
    #[serde(default = "default_sp_b")]
    pub sp_b: f64,
    #[serde(default)]
    pub nc1_reg: bool,
    #[serde(default = "default_reg_weight")]
    pub nc1_reg_weight: f64,
    #[serde(default = "two")]
    pub nc1_reg_min_classes: usize,

    /// Root for relative dataset paths; falls back to `$PLAB_DATA_DIR`, then
    /// to the config file's directory.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    #[serde(default)]
    pub mnist_images: Option<PathBuf>,
    #[serde(default)]
    pub mnist_labels: Option<PathBuf>,
    #[serde(default)]
    pub mnist_test_images: Option<PathBuf>,
    #[serde(default)]
    pub mnist_test_labels: Option<PathBuf>,
    #[serde(default)]
    pub cifar_train: Vec<PathBuf>,
    #[serde(default)]
    pub cifar_test: Vec<PathBuf>,
    #[serde(default)]
    pub cifar_normalize: bool,
    /// Training images kept (0 = all).
    #[serde(default = "default_train_subset")]
    pub train_subset: usize,
    /// Samples carved out of the training data as a test set when no test
    /// files are given.
    #[serde(default)]
    pub holdout: usize,
    #[serde(default)]
    pub data_seed: u64,

    /// Write wall-clock timings into the log (breaks byte-identical reruns).
    #[serde(default)]
    pub record_wall_time: bool,
}

impl ExperimentConfig {
    /// Defaults for `protocol`, with no dataset paths set.
    pub fn new(protocol: Protocol) -> Self {
        toml::from_str(&format!("protocol = \"{}\"", protocol.as_str()))
            .expect("defaults deserialize")
    }

    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config {
            path: origin.to_path_buf(),
            detail: e.to_string().replace('\n', " "),
        })?;
        if cfg.data_dir.is_none() {
            cfg.data_dir = env::var_os(DATA_DIR_ENV)
                .map(PathBuf::from)
                .or_else(|| origin.parent().map(Path::to_path_buf));
        }
        cfg.validate().map_err(|e| Error::Config {
            path: origin.to_path_buf(),
            detail: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config {
            path: path.to_path_buf(),
            detail: format!("cannot read config file: {e}"),
        })?;
        ExperimentConfig::from_toml_str(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        self.sgd().validate()?;
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.tasks == 0 {
            return bad("tasks must be >= 1".into());
        }
        if self.nc1_thresholds.iter().any(|&t| !(t > 0.0)) {
            return bad("NC1 thresholds must be positive".into());
        }
        if self.nc1_thresholds.windows(2).any(|w| w[0] <= w[1]) {
            return bad("NC1 thresholds must be strictly descending".into());
        }
        if !(self.convergence_accuracy > 0.0 && self.convergence_accuracy <= 1.0) {
            return bad(format!(
                "convergence_accuracy must be in (0, 1], got {}",
                self.convergence_accuracy
            ));
        }
        if self.probe_epochs == 0 {
            return bad("probe_epochs must be >= 1".into());
        }
        self.shrink_perturb_params(0).validate()?;
        if !(self.nc1_reg_weight >= 0.0 && self.nc1_reg_weight.is_finite()) {
            return bad("nc1_reg_weight must be finite and >= 0".into());
        }
        Ok(())
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
        }
    }

    pub fn shrink_perturb_params(&self, seed: u64) -> ShrinkPerturbParams {
        ShrinkPerturbParams {
            lambda: self.sp_lambda,
            b: self.sp_b,
            seed,
        }
    }

    pub fn nc1_reg_config(&self) -> Option<Nc1RegConfig> {
        self.nc1_reg.then_some(Nc1RegConfig {
            weight: self.nc1_reg_weight,
            min_classes_in_batch: self.nc1_reg_min_classes,
        })
    }

    /// Resolves a dataset path against the data directory.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            return p.to_path_buf();
        }
        match &self.data_dir {
            Some(root) => root.join(p),
            None => p.to_path_buf(),
        }
    }

    /// Warm-up lengths with a full-data phase, ascending and deduplicated.
    pub fn warmup_points(&self) -> Vec<usize> {
        let mut pts = if self.warmup_sweep.is_empty() {
            (0..=self.warmup_epochs).collect()
        } else {
            self.warmup_sweep.clone()
        };
        pts.sort_unstable();
        pts.dedup();
        pts
    }

    /// Short label for the warm-start intervention combination.
    pub fn warmstart_variant(&self) -> String {
        match (self.nc1_reg, self.shrink_perturb) {
            (false, false) => "plain".into(),
            (false, true) => "sp".into(),
            (true, false) => "nc1reg".into(),
            (true, true) => "nc1reg+sp".into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_desk_scale_setup() {
        let c = ExperimentConfig::new(Protocol::Continual);
        assert_eq!(c.hidden_dims, vec![100, 100]);
        assert_eq!(c.learning_rate, 0.01);
        assert_eq!(c.batch_size, 64);
        assert_eq!(c.tasks, 20);
        assert_eq!(c.first_task_epoch_sweep, vec![1, 2, 5, 10, 50, 100]);
        assert_eq!(c.nc1_thresholds, vec![0.22, 0.20, 0.18]);
        assert_eq!(c.threshold_epoch_cap, 500);
        assert_eq!(c.phase2_epoch_cap, 200);
        assert_eq!(c.sp_lambda, 0.6);
        assert_eq!(c.sp_b, 0.01);
        assert_eq!(c.nc1_reg_weight, 0.05);
        assert_eq!(c.convergence_accuracy, 0.99);
    }

    #[test]
    fn rejects_ascending_thresholds() {
        let r = ExperimentConfig::from_toml_str(
            "protocol = \"nc-threshold\"\nnc1_thresholds = [0.1, 0.2]",
            Path::new("x.toml"),
        );
        assert!(matches!(r, Err(Error::Config { .. })));
    }

    #[test]
    fn rejects_unknown_keys() {
        let r = ExperimentConfig::from_toml_str(
            "protocol = \"continual\"\nlearning_rat = 0.1",
            Path::new("x.toml"),
        );
        assert!(r.is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let mut c = ExperimentConfig::new(Protocol::Warmstart);
        c.cifar_train = vec!["a.bin".into()];
        c.data_dir = Some("/data".into());
        let back = ExperimentConfig::from_toml_str(&c.to_toml(), Path::new("s.toml")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn warmup_points_default_to_every_epoch() {
        let mut c = ExperimentConfig::new(Protocol::Warmstart);
        c.warmup_epochs = 3;
        assert_eq!(c.warmup_points(), vec![0, 1, 2, 3]);
        c.warmup_sweep = vec![5, 0, 5];
        assert_eq!(c.warmup_points(), vec![0, 5]);
    }
}
