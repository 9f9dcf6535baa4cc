//! Run configuration for the CLI: one JSON document drives every
//! subcommand, one global seed derives every stage seed, and artifacts
//! embed the config hash so reruns are attributable and byte-identical.

use crate::attacks::{AttackConfig, AttackKind};
use crate::data::{
    apply_min_max, fit_min_max, load_idx, load_tabular, split, synth_blobs, synth_digits, Dataset,
    TabularSchema,
};
use crate::detectors::DetectorCalibration;
use crate::error::{Error, Result};
use crate::models::{ModelSpec, OptimizerKind, TrainConfig};
use crate::sha256_hex;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSpec {
    /// IDX image/label file pair (gzip accepted).
    Idx { images: PathBuf, labels: PathBuf },
    /// Synthetic Gaussian clusters.
    Blobs { classes: usize, dims: usize, n: usize, separation: f64 },
    /// Synthetic 28x28 digit corpus.
    Digits { n: usize },
    /// Tabular CSV with a preprocessing schema; features min-max scaled
    /// with statistics fitted on the training partition.
    Csv { path: PathBuf, schema: TabularSchema },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Weight file to load instead of training.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub arch: Option<String>,
    #[serde(default)]
    pub hidden: Option<Vec<usize>>,
    #[serde(default)]
    pub input_shape: Option<Vec<usize>>,
    #[serde(default)]
    pub classes: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSettings {
    #[serde(default = "default_optimizer")]
    pub optimizer: String,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
}

fn default_optimizer() -> String {
    "adam".into()
}
fn default_lr() -> f64 {
    0.001
}
fn default_epochs() -> usize {
    3
}
fn default_batch() -> usize {
    64
}
fn default_momentum() -> f64 {
    0.9
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            optimizer: default_optimizer(),
            lr: default_lr(),
            epochs: default_epochs(),
            batch: default_batch(),
            momentum: default_momentum(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackSettings {
    pub kind: String,
    pub epsilon: f64,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub cw_lr: Option<f64>,
    #[serde(default)]
    pub cw_iters: Option<usize>,
    #[serde(default)]
    pub c: Option<f64>,
    #[serde(default)]
    pub warm_start_steps: Option<usize>,
    #[serde(default)]
    pub ig_steps: Option<usize>,
    /// Domain clip range; defaults to [0,1]. Use null for unbounded.
    #[serde(default = "default_clip")]
    pub clip: Option<(f64, f64)>,
    /// Samples drawn from the test partition.
    #[serde(default)]
    pub n_samples: Option<usize>,
}

fn default_clip() -> Option<(f64, f64)> {
    Some((0.0, 1.0))
}

impl AttackSettings {
    pub fn parse_kind(&self) -> Result<AttackKind> {
        Ok(match self.kind.as_str() {
            "fgsm" => AttackKind::Fgsm,
            "bim" => AttackKind::Bim,
            "pgd" => AttackKind::Pgd,
            "cw" => AttackKind::Cw,
            "adaptive_ig" => AttackKind::AdaptiveIg,
            "adaptive_logit" => AttackKind::AdaptiveLogit,
            "adaptive_combined" => AttackKind::AdaptiveCombined,
            other => {
                return Err(Error::Config(format!(
                    "unknown attack {other:?}; valid kinds: fgsm, bim, pgd, cw, adaptive_ig, \
                     adaptive_logit, adaptive_combined"
                )))
            }
        })
    }

    pub fn to_attack_config(&self, seed: u64) -> Result<AttackConfig> {
        let mut cfg = AttackConfig::new(self.parse_kind()?, self.epsilon).with_seed(seed);
        cfg.alpha = self.alpha;
        if let Some(s) = self.steps {
            cfg.steps = s;
        }
        if let Some(v) = self.cw_lr {
            cfg.cw_lr = v;
        }
        if let Some(v) = self.cw_iters {
            cfg.cw_iters = v;
        }
        if let Some(v) = self.c {
            cfg.c = v;
        }
        if let Some(v) = self.warm_start_steps {
            cfg.warm_start_steps = v;
        }
        if let Some(v) = self.ig_steps {
            cfg.ig_steps = v;
        }
        cfg.clip = self.clip;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeSettings {
    pub spread: f64,
    #[serde(default = "default_draws")]
    pub draws: usize,
}

fn default_draws() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrateSettings {
    #[serde(default = "default_fpr_targets")]
    pub fpr_targets: Vec<f64>,
}

fn default_fpr_targets() -> Vec<f64> {
    vec![0.01, 0.05, 0.10]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSettings {
    #[serde(default)]
    pub grid: Option<Vec<f64>>,
    #[serde(default)]
    pub start: Option<f64>,
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default)]
    pub count: Option<usize>,
    /// Attack used to build the adversarial validation pool.
    #[serde(default)]
    pub validation_attack: Option<AttackSettings>,
    #[serde(default)]
    pub n_validation: Option<usize>,
}

impl SweepSettings {
    pub fn grid_points(&self) -> Result<Vec<f64>> {
        if let Some(g) = &self.grid {
            if g.is_empty() {
                return Err(Error::Config("sweep grid is empty".into()));
            }
            return Ok(g.clone());
        }
        match (self.start, self.delta, self.count) {
            (Some(s), Some(d), Some(c)) if c > 0 => {
                Ok((0..c).map(|i| s + d * i as f64).collect())
            }
            _ => Err(Error::Config(
                "sweep needs either grid=[...] or start/delta/count".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluateSettings {
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_n_eval")]
    pub n_eval: usize,
    #[serde(default = "default_detectors")]
    pub detectors: Vec<String>,
    pub attacks: Vec<AttackSettings>,
}

fn default_repeats() -> usize {
    10
}
fn default_n_eval() -> usize {
    1000
}
fn default_detectors() -> Vec<String> {
    vec!["sensitivity".into()]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: Option<TrainSettings>,
    #[serde(default)]
    pub attack: Option<AttackSettings>,
    #[serde(default)]
    pub probe: Option<ProbeSettings>,
    #[serde(default)]
    pub calibrate: Option<CalibrateSettings>,
    #[serde(default)]
    pub sweep: Option<SweepSettings>,
    #[serde(default)]
    pub evaluate: Option<EvaluateSettings>,
    /// (train, calibrate, holdout, test) fractions.
    #[serde(default = "default_split")]
    pub split: [f64; 4],
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_split() -> [f64; 4] {
    [0.6, 0.15, 0.1, 0.15]
}

/// A parsed config plus the hash of the raw file it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub config_hash: String,
}

pub fn load_config(path: &Path) -> Result<LoadedConfig> {
    let bytes = std::fs::read(path).map_err(|e| Error::Config(format!(
        "cannot read config {}: {e}",
        path.display()
    )))?;
    let config: RunConfig = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Config(format!("config parse error in {}: {e}", path.display())))?;
    Ok(LoadedConfig { config, config_hash: sha256_hex(&bytes) })
}

impl RunConfig {
    /// Loads the configured dataset and cuts the four partitions. Tabular
    /// data is min-max scaled with statistics from the train partition.
    pub fn load_partitions(&self) -> Result<[Dataset; 4]> {
        let seed = crate::derive_seed(self.seed, "split");
        match &self.dataset {
            DatasetSpec::Idx { images, labels } => {
                let ds = load_idx(images, labels)?;
                split(&ds, self.split, seed)
            }
            DatasetSpec::Blobs { classes, dims, n, separation } => {
                let ds = synth_blobs(*classes, *dims, *n, *separation,
                    crate::derive_seed(self.seed, "dataset"))?;
                split(&ds, self.split, seed)
            }
            DatasetSpec::Digits { n } => {
                let ds = synth_digits(*n, crate::derive_seed(self.seed, "dataset"))?;
                split(&ds, self.split, seed)
            }
            DatasetSpec::Csv { path, schema } => {
                let loaded = load_tabular(path, schema, None)?;
                let parts = split(&loaded.dataset, self.split, seed)?;
                let stats = fit_min_max(&parts[0]);
                let [a, b, c, d] = parts;
                Ok([
                    apply_min_max(&a, &stats)?,
                    apply_min_max(&b, &stats)?,
                    apply_min_max(&c, &stats)?,
                    apply_min_max(&d, &stats)?,
                ])
            }
        }
    }

    /// Infers the model spec from config plus the dataset's shape.
    pub fn model_spec(&self, sample_shape: &[usize], classes: usize) -> Result<ModelSpec> {
        let m = self.model.clone().unwrap_or(ModelConfig {
            path: None,
            arch: None,
            hidden: None,
            input_shape: None,
            classes: None,
        });
        let class_count = m.classes.unwrap_or(classes);
        let arch = m.arch.as_deref().unwrap_or("mlp");
        match arch {
            "lenet" => {
                let input = m.input_shape.unwrap_or_else(|| {
                    if sample_shape.len() == 2 {
                        vec![1, sample_shape[0], sample_shape[1]]
                    } else {
                        sample_shape.to_vec()
                    }
                });
                Ok(ModelSpec::lenet(input, class_count))
            }
            "mlp" => {
                let input = m.input_shape.unwrap_or_else(|| sample_shape.to_vec());
                let hidden = m.hidden.unwrap_or_else(|| vec![64, 64]);
                Ok(ModelSpec::mlp(input, hidden, class_count))
            }
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = self.train.clone().unwrap_or_default();
        let optimizer = match t.optimizer.as_str() {
            "adam" => OptimizerKind::Adam,
            "sgd" => OptimizerKind::SgdMomentum { momentum: t.momentum },
            other => return Err(Error::Config(format!("unknown optimizer {other:?}"))),
        };
        Ok(TrainConfig {
            optimizer,
            lr: t.lr,
            epochs: t.epochs,
            batch: t.batch,
            seed: crate::derive_seed(self.seed, "train"),
        })
    }
}

/// Calibration artifact wrapper: the calibration plus run provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub config_hash: String,
    pub seed: u64,
    pub calibration: DetectorCalibration,
}

pub fn write_calibration_file(
    path: &Path,
    calibration: &DetectorCalibration,
    config_hash: &str,
    seed: u64,
) -> Result<()> {
    let file = CalibrationFile {
        config_hash: config_hash.to_string(),
        seed,
        calibration: calibration.clone(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

/// Reads a calibration artifact, accepting both the wrapped form the CLI
/// writes and a bare calibration object.
pub fn read_calibration_file(path: &Path) -> Result<DetectorCalibration> {
    let text = std::fs::read_to_string(path)?;
    if let Ok(file) = serde_json::from_str::<CalibrationFile>(&text) {
        return Ok(file.calibration);
    }
    DetectorCalibration::from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let json = r#"{
            "seed": 7,
            "dataset": {"kind": "digits", "n": 100}
        }"#;
        let cfg: RunConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.split, [0.6, 0.15, 0.1, 0.15]);
        assert_eq!(cfg.out, PathBuf::from("out"));
    }

    #[test]
    fn unknown_attack_kind_lists_valid_names() {
        let s = AttackSettings {
            kind: "noop".into(),
            epsilon: 0.1,
            alpha: None,
            steps: None,
            cw_lr: None,
            cw_iters: None,
            c: None,
            warm_start_steps: None,
            ig_steps: None,
            clip: default_clip(),
            n_samples: None,
        };
        match s.parse_kind() {
            Err(Error::Config(msg)) => assert!(msg.contains("fgsm") && msg.contains("pgd")),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn sweep_grid_from_start_delta_count() {
        let s = SweepSettings {
            grid: None,
            start: Some(0.001),
            delta: Some(0.01),
            count: Some(3),
            validation_attack: None,
            n_validation: None,
        };
        let g = s.grid_points().unwrap();
        assert_eq!(g.len(), 3);
        assert!((g[2] - 0.021).abs() < 1e-12);
        let bad = SweepSettings {
            grid: None,
            start: None,
            delta: None,
            count: None,
            validation_attack: None,
            n_validation: None,
        };
        assert!(bad.grid_points().is_err());
    }

    #[test]
    fn blobs_partitions_scale_and_split() {
        let cfg: RunConfig = serde_json::from_str(
            r#"{"seed": 3, "dataset": {"kind": "blobs", "classes": 2, "dims": 3, "n": 80, "separation": 2.0}}"#,
        )
        .unwrap();
        let parts = cfg.load_partitions().unwrap();
        let total: usize = parts.iter().map(|p| p.len()).sum();
        assert_eq!(total, 80);
    }
}
