//! Experiment configuration: one JSON document describing every knob of
//! a run. All sub-seeds derive from the master seed through labeled
//! counter streams, so a config plus its seed reproduces a run bit for
//! bit.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::Corner;
use crate::datasets::{Shape, SyntheticSpec};
use crate::diffnet::{ArchDescriptor, ArchKind, Schedule, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::DistanceKind;

/// Where the experiment's images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic { spec: SyntheticSpec },
    Idx { images: PathBuf, labels: PathBuf },
    PngDir { root: PathBuf },
}

/// Training settings without a seed; seeds are derived per use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: Schedule,
}

impl TrainSettings {
    pub fn desk() -> Self {
        let preset = TrainConfig::desk_preset(0);
        Self {
            learning_rate: preset.learning_rate,
            weight_decay: preset.weight_decay,
            batch_size: preset.batch_size,
            epochs: preset.epochs,
            schedule: preset.schedule,
        }
    }

    pub fn paper() -> Self {
        let preset = TrainConfig::paper_preset(0);
        Self {
            learning_rate: preset.learning_rate,
            weight_decay: preset.weight_decay,
            batch_size: preset.batch_size,
            epochs: preset.epochs,
            schedule: preset.schedule,
        }
    }

    pub fn to_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            schedule: self.schedule,
            seed,
        }
    }
}

/// Architecture family plus training settings for one model role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    pub arch: ArchKind,
    /// Hidden sizes for mlp; ignored for small_cnn.
    #[serde(default)]
    pub hidden_sizes: Vec<usize>,
    pub train: TrainSettings,
}

impl ModelSettings {
    pub fn arch_for(&self, input_shape: Shape, num_classes: usize) -> Result<ArchDescriptor> {
        match self.arch {
            ArchKind::Mlp => {
                let hidden = if self.hidden_sizes.is_empty() {
                    vec![128, 64]
                } else {
                    self.hidden_sizes.clone()
                };
                ArchDescriptor::mlp(input_shape, hidden, num_classes)
            }
            ArchKind::SmallCnn => ArchDescriptor::small_cnn(input_shape, num_classes),
        }
    }
}

/// Honey-generation knobs (the honey count N is the verification budget).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoneySettings {
    pub iterations: usize,
    pub epsilon: f64,
    pub step_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSettings {
    pub distance_kind: DistanceKind,
    pub lambda: f64,
    pub target_fpr: f64,
    pub num_calibration_models: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerSettings {
    pub patch_size: usize,
    pub patch_value: f64,
    pub corner: Corner,
    pub target_label: usize,
    /// Fraction of the private split that receives the trigger.
    pub poison_fraction: f64,
    /// A model is flagged when attack success exceeds base rate (1/K)
    /// plus this margin.
    pub decision_margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiSettings {
    pub num_reference_pairs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Honeyimage,
    MiLoss,
    Badnets,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Honeyimage => "honeyimage",
            Method::MiLoss => "mi_loss",
            Method::Badnets => "badnets",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub public_fraction: f64,
    pub verification_fraction: f64,
    /// Owner-side models: fold proxies, rest-model, honey in-models.
    pub proxy: ModelSettings,
    /// Third-party models: compliant/infringing pairs and calibration.
    pub suspicious: ModelSettings,
    pub honey: HoneySettings,
    pub num_model_pairs: usize,
    pub methods: Vec<Method>,
    pub metrics: MetricsSettings,
    pub badnets: TriggerSettings,
    pub mi: MiSettings,
    /// Resolved relative to the config file's directory.
    pub output_dir: PathBuf,
    pub master_seed: u64,
}

impl ExperimentConfig {
    /// The default desk experiment: finishes in minutes on one core while
    /// exercising every stage.
    pub fn desk_default() -> Self {
        Self {
            dataset: DatasetSource::Synthetic {
                spec: SyntheticSpec {
                    num_classes: 10,
                    samples_per_class: 300,
                    image_side: 16,
                    class_separation: 2.5,
                    noise_sigma: 0.10,
                },
            },
            public_fraction: 2.0 / 3.0,
            verification_fraction: 0.01,
            proxy: ModelSettings {
                arch: ArchKind::Mlp,
                hidden_sizes: vec![128, 64],
                train: TrainSettings::desk(),
            },
            suspicious: ModelSettings {
                arch: ArchKind::Mlp,
                hidden_sizes: vec![128, 64],
                train: TrainSettings::desk(),
            },
            honey: HoneySettings {
                iterations: 10,
                epsilon: 4.0 / 255.0,
                step_size: 0.4 / 255.0,
            },
            num_model_pairs: 3,
            methods: vec![Method::Honeyimage, Method::MiLoss, Method::Badnets],
            metrics: MetricsSettings {
                distance_kind: DistanceKind::MeanAbs,
                lambda: 10.0,
                target_fpr: 0.05,
                num_calibration_models: 3,
            },
            badnets: TriggerSettings {
                patch_size: 3,
                patch_value: 1.0,
                corner: Corner::BottomRight,
                target_label: 0,
                poison_fraction: 0.10,
                decision_margin: 0.2,
            },
            mi: MiSettings {
                num_reference_pairs: 2,
            },
            output_dir: PathBuf::from("out"),
            master_seed: 42,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.public_fraction > 0.0 && self.public_fraction < 1.0) {
            return Err(Error::Config(format!(
                "public_fraction must lie in (0, 1), got {}",
                self.public_fraction
            )));
        }
        if !(self.verification_fraction > 0.0) {
            return Err(Error::Config("verification_fraction must be positive".into()));
        }
        if self.num_model_pairs == 0 {
            return Err(Error::Config("num_model_pairs must be >= 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("methods must not be empty".into()));
        }
        if !(self.metrics.lambda > 0.0) {
            return Err(Error::Config("metrics.lambda must be positive".into()));
        }
        if !(self.metrics.target_fpr > 0.0 && self.metrics.target_fpr < 1.0) {
            return Err(Error::Config("metrics.target_fpr must lie in (0, 1)".into()));
        }
        if self.metrics.num_calibration_models == 0 {
            return Err(Error::Config("need at least one calibration model".into()));
        }
        if !(self.honey.epsilon >= 0.0) || !(self.honey.step_size > 0.0) {
            return Err(Error::Config(
                "honey epsilon must be >= 0 and step_size > 0".into(),
            ));
        }
        if !(self.badnets.poison_fraction > 0.0 && self.badnets.poison_fraction < 1.0) {
            return Err(Error::Config("badnets.poison_fraction must lie in (0, 1)".into()));
        }
        if self.mi.num_reference_pairs == 0 {
            return Err(Error::Config("mi.num_reference_pairs must be >= 1".into()));
        }
        match &self.dataset {
            DatasetSource::Synthetic { .. } => {}
            DatasetSource::Idx { images, labels } => {
                for (name, p) in [("dataset.images", images), ("dataset.labels", labels)] {
                    if !p.exists() {
                        return Err(Error::Config(format!(
                            "{name}: file {} does not exist",
                            p.display()
                        )));
                    }
                }
            }
            DatasetSource::PngDir { root } => {
                if !root.is_dir() {
                    return Err(Error::Config(format!(
                        "dataset.root: directory {} does not exist",
                        root.display()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Reads a config file, resolving paths relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.output_dir = resolve(base, &cfg.output_dir);
        match &mut cfg.dataset {
            DatasetSource::Synthetic { .. } => {}
            DatasetSource::Idx { images, labels } => {
                *images = resolve(base, images);
                *labels = resolve(base, labels);
            }
            DatasetSource::PngDir { root } => *root = resolve(base, root),
        }
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Hash of the canonical JSON serialization; stamped on every
    /// artifact the run produces.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        let mut hex = String::with_capacity(64);
        for b in digest {
            hex.push_str(&format!("{b:02x}"));
        }
        hex
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_default_validates() {
        ExperimentConfig::desk_default().validate().unwrap();
    }

    #[test]
    fn config_round_trips_and_hash_is_stable() {
        let cfg = ExperimentConfig::desk_default();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        cfg.save(&path).unwrap();
        let loaded = ExperimentConfig::load(&path).unwrap();
        // output_dir resolves against the config directory.
        assert_eq!(loaded.output_dir, dir.path().join("out"));
        assert_eq!(loaded.config_hash(), loaded.config_hash());

        let mut changed = loaded.clone();
        changed.master_seed += 1;
        assert_ne!(loaded.config_hash(), changed.config_hash());
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut cfg = ExperimentConfig::desk_default();
        cfg.num_model_pairs = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::desk_default();
        cfg.methods.clear();
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::desk_default();
        cfg.dataset = DatasetSource::Idx {
            images: PathBuf::from("/nonexistent/images.idx"),
            labels: PathBuf::from("/nonexistent/labels.idx"),
        };
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("dataset.images"), "{err}");
    }
}
