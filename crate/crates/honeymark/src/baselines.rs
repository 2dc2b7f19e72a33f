//! Comparison methods: a BadNets-style trigger watermark (invasive,
//! strong) and a simplified loss-threshold membership-inference verifier
//! (non-invasive, weak).

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, ImageSample};
use crate::diffnet::{cross_entropy, forward, train, ArchDescriptor, Classifier, TrainConfig};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::verifier::BlackBoxModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corner {
    BottomRight,
    BottomLeft,
    TopRight,
    TopLeft,
}

impl Default for Corner {
    fn default() -> Self {
        Corner::BottomRight
    }
}

/// Trigger-patch watermark settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerConfig {
    /// Side length of the square patch.
    pub patch_size: usize,
    pub patch_value: f64,
    #[serde(default)]
    pub corner: Corner,
    pub target_label: usize,
    pub poison_ids: Vec<String>,
}

impl TriggerConfig {
    fn validate_patch(&self, data_shape: crate::datasets::Shape) -> Result<()> {
        if self.patch_size == 0
            || self.patch_size > data_shape.height
            || self.patch_size > data_shape.width
        {
            return Err(Error::RejectedInput(format!(
                "patch size {} does not fit image {}",
                self.patch_size, data_shape
            )));
        }
        if !(0.0..=1.0).contains(&self.patch_value) {
            return Err(Error::RejectedInput(format!(
                "patch value {} outside [0, 1]",
                self.patch_value
            )));
        }
        Ok(())
    }

    /// Overwrites the corner patch on every channel.
    pub fn apply_trigger(&self, sample: &ImageSample) -> ImageSample {
        let mut out = sample.clone();
        let (h, w) = (sample.shape.height, sample.shape.width);
        let s = self.patch_size;
        let (y0, x0) = match self.corner {
            Corner::BottomRight => (h - s, w - s),
            Corner::BottomLeft => (h - s, 0),
            Corner::TopRight => (0, w - s),
            Corner::TopLeft => (0, 0),
        };
        for c in 0..sample.shape.channels {
            for y in y0..y0 + s {
                for x in x0..x0 + s {
                    out.pixels[(c * h + y) * w + x] = self.patch_value;
                }
            }
        }
        out
    }
}

/// Returns a copy of the dataset with the selected samples carrying the
/// trigger patch and the target label; all others untouched.
pub fn badnets_poison(data: &Dataset, cfg: &TriggerConfig) -> Result<Dataset> {
    cfg.validate_patch(data.shape())?;
    if cfg.target_label >= data.num_classes {
        return Err(Error::RejectedInput(format!(
            "target label {} >= num_classes {}",
            cfg.target_label, data.num_classes
        )));
    }
    let ids: HashSet<&str> = data.samples.iter().map(|s| s.id.as_str()).collect();
    for id in &cfg.poison_ids {
        if !ids.contains(id.as_str()) {
            return Err(Error::RejectedInput(format!(
                "poison id {id} not in dataset"
            )));
        }
    }
    let poison: HashSet<&str> = cfg.poison_ids.iter().map(String::as_str).collect();
    let samples = data
        .samples
        .iter()
        .map(|s| {
            if poison.contains(s.id.as_str()) {
                let mut out = cfg.apply_trigger(s);
                out.label = cfg.target_label;
                out
            } else {
                s.clone()
            }
        })
        .collect();
    Dataset::new(data.name.clone(), data.num_classes, samples)
}

/// Attack-success score: applies the trigger to each clean probe at query
/// time and returns the fraction the model assigns to the target label.
/// Probes whose true label already equals the target are rejected.
pub fn badnets_verify(
    suspicious: &dyn BlackBoxModel,
    probe_images: &[ImageSample],
    cfg: &TriggerConfig,
) -> Result<f64> {
    if probe_images.is_empty() {
        return Err(Error::RejectedInput("empty probe set".into()));
    }
    if let Some(p) = probe_images.iter().find(|p| p.label == cfg.target_label) {
        return Err(Error::RejectedInput(format!(
            "probe {} already has the target label",
            p.id
        )));
    }
    cfg.validate_patch(probe_images[0].shape)?;
    let mut hits = 0usize;
    for probe in probe_images {
        let triggered = cfg.apply_trigger(probe);
        let pred = suspicious.predict(&triggered)?;
        if pred.argmax() == cfg.target_label {
            hits += 1;
        }
    }
    Ok(hits as f64 / probe_images.len() as f64)
}

/// Per-probe target-label indicators (the per-sample form of
/// [`badnets_verify`]), usable as AUROC scores.
pub fn badnets_probe_indicators(
    suspicious: &dyn BlackBoxModel,
    probe_images: &[ImageSample],
    cfg: &TriggerConfig,
) -> Result<Vec<f64>> {
    if probe_images.is_empty() {
        return Err(Error::RejectedInput("empty probe set".into()));
    }
    probe_images
        .iter()
        .map(|probe| {
            let triggered = cfg.apply_trigger(probe);
            let pred = suspicious.predict(&triggered)?;
            Ok(f64::from(u8::from(pred.argmax() == cfg.target_label)))
        })
        .collect()
}

/// Verdict rule: the attack-success score must clear the clean-model base
/// rate by the configured margin.
pub fn badnets_decision(score: f64, base_rate: f64, margin: f64) -> bool {
    score > base_rate + margin
}

/// Membership-inference reference-model settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MIConfig {
    pub reference_arch: ArchDescriptor,
    pub reference_train: TrainConfig,
    pub num_reference_pairs: usize,
}

impl MIConfig {
    fn validate(&self) -> Result<()> {
        if self.num_reference_pairs == 0 {
            return Err(Error::RejectedInput(
                "num_reference_pairs must be >= 1".into(),
            ));
        }
        self.reference_arch.validate()?;
        self.reference_train.validate()
    }
}

/// Trains the out-reference models on `rest_pool` (seeds derived from the
/// config seed with counters 0..n).
pub fn train_out_references(cfg: &MIConfig, rest_pool: &Dataset) -> Result<Vec<Classifier>> {
    cfg.validate()?;
    (0..cfg.num_reference_pairs)
        .map(|i| {
            let seed = derive_seed(cfg.reference_train.seed, "mi-out-reference", i as u64);
            train(
                &cfg.reference_arch,
                &rest_pool.samples,
                &cfg.reference_train.clone().with_seed(seed),
            )
        })
        .collect()
}

/// Loss-threshold membership scores: `mean out-reference loss minus
/// suspicious loss` per sample. Higher means the suspicious model more
/// likely trained on the sample. The scored samples must be disjoint
/// from the reference training pool.
pub fn mi_loss_scores(
    samples: &[ImageSample],
    suspicious: &dyn BlackBoxModel,
    cfg: &MIConfig,
    rest_pool: &Dataset,
) -> Result<Vec<f64>> {
    let references = train_out_references(cfg, rest_pool)?;
    mi_loss_scores_with_references(samples, suspicious, &references, rest_pool)
}

/// [`mi_loss_scores`] with pre-trained reference models.
pub fn mi_loss_scores_with_references(
    samples: &[ImageSample],
    suspicious: &dyn BlackBoxModel,
    references: &[Classifier],
    rest_pool: &Dataset,
) -> Result<Vec<f64>> {
    if references.is_empty() {
        return Err(Error::RejectedInput("no reference models".into()));
    }
    let pool_ids: HashSet<&str> = rest_pool.samples.iter().map(|s| s.id.as_str()).collect();
    if let Some(s) = samples.iter().find(|s| pool_ids.contains(s.id.as_str())) {
        return Err(Error::RejectedInput(format!(
            "scored sample {} appears in the reference pool",
            s.id
        )));
    }
    samples
        .iter()
        .map(|s| {
            let mut out_loss = 0.0;
            for reference in references {
                out_loss += cross_entropy(&forward(reference, s)?, s.label)?;
            }
            out_loss /= references.len() as f64;
            let sus_loss = cross_entropy(&suspicious.predict(s)?, s.label)?;
            let score = out_loss - sus_loss;
            if !score.is_finite() {
                return Err(Error::DegenerateGradient(format!(
                    "non-finite membership score for {}",
                    s.id
                )));
            }
            Ok(score)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_synthetic, Shape, SyntheticSpec};
    use crate::diffnet::PredictionVector;

    fn blob_dataset() -> Dataset {
        let spec = SyntheticSpec {
            num_classes: 3,
            samples_per_class: 10,
            image_side: 6,
            class_separation: 2.0,
            noise_sigma: 0.05,
        };
        generate_synthetic(&spec, 13).unwrap()
    }

    fn trigger(poison_ids: Vec<String>) -> TriggerConfig {
        TriggerConfig {
            patch_size: 3,
            patch_value: 1.0,
            corner: Corner::BottomRight,
            target_label: 0,
            poison_ids,
        }
    }

    #[test]
    fn poison_changes_exactly_the_patch() {
        let data = blob_dataset();
        let ids = vec![data.samples[25].id.clone()];
        let cfg = trigger(ids.clone());
        let poisoned = badnets_poison(&data, &cfg).unwrap();
        let mut changed_samples = 0;
        for (before, after) in data.samples.iter().zip(&poisoned.samples) {
            let diff: Vec<usize> = before
                .pixels
                .iter()
                .zip(&after.pixels)
                .enumerate()
                .filter(|(_, (a, b))| a != b)
                .map(|(i, _)| i)
                .collect();
            if before.id == ids[0] {
                changed_samples += 1;
                assert_eq!(after.label, 0);
                // At most 9 pixels per channel may change (some may already
                // equal the patch value); all must lie inside the corner.
                assert!(diff.len() <= 9);
                for i in diff {
                    let y = i / 6;
                    let x = i % 6;
                    assert!(y >= 3 && x >= 3, "pixel ({y},{x}) outside patch");
                }
                // The patch is exactly the value everywhere.
                for y in 3..6 {
                    for x in 3..6 {
                        assert_eq!(after.pixel(0, y, x), 1.0);
                    }
                }
            } else {
                assert!(diff.is_empty());
                assert_eq!(before.label, after.label);
            }
        }
        assert_eq!(changed_samples, 1);
    }

    #[test]
    fn empty_poison_set_is_identity() {
        let data = blob_dataset();
        let poisoned = badnets_poison(&data, &trigger(vec![])).unwrap();
        assert_eq!(data, poisoned);
    }

    #[test]
    fn oversized_patch_rejected() {
        let data = blob_dataset();
        let mut cfg = trigger(vec![]);
        cfg.patch_size = 7;
        assert!(badnets_poison(&data, &cfg).is_err());
    }

    struct ConstantModel {
        probs: Vec<f64>,
    }

    impl BlackBoxModel for ConstantModel {
        fn predict(&self, _: &ImageSample) -> Result<PredictionVector> {
            PredictionVector::new(self.probs.clone())
        }
    }

    #[test]
    fn verify_scores_match_model_behaviour() {
        let data = blob_dataset();
        let probes: Vec<ImageSample> = data
            .samples
            .iter()
            .filter(|s| s.label != 0)
            .take(8)
            .cloned()
            .collect();
        let cfg = trigger(vec![]);

        let always = ConstantModel {
            probs: vec![0.98, 0.01, 0.01],
        };
        assert_eq!(badnets_verify(&always, &probes, &cfg).unwrap(), 1.0);

        let never = ConstantModel {
            probs: vec![0.01, 0.98, 0.01],
        };
        assert_eq!(badnets_verify(&never, &probes, &cfg).unwrap(), 0.0);

        // Probes with the target label are rejected.
        let bad_probe = vec![data.samples[0].clone()];
        assert!(badnets_verify(&always, &bad_probe, &cfg).is_err());
        assert!(badnets_verify(&always, &[], &cfg).is_err());
    }

    #[test]
    fn mi_scores_reject_pool_overlap() {
        let data = blob_dataset();
        let arch = ArchDescriptor::mlp(Shape::new(1, 6, 6), vec![8], 3).unwrap();
        let cfg = MIConfig {
            reference_arch: arch.clone(),
            reference_train: TrainConfig {
                learning_rate: 0.05,
                weight_decay: 0.0,
                batch_size: 16,
                epochs: 2,
                schedule: crate::diffnet::Schedule::Constant,
                seed: 3,
            },
            num_reference_pairs: 1,
        };
        let model = Classifier::init(arch, 8).unwrap();
        let adapter = crate::verifier::ClassifierAdapter(&model);
        let overlapping = vec![data.samples[0].clone()];
        assert!(mi_loss_scores(&overlapping, &adapter, &cfg, &data).is_err());
    }

    #[test]
    fn mi_score_is_out_loss_minus_suspicious_loss() {
        let data = blob_dataset();
        let pool = Dataset::new("pool", 3, data.samples[1..].to_vec()).unwrap();
        let sample = data.samples[0].clone();
        let arch = ArchDescriptor::mlp(Shape::new(1, 6, 6), vec![8], 3).unwrap();
        let reference = Classifier::init(arch, 5).unwrap();

        // Suspicious model with zero loss on the sample.
        let mut probs = vec![0.0; 3];
        probs[sample.label] = 1.0;
        let certain = ConstantModel { probs };
        let scores = mi_loss_scores_with_references(
            std::slice::from_ref(&sample),
            &certain,
            std::slice::from_ref(&reference),
            &pool,
        )
        .unwrap();
        let out_loss = cross_entropy(&forward(&reference, &sample).unwrap(), sample.label).unwrap();
        assert!((scores[0] - out_loss).abs() < 1e-12);
    }
}
