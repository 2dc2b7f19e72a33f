//! Honey-image generation: alternating in-model retraining and projected
//! sign-gradient ascent on the differential loss.
//!
//! Each outer iteration retrains a fresh in-model on `rest + current
//! honey`, then moves every honey image one signed-gradient step so the
//! gap between the rest-model's loss and the in-model's loss grows,
//! projecting back into the L-infinity ball around the original image
//! and clamping to valid pixel range.

use serde::{Deserialize, Serialize};

use crate::datasets::ImageSample;
use crate::diffnet::{
    cross_entropy, forward, input_gradient, train, ArchDescriptor, Classifier, TrainConfig,
};
use crate::error::{Error, Result};
use crate::rng::derive_seed;

/// Tolerance for the L-infinity budget checks (pure float roundoff).
pub const BUDGET_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoneyGenConfig {
    /// Outer iterations T (one retraining + one step each).
    pub iterations: usize,
    /// L-infinity budget in normalized pixel units (e.g. 4/255).
    pub epsilon: f64,
    /// Step size in the same units (e.g. 0.4/255).
    pub step_size: f64,
    pub inner_train: TrainConfig,
    pub seed: u64,
}

impl HoneyGenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) {
            return Err(Error::RejectedInput(format!(
                "epsilon must be non-negative, got {}",
                self.epsilon
            )));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::RejectedInput(format!(
                "step_size must be positive, got {}",
                self.step_size
            )));
        }
        self.inner_train.validate()
    }
}

/// One hard sample with its current perturbed version and per-iteration
/// differential-loss trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoneyRecord {
    pub sample_id: String,
    pub original: ImageSample,
    pub current: ImageSample,
    pub delta_loss_trace: Vec<f64>,
}

/// The generated honey set plus the rest-model it was optimized against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoneySet {
    pub records: Vec<HoneyRecord>,
    pub rest_model: Classifier,
    pub config: HoneyGenConfig,
}

impl HoneySet {
    /// The perturbed images, in record order.
    pub fn current_samples(&self) -> Vec<ImageSample> {
        self.records.iter().map(|r| r.current.clone()).collect()
    }
}

/// Differential loss: cross-entropy under the out-of-training model minus
/// cross-entropy under the in-training model. May be negative.
pub fn differential_loss(
    x: &ImageSample,
    rest_model: &Classifier,
    in_model: &Classifier,
) -> Result<f64> {
    let rest = cross_entropy(&forward(rest_model, x)?, x.label)?;
    let inl = cross_entropy(&forward(in_model, x)?, x.label)?;
    Ok(rest - inl)
}

/// One projected ascent step: `x + step * sign(grad)` (sign(0) = 0),
/// clipped per pixel to `original +- epsilon`, then clamped to [0, 1].
/// The label and id carry over from `current`.
pub fn pgd_step(
    current: &ImageSample,
    grad_delta: &[f64],
    original: &ImageSample,
    cfg: &HoneyGenConfig,
) -> Result<ImageSample> {
    if grad_delta.len() != current.pixels.len() || current.shape != original.shape {
        return Err(Error::ShapeMismatch {
            expected: format!("{} ({} values)", current.shape, current.pixels.len()),
            actual: format!("{} gradient values", grad_delta.len()),
        });
    }
    if grad_delta.iter().any(|g| !g.is_finite()) {
        return Err(Error::DegenerateGradient(format!(
            "non-finite gradient for sample {}",
            current.id
        )));
    }
    let pixels: Vec<f64> = current
        .pixels
        .iter()
        .zip(grad_delta)
        .zip(&original.pixels)
        .map(|((x, g), orig)| {
            let stepped = x + cfg.step_size * sign(*g);
            let offset = (stepped - orig).clamp(-cfg.epsilon, cfg.epsilon);
            (orig + offset).clamp(0.0, 1.0)
        })
        .collect();
    Ok(ImageSample {
        id: current.id.clone(),
        shape: current.shape,
        pixels,
        label: current.label,
    })
}

#[inline]
fn sign(g: f64) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Runs the full generation procedure.
///
/// Trains the rest-model once on `rest`, then for each of T iterations
/// trains a fresh in-model on `rest + current honey` (seed derived from
/// `(cfg.seed, t)`), records each record's differential loss, and takes
/// one projected step per record.
pub fn generate_honey(
    hard: &[ImageSample],
    rest: &[ImageSample],
    arch: &ArchDescriptor,
    cfg: &HoneyGenConfig,
) -> Result<HoneySet> {
    cfg.validate()?;
    if hard.is_empty() {
        return Err(Error::RejectedInput("empty hard sample set".into()));
    }
    {
        let rest_ids: std::collections::HashSet<&str> =
            rest.iter().map(|s| s.id.as_str()).collect();
        if let Some(s) = hard.iter().find(|s| rest_ids.contains(s.id.as_str())) {
            return Err(Error::RejectedInput(format!(
                "sample {} appears in both hard and rest sets",
                s.id
            )));
        }
    }

    let rest_cfg = cfg
        .inner_train
        .clone()
        .with_seed(derive_seed(cfg.seed, "rest-model", 0));
    let rest_model = train(arch, rest, &rest_cfg)
        .map_err(|e| wrap_divergence(e, "rest-model training"))?;

    let mut records: Vec<HoneyRecord> = hard
        .iter()
        .map(|s| HoneyRecord {
            sample_id: s.id.clone(),
            original: s.clone(),
            current: s.clone(),
            delta_loss_trace: Vec::with_capacity(cfg.iterations),
        })
        .collect();

    let mut training_set: Vec<ImageSample> = Vec::with_capacity(rest.len() + hard.len());
    for t in 0..cfg.iterations {
        // Fresh in-model on rest + current honey.
        training_set.clear();
        training_set.extend(rest.iter().cloned());
        training_set.extend(records.iter().map(|r| r.current.clone()));
        let in_cfg = cfg
            .inner_train
            .clone()
            .with_seed(derive_seed(cfg.seed, "in-model", t as u64));
        let in_model = train(arch, &training_set, &in_cfg)
            .map_err(|e| wrap_divergence(e, &format!("in-model training at iteration {t}")))?;

        for record in records.iter_mut() {
            let delta = differential_loss(&record.current, &rest_model, &in_model)?;
            record.delta_loss_trace.push(delta);
            // The differential combination of the two input gradients.
            let g_rest = input_gradient(&rest_model, &record.current)?;
            let g_in = input_gradient(&in_model, &record.current)?;
            let grad_delta: Vec<f64> = g_rest.iter().zip(&g_in).map(|(a, b)| a - b).collect();
            record.current = pgd_step(&record.current, &grad_delta, &record.original, cfg)?;

            // Budget invariants, enforced inside the loop.
            assert!(
                record.current.linf_distance(&record.original) <= cfg.epsilon + BUDGET_SLACK,
                "honey {} exceeded the L-infinity budget at iteration {t}",
                record.sample_id
            );
            assert!(
                record
                    .current
                    .pixels
                    .iter()
                    .all(|p| (0.0..=1.0).contains(p)),
                "honey {} left the pixel range at iteration {t}",
                record.sample_id
            );
            assert_eq!(
                record.current.label, record.original.label,
                "honey {} changed label at iteration {t}",
                record.sample_id
            );
        }
    }

    Ok(HoneySet {
        records,
        rest_model,
        config: cfg.clone(),
    })
}

fn wrap_divergence(err: Error, context: &str) -> Error {
    match err {
        Error::TrainingDiverged { epoch, detail } => Error::TrainingDiverged {
            epoch,
            detail: format!("{context}: {detail}"),
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_synthetic, Shape, SyntheticSpec};
    use crate::diffnet::Schedule;

    fn tiny_sample(pixels: Vec<f64>, label: usize) -> ImageSample {
        ImageSample::new("x", Shape::new(1, 1, pixels.len()), pixels, label).unwrap()
    }

    fn cfg(iterations: usize, epsilon: f64) -> HoneyGenConfig {
        HoneyGenConfig {
            iterations,
            epsilon,
            step_size: 0.4 / 255.0,
            inner_train: TrainConfig {
                learning_rate: 0.05,
                weight_decay: 5e-4,
                batch_size: 32,
                epochs: 12,
                schedule: Schedule::Cosine,
                seed: 0,
            },
            seed: 7,
        }
    }

    #[test]
    fn differential_loss_of_identical_models_is_zero() {
        let arch = ArchDescriptor::mlp(Shape::new(1, 1, 3), vec![4], 2).unwrap();
        let model = Classifier::init(arch, 3).unwrap();
        let x = tiny_sample(vec![0.2, 0.8, 0.5], 1);
        assert_eq!(differential_loss(&x, &model, &model).unwrap(), 0.0);
    }

    #[test]
    fn differential_loss_is_antisymmetric() {
        let arch = ArchDescriptor::mlp(Shape::new(1, 1, 3), vec![4], 2).unwrap();
        let a = Classifier::init(arch.clone(), 3).unwrap();
        let b = Classifier::init(arch, 4).unwrap();
        let x = tiny_sample(vec![0.2, 0.8, 0.5], 1);
        let ab = differential_loss(&x, &a, &b).unwrap();
        let ba = differential_loss(&x, &b, &a).unwrap();
        assert!((ab + ba).abs() < 1e-12);
    }

    #[test]
    fn pgd_step_zero_gradient_is_identity() {
        let x = tiny_sample(vec![0.5, 0.25], 0);
        let out = pgd_step(&x, &[0.0, 0.0], &x, &cfg(1, 4.0 / 255.0)).unwrap();
        assert_eq!(out.pixels, x.pixels);
    }

    #[test]
    fn pgd_step_moves_by_alpha_along_sign() {
        let x = tiny_sample(vec![0.5, 0.5], 0);
        let c = cfg(1, 4.0 / 255.0);
        let out = pgd_step(&x, &[1e-3, -2.0], &x, &c).unwrap();
        assert!((out.pixels[0] - (0.5 + 0.4 / 255.0)).abs() < 1e-15);
        assert!((out.pixels[1] - (0.5 - 0.4 / 255.0)).abs() < 1e-15);
    }

    #[test]
    fn pgd_step_projects_back_to_budget() {
        let original = tiny_sample(vec![0.5], 0);
        let c = cfg(1, 4.0 / 255.0);
        // Current sits just inside the boundary; another step must clip.
        let mut current = original.clone();
        current.pixels[0] = 0.5 + 3.9 / 255.0;
        let out = pgd_step(&current, &[1.0], &original, &c).unwrap();
        assert!((out.pixels[0] - (0.5 + 4.0 / 255.0)).abs() < 1e-15);
    }

    #[test]
    fn pgd_step_with_zero_epsilon_returns_original() {
        let original = tiny_sample(vec![0.3, 0.7], 1);
        let c = cfg(1, 0.0);
        let out = pgd_step(&original, &[5.0, -5.0], &original, &c).unwrap();
        assert_eq!(out.pixels, original.pixels);
    }

    #[test]
    fn pgd_step_rejects_non_finite_gradients() {
        let x = tiny_sample(vec![0.5], 0);
        let err = pgd_step(&x, &[f64::NAN], &x, &cfg(1, 0.1)).unwrap_err();
        assert!(matches!(err, Error::DegenerateGradient(_)));
    }

    fn split_blobs() -> (Vec<ImageSample>, Vec<ImageSample>, ArchDescriptor) {
        let spec = SyntheticSpec {
            num_classes: 3,
            samples_per_class: 30,
            image_side: 6,
            class_separation: 1.2,
            noise_sigma: 0.12,
        };
        let data = generate_synthetic(&spec, 21).unwrap();
        let hard = data.samples[..6].to_vec();
        let rest = data.samples[6..].to_vec();
        let arch = ArchDescriptor::mlp(Shape::new(1, 6, 6), vec![24], 3).unwrap();
        (hard, rest, arch)
    }

    #[test]
    fn zero_iterations_returns_originals_with_empty_traces() {
        let (hard, rest, arch) = split_blobs();
        let honey = generate_honey(&hard, &rest, &arch, &cfg(0, 4.0 / 255.0)).unwrap();
        for (record, original) in honey.records.iter().zip(&hard) {
            assert_eq!(&record.current, original);
            assert!(record.delta_loss_trace.is_empty());
        }
    }

    #[test]
    fn zero_epsilon_keeps_currents_at_originals() {
        let (hard, rest, arch) = split_blobs();
        let honey = generate_honey(&hard, &rest, &arch, &cfg(2, 0.0)).unwrap();
        for (record, original) in honey.records.iter().zip(&hard) {
            assert_eq!(record.current.pixels, original.pixels);
            assert_eq!(record.delta_loss_trace.len(), 2);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let (hard, rest, arch) = split_blobs();
        let a = generate_honey(&hard, &rest, &arch, &cfg(2, 4.0 / 255.0)).unwrap();
        let b = generate_honey(&hard, &rest, &arch, &cfg(2, 4.0 / 255.0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn overlapping_hard_and_rest_rejected() {
        let (hard, mut rest, arch) = split_blobs();
        rest.push(hard[0].clone());
        assert!(generate_honey(&hard, &rest, &arch, &cfg(1, 0.1)).is_err());
    }
}
