//! Minimal differentiable-classifier core: forward inference,
//! cross-entropy, exact parameter/input gradients, seeded SGD training
//! with a cosine schedule, and checkpoint persistence.

mod arch;
mod checkpoint;
pub mod gradcheck;
mod network;
mod train;

pub use arch::{ArchDescriptor, ArchKind, CONV1_FILTERS, CONV2_FILTERS};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{accuracy, train, train_with_trace, Schedule, TrainConfig};

use serde::{Deserialize, Serialize};

use crate::datasets::ImageSample;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub(crate) use network::Scratch;

/// Probability floor applied inside the cross-entropy so the loss stays
/// finite when a model assigns (numerically) zero mass to the label.
pub const PROB_FLOOR: f64 = 1e-12;

/// A trained (or initialized) model: an architecture descriptor plus its
/// flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub arch: ArchDescriptor,
    pub params: Vec<f64>,
    pub rng_seed_of_init: u64,
}

impl Classifier {
    /// He-style seeded random initialization (biases zero).
    pub fn init(arch: ArchDescriptor, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = SplitMix64::new(seed);
        let mut params = vec![0.0; arch.param_count()];
        match arch.kind {
            ArchKind::Mlp => {
                let mut offset = 0;
                let mut in_dim = arch.input_shape.len();
                let n_layers = arch.hidden_sizes.len() + 1;
                for (l, out_dim) in arch
                    .hidden_sizes
                    .iter()
                    .copied()
                    .chain([arch.num_classes])
                    .enumerate()
                {
                    // ReLU layers get He scaling, the softmax layer Xavier.
                    let gain = if l + 1 < n_layers { 2.0 } else { 1.0 };
                    let std = (gain / in_dim as f64).sqrt();
                    for p in params[offset..offset + in_dim * out_dim].iter_mut() {
                        *p = std * rng.next_normal();
                    }
                    offset += in_dim * out_dim + out_dim;
                    in_dim = out_dim;
                }
            }
            ArchKind::SmallCnn => {
                let c = arch.input_shape.channels;
                let mut offset = 0;
                for (fan_in, n_weights, n_biases, gain) in [
                    (c * 9, CONV1_FILTERS * c * 9, CONV1_FILTERS, 2.0),
                    (
                        CONV1_FILTERS * 9,
                        CONV2_FILTERS * CONV1_FILTERS * 9,
                        CONV2_FILTERS,
                        2.0,
                    ),
                    (
                        arch.cnn_flat_len(),
                        arch.num_classes * arch.cnn_flat_len(),
                        arch.num_classes,
                        1.0,
                    ),
                ] {
                    let std = (gain / fan_in as f64).sqrt();
                    for p in params[offset..offset + n_weights].iter_mut() {
                        *p = std * rng.next_normal();
                    }
                    offset += n_weights + n_biases;
                }
            }
        }
        Ok(Self {
            arch,
            params,
            rng_seed_of_init: seed,
        })
    }

    /// All-zero parameters; useful as a fixed point for tests.
    pub fn zeroed(arch: ArchDescriptor) -> Result<Self> {
        arch.validate()?;
        let params = vec![0.0; arch.param_count()];
        Ok(Self {
            arch,
            params,
            rng_seed_of_init: 0,
        })
    }

    fn check_sample(&self, sample: &ImageSample) -> Result<()> {
        if sample.shape != self.arch.input_shape {
            return Err(Error::ShapeMismatch {
                expected: self.arch.input_shape.to_string(),
                actual: sample.shape.to_string(),
            });
        }
        Ok(())
    }
}

/// A probability distribution over the K classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionVector {
    pub probs: Vec<f64>,
}

impl PredictionVector {
    /// Validates range and normalization (sum within 1e-9 of 1).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Protocol("empty probability vector".into()));
        }
        let mut sum = 0.0;
        for p in &probs {
            if !p.is_finite() || *p < 0.0 || *p > 1.0 {
                return Err(Error::Protocol(format!("probability {p} outside [0, 1]")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Protocol(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(Self { probs })
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    /// Index of the largest probability; ties break to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.probs.iter().enumerate().skip(1) {
            if *p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Softmax class probabilities for one sample. Deterministic given
/// (model, sample).
pub fn forward(model: &Classifier, sample: &ImageSample) -> Result<PredictionVector> {
    model.check_sample(sample)?;
    let mut scratch = Scratch::new(&model.arch);
    network::forward(&model.arch, &model.params, &sample.pixels, &mut scratch);
    PredictionVector::new(scratch.probs)
}

/// Cross-entropy of a prediction against a label:
/// `-ln(max(p_label, PROB_FLOOR))`.
pub fn cross_entropy(pred: &PredictionVector, label: usize) -> Result<f64> {
    if label >= pred.num_classes() {
        return Err(Error::RejectedInput(format!(
            "label {label} out of range for {} classes",
            pred.num_classes()
        )));
    }
    Ok(-(pred.probs[label].max(PROB_FLOOR)).ln())
}

/// Convenience: cross-entropy of `model` on `sample` under its own label.
pub fn sample_loss(model: &Classifier, sample: &ImageSample) -> Result<f64> {
    cross_entropy(&forward(model, sample)?, sample.label)
}

/// Gradient of the mean cross-entropy over `batch` with respect to the
/// parameters. Same length as `model.params`.
pub fn param_gradients(model: &Classifier, batch: &[ImageSample]) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::RejectedInput("empty batch".into()));
    }
    for s in batch {
        model.check_sample(s)?;
        if s.label >= model.arch.num_classes {
            return Err(Error::RejectedInput(format!(
                "label {} out of range for {} classes",
                s.label, model.arch.num_classes
            )));
        }
    }
    let mut scratch = Scratch::new(&model.arch);
    let mut grad = vec![0.0; model.params.len()];
    for s in batch {
        network::forward(&model.arch, &model.params, &s.pixels, &mut scratch);
        network::backward(
            &model.arch,
            &model.params,
            &s.pixels,
            s.label,
            &mut scratch,
            &mut grad,
            None,
        );
    }
    let inv = 1.0 / batch.len() as f64;
    for g in grad.iter_mut() {
        *g *= inv;
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::DegenerateGradient(
            "non-finite parameter gradient".into(),
        ));
    }
    Ok(grad)
}

/// Gradient of the sample's cross-entropy with respect to its pixels,
/// flattened in the sample's (c, y, x) layout.
pub fn input_gradient(model: &Classifier, sample: &ImageSample) -> Result<Vec<f64>> {
    model.check_sample(sample)?;
    if sample.label >= model.arch.num_classes {
        return Err(Error::RejectedInput(format!(
            "label {} out of range for {} classes",
            sample.label, model.arch.num_classes
        )));
    }
    let mut scratch = Scratch::new(&model.arch);
    let mut grad = vec![0.0; model.params.len()];
    let mut d_input = vec![0.0; sample.pixels.len()];
    network::forward(&model.arch, &model.params, &sample.pixels, &mut scratch);
    network::backward(
        &model.arch,
        &model.params,
        &sample.pixels,
        sample.label,
        &mut scratch,
        &mut grad,
        Some(&mut d_input),
    );
    if d_input.iter().any(|g| !g.is_finite()) {
        return Err(Error::DegenerateGradient("non-finite input gradient".into()));
    }
    Ok(d_input)
}

/// Distance from the nearest ReLU kink or pooling switch for this
/// (model, sample) pair; see [`gradcheck`].
pub fn activation_margin(model: &Classifier, sample: &ImageSample) -> Result<f64> {
    model.check_sample(sample)?;
    let mut scratch = Scratch::new(&model.arch);
    network::forward(&model.arch, &model.params, &sample.pixels, &mut scratch);
    Ok(network::activation_margin(&model.arch, &scratch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::Shape;

    fn unit_sample(shape: Shape, value: f64, label: usize) -> ImageSample {
        ImageSample::new("t", shape, vec![value; shape.len()], label).unwrap()
    }

    #[test]
    fn zero_weights_give_uniform_probs() {
        for k in [2usize, 5, 10] {
            let arch = ArchDescriptor::mlp(Shape::new(1, 3, 3), vec![4], k).unwrap();
            let model = Classifier::zeroed(arch).unwrap();
            let pred = forward(&model, &unit_sample(Shape::new(1, 3, 3), 0.7, 0)).unwrap();
            for p in &pred.probs {
                assert!((p - 1.0 / k as f64).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_of_two_zero_logits() {
        // Linear model on a single pixel: weights (2, 0), biases 0, pixel 1.0
        // gives logits (2, 0) -> probs (0.8808, 0.1192).
        let arch = ArchDescriptor::mlp(Shape::new(1, 1, 1), vec![], 2).unwrap();
        let mut model = Classifier::zeroed(arch).unwrap();
        model.params[0] = 2.0; // W[0][0]
        model.params[1] = 0.0; // W[1][0]
        let pred = forward(&model, &unit_sample(Shape::new(1, 1, 1), 1.0, 0)).unwrap();
        assert!((pred.probs[0] - 0.8808).abs() < 5e-5, "{:?}", pred.probs);
        assert!((pred.probs[1] - 0.1192).abs() < 5e-5, "{:?}", pred.probs);
    }

    #[test]
    fn forward_is_deterministic() {
        let arch = ArchDescriptor::small_cnn(Shape::new(1, 8, 8), 3).unwrap();
        let model = Classifier::init(arch, 123).unwrap();
        let s = unit_sample(Shape::new(1, 8, 8), 0.4, 1);
        let a = forward(&model, &s).unwrap();
        let b = forward(&model, &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_rejects_shape_mismatch() {
        let arch = ArchDescriptor::mlp(Shape::new(1, 4, 4), vec![8], 2).unwrap();
        let model = Classifier::zeroed(arch).unwrap();
        let s = unit_sample(Shape::new(1, 3, 3), 0.5, 0);
        assert!(matches!(
            forward(&model, &s),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn cross_entropy_known_values() {
        let p = PredictionVector::new(vec![1.0, 0.0]).unwrap();
        assert_eq!(cross_entropy(&p, 0).unwrap(), 0.0);
        // clamp floor forced
        let floored = cross_entropy(&p, 1).unwrap();
        assert!((floored - (-(1e-12f64).ln())).abs() < 1e-9);
        assert!((floored - 27.631).abs() < 1e-2);

        let uniform = PredictionVector::new(vec![0.1; 10]).unwrap();
        assert!((cross_entropy(&uniform, 3).unwrap() - 2.302585).abs() < 1e-5);

        assert!(cross_entropy(&uniform, 10).is_err());
    }

    #[test]
    fn duplicated_batch_has_same_gradient() {
        let arch = ArchDescriptor::mlp(Shape::new(1, 2, 2), vec![5], 3).unwrap();
        let model = Classifier::init(arch, 7).unwrap();
        let shape = Shape::new(1, 2, 2);
        let batch = vec![
            unit_sample(shape, 0.2, 0),
            ImageSample::new("u", shape, vec![0.9, 0.1, 0.4, 0.6], 2).unwrap(),
        ];
        let doubled: Vec<_> = batch.iter().chain(batch.iter()).cloned().collect();
        let g1 = param_gradients(&model, &batch).unwrap();
        let g2 = param_gradients(&model, &doubled).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_batch_rejected() {
        let arch = ArchDescriptor::mlp(Shape::new(1, 2, 2), vec![], 2).unwrap();
        let model = Classifier::zeroed(arch).unwrap();
        assert!(param_gradients(&model, &[]).is_err());
    }

    #[test]
    fn disconnected_pixel_has_zero_gradient() {
        // Linear model where the weight column for pixel 0 is all zero.
        let arch = ArchDescriptor::mlp(Shape::new(1, 1, 2), vec![], 2).unwrap();
        let mut model = Classifier::zeroed(arch).unwrap();
        // W row-major (out=2, in=2): leave W[:, 0] = 0, set W[:, 1].
        model.params[1] = 1.5;
        model.params[3] = -0.5;
        let s = ImageSample::new("t", Shape::new(1, 1, 2), vec![0.3, 0.8], 0).unwrap();
        let g = input_gradient(&model, &s).unwrap();
        assert_eq!(g[0], 0.0);
        assert!(g[1] != 0.0);
    }

    #[test]
    fn gradient_is_linear_across_models() {
        // grad(L_a - L_b) = grad L_a - grad L_b, evaluated per model.
        let arch = ArchDescriptor::mlp(Shape::new(1, 3, 3), vec![6], 3).unwrap();
        let a = Classifier::init(arch.clone(), 1).unwrap();
        let b = Classifier::init(arch, 2).unwrap();
        let s = unit_sample(Shape::new(1, 3, 3), 0.35, 1);
        let ga = input_gradient(&a, &s).unwrap();
        let gb = input_gradient(&b, &s).unwrap();
        let diff: Vec<f64> = ga.iter().zip(&gb).map(|(x, y)| x - y).collect();
        // The identity is definitional here; assert it is finite and nonzero.
        assert!(diff.iter().all(|d| d.is_finite()));
        assert!(diff.iter().any(|d| *d != 0.0));
    }

    #[test]
    fn prediction_vector_validates() {
        assert!(PredictionVector::new(vec![0.5, 0.5]).is_ok());
        assert!(PredictionVector::new(vec![0.6, 0.6]).is_err());
        assert!(PredictionVector::new(vec![1.2, -0.2]).is_err());
        assert!(PredictionVector::new(vec![]).is_err());
    }

    #[test]
    fn argmax_ties_break_low() {
        let p = PredictionVector::new(vec![0.25, 0.25, 0.25, 0.25]).unwrap();
        assert_eq!(p.argmax(), 0);
        let p = PredictionVector::new(vec![0.2, 0.4, 0.4]).unwrap();
        assert_eq!(p.argmax(), 1);
    }
}
