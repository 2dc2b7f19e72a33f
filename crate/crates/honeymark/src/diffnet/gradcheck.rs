//! Central finite-difference gradient checks.
//!
//! Everything here goes through [`forward`] and [`cross_entropy`] only,
//! never the backward pass, so it is an independent reference for the
//! analytic gradients. Checks are only meaningful at points where the
//! network is differentiable; use [`activation_margin`] to stay away
//! from ReLU kinks and pooling switches.

use super::{activation_margin, cross_entropy, forward, Classifier};
use crate::datasets::ImageSample;
use crate::error::Result;

/// Mean cross-entropy of the model over a batch.
fn batch_loss(model: &Classifier, batch: &[ImageSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in batch {
        total += cross_entropy(&forward(model, s)?, s.label)?;
    }
    Ok(total / batch.len() as f64)
}

/// Central finite differences of the mean batch cross-entropy with
/// respect to every parameter.
pub fn central_diff_param_gradient(
    model: &Classifier,
    batch: &[ImageSample],
    step: f64,
) -> Result<Vec<f64>> {
    let mut perturbed = model.clone();
    let mut grad = vec![0.0; model.params.len()];
    for i in 0..model.params.len() {
        let original = model.params[i];
        perturbed.params[i] = original + step;
        let plus = batch_loss(&perturbed, batch)?;
        perturbed.params[i] = original - step;
        let minus = batch_loss(&perturbed, batch)?;
        perturbed.params[i] = original;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}

/// Central finite differences of the sample's cross-entropy with respect
/// to every pixel. Perturbed pixels may briefly leave [0, 1]; the network
/// itself is defined on all of R^n.
pub fn central_diff_input_gradient(
    model: &Classifier,
    sample: &ImageSample,
    step: f64,
) -> Result<Vec<f64>> {
    let mut perturbed = sample.clone();
    let mut grad = vec![0.0; sample.pixels.len()];
    for i in 0..sample.pixels.len() {
        let original = sample.pixels[i];
        perturbed.pixels[i] = original + step;
        let plus = cross_entropy(&forward(model, &perturbed)?, perturbed.label)?;
        perturbed.pixels[i] = original - step;
        let minus = cross_entropy(&forward(model, &perturbed)?, perturbed.label)?;
        perturbed.pixels[i] = original;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}

/// Worst relative error between two gradients:
/// `max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)`.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// True when the (model, sample) pair keeps every ReLU preactivation and
/// pooling decision at least `margin` away from switching, so central
/// differences with steps well below `margin` see a smooth function.
pub fn is_fd_safe(model: &Classifier, sample: &ImageSample, margin: f64) -> Result<bool> {
    Ok(activation_margin(model, sample)? > margin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::Shape;
    use crate::diffnet::{input_gradient, param_gradients, ArchDescriptor};
    use crate::rng::SplitMix64;

    pub(crate) const FD_STEP: f64 = 1e-5;
    pub(crate) const FD_TOLERANCE: f64 = 1e-6;
    /// Comparison floor: entries below it are compared absolutely, which
    /// keeps the check meaningful where the true gradient is ~0 (dead
    /// ReLU paths) without admitting real sign/scale bugs.
    pub(crate) const FD_FLOOR: f64 = 1e-3;
    /// Kink clearance required before a configuration is checked; 1e-5
    /// steps move preactivations by well under this.
    pub(crate) const FD_MARGIN: f64 = 1e-3;

    /// Draws (model, sample, batch) pairs until one is clear of kinks.
    fn fd_safe_config(
        arch: &ArchDescriptor,
        base_seed: u64,
        batch_size: usize,
    ) -> (Classifier, Vec<ImageSample>) {
        for attempt in 0..200 {
            let seed = base_seed.wrapping_add(attempt * 1000);
            let model = Classifier::init(arch.clone(), seed).unwrap();
            let mut rng = SplitMix64::new(seed ^ 0xabcd);
            let batch: Vec<ImageSample> = (0..batch_size)
                .map(|i| {
                    let pixels: Vec<f64> =
                        (0..arch.input_shape.len()).map(|_| rng.next_f64()).collect();
                    ImageSample::new(
                        format!("fd{i}"),
                        arch.input_shape,
                        pixels,
                        rng.next_below(arch.num_classes),
                    )
                    .unwrap()
                })
                .collect();
            if batch
                .iter()
                .all(|s| is_fd_safe(&model, s, FD_MARGIN).unwrap())
            {
                return (model, batch);
            }
        }
        panic!("no kink-free configuration found for {arch:?}");
    }

    #[test]
    fn mlp_param_gradients_match_central_differences() {
        let arch = ArchDescriptor::mlp(Shape::new(1, 2, 4), vec![6], 4).unwrap();
        assert!(arch.param_count() <= 110);
        for seed in 0..5 {
            let (model, batch) = fd_safe_config(&arch, seed, 3);
            let analytic = param_gradients(&model, &batch).unwrap();
            let fd = central_diff_param_gradient(&model, &batch, FD_STEP).unwrap();
            let err = max_relative_error(&analytic, &fd, FD_FLOOR);
            assert!(err <= FD_TOLERANCE, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn mlp_input_gradients_match_central_differences() {
        let arch = ArchDescriptor::mlp(Shape::new(1, 3, 3), vec![8, 5], 3).unwrap();
        for seed in 0..5 {
            let (model, batch) = fd_safe_config(&arch, 100 + seed, 1);
            let analytic = input_gradient(&model, &batch[0]).unwrap();
            let fd = central_diff_input_gradient(&model, &batch[0], FD_STEP).unwrap();
            let err = max_relative_error(&analytic, &fd, FD_FLOOR);
            assert!(err <= FD_TOLERANCE, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn cnn_gradients_match_central_differences() {
        let arch = ArchDescriptor::small_cnn(Shape::new(1, 6, 6), 3).unwrap();
        for seed in 0..2 {
            let (model, batch) = fd_safe_config(&arch, 200 + seed, 1);
            let analytic = param_gradients(&model, &batch).unwrap();
            let fd = central_diff_param_gradient(&model, &batch, FD_STEP).unwrap();
            let err = max_relative_error(&analytic, &fd, FD_FLOOR);
            assert!(err <= FD_TOLERANCE, "seed {seed}: param relative error {err}");

            let analytic = input_gradient(&model, &batch[0]).unwrap();
            let fd = central_diff_input_gradient(&model, &batch[0], FD_STEP).unwrap();
            let err = max_relative_error(&analytic, &fd, FD_FLOOR);
            assert!(err <= FD_TOLERANCE, "seed {seed}: input relative error {err}");
        }
    }

    #[test]
    fn zero_loss_point_has_zero_loss_gradient() {
        // A model already at probability ~1 on the label has vanishing
        // cross-entropy gradient.
        let arch = ArchDescriptor::mlp(Shape::new(1, 1, 2), vec![], 2).unwrap();
        let mut model = Classifier::zeroed(arch).unwrap();
        model.params[0] = 60.0; // logit 0 dominates for positive pixels
        let s = ImageSample::new("s", Shape::new(1, 1, 2), vec![1.0, 0.5], 0).unwrap();
        let g = param_gradients(&model, std::slice::from_ref(&s)).unwrap();
        for v in &g {
            assert!(v.abs() < 1e-12, "gradient entry {v}");
        }
    }
}
