//! Image datasets, loaders, and the public/private/fold split machinery.

mod idx;
mod manifest;
mod png_dir;
mod synthetic;

pub use idx::load_idx;
pub use manifest::{load_manifest, save_manifest};
pub use png_dir::load_png_dir;
pub use synthetic::{generate_synthetic, SyntheticSpec};

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Image dimensions as (channels, height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    /// Number of pixels (flattened length).
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// A labeled image with pixels in [0, 1], stored flat in (c, y, x)
/// row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSample {
    pub id: String,
    pub shape: Shape,
    pub pixels: Vec<f64>,
    pub label: usize,
}

impl ImageSample {
    /// Builds a sample, validating pixel range and length.
    pub fn new(id: impl Into<String>, shape: Shape, pixels: Vec<f64>, label: usize) -> Result<Self> {
        if pixels.len() != shape.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} ({} values)", shape, shape.len()),
                actual: format!("{} values", pixels.len()),
            });
        }
        if let Some(p) = pixels.iter().find(|p| !p.is_finite() || **p < 0.0 || **p > 1.0) {
            return Err(Error::RejectedInput(format!(
                "pixel value {p} outside [0, 1]"
            )));
        }
        Ok(Self {
            id: id.into(),
            shape,
            pixels,
            label,
        })
    }

    #[inline]
    pub fn pixel(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * self.shape.height + y) * self.shape.width + x]
    }

    /// Largest per-pixel absolute difference from `other`.
    pub fn linf_distance(&self, other: &ImageSample) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// An ordered collection of samples sharing one shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub num_classes: usize,
    pub samples: Vec<ImageSample>,
}

impl Dataset {
    /// Builds a dataset, validating id uniqueness, shape consistency,
    /// and label range.
    pub fn new(name: impl Into<String>, num_classes: usize, samples: Vec<ImageSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::RejectedInput("dataset has no samples".into()));
        }
        let shape = samples[0].shape;
        let mut seen = HashSet::with_capacity(samples.len());
        for s in &samples {
            if s.shape != shape {
                return Err(Error::Format {
                    field: format!("sample {}", s.id),
                    detail: format!("shape {} differs from {}", s.shape, shape),
                });
            }
            if s.label >= num_classes {
                return Err(Error::RejectedInput(format!(
                    "sample {} has label {} >= num_classes {}",
                    s.id, s.label, num_classes
                )));
            }
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Format {
                    field: format!("sample {}", s.id),
                    detail: "duplicate id".into(),
                });
            }
        }
        Ok(Self {
            name: name.into(),
            num_classes,
            samples,
        })
    }

    pub fn shape(&self) -> Shape {
        self.samples[0].shape
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ImageSample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Samples matching the given ids, in the ids' order.
    pub fn select(&self, ids: &[String]) -> Result<Vec<ImageSample>> {
        ids.iter()
            .map(|id| {
                self.get(id)
                    .cloned()
                    .ok_or_else(|| Error::RejectedInput(format!("unknown sample id {id}")))
            })
            .collect()
    }

    /// True when every class index below `num_classes` occurs at least once.
    pub fn has_full_class_coverage(&self) -> bool {
        let mut present = vec![false; self.num_classes];
        for s in &self.samples {
            present[s.label] = true;
        }
        present.iter().all(|p| *p)
    }
}

/// The public/private partition, the two private hardness folds, and the
/// verification query budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub public_ids: Vec<String>,
    pub private_ids: Vec<String>,
    pub fold_a_ids: Vec<String>,
    pub fold_b_ids: Vec<String>,
    pub verification_budget: usize,
    pub seed: u64,
}

/// Rounds half away from zero (round-half-up for non-negative input).
fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Partitions a dataset into public/private splits, halves the private
/// split into two folds (fold A takes the extra sample when odd), and
/// fixes the verification budget as round-half-up of
/// `verification_fraction * |data|`.
pub fn make_split(
    data: &Dataset,
    public_fraction: f64,
    verification_fraction: f64,
    seed: u64,
) -> Result<SplitPlan> {
    if !(public_fraction > 0.0 && public_fraction < 1.0) {
        return Err(Error::RejectedInput(format!(
            "public_fraction must lie in (0, 1), got {public_fraction}"
        )));
    }
    if verification_fraction <= 0.0 {
        return Err(Error::RejectedInput(format!(
            "verification_fraction must be positive, got {verification_fraction}"
        )));
    }
    let n = data.len();
    let public_count = round_half_up(public_fraction * n as f64).min(n.saturating_sub(1)).max(1);
    let budget = round_half_up(verification_fraction * n as f64);
    let private_count = n - public_count;
    if budget == 0 {
        return Err(Error::RejectedInput(
            "verification budget rounds to zero".into(),
        ));
    }
    if budget > private_count {
        return Err(Error::RejectedInput(format!(
            "verification budget {budget} exceeds private split size {private_count}"
        )));
    }

    let mut ids: Vec<String> = data.samples.iter().map(|s| s.id.clone()).collect();
    let mut rng = SplitMix64::new(seed);
    rng.shuffle(&mut ids);

    let public_ids = ids[..public_count].to_vec();
    let private_ids = ids[public_count..].to_vec();
    let half = private_ids.len().div_ceil(2);
    let fold_a_ids = private_ids[..half].to_vec();
    let fold_b_ids = private_ids[half..].to_vec();

    Ok(SplitPlan {
        public_ids,
        private_ids,
        fold_a_ids,
        fold_b_ids,
        verification_budget: budget,
        seed,
    })
}

impl SplitPlan {
    /// Checks that the plan is a partition of `data` and that the folds
    /// partition the private split.
    pub fn validate_against(&self, data: &Dataset) -> Result<()> {
        let all: HashSet<&str> = data.samples.iter().map(|s| s.id.as_str()).collect();
        let mut seen = HashSet::new();
        for id in self.public_ids.iter().chain(&self.private_ids) {
            if !all.contains(id.as_str()) {
                return Err(Error::RejectedInput(format!("split id {id} not in dataset")));
            }
            if !seen.insert(id.as_str()) {
                return Err(Error::RejectedInput(format!("split id {id} appears twice")));
            }
        }
        if seen.len() != all.len() {
            return Err(Error::RejectedInput(
                "split does not cover the dataset".into(),
            ));
        }
        let private: HashSet<&str> = self.private_ids.iter().map(String::as_str).collect();
        let mut fold_seen = HashSet::new();
        for id in self.fold_a_ids.iter().chain(&self.fold_b_ids) {
            if !private.contains(id.as_str()) || !fold_seen.insert(id.as_str()) {
                return Err(Error::RejectedInput(format!("fold id {id} invalid")));
            }
        }
        if fold_seen.len() != private.len() {
            return Err(Error::RejectedInput(
                "folds do not cover the private split".into(),
            ));
        }
        if self.verification_budget == 0 || self.verification_budget > self.private_ids.len() {
            return Err(Error::RejectedInput(format!(
                "verification budget {} out of range",
                self.verification_budget
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_dataset(n: usize, num_classes: usize) -> Dataset {
        let shape = Shape::new(1, 4, 4);
        let samples = (0..n)
            .map(|i| {
                ImageSample::new(
                    format!("s{i:05}"),
                    shape,
                    vec![0.5; shape.len()],
                    i % num_classes,
                )
                .unwrap()
            })
            .collect();
        Dataset::new("uniform", num_classes, samples).unwrap()
    }

    #[test]
    fn split_matches_cifar_row() {
        let data = uniform_dataset(60_000, 10);
        let plan = make_split(&data, 2.0 / 3.0, 0.01, 1).unwrap();
        assert_eq!(plan.public_ids.len(), 40_000);
        assert_eq!(plan.private_ids.len(), 20_000);
        assert_eq!(plan.verification_budget, 600);
    }

    #[test]
    fn split_matches_isic_budget() {
        let data = uniform_dataset(10_015, 7);
        let plan = make_split(&data, 2.0 / 3.0, 0.01, 1).unwrap();
        assert_eq!(plan.verification_budget, 100);
    }

    #[test]
    fn odd_private_gives_fold_a_the_extra_sample() {
        let data = uniform_dataset(101, 2);
        // 2/3 of 101 rounds to 67 public, leaving 34... force an odd private.
        let plan = make_split(&data, 0.6, 0.05, 3).unwrap();
        let p = plan.private_ids.len();
        assert_eq!(plan.fold_a_ids.len(), p.div_ceil(2));
        assert_eq!(plan.fold_b_ids.len(), p / 2);
        if p % 2 == 1 {
            assert_eq!(plan.fold_a_ids.len(), plan.fold_b_ids.len() + 1);
        }
    }

    #[test]
    fn split_is_deterministic_and_a_partition() {
        let data = uniform_dataset(500, 5);
        let a = make_split(&data, 0.66, 0.02, 42).unwrap();
        let b = make_split(&data, 0.66, 0.02, 42).unwrap();
        assert_eq!(a, b);
        a.validate_against(&data).unwrap();
        let c = make_split(&data, 0.66, 0.02, 43).unwrap();
        assert_ne!(a.public_ids, c.public_ids);
    }

    #[test]
    fn bad_fractions_are_rejected() {
        let data = uniform_dataset(100, 2);
        assert!(make_split(&data, 0.0, 0.01, 1).is_err());
        assert!(make_split(&data, 1.0, 0.01, 1).is_err());
        assert!(make_split(&data, 0.5, 0.0, 1).is_err());
        // budget larger than the private split
        assert!(make_split(&data, 0.9, 0.5, 1).is_err());
    }

    #[test]
    fn sample_validation() {
        let shape = Shape::new(1, 2, 2);
        assert!(ImageSample::new("a", shape, vec![0.0, 0.5, 1.0, 0.25], 0).is_ok());
        assert!(ImageSample::new("a", shape, vec![0.0, 0.5, 1.5, 0.25], 0).is_err());
        assert!(ImageSample::new("a", shape, vec![0.0; 3], 0).is_err());
    }

    #[test]
    fn dataset_rejects_duplicates_and_bad_labels() {
        let shape = Shape::new(1, 2, 2);
        let s = |id: &str, label| ImageSample::new(id, shape, vec![0.1; 4], label).unwrap();
        assert!(Dataset::new("d", 2, vec![s("a", 0), s("a", 1)]).is_err());
        assert!(Dataset::new("d", 2, vec![s("a", 0), s("b", 2)]).is_err());
        assert!(Dataset::new("d", 2, vec![s("a", 0), s("b", 1)]).is_ok());
    }
}
