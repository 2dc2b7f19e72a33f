//! Architecture descriptors for the two desk-scale model families.

use serde::{Deserialize, Serialize};

use crate::datasets::Shape;
use crate::error::{Error, Result};

/// Filters in the first convolution of the fixed small-CNN plan.
pub const CONV1_FILTERS: usize = 16;
/// Filters in the second convolution of the fixed small-CNN plan.
pub const CONV2_FILTERS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Mlp,
    SmallCnn,
}

/// Fully determines a model's parameter layout.
///
/// `mlp` is a dense ReLU network with the given hidden sizes (possibly
/// empty, giving a linear softmax classifier). `small_cnn` is the fixed
/// plan conv3x3x16 / pool2 / conv3x3x32 / pool2 / dense, with 3x3
/// same-padding convolutions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub kind: ArchKind,
    pub input_shape: Shape,
    /// Hidden layer widths; used by `mlp` only and empty for `small_cnn`.
    #[serde(default)]
    pub hidden_sizes: Vec<usize>,
    pub num_classes: usize,
}

impl ArchDescriptor {
    pub fn mlp(input_shape: Shape, hidden_sizes: Vec<usize>, num_classes: usize) -> Result<Self> {
        let arch = Self {
            kind: ArchKind::Mlp,
            input_shape,
            hidden_sizes,
            num_classes,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn small_cnn(input_shape: Shape, num_classes: usize) -> Result<Self> {
        let arch = Self {
            kind: ArchKind::SmallCnn,
            input_shape,
            hidden_sizes: Vec::new(),
            num_classes,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Desk default mlp: input -> 128 ReLU -> 64 ReLU -> K.
    pub fn desk_mlp(input_shape: Shape, num_classes: usize) -> Result<Self> {
        Self::mlp(input_shape, vec![128, 64], num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::RejectedInput(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        let s = self.input_shape;
        if s.channels == 0 || s.height == 0 || s.width == 0 {
            return Err(Error::RejectedInput(format!(
                "input_shape dimensions must be >= 1, got {s}"
            )));
        }
        match self.kind {
            ArchKind::Mlp => {
                if self.hidden_sizes.iter().any(|h| *h == 0) {
                    return Err(Error::RejectedInput(
                        "mlp hidden sizes must be positive".into(),
                    ));
                }
            }
            ArchKind::SmallCnn => {
                if !self.hidden_sizes.is_empty() {
                    return Err(Error::RejectedInput(
                        "small_cnn uses a fixed conv plan; hidden_sizes must be empty".into(),
                    ));
                }
                if s.height < 4 || s.width < 4 {
                    return Err(Error::RejectedInput(format!(
                        "small_cnn needs height and width >= 4 (two pooling stages), got {s}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Spatial size after the two pooling stages (small_cnn).
    pub(crate) fn pooled_dims(&self) -> (usize, usize, usize, usize) {
        let h2 = self.input_shape.height / 2;
        let w2 = self.input_shape.width / 2;
        (h2, w2, h2 / 2, w2 / 2)
    }

    /// Flattened feature length entering the small_cnn dense layer.
    pub(crate) fn cnn_flat_len(&self) -> usize {
        let (_, _, h4, w4) = self.pooled_dims();
        CONV2_FILTERS * h4 * w4
    }

    /// Total number of parameters implied by the descriptor.
    pub fn param_count(&self) -> usize {
        match self.kind {
            ArchKind::Mlp => {
                let mut count = 0;
                let mut input = self.input_shape.len();
                for h in self.hidden_sizes.iter().chain([self.num_classes].iter()) {
                    count += input * h + h;
                    input = *h;
                }
                count
            }
            ArchKind::SmallCnn => {
                let c = self.input_shape.channels;
                let conv1 = CONV1_FILTERS * c * 9 + CONV1_FILTERS;
                let conv2 = CONV2_FILTERS * CONV1_FILTERS * 9 + CONV2_FILTERS;
                let dense = self.num_classes * self.cnn_flat_len() + self.num_classes;
                conv1 + conv2 + dense
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_param_count() {
        let arch = ArchDescriptor::mlp(Shape::new(1, 2, 4), vec![6], 4).unwrap();
        // 8*6 + 6 + 6*4 + 4 = 82
        assert_eq!(arch.param_count(), 82);
    }

    #[test]
    fn linear_mlp_allowed() {
        let arch = ArchDescriptor::mlp(Shape::new(1, 1, 1), vec![], 2).unwrap();
        assert_eq!(arch.param_count(), 1 * 2 + 2);
    }

    #[test]
    fn cnn_param_count() {
        let arch = ArchDescriptor::small_cnn(Shape::new(1, 16, 16), 10).unwrap();
        let expected = (16 * 9 + 16) + (32 * 16 * 9 + 32) + (10 * 32 * 4 * 4 + 10);
        assert_eq!(arch.param_count(), expected);
    }

    #[test]
    fn invalid_descriptors_rejected() {
        assert!(ArchDescriptor::mlp(Shape::new(1, 4, 4), vec![0], 2).is_err());
        assert!(ArchDescriptor::mlp(Shape::new(1, 4, 4), vec![8], 1).is_err());
        assert!(ArchDescriptor::small_cnn(Shape::new(1, 3, 8), 2).is_err());
        assert!(ArchDescriptor::small_cnn(Shape::new(0, 8, 8), 2).is_err());
    }
}
