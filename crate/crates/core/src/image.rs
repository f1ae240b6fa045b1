//! Image batches and small pixel-space helpers.

use crate::error::{Error, Result};
use crate::rng::sha256_hex;
use ndarray::Array4;

/// A batch of real-valued images, laid out (batch, channels, height, width).
///
/// Clean images live in [0, 1]. Diffused images are unbounded; only the
/// operations that feed a classifier clamp back into range.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub data: Array4<f32>,
}

impl ImageBatch {
    pub fn new(data: Array4<f32>) -> Self {
        Self { data }
    }

    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// (channels, height, width) of a single image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[1], s[2], s[3])
    }

    /// Element-wise clamp into [0, 1].
    pub fn clamp01(&self) -> ImageBatch {
        ImageBatch::new(self.data.mapv(|v| v.clamp(0.0, 1.0)))
    }

    /// Mean squared distance to another batch of the same shape.
    pub fn mse_to(&self, other: &ImageBatch) -> Result<f64> {
        self.check_same_shape(other)?;
        let n = self.data.len() as f64;
        let sum: f64 = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| {
                let d = (*a - *b) as f64;
                d * d
            })
            .sum();
        Ok(sum / n)
    }

    /// Largest absolute per-pixel difference to another batch.
    pub fn linf_to(&self, other: &ImageBatch) -> Result<f32> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max))
    }

    /// Gather the given batch indices into a new contiguous batch.
    pub fn select_batch(&self, indices: &[usize]) -> ImageBatch {
        let (c, h, w) = self.image_shape();
        let mut out = Array4::zeros((indices.len(), c, h, w));
        for (row, &src) in indices.iter().enumerate() {
            out.index_axis_mut(ndarray::Axis(0), row)
                .assign(&self.data.index_axis(ndarray::Axis(0), src));
        }
        ImageBatch::new(out)
    }

    /// SHA-256 over the little-endian f32 bytes, for report traceability.
    pub fn content_hash(&self) -> String {
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for v in self.data.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        sha256_hex(&bytes)
    }

    pub fn check_same_shape(&self, other: &ImageBatch) -> Result<()> {
        if self.data.shape() != other.data.shape() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.data.shape()),
                actual: format!("{:?}", other.data.shape()),
            });
        }
        Ok(())
    }
}
