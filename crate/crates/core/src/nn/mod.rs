//! Minimal neural-network toolkit: hand-rolled layers with explicit
//! forward/backward passes over `ndarray`.
//!
//! Everything is generic over `f32`/`f64`. Production paths run in single
//! precision; the double-precision instantiation exists so gradients can be
//! checked against central finite differences at tight tolerances.
//!
//! Batch-parallel kernels split work into fixed-size chunks and reduce the
//! partial results in chunk order, so outputs are bit-identical regardless of
//! how many worker threads happen to run.

pub mod adam;
pub mod cnn;
pub mod conv;
pub mod linear;
pub mod unet;

pub use adam::Adam;
pub use cnn::{CnnConfig, SmallCnn};
pub use conv::Conv2d;
pub use linear::Linear;
pub use unet::{UNet, UNetConfig};

use ndarray::{Array, Array2, Array4, Dimension, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Scalar type the layers are generic over.
pub trait Float: ndarray::NdFloat + From<f32> + Into<f64> + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
}

impl Float for f32 {
    fn from_f64(x: f64) -> f32 {
        x as f32
    }
}

impl Float for f64 {
    fn from_f64(x: f64) -> f64 {
        x
    }
}

/// Fixed batch-chunk size for parallel kernels. Constant so the reduction
/// tree (and therefore the floating-point result) never depends on the
/// machine's thread count.
pub(crate) const PAR_CHUNK: usize = 8;

/// A set of named parameters with matching gradient buffers.
pub trait Module<F: Float> {
    /// Mutable walk over (name, shape, value, grad) in a fixed order.
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [F], &mut [F]));

    /// Read-only walk over (name, shape, value), same order as the mutable walk.
    fn visit_params(&self, f: &mut dyn FnMut(&str, &[usize], &[F]));
}

/// Reset all gradient buffers of a module to zero.
pub fn zero_grads<F: Float, M: Module<F>>(module: &mut M) {
    module.visit_params_mut(&mut |_, _, _, g| {
        for v in g.iter_mut() {
            *v = F::zero();
        }
    });
}

/// Total number of scalar parameters.
pub fn param_count<F: Float, M: Module<F>>(module: &M) -> usize {
    let mut n = 0;
    module.visit_params(&mut |_, _, v| n += v.len());
    n
}

/// Standard-normal draws with the given shape.
pub fn randn<F, D>(shape: D, rng: &mut impl Rng) -> Array<F, D::Dim>
where
    F: Float,
    StandardNormal: Distribution<F>,
    D: ndarray::ShapeBuilder,
{
    Array::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
}

pub fn relu<F: Float, D: Dimension>(x: &Array<F, D>) -> Array<F, D> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

/// Gradient of relu given the pre-activation and the upstream gradient.
pub fn relu_grad<F: Float, D: Dimension>(pre: &Array<F, D>, gy: &Array<F, D>) -> Array<F, D> {
    let mut gx = gy.clone();
    Zip::from(&mut gx).and(pre).for_each(|g, &z| {
        if z <= F::zero() {
            *g = F::zero();
        }
    });
    gx
}

fn sigmoid<F: Float>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

pub fn silu<F: Float, D: Dimension>(x: &Array<F, D>) -> Array<F, D> {
    x.mapv(|v| v * sigmoid(v))
}

/// Gradient of silu given the pre-activation and the upstream gradient.
pub fn silu_grad<F: Float, D: Dimension>(pre: &Array<F, D>, gy: &Array<F, D>) -> Array<F, D> {
    let mut gx = gy.clone();
    Zip::from(&mut gx).and(pre).for_each(|g, &z| {
        let s = sigmoid(z);
        *g = *g * (s * (F::one() + z * (F::one() - s)));
    });
    gx
}

/// 2x2 average pooling, stride 2. Height and width must be even.
pub fn avg_pool2<F: Float>(x: &Array4<F>) -> Array4<F> {
    let (b, c, h, w) = x.dim();
    let quarter = F::from_f64(0.25);
    Array4::from_shape_fn((b, c, h / 2, w / 2), |(bi, ci, i, j)| {
        (x[[bi, ci, 2 * i, 2 * j]]
            + x[[bi, ci, 2 * i, 2 * j + 1]]
            + x[[bi, ci, 2 * i + 1, 2 * j]]
            + x[[bi, ci, 2 * i + 1, 2 * j + 1]])
            * quarter
    })
}

pub fn avg_pool2_grad<F: Float>(gy: &Array4<F>) -> Array4<F> {
    let (b, c, h, w) = gy.dim();
    let quarter = F::from_f64(0.25);
    Array4::from_shape_fn((b, c, 2 * h, 2 * w), |(bi, ci, i, j)| {
        gy[[bi, ci, i / 2, j / 2]] * quarter
    })
}

/// Mean over the spatial dimensions: (B, C, H, W) -> (B, C).
pub fn global_avg_pool<F: Float>(x: &Array4<F>) -> Array2<F> {
    let (b, c, h, w) = x.dim();
    let inv = F::from_f64(1.0 / (h * w) as f64);
    let mut out = Array2::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            let mut acc = F::zero();
            for i in 0..h {
                for j in 0..w {
                    acc = acc + x[[bi, ci, i, j]];
                }
            }
            out[[bi, ci]] = acc * inv;
        }
    }
    out
}

pub fn global_avg_pool_grad<F: Float>(gy: &Array2<F>, hw: (usize, usize)) -> Array4<F> {
    let (b, c) = gy.dim();
    let (h, w) = hw;
    let inv = F::from_f64(1.0 / (h * w) as f64);
    Array4::from_shape_fn((b, c, h, w), |(bi, ci, _, _)| gy[[bi, ci]] * inv)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<F: Float>(x: &Array4<F>) -> Array4<F> {
    let (b, c, h, w) = x.dim();
    Array4::from_shape_fn((b, c, 2 * h, 2 * w), |(bi, ci, i, j)| {
        x[[bi, ci, i / 2, j / 2]]
    })
}

pub fn upsample2_grad<F: Float>(gy: &Array4<F>) -> Array4<F> {
    let (b, c, h, w) = gy.dim();
    let mut gx = Array4::zeros((b, c, h / 2, w / 2));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    gx[[bi, ci, i / 2, j / 2]] = gx[[bi, ci, i / 2, j / 2]] + gy[[bi, ci, i, j]];
                }
            }
        }
    }
    gx
}

/// Row-wise softmax.
pub fn softmax_rows<F: Float>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

/// Summed cross-entropy over the batch plus its gradient w.r.t. the logits.
///
/// The loss is the *sum* of per-example losses, so duplicating an example
/// doubles its contribution; callers that want a mean divide by the batch.
pub fn cross_entropy_sum<F: Float>(logits: &Array2<F>, labels: &[u8]) -> (F, Array2<F>) {
    assert_eq!(logits.nrows(), labels.len(), "labels must match batch");
    let probs = softmax_rows(logits);
    let mut loss = F::zero();
    let mut grad = probs;
    for (bi, &y) in labels.iter().enumerate() {
        let y = y as usize;
        let p = grad[[bi, y]];
        let tiny = F::from_f64(1e-30);
        loss = loss - (p.max(tiny)).ln();
        grad[[bi, y]] = grad[[bi, y]] - F::one();
    }
    (loss, grad)
}

/// Mean squared error and its gradient w.r.t. the prediction.
pub fn mse_mean<F: Float, D: Dimension>(pred: &Array<F, D>, target: &Array<F, D>) -> (F, Array<F, D>) {
    assert_eq!(pred.shape(), target.shape(), "mse shapes must match");
    let n = F::from_f64(pred.len() as f64);
    let diff = pred - target;
    let mut loss = F::zero();
    for d in diff.iter() {
        loss = loss + *d * *d;
    }
    let scale = F::from_f64(2.0) / n;
    (loss / n, diff.mapv(|d| d * scale))
}
