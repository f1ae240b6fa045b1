//! Small convolutional classifier: 3 conv blocks with 2x2 average pooling,
//! then a linear head over the flattened final feature map.
//!
//! The head is position-aware on purpose: the labelling rule depends on
//! where the lesion sits relative to the center window, and a globally
//! pooled feature vector cannot express location.

use super::conv::Conv2d;
use super::linear::Linear;
use super::{avg_pool2, avg_pool2_grad, relu, relu_grad, Float, Module};
use crate::error::{Error, Result};
use ndarray::{Array2, Array4};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnConfig {
    pub in_channels: usize,
    pub widths: [usize; 3],
    pub classes: usize,
    /// Square input side length; fixes the flattened head size.
    pub image_size: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            widths: [32, 64, 128],
            classes: 2,
            image_size: 32,
        }
    }
}

impl CnnConfig {
    /// Features entering the linear head: w3 x (s/4) x (s/4).
    fn head_inputs(&self) -> usize {
        let side = self.image_size / 4;
        self.widths[2] * side * side
    }
}

#[derive(Debug, Clone)]
pub struct SmallCnn<F: Float> {
    pub cfg: CnnConfig,
    conv1: Conv2d<F>,
    conv2: Conv2d<F>,
    conv3: Conv2d<F>,
    head: Linear<F>,
}

/// Intermediates needed by the backward passes.
pub struct CnnCache<F: Float> {
    x: Array4<F>,
    z1: Array4<F>,
    p1: Array4<F>,
    z2: Array4<F>,
    p2: Array4<F>,
    z3: Array4<F>,
    flat: Array2<F>,
    a3_dim: (usize, usize, usize, usize),
}

impl<F: Float> SmallCnn<F> {
    pub fn new(cfg: CnnConfig, rng: &mut impl Rng) -> Self
    where
        StandardNormal: Distribution<F>,
    {
        let [w1, w2, w3] = cfg.widths;
        Self {
            conv1: Conv2d::new(cfg.in_channels, w1, 1, rng),
            conv2: Conv2d::new(w1, w2, 1, rng),
            conv3: Conv2d::new(w2, w3, 1, rng),
            head: Linear::new(cfg.head_inputs(), cfg.classes, rng),
            cfg,
        }
    }

    /// A throwaway network with every parameter zero (constant zero logits).
    pub fn new_constant(cfg: CnnConfig) -> Self {
        let [w1, w2, w3] = cfg.widths;
        Self {
            conv1: Conv2d::new_zeroed(cfg.in_channels, w1, 1),
            conv2: Conv2d::new_zeroed(w1, w2, 1),
            conv3: Conv2d::new_zeroed(w2, w3, 1),
            head: Linear {
                w: Array2::zeros((cfg.classes, cfg.head_inputs())),
                b: ndarray::Array1::zeros(cfg.classes),
                gw: Array2::zeros((cfg.classes, cfg.head_inputs())),
                gb: ndarray::Array1::zeros(cfg.classes),
            },
            cfg,
        }
    }

    pub fn check_input(&self, x: &Array4<F>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.cfg.in_channels {
            return Err(Error::ShapeMismatch {
                expected: format!("{} channels", self.cfg.in_channels),
                actual: format!("{c} channels"),
            });
        }
        if h != self.cfg.image_size || w != self.cfg.image_size {
            return Err(Error::ShapeMismatch {
                expected: format!("{0}x{0} images", self.cfg.image_size),
                actual: format!("{h}x{w}"),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &Array4<F>) -> Result<(Array2<F>, CnnCache<F>)> {
        self.check_input(x)?;
        let z1 = self.conv1.forward(x);
        let p1 = avg_pool2(&relu(&z1));
        let z2 = self.conv2.forward(&p1);
        let p2 = avg_pool2(&relu(&z2));
        let z3 = self.conv3.forward(&p2);
        let a3 = relu(&z3);
        let a3_dim = a3.dim();
        let flat = a3
            .into_shape_with_order((a3_dim.0, a3_dim.1 * a3_dim.2 * a3_dim.3))
            .unwrap();
        let logits = self.head.forward(&flat);
        Ok((
            logits,
            CnnCache {
                x: x.clone(),
                z1,
                p1,
                z2,
                p2,
                z3,
                flat,
                a3_dim,
            },
        ))
    }

    /// Logits without keeping the cache.
    pub fn logits(&self, x: &Array4<F>) -> Result<Array2<F>> {
        Ok(self.forward(x)?.0)
    }

    /// Backward pass accumulating parameter gradients; returns d loss / d input.
    pub fn backward(&mut self, cache: &CnnCache<F>, glogits: &Array2<F>) -> Array4<F> {
        let gflat = self.head.backward(&cache.flat, glogits);
        let ga3 = gflat.into_shape_with_order(cache.a3_dim).unwrap();
        let gz3 = relu_grad(&cache.z3, &ga3);
        let gp2 = self.conv3.backward(&cache.p2, &gz3);
        let ga2 = avg_pool2_grad(&gp2);
        let gz2 = relu_grad(&cache.z2, &ga2);
        let gp1 = self.conv2.backward(&cache.p1, &gz2);
        let ga1 = avg_pool2_grad(&gp1);
        let gz1 = relu_grad(&cache.z1, &ga1);
        self.conv1.backward(&cache.x, &gz1)
    }

    /// Gradient w.r.t. the input only. Takes `&self`, so attack code can run
    /// against a shared immutable network.
    pub fn input_gradient(&self, cache: &CnnCache<F>, glogits: &Array2<F>) -> Array4<F> {
        let gflat = self.head.backward_input(glogits);
        let ga3 = gflat.into_shape_with_order(cache.a3_dim).unwrap();
        let gz3 = relu_grad(&cache.z3, &ga3);
        let gp2 = self
            .conv3
            .backward_input(&gz3, (cache.p2.dim().2, cache.p2.dim().3));
        let ga2 = avg_pool2_grad(&gp2);
        let gz2 = relu_grad(&cache.z2, &ga2);
        let gp1 = self
            .conv2
            .backward_input(&gz2, (cache.p1.dim().2, cache.p1.dim().3));
        let ga1 = avg_pool2_grad(&gp1);
        let gz1 = relu_grad(&cache.z1, &ga1);
        self.conv1
            .backward_input(&gz1, (cache.x.dim().2, cache.x.dim().3))
    }
}

impl<F: Float> Module<F> for SmallCnn<F> {
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [F], &mut [F])) {
        self.conv1.visit_mut("conv1", f);
        self.conv2.visit_mut("conv2", f);
        self.conv3.visit_mut("conv3", f);
        self.head.visit_mut("head", f);
    }

    fn visit_params(&self, f: &mut dyn FnMut(&str, &[usize], &[F])) {
        self.conv1.visit("conv1", f);
        self.conv2.visit("conv2", f);
        self.conv3.visit("conv3", f);
        self.head.visit("head", f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn rejects_wrong_channel_count_and_size() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let net = SmallCnn::<f32>::new(CnnConfig::default(), &mut rng);
        assert!(net.logits(&Array4::<f32>::zeros((1, 3, 32, 32))).is_err());
        assert!(net.logits(&Array4::<f32>::zeros((1, 1, 16, 16))).is_err());
    }

    #[test]
    fn constant_network_outputs_zero_logits() {
        let net = SmallCnn::<f32>::new_constant(CnnConfig::default());
        let x = Array4::<f32>::from_elem((2, 1, 32, 32), 0.7);
        let logits = net.logits(&x).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parameter_count_is_about_100k() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let net = SmallCnn::<f32>::new(CnnConfig::default(), &mut rng);
        let n = super::super::param_count(&net);
        assert!((50_000..200_000).contains(&n), "{n}");
    }

    #[test]
    fn head_distinguishes_feature_positions() {
        // Same blob at two different positions must be separable: the head
        // sees the flattened map, not a pooled summary.
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let cfg = CnnConfig {
            in_channels: 1,
            widths: [4, 4, 4],
            classes: 2,
            image_size: 16,
        };
        let net = SmallCnn::<f32>::new(cfg, &mut rng);
        let mut center = Array4::<f32>::zeros((1, 1, 16, 16));
        center[[0, 0, 8, 8]] = 1.0;
        let mut corner = Array4::<f32>::zeros((1, 1, 16, 16));
        corner[[0, 0, 1, 1]] = 1.0;
        let a = net.logits(&center).unwrap();
        let b = net.logits(&corner).unwrap();
        assert_ne!(a, b);
    }
}
