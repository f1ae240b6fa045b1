//! L∞ projected-gradient-descent attacks on the classifier loss.

use crate::classifier::loss_and_input_grad;
use crate::error::{Error, Result};
use crate::image::ImageBatch;
use crate::nn::SmallCnn;
use ndarray::Zip;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

/// Tolerance used when deciding whether a coordinate sits on the ball
/// boundary. Pixels are stored in f32, whose rounding near typical values is
/// ~6e-8, so the check uses 1e-6 — still four orders of magnitude below any
/// sensible ε.
pub const BOUNDARY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// L∞ radius, in [0, 1) pixel units. ε = 0 is the degenerate no-op ball
    /// used to collapse adversarial training back to plain training.
    pub epsilon: f64,
    pub num_steps: usize,
    pub step_size: f64,
    pub random_start: bool,
    pub seed: u64,
}

impl AttackConfig {
    /// Conventional PGD settings for a given radius: 20 steps of ε/4 with a
    /// random start.
    pub fn for_epsilon(epsilon: f64) -> Self {
        Self {
            epsilon,
            num_steps: 20,
            step_size: epsilon / 4.0,
            random_start: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon < 1.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "epsilon must lie in [0, 1), got {}",
                self.epsilon
            )));
        }
        if self.num_steps == 0 {
            return Err(Error::InvalidConfig("num_steps must be at least 1".into()));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "step_size must be positive, got {}",
                self.step_size
            )));
        }
        Ok(())
    }
}

impl Default for AttackConfig {
    /// The faithful default radius is 2/255; evaluation configs typically
    /// override it.
    fn default() -> Self {
        Self::for_epsilon(2.0 / 255.0)
    }
}

/// Clamp a candidate batch into the L∞ ball around `x0` intersected with the
/// pixel range [0, 1].
pub fn project_linf(x_adv: &ImageBatch, x0: &ImageBatch, epsilon: f64) -> Result<ImageBatch> {
    x_adv.check_same_shape(x0)?;
    let eps = epsilon as f32;
    let mut out = x_adv.data.clone();
    Zip::from(&mut out).and(&x0.data).for_each(|v, &orig| {
        let lo = (orig - eps).max(0.0);
        let hi = (orig + eps).min(1.0);
        *v = (*v).clamp(lo, hi);
    });
    Ok(ImageBatch::new(out))
}

/// Iterated signed-gradient ascent on the classifier loss, projected into
/// the ball after every step. `sign(0) = 0`, so a constant classifier leaves
/// the input untouched. Deterministic given the config seed.
pub fn pgd_attack(
    classifier: &SmallCnn<f32>,
    x: &ImageBatch,
    labels: &[u8],
    cfg: &AttackConfig,
) -> Result<ImageBatch> {
    cfg.validate()?;
    if x.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", x.len()),
            actual: format!("{}", labels.len()),
        });
    }
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let x0 = x.clone();
    let mut adv = x.clone();
    if cfg.random_start && cfg.epsilon > 0.0 {
        let eps = cfg.epsilon as f32;
        adv.data.mapv_inplace(|v| v + rng.random_range(-eps..=eps));
        adv = project_linf(&adv, &x0, cfg.epsilon)?;
    }
    let alpha = cfg.step_size as f32;
    for _ in 0..cfg.num_steps {
        let (_, grad) = loss_and_input_grad(classifier, &adv, labels)?;
        let step = grad.mapv(|g| {
            if g > 0.0 {
                alpha
            } else if g < 0.0 {
                -alpha
            } else {
                0.0
            }
        });
        adv = project_linf(&ImageBatch::new(adv.data + step), &x0, cfg.epsilon)?;
    }
    Ok(adv)
}

/// Fraction of coordinates whose perturbation sits on the ε-perimeter,
/// restricted to coordinates where the pixel bounds [0, 1] leave the full
/// ±ε range available. Returns 0 when no coordinate qualifies.
pub fn boundary_fraction(x_adv: &ImageBatch, x0: &ImageBatch, epsilon: f64) -> Result<f64> {
    x_adv.check_same_shape(x0)?;
    let mut eligible = 0usize;
    let mut on_boundary = 0usize;
    for (&a, &o) in x_adv.data.iter().zip(x0.data.iter()) {
        let orig = o as f64;
        if orig - epsilon < 0.0 || orig + epsilon > 1.0 {
            continue;
        }
        eligible += 1;
        let delta = (a as f64 - orig).abs();
        if (delta - epsilon).abs() <= BOUNDARY_TOL {
            on_boundary += 1;
        }
    }
    if eligible == 0 {
        return Ok(0.0);
    }
    Ok(on_boundary as f64 / eligible as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::loss_and_input_grad;
    use crate::nn::CnnConfig;
    use crate::rng::derive_rng;
    use ndarray::Array4;
    use proptest::prelude::*;

    fn net(seed: u64) -> SmallCnn<f32> {
        let mut rng = derive_rng(seed, "attack-test");
        SmallCnn::new(
            CnnConfig {
                in_channels: 1,
                widths: [4, 8, 8],
                classes: 2,
                image_size: 8,
            },
            &mut rng,
        )
    }

    fn batch(n: usize) -> ImageBatch {
        ImageBatch::new(Array4::from_shape_fn((n, 1, 8, 8), |(b, _, i, j)| {
            (((b + 1) * (i * 8 + j + 3)) % 17) as f32 / 20.0 + 0.2
        }))
    }

    #[test]
    fn projection_clamps_into_ball_and_pixel_range() {
        let x0 = ImageBatch::new(Array4::from_elem((1, 1, 1, 2), 0.5f32));
        let mut cand = x0.clone();
        cand.data[[0, 0, 0, 0]] = 0.6;
        cand.data[[0, 0, 0, 1]] = 0.5;
        let eps = 2.0 / 255.0;
        let p = project_linf(&cand, &x0, eps).unwrap();
        assert!((p.data[[0, 0, 0, 0]] - (0.5 + eps as f32)).abs() < 1e-7);
        assert_eq!(p.data[[0, 0, 0, 1]], 0.5);

        let x0 = ImageBatch::new(Array4::from_elem((1, 1, 1, 1), 0.999f32));
        let mut cand = x0.clone();
        cand.data[[0, 0, 0, 0]] = 1.2;
        let p = project_linf(&cand, &x0, 0.008).unwrap();
        assert_eq!(p.data[[0, 0, 0, 0]], 1.0);
    }

    #[test]
    fn single_step_without_random_start_is_fgsm() {
        let net = net(1);
        let x = batch(4);
        let labels = [0u8, 1, 0, 1];
        let cfg = AttackConfig {
            epsilon: 8.0 / 255.0,
            num_steps: 1,
            step_size: 8.0 / 255.0,
            random_start: false,
            seed: 0,
        };
        let got = pgd_attack(&net, &x, &labels, &cfg).unwrap();
        let (_, grad) = loss_and_input_grad(&net, &x, &labels).unwrap();
        let alpha = cfg.step_size as f32;
        let stepped = ImageBatch::new(
            &x.data
                + &grad.mapv(|g| {
                    if g > 0.0 {
                        alpha
                    } else if g < 0.0 {
                        -alpha
                    } else {
                        0.0
                    }
                }),
        );
        let want = project_linf(&stepped, &x, cfg.epsilon).unwrap();
        assert_eq!(got.data, want.data);
    }

    #[test]
    fn constant_classifier_is_a_fixed_point() {
        let net = SmallCnn::<f32>::new_constant(CnnConfig {
            in_channels: 1,
            widths: [4, 8, 8],
            classes: 2,
            image_size: 8,
        });
        let x = batch(2);
        let cfg = AttackConfig {
            epsilon: 0.05,
            num_steps: 5,
            step_size: 0.01,
            random_start: false,
            seed: 3,
        };
        let adv = pgd_attack(&net, &x, &[0, 1], &cfg).unwrap();
        assert_eq!(adv.data, x.data);
    }

    #[test]
    fn attack_does_not_reduce_mean_loss() {
        let net = net(2);
        let x = batch(8);
        let labels = [0u8, 1, 0, 1, 0, 1, 0, 1];
        let cfg = AttackConfig {
            epsilon: 0.05,
            num_steps: 10,
            step_size: 0.0125,
            random_start: true,
            seed: 11,
        };
        let adv = pgd_attack(&net, &x, &labels, &cfg).unwrap();
        let (before, _) = loss_and_input_grad(&net, &x, &labels).unwrap();
        let (after, _) = loss_and_input_grad(&net, &adv, &labels).unwrap();
        assert!(after >= before, "attack reduced loss: {after} < {before}");
    }

    #[test]
    fn attack_is_deterministic() {
        let net = net(4);
        let x = batch(3);
        let labels = [1u8, 0, 1];
        let cfg = AttackConfig {
            epsilon: 0.03,
            num_steps: 4,
            step_size: 0.01,
            random_start: true,
            seed: 42,
        };
        let a = pgd_attack(&net, &x, &labels, &cfg).unwrap();
        let b = pgd_attack(&net, &x, &labels, &cfg).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn zero_steps_rejected() {
        let cfg = AttackConfig {
            num_steps: 0,
            ..AttackConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn boundary_fraction_of_full_step_is_one() {
        // Interior pixels stepped by exactly ±ε with nothing clipped.
        let x0 = ImageBatch::new(Array4::from_elem((1, 1, 4, 4), 0.5f32));
        let eps = 8.0 / 255.0;
        let adv = ImageBatch::new(x0.data.mapv(|v| v + eps as f32));
        assert_eq!(boundary_fraction(&adv, &x0, eps).unwrap(), 1.0);
    }

    #[test]
    fn boundary_fraction_of_zero_delta_is_zero() {
        let x0 = batch(1);
        assert_eq!(boundary_fraction(&x0, &x0, 0.01).unwrap(), 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn attack_output_stays_in_ball_and_range(seed in 0u64..200, eps in 0.001f64..0.2) {
            let net = net(5);
            let x = batch(2);
            let cfg = AttackConfig {
                epsilon: eps,
                num_steps: 3,
                step_size: eps / 2.0,
                random_start: true,
                seed,
            };
            let adv = pgd_attack(&net, &x, &[0, 1], &cfg).unwrap();
            let linf = adv.linf_to(&x).unwrap() as f64;
            prop_assert!(linf <= eps + 1e-6, "linf {linf} > eps {eps}");
            prop_assert!(adv.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
