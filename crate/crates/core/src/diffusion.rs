//! Forward diffusion, the learned reverse chain, purification, and denoiser
//! training.

use crate::error::{Error, Result};
use crate::image::ImageBatch;
use crate::nn::{mse_mean, randn, zero_grads, Adam, UNet, UNetConfig};
use crate::rng::derive_rng;
use crate::schedule::{fraction_to_step, NoiseSchedule, TimeFraction};
use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

/// Diffuse clean images to step k in closed form:
/// x_k = sqrt(ᾱ_k)·x_0 + sqrt(1−ᾱ_k)·ε with ε drawn per element.
///
/// Returns the noisy batch and the drawn noise. The result is not clamped;
/// noisy images live in all of R.
pub fn forward_diffuse(
    x0: &ImageBatch,
    k: usize,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha12Rng,
) -> Result<(ImageBatch, Array4<f32>)> {
    schedule.check_step(k)?;
    let eps: Array4<f32> = randn(x0.data.dim(), rng);
    let abar = schedule.alpha_bar(k);
    let signal = abar.sqrt() as f32;
    let noise = (1.0 - abar).sqrt() as f32;
    let xk = x0.data.mapv(|v| v * signal) + eps.mapv(|e| e * noise);
    Ok((ImageBatch::new(xk), eps))
}

/// One learned reverse transition x_k -> x_{k-1} (k >= 1):
/// x_{k−1} = (x_k − β_k/sqrt(1−ᾱ_k)·ε̂)/sqrt(α_k) + sqrt(β_k)·z,
/// with z = 0 on the final step (k = 1) so the output is a point estimate.
pub fn reverse_step(
    xk: &ImageBatch,
    k: usize,
    predictor: &UNet<f32>,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha12Rng,
) -> Result<ImageBatch> {
    if k == 0 {
        return Err(Error::StepOutOfRange {
            step: 0,
            max: schedule.num_steps(),
        });
    }
    schedule.check_step(k)?;
    let n = xk.len();
    let steps = vec![k; n];
    let eps_hat = predictor.predict(&xk.data, &steps)?;
    let alpha = schedule.alpha(k);
    let beta = schedule.beta(k);
    let abar = schedule.alpha_bar(k);
    let coef = (beta / (1.0 - abar).sqrt()) as f32;
    let inv_sqrt_alpha = (1.0 / alpha.sqrt()) as f32;
    let mut prev = (&xk.data - &eps_hat.mapv(|e| e * coef)).mapv(|v| v * inv_sqrt_alpha);
    if k > 1 {
        let sigma = beta.sqrt() as f32;
        let z: Array4<f32> = randn(prev.dim(), rng);
        prev = prev + z.mapv(|v| v * sigma);
    }
    Ok(ImageBatch::new(prev))
}

/// Purify a batch: diffuse to step round(t·T), run the reverse chain back to
/// step 0, and clamp into [0, 1]. Also reports the number of reverse steps.
pub fn purify_counted(
    x: &ImageBatch,
    t: TimeFraction,
    predictor: &UNet<f32>,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha12Rng,
) -> Result<(ImageBatch, usize)> {
    let k = fraction_to_step(t, schedule);
    if k == 0 {
        return Ok((x.clamp01(), 0));
    }
    let (mut current, _) = forward_diffuse(x, k, schedule, rng)?;
    let mut executed = 0;
    for step in (1..=k).rev() {
        current = reverse_step(&current, step, predictor, schedule, rng)?;
        executed += 1;
    }
    Ok((current.clamp01(), executed))
}

/// Purify a batch; see `purify_counted`.
pub fn purify(
    x: &ImageBatch,
    t: TimeFraction,
    predictor: &UNet<f32>,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha12Rng,
) -> Result<ImageBatch> {
    Ok(purify_counted(x, t, predictor, schedule, rng)?.0)
}

/// One denoiser update: per-example uniform step draw, closed-form diffusion,
/// mean squared error between predicted and drawn noise, one Adam step.
/// Returns the pre-update loss.
pub fn diffusion_train_step(
    predictor: &mut UNet<f32>,
    batch: &ImageBatch,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha12Rng,
    optimizer: &mut Adam<f32>,
) -> Result<f32> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("diffusion training batch".into()));
    }
    let n = batch.len();
    let t_max = schedule.num_steps();
    let steps: Vec<usize> = (0..n).map(|_| rng.random_range(1..=t_max)).collect();
    let eps: Array4<f32> = randn(batch.data.dim(), rng);
    let mut xk = batch.data.clone();
    for (bi, &k) in steps.iter().enumerate() {
        let abar = schedule.alpha_bar(k);
        let signal = abar.sqrt() as f32;
        let noise = (1.0 - abar).sqrt() as f32;
        let mut img = xk.index_axis_mut(ndarray::Axis(0), bi);
        let e = eps.index_axis(ndarray::Axis(0), bi);
        img.zip_mut_with(&e, |v, &ev| *v = *v * signal + ev * noise);
    }
    let (eps_hat, cache) = predictor.forward(&xk, &steps)?;
    let (loss, grad) = mse_mean(&eps_hat, &eps);
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            what: "diffusion training loss".into(),
            batch_index: None,
        });
    }
    zero_grads(predictor);
    predictor.backward(&cache, &grad);
    optimizer.step(predictor);
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub width: usize,
    pub time_dim: usize,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 14,
            batch_size: 32,
            learning_rate: 3e-4,
            seed: 0,
            width: 32,
            time_dim: 64,
        }
    }
}

#[derive(Debug)]
pub struct DiffusionTrainOutcome {
    pub predictor: UNet<f32>,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Train the noise predictor on clean images. Seed-deterministic: the
/// initialisation and the batch stream are derived from `cfg.seed`.
pub fn train_diffusion(
    images: &ImageBatch,
    schedule: &NoiseSchedule,
    cfg: &DiffusionTrainConfig,
) -> Result<DiffusionTrainOutcome> {
    if images.is_empty() {
        return Err(Error::EmptyInput("diffusion training set".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::InvalidConfig(
            "diffusion training needs positive epochs and batch size".into(),
        ));
    }
    let (c, _, _) = images.image_shape();
    let mut init_rng = derive_rng(cfg.seed, "diffusion-init");
    let mut predictor = UNet::<f32>::new(
        UNetConfig {
            in_channels: c,
            width: cfg.width,
            time_dim: cfg.time_dim,
        },
        &mut init_rng,
    );
    let mut optimizer = Adam::new(cfg.learning_rate);
    let mut train_rng = derive_rng(cfg.seed, "diffusion-train");
    let n = images.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        // Step decay: drop to 0.3x for the final third of training.
        let lr = if epoch * 3 >= cfg.epochs * 2 {
            cfg.learning_rate * 0.3
        } else {
            cfg.learning_rate
        };
        optimizer.lr = lr as f32;
        order.shuffle(&mut train_rng);
        let mut total = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = images.select_batch(chunk);
            let loss = diffusion_train_step(
                &mut predictor,
                &batch,
                schedule,
                &mut train_rng,
                &mut optimizer,
            )?;
            total += loss as f64;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
    }
    Ok(DiffusionTrainOutcome {
        predictor,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::make_linear_schedule;

    fn small_batch(n: usize) -> ImageBatch {
        ImageBatch::new(Array4::from_shape_fn((n, 1, 8, 8), |(b, _, i, j)| {
            ((b * 13 + i * 3 + j) % 10) as f32 / 10.0
        }))
    }

    fn tiny_unet(seed: u64) -> UNet<f32> {
        let mut rng = derive_rng(seed, "test-unet");
        UNet::new(
            UNetConfig {
                in_channels: 1,
                width: 8,
                time_dim: 16,
            },
            &mut rng,
        )
    }

    #[test]
    fn step_zero_returns_input_exactly() {
        let s = make_linear_schedule(100, 1e-4, 0.02).unwrap();
        let x = small_batch(2);
        let mut rng = derive_rng(1, "fd");
        let (xk, _) = forward_diffuse(&x, 0, &s, &mut rng).unwrap();
        assert_eq!(xk.data, x.data);
    }

    #[test]
    fn forward_diffuse_is_seed_deterministic() {
        let s = make_linear_schedule(100, 1e-4, 0.02).unwrap();
        let x = small_batch(3);
        let (a, ea) = forward_diffuse(&x, 50, &s, &mut derive_rng(7, "fd")).unwrap();
        let (b, eb) = forward_diffuse(&x, 50, &s, &mut derive_rng(7, "fd")).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(ea, eb);
    }

    #[test]
    fn forward_diffuse_rejects_out_of_range_step() {
        let s = make_linear_schedule(10, 1e-4, 0.02).unwrap();
        let x = small_batch(1);
        assert!(forward_diffuse(&x, 11, &s, &mut derive_rng(0, "fd")).is_err());
    }

    #[test]
    fn reverse_step_rejects_step_zero() {
        let s = make_linear_schedule(10, 1e-4, 0.02).unwrap();
        let net = tiny_unet(0);
        let x = small_batch(1);
        assert!(reverse_step(&x, 0, &net, &s, &mut derive_rng(0, "rs")).is_err());
    }

    #[test]
    fn final_reverse_step_is_noiseless() {
        // k = 1 adds no fresh noise, so two calls with different rng states agree.
        let s = make_linear_schedule(10, 1e-4, 0.02).unwrap();
        let net = tiny_unet(1);
        let x = small_batch(2);
        let a = reverse_step(&x, 1, &net, &s, &mut derive_rng(1, "a")).unwrap();
        let b = reverse_step(&x, 1, &net, &s, &mut derive_rng(2, "b")).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn zero_predictor_and_tiny_beta_is_near_identity() {
        let s = make_linear_schedule(10, 1e-9, 1e-9).unwrap();
        // A fresh UNet predicts exactly zero noise (zero-initialised output conv).
        let net = tiny_unet(2);
        let x = small_batch(1);
        let out = reverse_step(&x, 1, &net, &s, &mut derive_rng(0, "rs")).unwrap();
        let max_diff = out.linf_to(&x).unwrap();
        assert!(max_diff < 1e-6, "{max_diff}");
    }

    #[test]
    fn purify_at_zero_is_identity() {
        let s = make_linear_schedule(100, 1e-4, 0.02).unwrap();
        let net = tiny_unet(3);
        let x = small_batch(2);
        let t = TimeFraction::new(0.0).unwrap();
        let (out, steps) = purify_counted(&x, t, &net, &s, &mut derive_rng(0, "p")).unwrap();
        assert_eq!(steps, 0);
        assert_eq!(out.data, x.data);
    }

    #[test]
    fn purify_executes_exactly_round_t_times_t_steps() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        let net = tiny_unet(4);
        let x = small_batch(8);
        let t = TimeFraction::new(0.04).unwrap();
        let (_, steps) = purify_counted(&x, t, &net, &s, &mut derive_rng(0, "p")).unwrap();
        assert_eq!(steps, 40);
    }

    #[test]
    fn untrained_predictor_loss_is_near_one() {
        // A fresh network outputs zero, so the loss is the mean square of the
        // drawn unit-normal noise.
        let s = make_linear_schedule(100, 1e-4, 0.02).unwrap();
        let mut net = tiny_unet(5);
        let mut opt = Adam::new(1e-4);
        let x = small_batch(16);
        let loss =
            diffusion_train_step(&mut net, &x, &s, &mut derive_rng(11, "dt"), &mut opt).unwrap();
        assert!(loss > 0.0);
        assert!((loss - 1.0).abs() < 0.15, "{loss}");
    }

    #[test]
    fn empty_batch_is_rejected() {
        let s = make_linear_schedule(10, 1e-4, 0.02).unwrap();
        let mut net = tiny_unet(6);
        let mut opt = Adam::new(1e-4);
        let empty = ImageBatch::new(Array4::zeros((0, 1, 8, 8)));
        assert!(
            diffusion_train_step(&mut net, &empty, &s, &mut derive_rng(0, "dt"), &mut opt).is_err()
        );
    }
}
