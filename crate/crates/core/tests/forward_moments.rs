//! Monte-Carlo oracle for the closed-form forward diffusion: over many
//! redraws, the per-element mean of x_k must approach sqrt(ᾱ_k)·x0 and the
//! per-element variance must approach 1−ᾱ_k.

use ndarray::Array4;
use purekit_core::diffusion::forward_diffuse;
use purekit_core::image::ImageBatch;
use purekit_core::rng::derive_rng;
use purekit_core::schedule::{make_linear_schedule, NoiseSchedule};

const DRAWS: usize = 10_000;

/// Step whose cumulative ᾱ is closest to 0.5 (k = 259 for the default
/// schedule; located by scanning rather than hard-coding).
fn step_with_half_alpha_bar(schedule: &NoiseSchedule) -> usize {
    (0..=schedule.num_steps())
        .min_by(|&a, &b| {
            let da = (schedule.alpha_bar(a) - 0.5).abs();
            let db = (schedule.alpha_bar(b) - 0.5).abs();
            da.partial_cmp(&db).unwrap()
        })
        .unwrap()
}

#[test]
fn forward_moments_match_the_closed_form() {
    let schedule = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
    let k = step_with_half_alpha_bar(&schedule);
    let abar = schedule.alpha_bar(k);
    assert!((abar - 0.5).abs() < 0.01, "k={k} gives abar={abar}");

    // A fixed x0 with varied pixel values across [0, 1].
    let x0 = ImageBatch::new(Array4::from_shape_fn((1, 1, 8, 8), |(_, _, i, j)| {
        (i * 8 + j) as f32 / 63.0
    }));
    let numel = x0.data.len();

    let mut rng = derive_rng(20_240, "moment-oracle");
    let mut sum = vec![0.0f64; numel];
    let mut sum_sq = vec![0.0f64; numel];
    for _ in 0..DRAWS {
        let (xk, _) = forward_diffuse(&x0, k, &schedule, &mut rng).unwrap();
        for (acc, (sq, &v)) in sum.iter_mut().zip(sum_sq.iter_mut().zip(xk.data.iter())) {
            let v = v as f64;
            *acc += v;
            *sq += v * v;
        }
    }

    let mean_tol = 4.0 * ((1.0 - abar) / DRAWS as f64).sqrt();
    let expected_var = 1.0 - abar;
    let signal = abar.sqrt();
    for (i, &x) in x0.data.iter().enumerate() {
        let mean = sum[i] / DRAWS as f64;
        let var = sum_sq[i] / DRAWS as f64 - mean * mean;
        let expected_mean = signal * x as f64;
        assert!(
            (mean - expected_mean).abs() <= mean_tol,
            "element {i}: mean {mean} vs {expected_mean} (tol {mean_tol})"
        );
        assert!(
            (var - expected_var).abs() <= 0.1 * expected_var,
            "element {i}: var {var} vs {expected_var}"
        );
    }
}

#[test]
fn forward_mean_tracks_signal_at_the_operating_noise_level() {
    // Same oracle at the t* = 0.04 operating point (k = 40).
    let schedule = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
    let k = 40;
    let abar = schedule.alpha_bar(k);
    let x0 = ImageBatch::new(Array4::from_elem((1, 1, 4, 4), 0.5f32));
    let mut rng = derive_rng(77, "moment-oracle-tstar");
    let mut sum = vec![0.0f64; 16];
    for _ in 0..DRAWS {
        let (xk, _) = forward_diffuse(&x0, k, &schedule, &mut rng).unwrap();
        for (acc, &v) in sum.iter_mut().zip(xk.data.iter()) {
            *acc += v as f64;
        }
    }
    let mean_tol = 4.0 * ((1.0 - abar) / DRAWS as f64).sqrt();
    let expected = abar.sqrt() * 0.5;
    for (i, acc) in sum.iter().enumerate() {
        let mean = acc / DRAWS as f64;
        assert!(
            (mean - expected).abs() <= mean_tol,
            "element {i}: {mean} vs {expected}"
        );
    }
}
