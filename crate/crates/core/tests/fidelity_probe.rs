//! Manual probe: reconstruction fidelity of a trained checkpoint across
//! noise levels. Ignored by default; point it at a calibration directory:
//!
//! ```text
//! PROBE_DIR=/tmp/calib cargo test -p purekit-core --test fidelity_probe -- --ignored --nocapture
//! ```

use purekit_core::checkpoint::{load_classifier, load_predictor};
use purekit_core::classifier::{accuracy, predict};
use purekit_core::data::load_dataset;
use purekit_core::diffusion::{forward_diffuse, purify};
use purekit_core::rng::derive_rng;
use purekit_core::schedule::{fraction_to_step, NoiseSchedule, TimeFraction};
use std::path::PathBuf;

#[test]
#[ignore]
fn reconstruction_fidelity_across_noise_levels() {
    let dir = PathBuf::from(std::env::var("PROBE_DIR").unwrap_or_else(|_| "/tmp/calib".into()));
    let ds = load_dataset(&dir.join("dataset.pkd")).unwrap();
    let (classifier, _) = load_classifier(&dir.join("classifier.pkc")).unwrap();
    let (predictor, sched_cfg, _) = load_predictor(&dir.join("diffusion.pkc")).unwrap();
    let schedule = NoiseSchedule::from_config(&sched_cfg).unwrap();
    let idx: Vec<usize> = (0..64).collect();
    let x = ds.images.select_batch(&idx);
    let y: Vec<u8> = idx.iter().map(|&i| ds.labels[i]).collect();
    let clean_acc = accuracy(&predict(&classifier, &x).unwrap(), &y);
    println!("clean accuracy on probe subset: {clean_acc:.4}");
    for t in [0.01, 0.02, 0.04, 0.08, 0.12, 0.18, 0.30] {
        let tf = TimeFraction::new(t).unwrap();
        let k = fraction_to_step(tf, &schedule);
        let mut rng = derive_rng(1, "probe-noisy");
        let (noisy, _) = forward_diffuse(&x, k, &schedule, &mut rng).unwrap();
        let noisy_c = noisy.clamp01();
        let mut rng = derive_rng(2, "probe-purify");
        let purified = purify(&x, tf, &predictor, &schedule, &mut rng).unwrap();
        let acc_pure = accuracy(&predict(&classifier, &purified).unwrap(), &y);
        let acc_noisy = accuracy(&predict(&classifier, &noisy_c).unwrap(), &y);
        println!(
            "t={t:.3} (k={k:3}): mse noisy {:.5} clamped {:.5} | mse purified {:.5} | std acc: noisy {acc_noisy:.4} purified {acc_pure:.4}",
            noisy.mse_to(&x).unwrap(),
            noisy_c.mse_to(&x).unwrap(),
            purified.mse_to(&x).unwrap(),
        );
    }
}
