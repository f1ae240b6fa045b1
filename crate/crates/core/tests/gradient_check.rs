//! Double-precision gradient checks against central finite differences.
//!
//! The finite-difference quotients are the independent oracle here: they
//! never touch the analytic backward passes they verify.

use ndarray::Array4;
use purekit_core::classifier::loss_and_input_grad;
use purekit_core::image::ImageBatch;
use purekit_core::nn::{
    cross_entropy_sum, mse_mean, randn, zero_grads, CnnConfig, Module, SmallCnn, UNet, UNetConfig,
};
use purekit_core::rng::derive_rng;
use rand::Rng;

const H: f64 = 1e-5;
const MAX_REL_ERR: f64 = 1e-3;

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / fd.abs().max(1e-8)
}

/// Input gradient of the f64 micro-network vs central differences on 20
/// sampled coordinates.
#[test]
fn cnn_input_gradient_matches_finite_differences() {
    let mut rng = derive_rng(420, "gradcheck-cnn");
    let cfg = CnnConfig {
        in_channels: 1,
        widths: [4, 6, 8],
        classes: 2,
        image_size: 8,
    };
    let net = SmallCnn::<f64>::new(cfg, &mut rng);
    let x: Array4<f64> = randn((2, 1, 8, 8), &mut rng);
    let x = x.mapv(|v| 0.5 + 0.2 * v);
    let labels = [0u8, 1];

    let loss_at = |x: &Array4<f64>| -> f64 {
        let logits = net.logits(x).unwrap();
        cross_entropy_sum(&logits, &labels).0
    };

    let (logits, cache) = net.forward(&x).unwrap();
    let (_, glogits) = cross_entropy_sum(&logits, &labels);
    let analytic = net.input_gradient(&cache, &glogits);

    let numel = x.len();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let flat = rng.random_range(0..numel);
        let idx = [
            flat / 64,
            0,
            (flat % 64) / 8,
            flat % 8,
        ];
        let mut xp = x.clone();
        xp[idx] += H;
        let mut xm = x.clone();
        xm[idx] -= H;
        let fd = (loss_at(&xp) - loss_at(&xm)) / (2.0 * H);
        let err = rel_err(analytic[idx], fd);
        worst = worst.max(err);
        assert!(
            err <= MAX_REL_ERR,
            "coordinate {idx:?}: analytic {} vs fd {fd}, rel err {err}",
            analytic[idx]
        );
    }
    println!("cnn input gradient: worst rel err {worst:.3e}");
}

/// The f32 production instantiation agrees with the f64 path (looser bound).
#[test]
fn f32_input_gradient_tracks_f64() {
    let mut rng = derive_rng(77, "gradcheck-f32");
    let cfg = CnnConfig {
        in_channels: 1,
        widths: [4, 6, 8],
        classes: 2,
        image_size: 8,
    };
    let net64 = SmallCnn::<f64>::new(cfg, &mut rng);
    let mut net32 = SmallCnn::<f32>::new(cfg, &mut derive_rng(0, "throwaway"));
    // Copy the f64 weights into the f32 network.
    let mut stash: Vec<Vec<f64>> = Vec::new();
    net64.visit_params(&mut |_, _, v| stash.push(v.to_vec()));
    let mut slot = 0;
    net32.visit_params_mut(&mut |_, _, v, _| {
        for (dst, src) in v.iter_mut().zip(&stash[slot]) {
            *dst = *src as f32;
        }
        slot += 1;
    });

    let x64: Array4<f64> = randn((2, 1, 8, 8), &mut rng);
    let x64 = x64.mapv(|v| 0.5 + 0.2 * v);
    let x32 = ImageBatch::new(x64.mapv(|v| v as f32));
    let labels = [1u8, 0];

    let (logits64, cache64) = net64.forward(&x64).unwrap();
    let (_, gl64) = cross_entropy_sum(&logits64, &labels);
    let g64 = net64.input_gradient(&cache64, &gl64);
    let (_, g32) = loss_and_input_grad(&net32, &x32, &labels).unwrap();

    for (a, b) in g64.iter().zip(g32.iter()) {
        assert!((a - *b as f64).abs() < 1e-4, "{a} vs {b}");
    }
}

/// Parameter gradients of the full U-Net (convs, skips, step embedding
/// heads) against central differences through the training loss.
#[test]
fn unet_parameter_gradients_match_finite_differences() {
    let mut rng = derive_rng(31, "gradcheck-unet");
    let cfg = UNetConfig {
        in_channels: 1,
        width: 6,
        time_dim: 8,
    };
    let mut net = UNet::<f64>::new(cfg, &mut rng);
    let x: Array4<f64> = randn((2, 1, 8, 8), &mut rng);
    let target: Array4<f64> = randn((2, 1, 8, 8), &mut rng);
    let steps = [3usize, 70];

    zero_grads(&mut net);
    let (y, cache) = net.forward(&x, &steps).unwrap();
    let (_, gy) = mse_mean(&y, &target);
    net.backward(&cache, &gy);

    // Snapshot analytic gradients in visit order.
    let mut grads: Vec<Vec<f64>> = Vec::new();
    let mut names: Vec<String> = Vec::new();
    net.visit_params_mut(&mut |name, _, _, g| {
        names.push(name.to_string());
        grads.push(g.to_vec());
    });

    let mut worst = 0.0f64;
    let n_tensors = grads.len();
    for tensor in 0..n_tensors {
        let len = grads[tensor].len();
        for probe in 0..3.min(len) {
            let elem = (probe * 997) % len;
            let mut loss_of = |delta: f64| -> f64 {
                let mut slot = 0;
                net.visit_params_mut(&mut |_, _, v, _| {
                    if slot == tensor {
                        v[elem] += delta;
                    }
                    slot += 1;
                });
                let y = net.predict(&x, &steps).unwrap();
                let (loss, _) = mse_mean(&y, &target);
                let mut slot = 0;
                net.visit_params_mut(&mut |_, _, v, _| {
                    if slot == tensor {
                        v[elem] -= delta;
                    }
                    slot += 1;
                });
                loss
            };
            let fd = (loss_of(H) - loss_of(-H)) / (2.0 * H);
            let analytic = grads[tensor][elem];
            // The zero-initialised output conv has exactly-zero incoming
            // activations only in pathological cases; both sides near zero
            // is a pass.
            if fd.abs() < 1e-9 && analytic.abs() < 1e-9 {
                continue;
            }
            let err = rel_err(analytic, fd);
            worst = worst.max(err);
            assert!(
                err <= MAX_REL_ERR,
                "{}[{elem}]: analytic {analytic} vs fd {fd} (rel err {err})",
                names[tensor]
            );
        }
    }
    println!("unet parameter gradients: worst rel err {worst:.3e}");
}

/// Parameter gradients of the classifier against central differences.
#[test]
fn cnn_parameter_gradients_match_finite_differences() {
    let mut rng = derive_rng(99, "gradcheck-cnn-params");
    let cfg = CnnConfig {
        in_channels: 1,
        widths: [4, 6, 8],
        classes: 2,
        image_size: 8,
    };
    let mut net = SmallCnn::<f64>::new(cfg, &mut rng);
    let x: Array4<f64> = randn((3, 1, 8, 8), &mut rng);
    let x = x.mapv(|v| 0.5 + 0.2 * v);
    let labels = [0u8, 1, 1];

    zero_grads(&mut net);
    let (logits, cache) = net.forward(&x).unwrap();
    let (_, glogits) = cross_entropy_sum(&logits, &labels);
    net.backward(&cache, &glogits);

    let mut grads: Vec<Vec<f64>> = Vec::new();
    net.visit_params_mut(&mut |_, _, _, g| grads.push(g.to_vec()));

    for tensor in 0..grads.len() {
        let len = grads[tensor].len();
        for probe in 0..3.min(len) {
            let elem = (probe * 389) % len;
            let mut loss_of = |delta: f64| -> f64 {
                let mut slot = 0;
                net.visit_params_mut(&mut |_, _, v, _| {
                    if slot == tensor {
                        v[elem] += delta;
                    }
                    slot += 1;
                });
                let logits = net.logits(&x).unwrap();
                let (loss, _) = cross_entropy_sum(&logits, &labels);
                let mut slot = 0;
                net.visit_params_mut(&mut |_, _, v, _| {
                    if slot == tensor {
                        v[elem] -= delta;
                    }
                    slot += 1;
                });
                loss
            };
            let fd = (loss_of(H) - loss_of(-H)) / (2.0 * H);
            let analytic = grads[tensor][elem];
            if fd.abs() < 1e-9 && analytic.abs() < 1e-9 {
                continue;
            }
            assert!(
                rel_err(analytic, fd) <= MAX_REL_ERR,
                "tensor {tensor} elem {elem}: {analytic} vs {fd}"
            );
        }
    }
}
