//! Manual throughput probe; run with `cargo test --release -p purekit-core
//! --test perf_probe -- --ignored --nocapture` when tuning batch sizes.

use purekit_core::nn::{randn, Adam, Module, UNet, UNetConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::time::Instant;

#[test]
#[ignore]
fn unet_training_throughput() {
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let mut net = UNet::<f32>::new(UNetConfig::default(), &mut rng);
    let mut opt = Adam::new(3e-4);
    let batch = 32;
    let x = randn::<f32, _>((batch, 1, 32, 32), &mut rng);
    let steps: Vec<usize> = (0..batch).map(|i| (i * 31) % 1000 + 1).collect();

    // warmup
    let (y, cache) = net.forward(&x, &steps).unwrap();
    purekit_core::nn::zero_grads(&mut net);
    net.backward(&cache, &y);
    opt.step(&mut net);

    let iters = 8;
    let t0 = Instant::now();
    for _ in 0..iters {
        let (y, cache) = net.forward(&x, &steps).unwrap();
        purekit_core::nn::zero_grads(&mut net);
        net.backward(&cache, &y);
        opt.step(&mut net);
    }
    let dt = t0.elapsed().as_secs_f64();
    let per_image = dt / (iters * batch) as f64;
    println!("train: {:.1} ms/image, {:.2} s/epoch-of-2000", per_image * 1e3, per_image * 2000.0);

    let t0 = Instant::now();
    for _ in 0..iters {
        let _ = net.predict(&x, &steps).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64();
    let per_image = dt / (iters * batch) as f64;
    println!(
        "inference: {:.2} ms/image, purify(200 imgs, 40 steps) ~ {:.1} s",
        per_image * 1e3,
        per_image * 200.0 * 40.0
    );
}
