//! Noise-prediction U-Net: two downsampling stages, two upsampling stages
//! with skip connections, and a sinusoidal step embedding injected at each
//! resolution via learned per-channel biases.

use super::conv::Conv2d;
use super::linear::Linear;
use super::{silu, silu_grad, upsample2, upsample2_grad, Float, Module};
use crate::error::{Error, Result};
use ndarray::{s, Array2, Array4};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    /// Base channel width used at every resolution.
    pub width: usize,
    /// Sinusoidal embedding size (and trunk output size).
    pub time_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            width: 32,
            time_dim: 64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct UNet<F: Float> {
    pub cfg: UNetConfig,
    stem: Conv2d<F>,
    enc1: Conv2d<F>,
    down1: Conv2d<F>,
    enc2: Conv2d<F>,
    down2: Conv2d<F>,
    mid1: Conv2d<F>,
    mid2: Conv2d<F>,
    up1a: Conv2d<F>,
    up1b: Conv2d<F>,
    up2a: Conv2d<F>,
    up2b: Conv2d<F>,
    outc: Conv2d<F>,
    trunk: Linear<F>,
    heads: Vec<Linear<F>>, // one per injection site
}

pub struct UNetCache<F: Float> {
    x: Array4<F>,
    emb: Array2<F>,
    z_t: Array2<F>,
    te: Array2<F>,
    z0: Array4<F>,
    h0: Array4<F>,
    z0b: Array4<F>,
    s0: Array4<F>,
    z1: Array4<F>,
    h1: Array4<F>,
    z1b: Array4<F>,
    s1: Array4<F>,
    z2: Array4<F>,
    h2: Array4<F>,
    z3: Array4<F>,
    m1: Array4<F>,
    z4: Array4<F>,
    c1: Array4<F>,
    z5: Array4<F>,
    a5: Array4<F>,
    z6: Array4<F>,
    c2: Array4<F>,
    z7: Array4<F>,
    a7: Array4<F>,
    z8: Array4<F>,
    a8: Array4<F>,
}

/// Sinusoidal embedding of integer steps, half sines / half cosines.
pub fn step_embedding<F: Float>(steps: &[usize], dim: usize) -> Array2<F> {
    let half = dim / 2;
    let mut emb = Array2::<F>::zeros((steps.len(), dim));
    for (bi, &k) in steps.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / (half - 1).max(1) as f64).exp();
            let arg = k as f64 * freq;
            emb[[bi, i]] = F::from_f64(arg.sin());
            emb[[bi, half + i]] = F::from_f64(arg.cos());
        }
    }
    emb
}

/// Broadcast-add a per-(example, channel) bias onto feature maps.
fn add_channel_bias<F: Float>(maps: &mut Array4<F>, bias: &Array2<F>) {
    let (b, c, h, w) = maps.dim();
    for bi in 0..b {
        for ci in 0..c {
            let add = bias[[bi, ci]];
            let mut plane = maps.slice_mut(s![bi, ci, .., ..]);
            plane.mapv_inplace(|v| v + add);
            let _ = (h, w);
        }
    }
}

/// Sum feature-map gradients over the spatial dims: (B, C, H, W) -> (B, C).
fn channel_sum<F: Float>(maps: &Array4<F>) -> Array2<F> {
    let (b, c, _, _) = maps.dim();
    let mut out = Array2::<F>::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            out[[bi, ci]] = maps.slice(s![bi, ci, .., ..]).sum();
        }
    }
    out
}

fn split_channels<F: Float>(x: &Array4<F>, at: usize) -> (Array4<F>, Array4<F>) {
    (
        x.slice(s![.., ..at, .., ..]).to_owned(),
        x.slice(s![.., at.., .., ..]).to_owned(),
    )
}

/// Channel concatenation with a guaranteed standard memory layout.
fn concat_channels<F: Float>(a: &Array4<F>, b: &Array4<F>) -> Array4<F> {
    let (n, ca, h, w) = a.dim();
    let cb = b.dim().1;
    let mut out = Array4::<F>::zeros((n, ca + cb, h, w));
    out.slice_mut(s![.., ..ca, .., ..]).assign(a);
    out.slice_mut(s![.., ca.., .., ..]).assign(b);
    out
}

impl<F: Float> UNet<F> {
    pub fn new(cfg: UNetConfig, rng: &mut impl Rng) -> Self
    where
        StandardNormal: Distribution<F>,
    {
        let w = cfg.width;
        let t = cfg.time_dim;
        Self {
            stem: Conv2d::new(cfg.in_channels, w, 1, rng),
            enc1: Conv2d::new(w, w, 1, rng),
            down1: Conv2d::new(w, w, 2, rng),
            enc2: Conv2d::new(w, w, 1, rng),
            down2: Conv2d::new(w, w, 2, rng),
            mid1: Conv2d::new(w, w, 1, rng),
            mid2: Conv2d::new(w, w, 1, rng),
            up1a: Conv2d::new(2 * w, w, 1, rng),
            up1b: Conv2d::new(w, w, 1, rng),
            up2a: Conv2d::new(2 * w, w, 1, rng),
            up2b: Conv2d::new(w, w, 1, rng),
            // Zero-initialised output: a fresh network predicts zero noise.
            outc: Conv2d::new_zeroed(w, cfg.in_channels, 1),
            trunk: Linear::new(t, t, rng),
            heads: (0..5).map(|_| Linear::new(t, w, rng)).collect(),
            cfg,
        }
    }

    pub fn check_input(&self, x: &Array4<F>, steps: &[usize]) -> Result<()> {
        let (b, c, h, w) = x.dim();
        if c != self.cfg.in_channels {
            return Err(Error::ShapeMismatch {
                expected: format!("{} channels", self.cfg.in_channels),
                actual: format!("{c} channels"),
            });
        }
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::ShapeMismatch {
                expected: "height/width divisible by 4".into(),
                actual: format!("{h}x{w}"),
            });
        }
        if steps.len() != b {
            return Err(Error::ShapeMismatch {
                expected: format!("{b} step indices"),
                actual: format!("{}", steps.len()),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &Array4<F>, steps: &[usize]) -> Result<(Array4<F>, UNetCache<F>)> {
        self.check_input(x, steps)?;
        let emb = step_embedding::<F>(steps, self.cfg.time_dim);
        let z_t = self.trunk.forward(&emb);
        let te = silu(&z_t);
        let biases: Vec<Array2<F>> = self.heads.iter().map(|h| h.forward(&te)).collect();

        let mut z0 = self.stem.forward(x);
        add_channel_bias(&mut z0, &biases[0]);
        let h0 = silu(&z0);
        let z0b = self.enc1.forward(&h0);
        let s0 = silu(&z0b);

        let mut z1 = self.down1.forward(&s0);
        add_channel_bias(&mut z1, &biases[1]);
        let h1 = silu(&z1);
        let z1b = self.enc2.forward(&h1);
        let s1 = silu(&z1b);

        let mut z2 = self.down2.forward(&s1);
        add_channel_bias(&mut z2, &biases[2]);
        let h2 = silu(&z2);
        let z3 = self.mid1.forward(&h2);
        let m1 = silu(&z3);
        let z4 = self.mid2.forward(&m1);
        let m2 = silu(&z4);

        let u1 = upsample2(&m2);
        let c1 = concat_channels(&u1, &s1);
        let mut z5 = self.up1a.forward(&c1);
        add_channel_bias(&mut z5, &biases[3]);
        let a5 = silu(&z5);
        let z6 = self.up1b.forward(&a5);
        let a6 = silu(&z6);

        let u2 = upsample2(&a6);
        let c2 = concat_channels(&u2, &s0);
        let mut z7 = self.up2a.forward(&c2);
        add_channel_bias(&mut z7, &biases[4]);
        let a7 = silu(&z7);
        let z8 = self.up2b.forward(&a7);
        let a8 = silu(&z8);

        let y = self.outc.forward(&a8);
        Ok((
            y,
            UNetCache {
                x: x.clone(),
                emb,
                z_t,
                te,
                z0,
                h0,
                z0b,
                s0,
                z1,
                h1,
                z1b,
                s1,
                z2,
                h2,
                z3,
                m1,
                z4,
                c1,
                z5,
                a5,
                z6,
                c2,
                z7,
                a7,
                z8,
                a8,
            },
        ))
    }

    /// Predicted noise without retaining intermediates.
    pub fn predict(&self, x: &Array4<F>, steps: &[usize]) -> Result<Array4<F>> {
        Ok(self.forward(x, steps)?.0)
    }

    /// Backward pass accumulating parameter gradients.
    pub fn backward(&mut self, cache: &UNetCache<F>, gy: &Array4<F>) {
        let w = self.cfg.width;
        let mut gte = Array2::<F>::zeros(cache.te.dim());

        let ga8 = self.outc.backward(&cache.a8, gy);
        let gz8 = silu_grad(&cache.z8, &ga8);
        let ga7 = self.up2b.backward(&cache.a7, &gz8);
        let gz7 = silu_grad(&cache.z7, &ga7);
        gte += &self.heads[4].backward(&cache.te, &channel_sum(&gz7));
        let gc2 = self.up2a.backward(&cache.c2, &gz7);
        let (gu2, gs0_skip) = split_channels(&gc2, w);
        let ga6 = upsample2_grad(&gu2);
        let gz6 = silu_grad(&cache.z6, &ga6);
        let ga5 = self.up1b.backward(&cache.a5, &gz6);
        let gz5 = silu_grad(&cache.z5, &ga5);
        gte += &self.heads[3].backward(&cache.te, &channel_sum(&gz5));
        let gc1 = self.up1a.backward(&cache.c1, &gz5);
        let (gu1, gs1_skip) = split_channels(&gc1, w);

        let gm2 = upsample2_grad(&gu1);
        let gz4 = silu_grad(&cache.z4, &gm2);
        let gm1 = self.mid2.backward(&cache.m1, &gz4);
        let gz3 = silu_grad(&cache.z3, &gm1);
        let gh2 = self.mid1.backward(&cache.h2, &gz3);
        let gz2 = silu_grad(&cache.z2, &gh2);
        gte += &self.heads[2].backward(&cache.te, &channel_sum(&gz2));
        let gs1 = self.down2.backward(&cache.s1, &gz2) + &gs1_skip;

        let gz1b = silu_grad(&cache.z1b, &gs1);
        let gh1 = self.enc2.backward(&cache.h1, &gz1b);
        let gz1 = silu_grad(&cache.z1, &gh1);
        gte += &self.heads[1].backward(&cache.te, &channel_sum(&gz1));
        let gs0 = self.down1.backward(&cache.s0, &gz1) + &gs0_skip;

        let gz0b = silu_grad(&cache.z0b, &gs0);
        let gh0 = self.enc1.backward(&cache.h0, &gz0b);
        let gz0 = silu_grad(&cache.z0, &gh0);
        gte += &self.heads[0].backward(&cache.te, &channel_sum(&gz0));
        let _gx = self.stem.backward(&cache.x, &gz0);

        let gz_t = silu_grad(&cache.z_t, &gte);
        let _gemb = self.trunk.backward(&cache.emb, &gz_t);
    }
}

impl<F: Float> Module<F> for UNet<F> {
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [F], &mut [F])) {
        self.stem.visit_mut("stem", f);
        self.enc1.visit_mut("enc1", f);
        self.down1.visit_mut("down1", f);
        self.enc2.visit_mut("enc2", f);
        self.down2.visit_mut("down2", f);
        self.mid1.visit_mut("mid1", f);
        self.mid2.visit_mut("mid2", f);
        self.up1a.visit_mut("up1a", f);
        self.up1b.visit_mut("up1b", f);
        self.up2a.visit_mut("up2a", f);
        self.up2b.visit_mut("up2b", f);
        self.outc.visit_mut("outc", f);
        self.trunk.visit_mut("time.trunk", f);
        for (i, h) in self.heads.iter_mut().enumerate() {
            h.visit_mut(&format!("time.head{i}"), f);
        }
    }

    fn visit_params(&self, f: &mut dyn FnMut(&str, &[usize], &[F])) {
        self.stem.visit("stem", f);
        self.enc1.visit("enc1", f);
        self.down1.visit("down1", f);
        self.enc2.visit("enc2", f);
        self.down2.visit("down2", f);
        self.mid1.visit("mid1", f);
        self.mid2.visit("mid2", f);
        self.up1a.visit("up1a", f);
        self.up1b.visit("up1b", f);
        self.up2a.visit("up2a", f);
        self.up2b.visit("up2b", f);
        self.outc.visit("outc", f);
        self.trunk.visit("time.trunk", f);
        for (i, h) in self.heads.iter().enumerate() {
            h.visit(&format!("time.head{i}"), f);
        }
    }
}
