//! Diffusion-based adversarial purification at desk scale.
//!
//! The crate trains a small DDPM denoiser and a binary CNN classifier on a
//! synthetic dataset, crafts L∞ PGD adversarial examples, and compares three
//! defenses (Gaussian noise smoothing, diffusion purification, adversarial
//! training) against the undefended pipeline. Everything is seeded: identical
//! seeds reproduce identical accuracy figures bit for bit.

pub mod attacks;
pub mod checkpoint;
pub(crate) mod container;
pub mod classifier;
pub mod data;
pub mod defenses;
pub mod diffusion;
pub mod error;
pub mod evalharness;
pub mod image;
pub mod nn;
pub mod rng;
pub mod schedule;

pub use error::{Error, Result};
pub use image::ImageBatch;
pub use schedule::{NoiseSchedule, TimeFraction};
