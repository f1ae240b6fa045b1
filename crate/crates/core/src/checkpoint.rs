//! Versioned model checkpoints.
//!
//! Layout (after the container magic/version): a kind tag, the training
//! seed, the kind-specific architecture block (plus schedule configuration
//! for the noise predictor), then each parameter tensor as (name, shape,
//! f32 data) in the module's fixed visit order, and the container digest.
//! Save -> load -> save reproduces the file byte for byte.

use crate::container::{Reader, Writer};
use crate::error::{Error, Result};
use crate::nn::{CnnConfig, Module, SmallCnn, UNet, UNetConfig};
use crate::rng::derive_rng;
use crate::schedule::ScheduleConfig;
use std::collections::HashMap;
use std::path::Path;

const CKPT_MAGIC: &[u8; 8] = b"PKCKPT01";
const CKPT_VERSION: u32 = 1;

const KIND_CLASSIFIER: u8 = 1;
const KIND_PREDICTOR: u8 = 2;

/// A model plus the metadata needed to reconstruct and reseed it.
pub enum Checkpoint {
    Classifier {
        net: SmallCnn<f32>,
        seed: u64,
    },
    Predictor {
        net: UNet<f32>,
        schedule: ScheduleConfig,
        seed: u64,
    },
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut w = Writer::new(CKPT_MAGIC, CKPT_VERSION);
    match ckpt {
        Checkpoint::Classifier { net, seed } => {
            w.u8(KIND_CLASSIFIER);
            w.u64(*seed);
            w.u32(net.cfg.in_channels as u32);
            for width in net.cfg.widths {
                w.u32(width as u32);
            }
            w.u32(net.cfg.classes as u32);
            w.u32(net.cfg.image_size as u32);
            write_tensors(&mut w, net);
        }
        Checkpoint::Predictor {
            net,
            schedule,
            seed,
        } => {
            w.u8(KIND_PREDICTOR);
            w.u64(*seed);
            w.u32(net.cfg.in_channels as u32);
            w.u32(net.cfg.width as u32);
            w.u32(net.cfg.time_dim as u32);
            w.u32(schedule.num_steps as u32);
            w.f64(schedule.beta_start);
            w.f64(schedule.beta_end);
            write_tensors(&mut w, net);
        }
    }
    w.write_to(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = Reader::open(path, CKPT_MAGIC, CKPT_VERSION)?;
    let kind = r.u8()?;
    let seed = r.u64()?;
    match kind {
        KIND_CLASSIFIER => {
            let cfg = CnnConfig {
                in_channels: r.u32()? as usize,
                widths: [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize],
                classes: r.u32()? as usize,
                image_size: r.u32()? as usize,
            };
            // Weights are fully overwritten below; the init stream is a dummy.
            let mut net = SmallCnn::<f32>::new(cfg, &mut derive_rng(0, "checkpoint-load"));
            read_tensors(&mut r, &mut net)?;
            Ok(Checkpoint::Classifier { net, seed })
        }
        KIND_PREDICTOR => {
            let cfg = UNetConfig {
                in_channels: r.u32()? as usize,
                width: r.u32()? as usize,
                time_dim: r.u32()? as usize,
            };
            let schedule = ScheduleConfig {
                num_steps: r.u32()? as usize,
                beta_start: r.f64()?,
                beta_end: r.f64()?,
            };
            let mut net = UNet::<f32>::new(cfg, &mut derive_rng(0, "checkpoint-load"));
            read_tensors(&mut r, &mut net)?;
            Ok(Checkpoint::Predictor {
                net,
                schedule,
                seed,
            })
        }
        other => Err(r.corrupt(format!("unknown model kind {other}"))),
    }
}

pub fn save_classifier(path: &Path, net: &SmallCnn<f32>, seed: u64) -> Result<()> {
    save_checkpoint(
        &Checkpoint::Classifier {
            net: net.clone(),
            seed,
        },
        path,
    )
}

pub fn load_classifier(path: &Path) -> Result<(SmallCnn<f32>, u64)> {
    match load_checkpoint(path)? {
        Checkpoint::Classifier { net, seed } => Ok((net, seed)),
        Checkpoint::Predictor { .. } => Err(Error::CheckpointMismatch(format!(
            "{path:?} holds a noise predictor, expected a classifier"
        ))),
    }
}

pub fn save_predictor(
    path: &Path,
    net: &UNet<f32>,
    schedule: &ScheduleConfig,
    seed: u64,
) -> Result<()> {
    save_checkpoint(
        &Checkpoint::Predictor {
            net: net.clone(),
            schedule: *schedule,
            seed,
        },
        path,
    )
}

pub fn load_predictor(path: &Path) -> Result<(UNet<f32>, ScheduleConfig, u64)> {
    match load_checkpoint(path)? {
        Checkpoint::Predictor {
            net,
            schedule,
            seed,
        } => Ok((net, schedule, seed)),
        Checkpoint::Classifier { .. } => Err(Error::CheckpointMismatch(format!(
            "{path:?} holds a classifier, expected a noise predictor"
        ))),
    }
}

fn write_tensors<M: Module<f32>>(w: &mut Writer, module: &M) {
    let mut count = 0u32;
    module.visit_params(&mut |_, _, _| count += 1);
    w.u32(count);
    module.visit_params(&mut |name, shape, values| {
        w.str(name);
        w.u32(shape.len() as u32);
        for &d in shape {
            w.u32(d as u32);
        }
        w.f32_slice(values);
    });
}

fn read_tensors<M: Module<f32>>(r: &mut Reader, module: &mut M) -> Result<()> {
    let count = r.u32()? as usize;
    let mut tensors: HashMap<String, (Vec<usize>, Vec<f32>)> = HashMap::with_capacity(count);
    for _ in 0..count {
        let name = r.str()?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let values = r.f32_vec(len)?;
        tensors.insert(name, (shape, values));
    }
    let mut err: Option<Error> = None;
    let mut used = 0usize;
    module.visit_params_mut(&mut |name, shape, values, _| {
        if err.is_some() {
            return;
        }
        match tensors.get(name) {
            None => {
                err = Some(Error::CheckpointMismatch(format!(
                    "missing tensor {name:?}"
                )));
            }
            Some((stored_shape, stored)) => {
                if stored_shape != shape {
                    err = Some(Error::CheckpointMismatch(format!(
                        "tensor {name:?} has shape {stored_shape:?}, expected {shape:?}"
                    )));
                    return;
                }
                values.copy_from_slice(stored);
                used += 1;
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if used != tensors.len() {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint holds {} tensors, model consumes {used}",
            tensors.len()
        )));
    }
    Ok(())
}
