//! The defended classification pipelines: noise-only smoothing, diffusion
//! purification, and adversarially trained weights.

use crate::attacks::{pgd_attack, AttackConfig};
use crate::classifier::{accuracy, predict, train_step, ProbModel, TrainConfig};
use crate::diffusion::{forward_diffuse, purify};
use crate::error::{Error, Result};
use crate::image::ImageBatch;
use crate::nn::{Adam, CnnConfig, SmallCnn, UNet};
use crate::rng::{derive_rng, derive_seed};
use crate::schedule::{fraction_to_step, NoiseSchedule, TimeFraction};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

/// Validation standard accuracy within this distance of chance counts as a
/// collapsed epoch.
pub const COLLAPSE_BAND: f64 = 0.02;
/// Number of consecutive collapsed epochs that latches the collapse flag.
pub const COLLAPSE_EPOCHS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    None,
    Noise,
    Purify,
    AdvTrained,
}

impl std::fmt::Display for DefenseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DefenseKind::None => "none",
            DefenseKind::Noise => "noise",
            DefenseKind::Purify => "purify",
            DefenseKind::AdvTrained => "adv_trained",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for DefenseKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(DefenseKind::None),
            "noise" => Ok(DefenseKind::Noise),
            "purify" => Ok(DefenseKind::Purify),
            "adv_trained" => Ok(DefenseKind::AdvTrained),
            other => Err(Error::InvalidConfig(format!(
                "unknown defense kind {other:?} (expected none|noise|purify|adv_trained)"
            ))),
        }
    }
}

/// One defended pipeline: the kind, its noise level where applicable, and
/// the seed its stochastic draws derive from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefenseSpec {
    pub kind: DefenseKind,
    pub t: Option<f64>,
    pub seed: u64,
}

impl DefenseSpec {
    pub fn new(kind: DefenseKind, t: Option<f64>, seed: u64) -> Result<Self> {
        let spec = Self { kind, t, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let needs_t = matches!(self.kind, DefenseKind::Noise | DefenseKind::Purify);
        match (needs_t, self.t) {
            (true, None) => Err(Error::InvalidConfig(format!(
                "defense {} requires a noise level t",
                self.kind
            ))),
            (false, Some(_)) => Err(Error::InvalidConfig(format!(
                "defense {} does not take a noise level",
                self.kind
            ))),
            (true, Some(t)) => {
                TimeFraction::new(t)?;
                Ok(())
            }
            (false, None) => Ok(()),
        }
    }

    /// Noise level as a checked fraction; only valid for noise/purify kinds.
    pub fn fraction(&self) -> Result<TimeFraction> {
        TimeFraction::new(self.t.ok_or_else(|| {
            Error::InvalidConfig(format!("defense {} has no noise level", self.kind))
        })?)
    }
}

/// Diffuse the input to round(t·T), clamp back into the classifier's [0, 1]
/// domain, and classify the noisy image directly.
pub fn noise_defense_classify<M: ProbModel + ?Sized>(
    classifier: &M,
    x: &ImageBatch,
    t: TimeFraction,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha12Rng,
) -> Result<Array2<f32>> {
    let k = fraction_to_step(t, schedule);
    if k == 0 {
        return classifier.probs(x);
    }
    let (noisy, _) = forward_diffuse(x, k, schedule, rng)?;
    classifier.probs(&noisy.clamp01())
}

/// Purify the input through the diffusion model, then classify.
pub fn purify_classify<M: ProbModel + ?Sized>(
    classifier: &M,
    predictor: &UNet<f32>,
    x: &ImageBatch,
    t: TimeFraction,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha12Rng,
) -> Result<Array2<f32>> {
    let purified = purify(x, t, predictor, schedule, rng)?;
    classifier.probs(&purified)
}

#[derive(Debug, Clone)]
pub struct AdvEpochStats {
    pub train_loss: f64,
    pub val_standard_acc: f64,
    pub val_robust_acc: f64,
}

#[derive(Debug)]
pub struct AdvTrainOutcome {
    pub classifier: SmallCnn<f32>,
    pub epochs: Vec<AdvEpochStats>,
    /// True when validation standard accuracy sat within `COLLAPSE_BAND` of
    /// chance for `COLLAPSE_EPOCHS` consecutive epochs — the failure mode
    /// where the network degenerates to random guessing.
    pub collapsed: bool,
}

/// Min-max adversarial training: every batch is replaced by a fresh PGD
/// attack against the live weights before the gradient step.
///
/// With `attack.epsilon = 0` the inner maximisation is the identity and the
/// run reduces exactly to plain training: initialisation and batch order come
/// from the same derived streams as `train_classifier`, and attack draws use
/// a separate stream that never touches them.
pub fn adversarial_train(
    images: &ImageBatch,
    labels: &[u8],
    val: (&ImageBatch, &[u8]),
    arch: CnnConfig,
    attack: &AttackConfig,
    cfg: &TrainConfig,
) -> Result<AdvTrainOutcome> {
    if images.is_empty() {
        return Err(Error::EmptyInput("adversarial training set".into()));
    }
    attack.validate()?;
    cfg.validate()?;
    let mut init_rng = derive_rng(cfg.seed, "classifier-init");
    let mut net = SmallCnn::<f32>::new(arch, &mut init_rng);
    let mut optimizer = Adam::new(cfg.learning_rate);
    let mut batch_rng = derive_rng(cfg.seed, "classifier-batches");
    let attack_seed_base = derive_seed(attack.seed, "adv-train-attacks");
    let val_attack_seed = derive_seed(attack.seed, "adv-train-val-attacks");

    let (vx, vy) = val;
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut collapsed = false;
    let mut chance_streak = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut batch_rng);
        let mut total = 0.0f64;
        let mut seen = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = images.select_batch(chunk);
            let batch_labels: Vec<u8> = chunk.iter().map(|&i| labels[i]).collect();
            let batch_attack = AttackConfig {
                seed: derive_seed(attack_seed_base, &format!("e{epoch}b{bi}")),
                ..*attack
            };
            let mut adv = pgd_attack(&net, &batch, &batch_labels, &batch_attack)?;
            // Same augmentation draw as plain training, from the same stream.
            crate::classifier::augment(&mut adv, cfg.augment_noise, &mut batch_rng);
            let loss = train_step(&mut net, &adv, &batch_labels, &mut optimizer)?;
            total += loss as f64 * chunk.len() as f64;
            seen += chunk.len();
        }
        let val_probs = predict(&net, vx)?;
        let val_standard_acc = accuracy(&val_probs, vy);
        let val_attack = AttackConfig {
            seed: derive_seed(val_attack_seed, &format!("e{epoch}")),
            ..*attack
        };
        let val_adv = pgd_attack(&net, vx, vy, &val_attack)?;
        let val_robust_acc = accuracy(&predict(&net, &val_adv)?, vy);
        epochs.push(AdvEpochStats {
            train_loss: total / seen as f64,
            val_standard_acc,
            val_robust_acc,
        });
        if (val_standard_acc - 0.5).abs() <= COLLAPSE_BAND {
            chance_streak += 1;
            if chance_streak >= COLLAPSE_EPOCHS {
                collapsed = true;
            }
        } else {
            chance_streak = 0;
        }
    }
    Ok(AdvTrainOutcome {
        classifier: net,
        epochs,
        collapsed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::train_classifier;
    use crate::nn::Module;
    use crate::schedule::make_linear_schedule;
    use ndarray::Array4;

    fn tiny_data(n: usize) -> (ImageBatch, Vec<u8>) {
        let mut labels = Vec::with_capacity(n);
        let images = Array4::from_shape_fn((n, 1, 8, 8), |(b, _, i, j)| {
            let one = b % 2 == 0;
            let d = ((i as f32 - 3.5).powi(2) + (j as f32 - 3.5).powi(2)).sqrt();
            if one && d < 2.5 {
                0.85
            } else {
                0.15
            }
        });
        for b in 0..n {
            labels.push(if b % 2 == 0 { 1 } else { 0 });
        }
        (ImageBatch::new(images), labels)
    }

    fn tiny_arch() -> CnnConfig {
        CnnConfig {
            in_channels: 1,
            widths: [4, 8, 8],
            classes: 2,
            image_size: 8,
        }
    }

    #[test]
    fn defense_spec_validation() {
        assert!(DefenseSpec::new(DefenseKind::Noise, Some(0.04), 0).is_ok());
        assert!(DefenseSpec::new(DefenseKind::Noise, None, 0).is_err());
        assert!(DefenseSpec::new(DefenseKind::None, Some(0.1), 0).is_err());
        assert!(DefenseSpec::new(DefenseKind::Purify, Some(1.5), 0).is_err());
    }

    #[test]
    fn noise_defense_at_zero_matches_plain_prediction() {
        let (x, _) = tiny_data(4);
        let net = SmallCnn::<f32>::new(tiny_arch(), &mut derive_rng(1, "d"));
        let s = make_linear_schedule(100, 1e-4, 0.02).unwrap();
        let t = TimeFraction::new(0.0).unwrap();
        let defended =
            noise_defense_classify(&net, &x, t, &s, &mut derive_rng(2, "noise")).unwrap();
        let plain = predict(&net, &x).unwrap();
        assert_eq!(defended, plain);
    }

    #[test]
    fn purify_defense_at_zero_matches_plain_prediction() {
        let (x, _) = tiny_data(4);
        let net = SmallCnn::<f32>::new(tiny_arch(), &mut derive_rng(3, "d"));
        let unet = UNet::<f32>::new(
            crate::nn::UNetConfig {
                in_channels: 1,
                width: 8,
                time_dim: 16,
            },
            &mut derive_rng(4, "u"),
        );
        let s = make_linear_schedule(100, 1e-4, 0.02).unwrap();
        let t = TimeFraction::new(0.0).unwrap();
        let defended =
            purify_classify(&net, &unet, &x, t, &s, &mut derive_rng(5, "purify")).unwrap();
        let plain = predict(&net, &x).unwrap();
        assert_eq!(defended, plain);
    }

    #[test]
    fn noise_defense_is_seed_deterministic() {
        let (x, _) = tiny_data(2);
        let net = SmallCnn::<f32>::new(tiny_arch(), &mut derive_rng(6, "d"));
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        let t = TimeFraction::new(0.04).unwrap();
        let a = noise_defense_classify(&net, &x, t, &s, &mut derive_rng(7, "n")).unwrap();
        let b = noise_defense_classify(&net, &x, t, &s, &mut derive_rng(7, "n")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn epsilon_zero_adversarial_training_reduces_to_plain_training() {
        let (x, y) = tiny_data(32);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 17,
        };
        let attack = AttackConfig {
            epsilon: 0.0,
            num_steps: 2,
            step_size: 0.01,
            random_start: true,
            seed: 23,
        };
        let adv = adversarial_train(&x, &y, (&x, &y), tiny_arch(), &attack, &cfg).unwrap();
        let plain = train_classifier(&x, &y, None, tiny_arch(), &cfg).unwrap();
        let mut identical = true;
        adv.classifier.visit_params(&mut |name, _, va| {
            plain.classifier.visit_params(&mut |name_b, _, vb| {
                if name == name_b && va != vb {
                    identical = false;
                }
            });
        });
        assert!(identical, "epsilon-zero run diverged from plain training");
    }

    #[test]
    fn adversarial_training_is_seed_deterministic() {
        let (x, y) = tiny_data(16);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 5,
        };
        let attack = AttackConfig {
            epsilon: 0.05,
            num_steps: 2,
            step_size: 0.02,
            random_start: true,
            seed: 9,
        };
        let a = adversarial_train(&x, &y, (&x, &y), tiny_arch(), &attack, &cfg).unwrap();
        let b = adversarial_train(&x, &y, (&x, &y), tiny_arch(), &attack, &cfg).unwrap();
        assert_eq!(a.collapsed, b.collapsed);
        for (ea, eb) in a.epochs.iter().zip(&b.epochs) {
            assert_eq!(ea.train_loss, eb.train_loss);
            assert_eq!(ea.val_standard_acc, eb.val_standard_acc);
            assert_eq!(ea.val_robust_acc, eb.val_robust_acc);
        }
    }

    #[test]
    fn collapse_flag_latches_on_chance_level_runs() {
        // Zero learning rate keeps the network at its random initialisation,
        // which predicts one constant class: exactly 0.5 on balanced data.
        let (x, y) = tiny_data(16);
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 8,
            learning_rate: 1e-12,
            seed: 2,
        };
        let attack = AttackConfig {
            epsilon: 0.01,
            num_steps: 1,
            step_size: 0.01,
            random_start: false,
            seed: 0,
        };
        let out = adversarial_train(&x, &y, (&x, &y), tiny_arch(), &attack, &cfg).unwrap();
        assert!(out.collapsed, "chance-level run should be flagged");
    }
}
