//! Binary image classifier: training, probability inference, and the
//! input-gradient primitive the attacks are built on.

use crate::error::{Error, Result};
use crate::image::ImageBatch;
use crate::nn::{cross_entropy_sum, softmax_rows, zero_grads, Adam, CnnConfig, SmallCnn};
use crate::rng::derive_rng;
use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// Anything that maps an image batch to per-class probabilities.
///
/// The trained network implements this; evaluation tests also plug in stubs.
pub trait ProbModel {
    fn probs(&self, x: &ImageBatch) -> Result<Array2<f32>>;
}

impl ProbModel for SmallCnn<f32> {
    fn probs(&self, x: &ImageBatch) -> Result<Array2<f32>> {
        predict(self, x)
    }
}

/// Per-class probabilities; rows are non-negative and sum to one.
pub fn predict(classifier: &SmallCnn<f32>, x: &ImageBatch) -> Result<Array2<f32>> {
    let logits = classifier.logits(&x.data)?;
    Ok(softmax_rows(&logits))
}

/// Summed cross-entropy loss over the batch and its gradient w.r.t. the
/// input pixels. The sum (not the mean) is returned, so each duplicated
/// example contributes twice.
pub fn loss_and_input_grad(
    classifier: &SmallCnn<f32>,
    x: &ImageBatch,
    labels: &[u8],
) -> Result<(f32, Array4<f32>)> {
    if x.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", x.len()),
            actual: format!("{}", labels.len()),
        });
    }
    let (logits, cache) = classifier.forward(&x.data)?;
    let (loss, glogits) = cross_entropy_sum(&logits, labels);
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            what: "classifier loss".into(),
            batch_index: None,
        });
    }
    let grad = classifier.input_gradient(&cache, &glogits);
    for (bi, img) in grad.outer_iter().enumerate() {
        if img.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "input gradient".into(),
                batch_index: Some(bi),
            });
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Std of Gaussian pixel noise added to each training batch (clamped back
    /// into [0, 1]). Keeps the classifier from keying on single-pixel texture,
    /// the way a large pretrained backbone wouldn't. Zero disables it.
    pub augment_noise: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
            augment_noise: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig(
                "batch size and learning rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub classifier: SmallCnn<f32>,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Validation standard accuracy per epoch, when a validation set was given.
    pub val_accuracy: Vec<f64>,
}

/// Train on clean images. Initialisation and batch order are independent
/// ChaCha streams derived from `cfg.seed`, so reruns are bit-identical.
///
/// `epochs = 0` is a valid degenerate case: the freshly initialised network
/// is returned untouched.
pub fn train_classifier(
    images: &ImageBatch,
    labels: &[u8],
    val: Option<(&ImageBatch, &[u8])>,
    arch: CnnConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if images.is_empty() {
        return Err(Error::EmptyInput("classifier training set".into()));
    }
    if images.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", images.len()),
            actual: format!("{}", labels.len()),
        });
    }
    cfg.validate()?;
    let mut init_rng = derive_rng(cfg.seed, "classifier-init");
    let mut net = SmallCnn::<f32>::new(arch, &mut init_rng);
    let mut optimizer = Adam::new(cfg.learning_rate);
    let mut batch_rng = derive_rng(cfg.seed, "classifier-batches");
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut val_accuracy = Vec::new();
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut batch_rng);
        let mut total = 0.0f64;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = images.select_batch(chunk);
            augment(&mut batch, cfg.augment_noise, &mut batch_rng);
            let batch_labels: Vec<u8> = chunk.iter().map(|&i| labels[i]).collect();
            let loss = train_step(&mut net, &batch, &batch_labels, &mut optimizer)?;
            total += loss as f64 * chunk.len() as f64;
            seen += chunk.len();
        }
        epoch_losses.push(total / seen as f64);
        if let Some((vx, vy)) = val {
            val_accuracy.push(accuracy(&predict(&net, vx)?, vy));
        }
    }
    Ok(TrainOutcome {
        classifier: net,
        epoch_losses,
        val_accuracy,
    })
}

/// Add clamped Gaussian pixel noise to a training batch in place.
/// Both training loops (plain and adversarial) call this with the same
/// stream in the same order, so an epsilon-zero adversarial run consumes
/// randomness identically to plain training.
pub(crate) fn augment(batch: &mut ImageBatch, std: f64, rng: &mut rand_chacha::ChaCha12Rng) {
    if std <= 0.0 {
        return;
    }
    let noise: Array4<f32> = crate::nn::randn(batch.data.dim(), rng);
    let s = std as f32;
    ndarray::Zip::from(&mut batch.data)
        .and(&noise)
        .for_each(|v, &z| *v = (*v + s * z).clamp(0.0, 1.0));
}

/// One optimizer update on a batch; returns the pre-update mean loss.
pub fn train_step(
    net: &mut SmallCnn<f32>,
    batch: &ImageBatch,
    labels: &[u8],
    optimizer: &mut Adam<f32>,
) -> Result<f32> {
    let (logits, cache) = net.forward(&batch.data)?;
    let (loss_sum, mut glogits) = cross_entropy_sum(&logits, labels);
    let mean_loss = loss_sum / batch.len() as f32;
    if !mean_loss.is_finite() {
        return Err(Error::NonFinite {
            what: "classifier loss".into(),
            batch_index: None,
        });
    }
    glogits.mapv_inplace(|g| g / batch.len() as f32);
    zero_grads(net);
    net.backward(&cache, &glogits);
    optimizer.step(net);
    Ok(mean_loss)
}

/// Fraction of argmax predictions matching the labels.
pub fn accuracy(probs: &Array2<f32>, labels: &[u8]) -> f64 {
    let correct = probs
        .outer_iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y as usize)
        .count();
    correct as f64 / labels.len() as f64
}

/// Accuracy broken down by true class: (correct per class, totals per class).
pub fn per_class_counts(probs: &Array2<f32>, labels: &[u8]) -> ([usize; 2], [usize; 2]) {
    let mut correct = [0usize; 2];
    let mut total = [0usize; 2];
    for (row, &y) in probs.outer_iter().zip(labels) {
        total[y as usize] += 1;
        if argmax(&row) == y as usize {
            correct[y as usize] += 1;
        }
    }
    (correct, total)
}

fn argmax(row: &ndarray::ArrayView1<f32>) -> usize {
    let mut best = 0;
    let mut best_v = row[0];
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}
