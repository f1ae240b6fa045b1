//! Synthetic dataset with the center-region labelling rule, dataset splits,
//! and the on-disk dataset container.
//!
//! Class 1 images carry a small bright lesion blob with at least one pixel
//! inside the central window; class 0 images have either no blob or a blob
//! entirely outside the window. Backgrounds are correlated noise fields drawn
//! from the same distribution for both classes, so the label signal is local.

use crate::container::{Reader, Writer};
use crate::error::{Error, Result};
use crate::image::ImageBatch;
use crate::rng::derive_rng;
use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

const DATA_MAGIC: &[u8; 8] = b"PKDATA01";
const DATA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Total sample count; must be even (classes are exactly balanced).
    pub n: usize,
    /// Square image side length.
    pub image_size: usize,
    /// Side length of the central label window.
    pub center_size: usize,
    pub lesion_radius_min: f32,
    pub lesion_radius_max: f32,
    /// Peak additive brightness of a lesion.
    pub lesion_amplitude: f32,
    /// Mean background level.
    pub background_base: f32,
    /// Standard deviation of the background texture.
    pub background_contrast: f32,
    /// Gaussian smoothing sigma that correlates the background field.
    pub background_smoothing: f32,
    /// Minimum clearance between a class-0 blob and the window.
    pub placement_margin: f32,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n: 2500,
            image_size: 32,
            center_size: 10,
            lesion_radius_min: 1.0,
            lesion_radius_max: 3.0,
            lesion_amplitude: 0.5,
            background_base: 0.45,
            background_contrast: 0.12,
            background_smoothing: 2.0,
            placement_margin: 1.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "sample count must be positive and even, got {}",
                self.n
            )));
        }
        if self.center_size == 0 || self.center_size >= self.image_size {
            return Err(Error::InvalidConfig(format!(
                "center window {} must be smaller than the image {}",
                self.center_size, self.image_size
            )));
        }
        if !(self.lesion_radius_min > 0.0 && self.lesion_radius_min <= self.lesion_radius_max) {
            return Err(Error::InvalidConfig(
                "lesion radius range must satisfy 0 < min <= max".into(),
            ));
        }
        // Class 0 must be able to place a blob entirely outside the window:
        // the image corner is the farthest point from the window.
        let w0 = self.window_start() as f32;
        let corner_dist = (w0 * w0 + w0 * w0).sqrt();
        if corner_dist <= self.lesion_radius_max + self.placement_margin {
            return Err(Error::InvalidConfig(format!(
                "lesion radius {} leaves no room outside the {}x{} center window",
                self.lesion_radius_max, self.center_size, self.center_size
            )));
        }
        Ok(())
    }

    /// First row/column of the central window.
    pub fn window_start(&self) -> usize {
        (self.image_size - self.center_size) / 2
    }

    /// Whether a point lies strictly outside the window by at least `margin`.
    fn clear_of_window(&self, row: f32, col: f32, margin: f32) -> bool {
        let lo = self.window_start() as f32;
        let hi = lo + self.center_size as f32 - 1.0;
        let dr = (lo - row).max(row - hi).max(0.0);
        let dc = (lo - col).max(col - hi).max(0.0);
        (dr * dr + dc * dc).sqrt() > margin
    }
}

/// Blob geometry of one sample; `None` means no lesion was drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lesion {
    pub row: f32,
    pub col: f32,
    pub radius: f32,
}

/// Re-derive the label from blob geometry: 1 iff at least one pixel of the
/// central window lies within the lesion radius.
pub fn derive_label(spec: &SyntheticSpec, lesion: Option<&Lesion>) -> u8 {
    let Some(l) = lesion else { return 0 };
    let w0 = spec.window_start();
    for r in w0..w0 + spec.center_size {
        for c in w0..w0 + spec.center_size {
            let dr = r as f32 - l.row;
            let dc = c as f32 - l.col;
            if (dr * dr + dc * dc).sqrt() <= l.radius {
                return 1;
            }
        }
    }
    0
}

/// Labelled images plus everything needed to regenerate them.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: ImageBatch,
    pub labels: Vec<u8>,
    pub spec: SyntheticSpec,
    pub seed: u64,
}

/// Generate the synthetic dataset. Returns the dataset and each sample's
/// blob geometry so tests can re-derive labels independently.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(Dataset, Vec<Option<Lesion>>)> {
    spec.validate()?;
    let mut rng = derive_rng(seed, "datagen");
    let n = spec.n;
    let size = spec.image_size;

    let mut labels = vec![1u8; n / 2];
    labels.extend(std::iter::repeat_n(0u8, n / 2));
    labels.shuffle(&mut rng);

    let mut images = Array4::<f32>::zeros((n, 1, size, size));
    let mut lesions = Vec::with_capacity(n);
    for (idx, &label) in labels.iter().enumerate() {
        let mut field = background_field(spec, &mut rng);
        let lesion = place_lesion(spec, label, &mut rng)?;
        if let Some(l) = &lesion {
            render_lesion(&mut field, spec, l);
        }
        field.mapv_inplace(|v| v.clamp(0.0, 1.0));
        images
            .index_axis_mut(ndarray::Axis(0), idx)
            .index_axis_mut(ndarray::Axis(0), 0)
            .assign(&field);
        lesions.push(lesion);
    }
    Ok((
        Dataset {
            images: ImageBatch::new(images),
            labels,
            spec: *spec,
            seed,
        },
        lesions,
    ))
}

/// Correlated noise field: iid normal draws, Gaussian-smoothed, then scaled
/// to the requested mean and contrast.
fn background_field(spec: &SyntheticSpec, rng: &mut impl Rng) -> Array2<f32> {
    let size = spec.image_size;
    let raw = Array2::<f32>::from_shape_simple_fn((size, size), || {
        rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)
    });
    let smoothed = gaussian_blur(&raw, spec.background_smoothing);
    let mean = smoothed.mean().unwrap();
    let var = smoothed.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
    let std = var.sqrt().max(1e-6);
    smoothed.mapv(|v| spec.background_base + spec.background_contrast * (v - mean) / std)
}

fn gaussian_blur(x: &Array2<f32>, sigma: f32) -> Array2<f32> {
    if sigma <= 0.0 {
        return x.clone();
    }
    let half = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * half + 1) as usize);
    for i in -half..=half {
        kernel.push((-(i * i) as f32 / (2.0 * sigma * sigma)).exp());
    }
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.into_iter().map(|k| k / norm).collect();
    let (h, w) = x.dim();
    let clamp = |v: isize, max: usize| v.clamp(0, max as isize - 1) as usize;
    let mut rows = Array2::<f32>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let cc = clamp(c as isize + ki as isize - half, w);
                acc += kv * x[[r, cc]];
            }
            rows[[r, c]] = acc;
        }
    }
    let mut out = Array2::<f32>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let rr = clamp(r as isize + ki as isize - half, h);
                acc += kv * rows[[rr, c]];
            }
            out[[r, c]] = acc;
        }
    }
    out
}

fn place_lesion(spec: &SyntheticSpec, label: u8, rng: &mut impl Rng) -> Result<Option<Lesion>> {
    let radius = rng.random_range(spec.lesion_radius_min..=spec.lesion_radius_max);
    if label == 1 {
        // Center the blob on a window pixel (plus sub-pixel jitter), which
        // guarantees at least that pixel lies inside both window and radius.
        let w0 = spec.window_start();
        let row = rng.random_range(0..spec.center_size) + w0;
        let col = rng.random_range(0..spec.center_size) + w0;
        let jr: f32 = rng.random_range(-0.3..=0.3);
        let jc: f32 = rng.random_range(-0.3..=0.3);
        return Ok(Some(Lesion {
            row: row as f32 + jr,
            col: col as f32 + jc,
            radius,
        }));
    }
    // Class 0: half the samples carry no blob at all.
    if rng.random_range(0..2) == 0 {
        return Ok(None);
    }
    let size = spec.image_size;
    for _ in 0..10_000 {
        let row = rng.random_range(0..size) as f32 + rng.random_range(-0.3..=0.3);
        let col = rng.random_range(0..size) as f32 + rng.random_range(-0.3..=0.3);
        if spec.clear_of_window(row, col, radius + spec.placement_margin) {
            return Ok(Some(Lesion { row, col, radius }));
        }
    }
    Err(Error::InvalidConfig(
        "could not place a class-0 lesion outside the center window".into(),
    ))
}

/// Additive Gaussian-profile bright spot with peak `lesion_amplitude`.
fn render_lesion(field: &mut Array2<f32>, spec: &SyntheticSpec, l: &Lesion) {
    let sigma = l.radius / 2.0;
    let reach = (3.0 * sigma).ceil() as isize;
    let (h, w) = field.dim();
    let r0 = ((l.row as isize) - reach).max(0);
    let r1 = ((l.row as isize) + reach + 1).min(h as isize);
    let c0 = ((l.col as isize) - reach).max(0);
    let c1 = ((l.col as isize) + reach + 1).min(w as isize);
    for r in r0..r1 {
        for c in c0..c1 {
            let dr = r as f32 - l.row;
            let dc = c as f32 - l.col;
            let d2 = dr * dr + dc * dc;
            field[[r as usize, c as usize]] +=
                spec.lesion_amplitude * (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
}

/// Disjoint index partition of [0, n).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Deterministic shuffled partition by the given fractions (must sum to 1).
pub fn split_dataset(n: usize, fractions: (f64, f64, f64), seed: u64) -> Result<DatasetSplit> {
    let (ft, fv, fe) = fractions;
    if (ft + fv + fe - 1.0).abs() > 1e-9 || ft < 0.0 || fv < 0.0 || fe < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "split fractions must be non-negative and sum to 1, got {fractions:?}"
        )));
    }
    let n_train = (n as f64 * ft).floor() as usize;
    let n_val = (n as f64 * fv).floor() as usize;
    let n_test = n - n_train - n_val;
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::InvalidConfig(format!(
            "every split must be non-empty, got {n_train}/{n_val}/{n_test} of {n}"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut derive_rng(seed, "split"));
    let val = perm.split_off(n_train + n_val);
    let mut split = DatasetSplit {
        train: perm,
        val: Vec::new(),
        test: val,
    };
    split.val = split.train.split_off(n_train);
    Ok(split)
}

/// Write the dataset container: header (spec, seed, version), label array,
/// image array, digest.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = Writer::new(DATA_MAGIC, DATA_VERSION);
    w.u64(ds.seed);
    w.u64(ds.spec.n as u64);
    w.u32(ds.spec.image_size as u32);
    w.u32(ds.spec.center_size as u32);
    w.f32(ds.spec.lesion_radius_min);
    w.f32(ds.spec.lesion_radius_max);
    w.f32(ds.spec.lesion_amplitude);
    w.f32(ds.spec.background_base);
    w.f32(ds.spec.background_contrast);
    w.f32(ds.spec.background_smoothing);
    w.f32(ds.spec.placement_margin);
    let (c, h, wd) = ds.images.image_shape();
    w.u32(c as u32);
    w.u32(h as u32);
    w.u32(wd as u32);
    w.bytes(&ds.labels);
    w.f32_slice(ds.images.data.as_slice().expect("standard layout"));
    w.write_to(path)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut r = Reader::open(path, DATA_MAGIC, DATA_VERSION)?;
    let seed = r.u64()?;
    let n = r.u64()? as usize;
    let spec = SyntheticSpec {
        n,
        image_size: r.u32()? as usize,
        center_size: r.u32()? as usize,
        lesion_radius_min: r.f32()?,
        lesion_radius_max: r.f32()?,
        lesion_amplitude: r.f32()?,
        background_base: r.f32()?,
        background_contrast: r.f32()?,
        background_smoothing: r.f32()?,
        placement_margin: r.f32()?,
    };
    let c = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let labels = r.bytes(n)?;
    if labels.iter().any(|&l| l > 1) {
        return Err(r.corrupt("label outside {0, 1}"));
    }
    let pixels = r.f32_vec(n * c * h * w)?;
    if !r.exhausted() {
        return Err(r.corrupt("trailing bytes after image data"));
    }
    let images = Array4::from_shape_vec((n, c, h, w), pixels)
        .map_err(|e| r.corrupt(format!("image shape: {e}")))?;
    Ok(Dataset {
        images: ImageBatch::new(images),
        labels,
        spec,
        seed,
    })
}

const BATCH_MAGIC: &[u8; 8] = b"PKIMGB01";
const BATCH_VERSION: u32 = 1;

/// Write a bare labelled image batch (e.g. crafted adversarial examples).
pub fn save_batch(images: &ImageBatch, labels: &[u8], path: &Path) -> Result<()> {
    if images.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", images.len()),
            actual: format!("{}", labels.len()),
        });
    }
    let mut w = Writer::new(BATCH_MAGIC, BATCH_VERSION);
    let (c, h, wd) = images.image_shape();
    w.u64(images.len() as u64);
    w.u32(c as u32);
    w.u32(h as u32);
    w.u32(wd as u32);
    w.bytes(labels);
    w.f32_slice(images.data.as_slice().expect("standard layout"));
    w.write_to(path)
}

pub fn load_batch(path: &Path) -> Result<(ImageBatch, Vec<u8>)> {
    let mut r = Reader::open(path, BATCH_MAGIC, BATCH_VERSION)?;
    let n = r.u64()? as usize;
    let c = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let labels = r.bytes(n)?;
    let pixels = r.f32_vec(n * c * h * w)?;
    if !r.exhausted() {
        return Err(r.corrupt("trailing bytes after image data"));
    }
    let images = Array4::from_shape_vec((n, c, h, w), pixels)
        .map_err(|e| r.corrupt(format!("image shape: {e}")))?;
    Ok((ImageBatch::new(images), labels))
}
