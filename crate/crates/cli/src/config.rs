//! Run configuration: TOML file schema, flag overrides, and the resolved
//! echo written next to every run's outputs.
//!
//! Precedence, weakest first: built-in defaults, config file, the
//! `PUREKIT_OUT_DIR` environment variable (output directory only), flags.

use purekit_core::attacks::AttackConfig;
use purekit_core::data::SyntheticSpec;
use purekit_core::rng::{derive_seed, sha256_hex};
use purekit_core::schedule::ScheduleConfig;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Every stochastic consumer derives its own stream from this seed.
    pub master_seed: u64,
    pub out_dir: PathBuf,
    pub schedule: ScheduleConfig,
    pub data: DataSection,
    pub classifier_train: TrainSection,
    pub diffusion_train: DiffusionSection,
    pub adv_train: AdvTrainSection,
    pub attack: AttackSection,
    pub defense: DefenseSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            master_seed: 42,
            out_dir: PathBuf::from("runs"),
            schedule: ScheduleConfig::default(),
            data: DataSection::default(),
            classifier_train: TrainSection::default(),
            diffusion_train: DiffusionSection::default(),
            adv_train: AdvTrainSection::default(),
            attack: AttackSection::default(),
            defense: DefenseSection::default(),
            eval: EvalSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n: usize,
    pub image_size: usize,
    pub center_size: usize,
    pub lesion_radius_min: f32,
    pub lesion_radius_max: f32,
    pub lesion_amplitude: f32,
    pub background_base: f32,
    pub background_contrast: f32,
    pub background_smoothing: f32,
    pub placement_margin: f32,
    /// Train/val/test fractions; must sum to 1.
    pub split: [f64; 3],
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        Self {
            n: s.n,
            image_size: s.image_size,
            center_size: s.center_size,
            lesion_radius_min: s.lesion_radius_min,
            lesion_radius_max: s.lesion_radius_max,
            lesion_amplitude: s.lesion_amplitude,
            background_base: s.background_base,
            background_contrast: s.background_contrast,
            background_smoothing: s.background_smoothing,
            placement_margin: s.placement_margin,
            split: [0.8, 0.1, 0.1],
        }
    }
}

impl DataSection {
    pub fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            n: self.n,
            image_size: self.image_size,
            center_size: self.center_size,
            lesion_radius_min: self.lesion_radius_min,
            lesion_radius_max: self.lesion_radius_max,
            lesion_amplitude: self.lesion_amplitude,
            background_base: self.background_base,
            background_contrast: self.background_contrast,
            background_smoothing: self.background_smoothing,
            placement_margin: self.placement_margin,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 64,
            learning_rate: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub width: usize,
    pub time_dim: usize,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 3e-4,
            width: 32,
            time_dim: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdvTrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// PGD steps of the inner maximisation (fewer than evaluation attacks).
    pub attack_steps: usize,
    /// Inner-attack radius; defaults to the [attack] section's epsilon.
    pub epsilon: Option<f64>,
    pub step_size: Option<f64>,
    /// Validation subset used for the per-epoch accuracy curves.
    pub val_subset: usize,
}

impl Default for AdvTrainSection {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 64,
            learning_rate: 1e-3,
            attack_steps: 7,
            epsilon: None,
            step_size: None,
            val_subset: 120,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub epsilon: f64,
    pub num_steps: usize,
    /// Defaults to epsilon / 4 when absent.
    pub step_size: Option<f64>,
    pub random_start: bool,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            epsilon: 2.0 / 255.0,
            num_steps: 20,
            step_size: None,
            random_start: true,
        }
    }
}

impl AttackSection {
    pub fn config(&self, seed: u64) -> AttackConfig {
        AttackConfig {
            epsilon: self.epsilon,
            num_steps: self.num_steps,
            step_size: self.step_size.unwrap_or(self.epsilon / 4.0),
            random_start: self.random_start,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseSection {
    /// Operating noise level for noise/purify defenses.
    pub t: f64,
    /// Defense kinds evaluated by `eval`, in report order.
    pub kinds: Vec<String>,
}

impl Default for DefenseSection {
    fn default() -> Self {
        Self {
            t: 0.04,
            kinds: vec![
                "none".into(),
                "noise".into(),
                "purify".into(),
                "adv_trained".into(),
            ],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Test samples evaluated (taken from the front of the test split).
    pub n_test: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { n_test: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub t_min: f64,
    pub t_max: f64,
    pub points: usize,
    /// Validation samples used per grid point.
    pub subset: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            t_min: 0.001,
            t_max: 0.300,
            points: 12,
            subset: 48,
        }
    }
}

impl SweepSection {
    /// Geometric grid from t_min to t_max inclusive.
    pub fn grid(&self) -> Result<Vec<f64>, CliError> {
        if !(self.t_min > 0.0 && self.t_min < self.t_max && self.t_max <= 1.0) {
            return Err(CliError::config(format!(
                "sweep range must satisfy 0 < t_min < t_max <= 1, got [{}, {}]",
                self.t_min, self.t_max
            )));
        }
        if self.points < 2 {
            return Err(CliError::config("sweep needs at least 2 grid points"));
        }
        let ratio = (self.t_max / self.t_min).powf(1.0 / (self.points - 1) as f64);
        let mut grid: Vec<f64> = (0..self.points)
            .map(|i| self.t_min * ratio.powi(i as i32))
            .collect();
        grid[self.points - 1] = self.t_max;
        Ok(grid)
    }
}

impl RunConfig {
    /// Load from a TOML file; any unknown key or type error is a config error.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::missing_file(path, &e.to_string()))?;
        toml::from_str(&text)
            .map_err(|e| CliError::config(format!("config file {path:?}: {e}")))
    }

    /// Named derived seeds handed to each stochastic component.
    pub fn derived_seeds(&self) -> BTreeMap<String, u64> {
        let m = self.master_seed;
        let mut seeds = BTreeMap::new();
        for label in [
            "data",
            "split",
            "train-classifier",
            "train-diffusion",
            "adv-train-attack",
            "attack",
            "defense",
            "sweep",
            "dump",
        ] {
            seeds.insert(label.to_string(), derive_seed(m, label));
        }
        seeds
    }

    pub fn seed_for(&self, label: &str) -> u64 {
        derive_seed(self.master_seed, label)
    }

    /// Deterministic run identifier: master seed plus the configuration
    /// content (paths excluded).
    pub fn run_id(&self, subcommand: &str) -> String {
        let mut for_id = self.clone();
        for_id.out_dir = PathBuf::new();
        let body = toml::to_string(&for_id).expect("config serializes");
        let mut bytes = self.master_seed.to_le_bytes().to_vec();
        bytes.extend_from_slice(subcommand.as_bytes());
        bytes.extend_from_slice(body.as_bytes());
        sha256_hex(&bytes)[..12].to_string()
    }

    /// Write the resolved config, derived seeds, and input-file hashes into
    /// the output directory.
    pub fn echo(
        &self,
        subcommand: &str,
        inputs: &BTreeMap<String, String>,
    ) -> Result<(), CliError> {
        std::fs::create_dir_all(&self.out_dir)
            .map_err(|e| CliError::runtime(format!("create {:?}: {e}", self.out_dir)))?;
        let mut text = String::new();
        text.push_str(&format!(
            "# resolved configuration (run_id {}, subcommand {subcommand})\n",
            self.run_id(subcommand)
        ));
        text.push_str(&toml::to_string_pretty(self).expect("config serializes"));
        text.push_str("\n[derived_seeds]\n");
        for (label, seed) in self.derived_seeds() {
            text.push_str(&format!("\"{label}\" = {seed}\n"));
        }
        if !inputs.is_empty() {
            text.push_str("\n[input_hashes]\n");
            for (path, hash) in inputs {
                text.push_str(&format!("\"{path}\" = \"{hash}\"\n"));
            }
        }
        let path = self.out_dir.join("resolved_config.toml");
        std::fs::write(&path, text).map_err(|e| CliError::runtime(format!("write {path:?}: {e}")))
    }
}

/// SHA-256 of a file on disk, for the input-hash echo.
pub fn hash_file(path: &Path) -> Result<String, CliError> {
    let bytes =
        std::fs::read(path).map_err(|e| CliError::missing_file(path, &e.to_string()))?;
    Ok(sha256_hex(&bytes))
}
