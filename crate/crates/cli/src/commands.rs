//! Subcommand implementations: wire configs, seeds, and files through the
//! library modules.

use crate::config::{hash_file, RunConfig};
use crate::{
    AdvTrainArgs, AttackArgs, AttackFlags, CliError, DataFlags, DumpImagesArgs, EvalArgs,
    GenDataArgs, ScheduleFlags, SweepArgs, TrainClassifierArgs, TrainDiffusionArgs,
};
use purekit_core::attacks::AttackConfig;
use purekit_core::checkpoint;
use purekit_core::classifier::{self, predict, TrainConfig};
use purekit_core::data::{self, Dataset, DatasetSplit};
use purekit_core::defenses::{adversarial_train, DefenseKind, DefenseSpec};
use purekit_core::diffusion::{train_diffusion as train_diffusion_model, DiffusionTrainConfig};
use purekit_core::evalharness::{
    craft_shared_attack, default_sweep_grid, dump_pipeline_images, emit_report_csv,
    emit_summary, emit_sweep_csv, evaluate, noise_sweep, select_t_star, EvalPipelines,
    SharedAttack,
};
use purekit_core::image::ImageBatch;
use purekit_core::nn::{CnnConfig, SmallCnn, UNet};
use purekit_core::schedule::{NoiseSchedule, ScheduleConfig, TimeFraction};
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

type Inputs = BTreeMap<String, String>;

fn record_input(inputs: &mut Inputs, path: &Path) -> Result<(), CliError> {
    inputs.insert(path.display().to_string(), hash_file(path)?);
    Ok(())
}

fn split_of(cfg: &RunConfig, n: usize) -> Result<DatasetSplit, CliError> {
    let [ft, fv, fe] = cfg.data.split;
    Ok(data::split_dataset(n, (ft, fv, fe), cfg.seed_for("split"))?)
}

fn load_dataset(path: &Path, inputs: &mut Inputs) -> Result<Dataset, CliError> {
    record_input(inputs, path)?;
    Ok(data::load_dataset(path)?)
}

fn load_classifier(path: &Path, inputs: &mut Inputs) -> Result<SmallCnn<f32>, CliError> {
    record_input(inputs, path)?;
    Ok(checkpoint::load_classifier(path)?.0)
}

/// Load the noise predictor and enforce that its stored schedule matches the
/// resolved run configuration.
fn load_predictor(
    path: &Path,
    expected: &ScheduleConfig,
    inputs: &mut Inputs,
) -> Result<(UNet<f32>, NoiseSchedule), CliError> {
    record_input(inputs, path)?;
    let (net, stored, _) = checkpoint::load_predictor(path)?;
    if stored != *expected {
        return Err(CliError::runtime(format!(
            "checkpoint {path:?} was trained with schedule {stored:?}, run config says {expected:?}"
        )));
    }
    Ok((net, NoiseSchedule::from_config(&stored)?))
}

fn apply_data_flags(cfg: &mut RunConfig, flags: &DataFlags) -> Result<(), CliError> {
    let d = &mut cfg.data;
    if let Some(v) = flags.n {
        d.n = v;
    }
    if let Some(v) = flags.image_size {
        d.image_size = v;
    }
    if let Some(v) = flags.center_size {
        d.center_size = v;
    }
    if let Some(v) = flags.lesion_radius_min {
        d.lesion_radius_min = v;
    }
    if let Some(v) = flags.lesion_radius_max {
        d.lesion_radius_max = v;
    }
    if let Some(v) = flags.lesion_amplitude {
        d.lesion_amplitude = v;
    }
    if let Some(v) = flags.background_base {
        d.background_base = v;
    }
    if let Some(v) = flags.background_contrast {
        d.background_contrast = v;
    }
    if let Some(v) = flags.background_smoothing {
        d.background_smoothing = v;
    }
    if let Some(v) = flags.placement_margin {
        d.placement_margin = v;
    }
    if let Some(v) = &flags.split {
        d.split = [v[0], v[1], v[2]];
    }
    Ok(())
}

fn apply_attack_flags(cfg: &mut RunConfig, flags: &AttackFlags) {
    if let Some(v) = flags.epsilon {
        cfg.attack.epsilon = v;
    }
    if let Some(v) = flags.attack_steps {
        cfg.attack.num_steps = v;
    }
    if let Some(v) = flags.step_size {
        cfg.attack.step_size = Some(v);
    }
    if let Some(v) = flags.random_start {
        cfg.attack.random_start = v;
    }
}

fn apply_schedule_flags(cfg: &mut RunConfig, flags: &ScheduleFlags) {
    if let Some(v) = flags.num_steps {
        cfg.schedule.num_steps = v;
    }
    if let Some(v) = flags.beta_start {
        cfg.schedule.beta_start = v;
    }
    if let Some(v) = flags.beta_end {
        cfg.schedule.beta_end = v;
    }
}

fn take_front(
    batch: &ImageBatch,
    labels: &[u8],
    indices: &[usize],
    n: usize,
) -> (ImageBatch, Vec<u8>) {
    let take: Vec<usize> = indices.iter().take(n).copied().collect();
    let images = batch.select_batch(&take);
    let y: Vec<u8> = take.iter().map(|&i| labels[i]).collect();
    (images, y)
}

pub fn gen_data(mut cfg: RunConfig, args: GenDataArgs) -> Result<(), CliError> {
    apply_data_flags(&mut cfg, &args.data)?;
    let out = args.out.unwrap_or_else(|| cfg.out_dir.join("dataset.pkd"));
    let spec = cfg.data.spec();
    let started = Instant::now();
    let (ds, _) = data::generate_synthetic(&spec, cfg.seed_for("data"))?;
    std::fs::create_dir_all(out.parent().unwrap_or(Path::new(".")))
        .map_err(|e| CliError::runtime(format!("create output dir: {e}")))?;
    data::save_dataset(&ds, &out)?;
    cfg.echo("gen-data", &BTreeMap::new())?;
    println!(
        "wrote {} samples ({}x{} px, center window {}) to {} in {:.1}s",
        spec.n,
        spec.image_size,
        spec.image_size,
        spec.center_size,
        out.display(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

pub fn train_classifier(mut cfg: RunConfig, args: TrainClassifierArgs) -> Result<(), CliError> {
    if let Some(v) = args.epochs {
        cfg.classifier_train.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.classifier_train.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.classifier_train.learning_rate = v;
    }
    let mut inputs = Inputs::new();
    let ds = load_dataset(&args.dataset, &mut inputs)?;
    let split = split_of(&cfg, ds.labels.len())?;
    let train_x = ds.images.select_batch(&split.train);
    let train_y: Vec<u8> = split.train.iter().map(|&i| ds.labels[i]).collect();
    let val_x = ds.images.select_batch(&split.val);
    let val_y: Vec<u8> = split.val.iter().map(|&i| ds.labels[i]).collect();

    let seed = cfg.seed_for("train-classifier");
    let tc = TrainConfig {
        epochs: cfg.classifier_train.epochs,
        batch_size: cfg.classifier_train.batch_size,
        learning_rate: cfg.classifier_train.learning_rate,
        seed,
    };
    let arch = CnnConfig {
        in_channels: ds.images.image_shape().0,
        image_size: ds.images.image_shape().1,
        ..CnnConfig::default()
    };
    let started = Instant::now();
    let out = classifier::train_classifier(&train_x, &train_y, Some((&val_x, &val_y)), arch, &tc)?;
    let ckpt = args.out.unwrap_or_else(|| cfg.out_dir.join("classifier.pkc"));
    std::fs::create_dir_all(ckpt.parent().unwrap_or(Path::new(".")))
        .map_err(|e| CliError::runtime(format!("create output dir: {e}")))?;
    checkpoint::save_classifier(&ckpt, &out.classifier, seed)?;
    cfg.echo("train-classifier", &inputs)?;
    println!(
        "trained classifier: {} epochs, final loss {:.4}, val accuracy {:.4}, {:.1}s -> {}",
        tc.epochs,
        out.epoch_losses.last().copied().unwrap_or(f64::NAN),
        out.val_accuracy.last().copied().unwrap_or(f64::NAN),
        started.elapsed().as_secs_f64(),
        ckpt.display()
    );
    Ok(())
}

pub fn train_diffusion(mut cfg: RunConfig, args: TrainDiffusionArgs) -> Result<(), CliError> {
    if let Some(v) = args.epochs {
        cfg.diffusion_train.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.diffusion_train.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.diffusion_train.learning_rate = v;
    }
    if let Some(v) = args.width {
        cfg.diffusion_train.width = v;
    }
    if let Some(v) = args.time_dim {
        cfg.diffusion_train.time_dim = v;
    }
    apply_schedule_flags(&mut cfg, &args.schedule);
    let mut inputs = Inputs::new();
    let ds = load_dataset(&args.dataset, &mut inputs)?;
    let split = split_of(&cfg, ds.labels.len())?;
    let train_x = ds.images.select_batch(&split.train);
    let schedule = NoiseSchedule::from_config(&cfg.schedule)?;
    let seed = cfg.seed_for("train-diffusion");
    let dc = DiffusionTrainConfig {
        epochs: cfg.diffusion_train.epochs,
        batch_size: cfg.diffusion_train.batch_size,
        learning_rate: cfg.diffusion_train.learning_rate,
        seed,
        width: cfg.diffusion_train.width,
        time_dim: cfg.diffusion_train.time_dim,
    };
    let started = Instant::now();
    let out = train_diffusion_model(&train_x, &schedule, &dc)?;
    let ckpt = args.out.unwrap_or_else(|| cfg.out_dir.join("diffusion.pkc"));
    std::fs::create_dir_all(ckpt.parent().unwrap_or(Path::new(".")))
        .map_err(|e| CliError::runtime(format!("create output dir: {e}")))?;
    checkpoint::save_predictor(&ckpt, &out.predictor, &cfg.schedule, seed)?;
    cfg.echo("train-diffusion", &inputs)?;
    println!(
        "trained denoiser: {} epochs, loss {:.4} -> {:.4}, {:.1}s -> {}",
        dc.epochs,
        out.epoch_losses.first().copied().unwrap_or(f64::NAN),
        out.epoch_losses.last().copied().unwrap_or(f64::NAN),
        started.elapsed().as_secs_f64(),
        ckpt.display()
    );
    Ok(())
}

pub fn adv_train(mut cfg: RunConfig, args: AdvTrainArgs) -> Result<(), CliError> {
    if let Some(v) = args.epochs {
        cfg.adv_train.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.adv_train.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.adv_train.learning_rate = v;
    }
    if let Some(v) = args.val_subset {
        cfg.adv_train.val_subset = v;
    }
    apply_attack_flags(&mut cfg, &args.attack);
    let mut inputs = Inputs::new();
    let ds = load_dataset(&args.dataset, &mut inputs)?;
    let split = split_of(&cfg, ds.labels.len())?;
    let train_x = ds.images.select_batch(&split.train);
    let train_y: Vec<u8> = split.train.iter().map(|&i| ds.labels[i]).collect();
    let (val_x, val_y) = take_front(&ds.images, &ds.labels, &split.val, cfg.adv_train.val_subset);

    let epsilon = cfg.adv_train.epsilon.unwrap_or(cfg.attack.epsilon);
    let attack = AttackConfig {
        epsilon,
        num_steps: cfg.adv_train.attack_steps,
        step_size: cfg.adv_train.step_size.unwrap_or(epsilon / 3.0),
        random_start: cfg.attack.random_start,
        seed: cfg.seed_for("adv-train-attack"),
    };
    let tc = TrainConfig {
        epochs: cfg.adv_train.epochs,
        batch_size: cfg.adv_train.batch_size,
        learning_rate: cfg.adv_train.learning_rate,
        seed: cfg.seed_for("train-classifier"),
    };
    let arch = CnnConfig {
        in_channels: ds.images.image_shape().0,
        image_size: ds.images.image_shape().1,
        ..CnnConfig::default()
    };
    let started = Instant::now();
    let out = adversarial_train(&train_x, &train_y, (&val_x, &val_y), arch, &attack, &tc)?;
    let ckpt = args
        .out
        .unwrap_or_else(|| cfg.out_dir.join("adv_classifier.pkc"));
    std::fs::create_dir_all(ckpt.parent().unwrap_or(Path::new(".")))
        .map_err(|e| CliError::runtime(format!("create output dir: {e}")))?;
    checkpoint::save_classifier(&ckpt, &out.classifier, tc.seed)?;
    cfg.echo("adv-train", &inputs)?;
    let last = out.epochs.last();
    println!(
        "adversarially trained: {} epochs, val standard {:.4}, val robust {:.4}, collapsed={}, {:.1}s -> {}",
        cfg.adv_train.epochs,
        last.map(|e| e.val_standard_acc).unwrap_or(f64::NAN),
        last.map(|e| e.val_robust_acc).unwrap_or(f64::NAN),
        out.collapsed,
        started.elapsed().as_secs_f64(),
        ckpt.display()
    );
    if out.collapsed {
        println!("warning: run collapsed to chance-level validation accuracy");
    }
    Ok(())
}

#[derive(Serialize)]
struct AttackManifest {
    epsilon: f64,
    num_steps: usize,
    step_size: f64,
    random_start: bool,
    seed: u64,
    n: usize,
    boundary_fraction: f64,
    adv_batch_hash: String,
}

pub fn attack(mut cfg: RunConfig, args: AttackArgs) -> Result<(), CliError> {
    apply_attack_flags(&mut cfg, &args.attack);
    if let Some(v) = args.n_test {
        cfg.eval.n_test = v;
    }
    let mut inputs = Inputs::new();
    let ds = load_dataset(&args.dataset, &mut inputs)?;
    let net = load_classifier(&args.classifier, &mut inputs)?;
    let split = split_of(&cfg, ds.labels.len())?;
    let (test_x, test_y) = take_front(&ds.images, &ds.labels, &split.test, cfg.eval.n_test);
    let attack_cfg = cfg.attack.config(cfg.seed_for("attack"));
    let started = Instant::now();
    let shared = craft_shared_attack(&net, &test_x, &test_y, &attack_cfg)?;
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CliError::runtime(format!("create output dir: {e}")))?;
    let batch_path = cfg.out_dir.join("adv_batch.pkb");
    data::save_batch(&shared.adv, &test_y, &batch_path)?;
    let manifest = AttackManifest {
        epsilon: attack_cfg.epsilon,
        num_steps: attack_cfg.num_steps,
        step_size: attack_cfg.step_size,
        random_start: attack_cfg.random_start,
        seed: attack_cfg.seed,
        n: test_y.len(),
        boundary_fraction: shared.boundary_fraction,
        adv_batch_hash: shared.hash.clone(),
    };
    let manifest_path = cfg.out_dir.join("adv_manifest.toml");
    std::fs::write(
        &manifest_path,
        toml::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| CliError::runtime(format!("write {manifest_path:?}: {e}")))?;
    cfg.echo("attack", &inputs)?;
    println!(
        "attacked {} samples (eps {:.5}, {} steps): boundary fraction {:.4}, {:.1}s -> {}",
        test_y.len(),
        attack_cfg.epsilon,
        attack_cfg.num_steps,
        shared.boundary_fraction,
        started.elapsed().as_secs_f64(),
        batch_path.display()
    );
    Ok(())
}

fn parse_defense_kinds(kinds: &[String]) -> Result<Vec<DefenseKind>, CliError> {
    kinds
        .iter()
        .map(|k| k.parse::<DefenseKind>().map_err(CliError::from))
        .collect()
}

pub fn eval(mut cfg: RunConfig, args: EvalArgs) -> Result<(), CliError> {
    apply_attack_flags(&mut cfg, &args.attack);
    if let Some(v) = args.t {
        cfg.defense.t = v;
    }
    if let Some(v) = &args.defenses {
        cfg.defense.kinds = v.clone();
    }
    if let Some(v) = args.n_test {
        cfg.eval.n_test = v;
    }
    let kinds = parse_defense_kinds(&cfg.defense.kinds)?;
    let mut inputs = Inputs::new();
    let ds = load_dataset(&args.dataset, &mut inputs)?;
    let vanilla = load_classifier(&args.classifier, &mut inputs)?;
    let needs_predictor = kinds.contains(&DefenseKind::Purify);
    let predictor = match (&args.diffusion, needs_predictor) {
        (Some(path), _) => Some(load_predictor(path, &cfg.schedule, &mut inputs)?),
        (None, true) => {
            return Err(CliError::config(
                "purify defense requested but --diffusion checkpoint not given",
            ))
        }
        (None, false) => None,
    };
    let adv_net = match (&args.adv_classifier, kinds.contains(&DefenseKind::AdvTrained)) {
        (Some(path), _) => Some(load_classifier(path, &mut inputs)?),
        (None, true) => {
            return Err(CliError::config(
                "adv_trained defense requested but --adv-classifier checkpoint not given",
            ))
        }
        (None, false) => None,
    };
    let schedule = match &predictor {
        Some((_, s)) => s.clone(),
        None => NoiseSchedule::from_config(&cfg.schedule)?,
    };

    let split = split_of(&cfg, ds.labels.len())?;
    let (test_x, test_y) = take_front(&ds.images, &ds.labels, &split.test, cfg.eval.n_test);
    let attack_cfg = cfg.attack.config(cfg.seed_for("attack"));
    let started = Instant::now();
    let shared = craft_shared_attack(&vanilla, &test_x, &test_y, &attack_cfg)?;

    let pipelines = EvalPipelines {
        vanilla: &vanilla,
        adv_trained: adv_net.as_ref().map(|n| n as _),
        predictor: predictor.as_ref().map(|(n, _)| n),
        schedule: &schedule,
    };
    let run_id = cfg.run_id("eval");
    let defense_seed = cfg.seed_for("defense");
    let mut reports = Vec::new();
    for kind in kinds {
        let t = matches!(kind, DefenseKind::Noise | DefenseKind::Purify).then_some(cfg.defense.t);
        let spec = DefenseSpec::new(kind, t, defense_seed)?;
        reports.push(evaluate(
            &pipelines, &spec, &test_x, &test_y, &shared, &run_id,
        )?);
    }
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CliError::runtime(format!("create output dir: {e}")))?;
    let csv_path = cfg.out_dir.join("eval.csv");
    emit_report_csv(&reports, &csv_path)?;
    emit_summary(&reports, None, &cfg.out_dir.join("eval_summary.txt"))?;
    cfg.echo("eval", &inputs)?;
    for r in &reports {
        println!(
            "{:<12} standard {:.4}  robust {:.4}",
            r.defense.kind.to_string(),
            r.standard_accuracy,
            r.robust_accuracy
        );
    }
    println!(
        "evaluated {} defenses on {} samples in {:.1}s -> {}",
        reports.len(),
        test_y.len(),
        started.elapsed().as_secs_f64(),
        csv_path.display()
    );
    Ok(())
}

pub fn sweep(mut cfg: RunConfig, args: SweepArgs) -> Result<(), CliError> {
    apply_attack_flags(&mut cfg, &args.attack);
    if let Some(v) = args.t_min {
        cfg.sweep.t_min = v;
    }
    if let Some(v) = args.t_max {
        cfg.sweep.t_max = v;
    }
    if let Some(v) = args.points {
        cfg.sweep.points = v;
    }
    if let Some(v) = args.subset {
        cfg.sweep.subset = v;
    }
    let mut inputs = Inputs::new();
    let ds = load_dataset(&args.dataset, &mut inputs)?;
    let vanilla = load_classifier(&args.classifier, &mut inputs)?;
    let (predictor, schedule) = load_predictor(&args.diffusion, &cfg.schedule, &mut inputs)?;
    let split = split_of(&cfg, ds.labels.len())?;
    let (sub_x, sub_y) = take_front(&ds.images, &ds.labels, &split.val, cfg.sweep.subset);
    let attack_cfg = cfg.attack.config(cfg.seed_for("attack"));
    let started = Instant::now();
    let shared = craft_shared_attack(&vanilla, &sub_x, &sub_y, &attack_cfg)?;
    let grid = if cfg.sweep == crate::config::SweepSection::default() {
        default_sweep_grid()
    } else {
        cfg.sweep.grid()?
    };
    let run_id = cfg.run_id("sweep");
    let result = noise_sweep(
        &vanilla,
        &predictor,
        &schedule,
        &sub_x,
        &sub_y,
        &shared,
        &grid,
        cfg.seed_for("sweep"),
        &run_id,
    )?;
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CliError::runtime(format!("create output dir: {e}")))?;
    let csv_path = cfg.out_dir.join("sweep.csv");
    emit_sweep_csv(&result, &csv_path)?;
    emit_summary(&[], Some(&result), &cfg.out_dir.join("sweep_summary.txt"))?;
    cfg.echo("sweep", &inputs)?;
    for row in &result.rows {
        println!(
            "t {:.4}  robust {:.4}  standard {:.4}  ({} steps, {:.1}s)",
            row.t, row.robust_accuracy, row.standard_accuracy, row.steps_executed, row.seconds
        );
    }
    println!(
        "selected t* = {} ({} grid points, {:.1}s) -> {}",
        select_t_star(&result),
        result.rows.len(),
        started.elapsed().as_secs_f64(),
        csv_path.display()
    );
    Ok(())
}

pub fn dump_images(mut cfg: RunConfig, args: DumpImagesArgs) -> Result<(), CliError> {
    apply_attack_flags(&mut cfg, &args.attack);
    if let Some(v) = args.t {
        cfg.defense.t = v;
    }
    let mut inputs = Inputs::new();
    let ds = load_dataset(&args.dataset, &mut inputs)?;
    let vanilla = load_classifier(&args.classifier, &mut inputs)?;
    let (predictor, schedule) = load_predictor(&args.diffusion, &cfg.schedule, &mut inputs)?;
    let split = split_of(&cfg, ds.labels.len())?;
    let Some(&sample) = split.test.get(args.index) else {
        return Err(CliError::config(format!(
            "test index {} out of range (test split has {})",
            args.index,
            split.test.len()
        )));
    };
    let clean = ds.images.select_batch(&[sample]);
    let label = vec![ds.labels[sample]];
    let attack_cfg = cfg.attack.config(cfg.seed_for("attack"));
    let shared: SharedAttack = craft_shared_attack(&vanilla, &clean, &label, &attack_cfg)?;
    let t = TimeFraction::new(cfg.defense.t)?;
    let dir = cfg.out_dir.join("images");
    let dump = dump_pipeline_images(
        &clean,
        &shared.adv,
        t,
        &predictor,
        &schedule,
        cfg.seed_for("dump"),
        &dir,
    )?;
    cfg.echo("dump-images", &inputs)?;
    let clean_probs = predict(&vanilla, &clean)?;
    let adv_probs = predict(&vanilla, &shared.adv)?;
    let pure_probs = predict(&vanilla, &dump.purified)?;
    println!(
        "label {}: P(1|clean) {:.4}, P(1|adversarial) {:.4}, P(1|purified) {:.4}",
        label[0],
        clean_probs[[0, 1]],
        adv_probs[[0, 1]],
        pure_probs[[0, 1]]
    );
    for p in &dump.paths {
        println!("wrote {}", p.display());
    }
    Ok(())
}
