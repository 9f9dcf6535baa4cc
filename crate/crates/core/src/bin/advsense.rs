//! Command-line pipeline: train a classifier, craft adversarial batches,
//! calibrate the noise-probe detector, stream verdicts, and run the
//! evaluation grid. One JSON config and one global seed drive everything;
//! primary outputs are byte-identical across reruns and wall-clock numbers
//! go to a sidecar.

use advsense::data::Dataset;
use advsense::derive_seed;
use advsense::detectors::{
    calibrate, color_squeezers, detect_indexed, mono_squeezers, sweep_spread, NoiseProbe,
    Squeezer, ValidationSet, Verdict,
};
use advsense::error::{Error, Result};
use advsense::eval::{run_grid, DetectorKind, DetectorSuite, GridConfig};
use advsense::models::{load, save, train, TrainedModel};
use advsense::runcfg::{
    load_config, read_calibration_file, write_calibration_file, AttackSettings, LoadedConfig,
    RunConfig,
};
use advsense::Tensor;
use clap::{Parser, Subcommand};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "advsense",
    about = "Adversarial-input detection for small classifiers via noise-probe sensitivity"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a classifier and write the weight container.
    Train(CommonArgs),
    /// Craft an adversarial batch against a trained model.
    Attack(CommonArgs),
    /// Learn detector thresholds (and optionally sweep the noise spread).
    Calibrate(CommonArgs),
    /// Stream per-sample verdicts for the test partition.
    Detect(DetectArgs),
    /// Run the repeated attack/detector evaluation grid.
    Evaluate(CommonArgs),
    /// Sweep the noise spread and report the AUC curve.
    Sweep(CommonArgs),
}

#[derive(clap::Args)]
struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct DetectArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Calibration artifact; defaults to <out>/calibration_fpr05.json.
    #[arg(long)]
    calibration: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(&setup(args)?),
        Command::Attack(args) => cmd_attack(&setup(args)?),
        Command::Calibrate(args) => cmd_calibrate(&setup(args)?),
        Command::Detect(args) => {
            let calibration = args.calibration.clone();
            cmd_detect(&setup(args.common)?, calibration.as_deref())
        }
        Command::Evaluate(args) => cmd_evaluate(&setup(args)?),
        Command::Sweep(args) => cmd_sweep(&setup(args)?),
    }
}

struct Ctx {
    cfg: RunConfig,
    config_hash: String,
    out: PathBuf,
}

fn setup(args: CommonArgs) -> Result<Ctx> {
    let LoadedConfig { mut config, config_hash } = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = args.out {
        config.out = out;
    }
    std::fs::create_dir_all(&config.out)?;
    let out = config.out.clone();
    Ok(Ctx { cfg: config, config_hash, out })
}

fn write_sidecar(
    ctx: &Ctx,
    stage: &str,
    wall: std::time::Duration,
    extra: serde_json::Value,
) -> Result<()> {
    let meta = serde_json::json!({
        "stage": stage,
        "config_hash": ctx.config_hash,
        "seed": ctx.cfg.seed,
        "wall_ms": wall.as_millis() as u64,
        "extra": extra,
    });
    std::fs::write(
        ctx.out.join(format!("run_meta_{stage}.json")),
        serde_json::to_string_pretty(&meta)?,
    )?;
    Ok(())
}

fn model_path(ctx: &Ctx) -> PathBuf {
    ctx.cfg
        .model
        .as_ref()
        .and_then(|m| m.path.clone())
        .unwrap_or_else(|| ctx.out.join("model.bin"))
}

fn load_model(ctx: &Ctx) -> Result<TrainedModel> {
    let path = model_path(ctx);
    let bytes = std::fs::read(&path).map_err(|e| Error::Format {
        field: "model file".into(),
        message: format!("{}: {e}", path.display()),
    })?;
    load(&bytes)
}

/// Seeded shuffle of 0..n, used to draw working subsets from partitions.
fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha12Rng::seed_from_u64(seed));
    idx
}

fn cmd_train(ctx: &Ctx) -> Result<()> {
    let t0 = Instant::now();
    let parts = ctx.cfg.load_partitions()?;
    let [train_set, _, _, test_set] = &parts;
    let spec = ctx.cfg.model_spec(train_set.feature_shape(), train_set.num_classes().max(2))?;
    let cfg = ctx.cfg.train_config()?;
    let model = train(&spec, train_set, test_set, &cfg)?;
    let path = ctx.out.join("model.bin");
    std::fs::write(&path, save(&model))?;

    let metrics = serde_json::json!({
        "config_hash": ctx.config_hash,
        "seed": ctx.cfg.seed,
        "accuracy": model.metadata().final_accuracy,
        "epochs": model.metadata().epochs,
        "spec": model.spec(),
        "model_path": path,
    });
    std::fs::write(ctx.out.join("train_metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
    write_sidecar(ctx, "train", t0.elapsed(), serde_json::json!({}))?;
    println!(
        "trained {} -> {} (accuracy {:.4})",
        train_set.provenance,
        path.display(),
        model.metadata().final_accuracy
    );
    Ok(())
}

/// Working subset of the test partition for the attack command.
fn attack_pool(ctx: &Ctx, test_set: &Dataset, n: usize) -> Result<Dataset> {
    let order = shuffled_indices(test_set.len(), derive_seed(ctx.cfg.seed, "attack-pool"));
    let take: Vec<usize> = order.into_iter().take(n).collect();
    test_set.subset(&take)
}

fn cmd_attack(ctx: &Ctx) -> Result<()> {
    let t0 = Instant::now();
    let settings = ctx
        .cfg
        .attack
        .clone()
        .ok_or_else(|| Error::Config("attack section missing from config".into()))?;
    let model = load_model(ctx)?;
    let parts = ctx.cfg.load_partitions()?;
    let test_set = &parts[3];
    let n = settings.n_samples.unwrap_or(200).min(test_set.len());
    let pool = attack_pool(ctx, test_set, n)?;

    let attack_cfg = settings.to_attack_config(derive_seed(ctx.cfg.seed, "attack"))?;
    let batch = advsense::attacks::run_attack(&model, &pool.features, &pool.labels, &attack_cfg)?;
    let kind = attack_cfg.kind.name();
    let bin_path = ctx.out.join(format!("attack_{kind}.bin"));
    std::fs::write(&bin_path, batch.save())?;

    let summary = serde_json::json!({
        "config_hash": ctx.config_hash,
        "seed": ctx.cfg.seed,
        "kind": kind,
        "epsilon": attack_cfg.epsilon,
        "n": batch.len(),
        "success_rate": batch.success_rate(),
        "mean_l2": batch.mean_l2,
        "batch_path": bin_path,
    });
    std::fs::write(
        ctx.out.join(format!("attack_{kind}_summary.json")),
        serde_json::to_string_pretty(&summary)?,
    )?;
    let wall = t0.elapsed();
    write_sidecar(
        ctx,
        "attack",
        wall,
        serde_json::json!({ "wall_s_per_sample": wall.as_secs_f64() / batch.len() as f64 }),
    )?;
    println!(
        "{kind} eps={} on {} samples: success {:.3}, mean L2 {:.3} -> {}",
        attack_cfg.epsilon,
        batch.len(),
        batch.success_rate(),
        batch.mean_l2,
        bin_path.display()
    );
    Ok(())
}

/// Benign/adversarial validation pools for spread sweeps and
/// rejection-side selection, crafted from the hold-out partition.
fn validation_pools(
    ctx: &Ctx,
    model: &TrainedModel,
    holdout: &Dataset,
    attack: &Option<AttackSettings>,
    n: usize,
) -> Result<(Tensor, Tensor)> {
    let default = AttackSettings {
        kind: "pgd".into(),
        epsilon: 0.15,
        alpha: None,
        steps: Some(40),
        cw_lr: None,
        cw_iters: None,
        c: None,
        warm_start_steps: None,
        ig_steps: None,
        clip: Some((0.0, 1.0)),
        n_samples: None,
    };
    let settings = attack.clone().unwrap_or(default);
    let cfg = settings.to_attack_config(derive_seed(ctx.cfg.seed, "validation-attack"))?;
    let order = shuffled_indices(holdout.len(), derive_seed(ctx.cfg.seed, "validation-pool"));
    let take: Vec<usize> = order.into_iter().take(n.min(holdout.len())).collect();
    let pool = holdout.subset(&take)?;
    let batch = advsense::attacks::run_attack(model, &pool.features, &pool.labels, &cfg)?;
    let keep = batch.successful_indices();
    if keep.len() < 10 {
        return Err(Error::InsufficientSamples(format!(
            "validation attack produced only {} successful samples",
            keep.len()
        )));
    }
    let rows: Result<Vec<Tensor>> = keep.iter().map(|&i| batch.perturbed.row(i)).collect();
    let adv = Tensor::stack(&rows?)?;
    let benign = model.conform_batch(&pool.features)?;
    Ok((benign, adv))
}

fn cmd_calibrate(ctx: &Ctx) -> Result<()> {
    let t0 = Instant::now();
    let model = load_model(ctx)?;
    let parts = ctx.cfg.load_partitions()?;
    let [_, calib_set, holdout_set, _] = &parts;
    let targets = ctx
        .cfg
        .calibrate
        .clone()
        .map(|c| c.fpr_targets)
        .unwrap_or_else(|| vec![0.01, 0.05, 0.10]);

    // Spread comes from the sweep when configured, else straight from the
    // probe settings.
    let seed = derive_seed(ctx.cfg.seed, "probe");
    let (spread, curve) = match &ctx.cfg.sweep {
        Some(sweep) => {
            let grid = sweep.grid_points()?;
            let (benign, adv) = validation_pools(
                ctx,
                &model,
                holdout_set,
                &sweep.validation_attack,
                sweep.n_validation.unwrap_or(200),
            )?;
            let result = sweep_spread(model.graph(), &benign, &adv, &grid, seed)?;
            (result.best_spread, Some(result.curve))
        }
        None => {
            let probe = ctx
                .cfg
                .probe
                .clone()
                .ok_or_else(|| Error::Config("either probe.spread or sweep must be set".into()))?;
            (probe.spread, None)
        }
    };
    if let Some(curve) = &curve {
        let doc = serde_json::json!({
            "config_hash": ctx.config_hash,
            "seed": ctx.cfg.seed,
            "best_spread": spread,
            "curve": curve,
        });
        std::fs::write(ctx.out.join("sweep_curve.json"), serde_json::to_string_pretty(&doc)?)?;
    }

    let draws = ctx.cfg.probe.as_ref().map_or(1, |p| p.draws);
    let probe = NoiseProbe { spread, seed, draws, zero_noise: false };
    let (vb, va) = validation_pools(
        ctx,
        &model,
        holdout_set,
        &ctx.cfg.sweep.as_ref().and_then(|s| s.validation_attack.clone()),
        ctx.cfg.sweep.as_ref().and_then(|s| s.n_validation).unwrap_or(200),
    )?;
    let calib_features = model.conform_batch(&calib_set.features)?;
    let holdout_features = model.conform_batch(&holdout_set.features)?;
    let calibrations = calibrate(
        model.graph(),
        &calib_features,
        &holdout_features,
        &probe,
        &targets,
        Some(&ValidationSet { benign: &vb, adversarial: &va }),
    )?;

    for cal in &calibrations {
        let pct = (cal.fpr_target * 100.0).round() as u32;
        let path = ctx.out.join(format!("calibration_fpr{pct:02}.json"));
        write_calibration_file(&path, cal, &ctx.config_hash, ctx.cfg.seed)?;
        println!(
            "fpr target {:.2}: prediction side {:?}, holdout fpr ({:.4}, {:.4}) -> {}",
            cal.fpr_target,
            cal.prediction.side,
            cal.holdout_fpr.0,
            cal.holdout_fpr.1,
            path.display()
        );
    }
    write_sidecar(ctx, "calibrate", t0.elapsed(), serde_json::json!({ "spread": spread }))?;
    Ok(())
}

fn cmd_detect(ctx: &Ctx, calibration_path: Option<&Path>) -> Result<()> {
    let t0 = Instant::now();
    let model = load_model(ctx)?;
    let default_path = ctx.out.join("calibration_fpr05.json");
    let cal_path = calibration_path.unwrap_or(&default_path);
    let calibration = read_calibration_file(cal_path)?;
    let parts = ctx.cfg.load_partitions()?;
    let test_set = &parts[3];
    let features = model.conform_batch(&test_set.features)?;

    let mut csv = String::from("id,ps,as,verdict\n");
    let mut flagged = 0usize;
    for i in 0..test_set.len() {
        let x = features.row(i)?;
        let (verdict, pair) = detect_indexed(model.graph(), &x, i, &calibration)?;
        let label = match verdict {
            Verdict::Benign => "benign",
            Verdict::Adversarial => "adversarial",
        };
        flagged += (verdict == Verdict::Adversarial) as usize;
        let line = format!("{i},{:.6},{:.6},{label}", pair.prediction, pair.attribution);
        println!("{line}");
        csv.push_str(&line);
        csv.push('\n');
    }
    std::fs::write(ctx.out.join("verdicts.csv"), csv)?;
    write_sidecar(
        ctx,
        "detect",
        t0.elapsed(),
        serde_json::json!({ "flag_rate": flagged as f64 / test_set.len().max(1) as f64 }),
    )?;
    Ok(())
}

fn squeezers_for(shape: &[usize]) -> Vec<Squeezer> {
    match shape {
        [c, _, _] if *c > 1 => color_squeezers(),
        _ => mono_squeezers(),
    }
}

fn cmd_evaluate(ctx: &Ctx) -> Result<()> {
    let t0 = Instant::now();
    let settings = ctx
        .cfg
        .evaluate
        .clone()
        .ok_or_else(|| Error::Config("evaluate section missing from config".into()))?;
    if settings.attacks.is_empty() {
        return Err(Error::Config("evaluate.attacks must not be empty".into()));
    }
    let model = load_model(ctx)?;
    let parts = ctx.cfg.load_partitions()?;
    let [_, calib_set, holdout_set, test_set] = &parts;

    let probe_settings = ctx
        .cfg
        .probe
        .clone()
        .ok_or_else(|| Error::Config("probe.spread required for evaluate".into()))?;
    let probe = NoiseProbe {
        spread: probe_settings.spread,
        seed: derive_seed(ctx.cfg.seed, "probe"),
        draws: probe_settings.draws,
        zero_noise: false,
    };

    let kinds: Result<Vec<DetectorKind>> =
        settings.detectors.iter().map(|s| DetectorKind::parse(s)).collect();
    let kinds = kinds?;
    let (vb, va) = validation_pools(
        ctx,
        &model,
        holdout_set,
        &ctx.cfg.sweep.as_ref().and_then(|s| s.validation_attack.clone()),
        ctx.cfg.sweep.as_ref().and_then(|s| s.n_validation).unwrap_or(200),
    )?;
    let suite = DetectorSuite::tune(
        &model,
        &vb,
        &va,
        kinds,
        probe,
        squeezers_for(test_set.feature_shape()),
    )?;

    // Per-repeat attack seeds are derived inside run_grid.
    let attack_cfgs: Result<Vec<_>> =
        settings.attacks.iter().map(|a| a.to_attack_config(0)).collect();
    let grid = GridConfig {
        repeats: settings.repeats,
        n_eval: settings.n_eval,
        seed: derive_seed(ctx.cfg.seed, "evaluate"),
    };
    let mut report = run_grid(&model, test_set, calib_set, &suite, &attack_cfgs?, &grid)?;
    report.config_echo["config_hash"] = serde_json::json!(ctx.config_hash);
    report.config_echo["global_seed"] = serde_json::json!(ctx.cfg.seed);

    std::fs::write(ctx.out.join("report.csv"), report.to_csv())?;
    std::fs::write(ctx.out.join("report.json"), report.to_json())?;
    write_sidecar(ctx, "evaluate", t0.elapsed(), serde_json::json!({}))?;
    println!("{}", report.to_csv());
    Ok(())
}

fn cmd_sweep(ctx: &Ctx) -> Result<()> {
    let t0 = Instant::now();
    let sweep = ctx
        .cfg
        .sweep
        .clone()
        .ok_or_else(|| Error::Config("sweep section missing from config".into()))?;
    let model = load_model(ctx)?;
    let parts = ctx.cfg.load_partitions()?;
    let holdout_set = &parts[2];
    let grid = sweep.grid_points()?;
    let (benign, adv) = validation_pools(
        ctx,
        &model,
        holdout_set,
        &sweep.validation_attack,
        sweep.n_validation.unwrap_or(200),
    )?;
    let result =
        sweep_spread(model.graph(), &benign, &adv, &grid, derive_seed(ctx.cfg.seed, "probe"))?;
    let doc = serde_json::json!({
        "config_hash": ctx.config_hash,
        "seed": ctx.cfg.seed,
        "best_spread": result.best_spread,
        "curve": result.curve,
    });
    std::fs::write(ctx.out.join("sweep_curve.json"), serde_json::to_string_pretty(&doc)?)?;
    for (spread, value) in &result.curve {
        println!("spread {spread}: auc {value:.4}");
    }
    println!("best spread: {}", result.best_spread);
    write_sidecar(ctx, "sweep", t0.elapsed(), serde_json::json!({ "best": result.best_spread }))?;
    Ok(())
}
