//! Command-line surface.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.
//! Every command that writes artifacts takes an exclusive lock on its
//! output directory and leaves a `run_manifest.json` recording the
//! resolved configuration, its hash, and the produced files, so a run can
//! be reproduced from the manifest alone.

use crate::config::{DirLock, ExperimentConfig, RunManifest};
use crate::dataset::{export_dataset, load_dataset, Dataset};
use crate::error::{FlowError, Result};
use crate::flc;
use crate::grid::DensityMap;
use crate::loss::LossWeights;
use crate::model::{FlowRegressor, OpticalRegressor};
use crate::render::{render_density, render_ground_density, KernelSpec};
use crate::seed::derive_seed;
use crate::train::{
    self, evaluate_counts, evaluate_model, pretrain_fo, reconstruct_density, run_active_learning,
    train_three_frame, train_weak, ReconMode, SelectorKind,
};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "flowcount",
    about = "People-flow crowd counting: simulator, training, active learning",
    arg_required_else_help = true,
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct CommonOpts {
    /// JSON experiment config; flags override individual fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed; every internal stream derives from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Keyframe interval.
    #[arg(long)]
    v: Option<usize>,
    /// Cycle-consistency weight.
    #[arg(long)]
    alpha: Option<f64>,
    /// Optical-correlation weight.
    #[arg(long)]
    beta: Option<f64>,
    /// Spatial-consistency weight.
    #[arg(long)]
    gamma: Option<f64>,
    /// Adversarial weight.
    #[arg(long)]
    delta: Option<f64>,
    /// Patches per frame side.
    #[arg(long)]
    patch_n: Option<usize>,
    /// Active-learning iterations.
    #[arg(long)]
    al_iters: Option<usize>,
    /// Patch selection strategy.
    #[arg(long, value_enum)]
    selector: Option<SelectorArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SelectorArg {
    Active,
    Random,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ReconArg {
    Fwd,
    Bwd,
    Avg,
}

impl From<ReconArg> for ReconMode {
    fn from(value: ReconArg) -> Self {
        match value {
            ReconArg::Fwd => ReconMode::Forward,
            ReconArg::Bwd => ReconMode::Backward,
            ReconArg::Avg => ReconMode::Averaged,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a crowd sequence and export it as a dataset directory.
    Simulate {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Render ground-truth density maps from a dataset's annotations.
    RenderDensity {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        dataset: PathBuf,
        /// Also render ground-plane maps (needs a dataset homography).
        #[arg(long)]
        ground: bool,
    },
    /// Pre-train the density-pair to optical-flow regressor.
    PretrainFo {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Three-frame training of the flow regressor on full frames.
    Train {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        dataset: PathBuf,
        /// Frozen optical regressor checkpoint enabling the optical term.
        #[arg(long)]
        fo: Option<PathBuf>,
    },
    /// Patch-based training with active annotation selection.
    TrainActive {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        dataset: PathBuf,
        /// Held-out dataset for the per-iteration error curve.
        #[arg(long)]
        eval_dataset: Option<PathBuf>,
    },
    /// Evaluate a checkpoint (or the stored ground-truth flows) on a
    /// dataset.
    Eval {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, conflicts_with = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Use the dataset's ground-truth flows as the predictor.
        #[arg(long)]
        oracle: bool,
        #[arg(long, value_enum, default_value = "avg")]
        recon: ReconArg,
    },
    /// Train and evaluate the loss-ablation variants.
    Ablate {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        dataset: PathBuf,
        /// Held-out dataset for evaluation; defaults to the training one.
        #[arg(long)]
        eval_dataset: Option<PathBuf>,
    },
    /// Render metric CSVs as raster plots plus tidied CSVs.
    ExportPlots {
        #[command(flatten)]
        common: CommonOpts,
        /// Metric CSV files (iteration,annotation_ratio,mae,rmse).
        #[arg(long, required = true, num_args = 1..)]
        metrics: Vec<PathBuf>,
    },
}

/// Parses `argv` and runs the selected command.
pub fn cmd_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn run_main() -> i32 {
    cmd_dispatch(std::env::args_os())
}

fn resolve_config(common: &CommonOpts) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(v) = common.v {
        config.train.v = v;
    }
    if let Some(alpha) = common.alpha {
        config.train.alpha = alpha;
    }
    if let Some(beta) = common.beta {
        config.train.beta = beta;
    }
    if let Some(gamma) = common.gamma {
        config.train.gamma = gamma;
    }
    if let Some(delta) = common.delta {
        config.train.delta = delta;
    }
    if let Some(n) = common.patch_n {
        config.active.patch_n = n;
    }
    if let Some(iters) = common.al_iters {
        config.active.iterations = iters;
    }
    if let Some(selector) = common.selector {
        config.active.selector = match selector {
            SelectorArg::Active => SelectorKind::Active,
            SelectorArg::Random => SelectorKind::Random,
        };
    }
    if let Some(out) = &common.out {
        config.paths.out = Some(out.clone());
    }
    Ok(config)
}

fn out_dir(config: &ExperimentConfig) -> Result<PathBuf> {
    config
        .paths
        .out
        .clone()
        .ok_or_else(|| FlowError::Config("an output directory is required (--out)".into()))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate { common } => cmd_simulate(&common),
        Command::RenderDensity {
            common,
            dataset,
            ground,
        } => cmd_render_density(&common, &dataset, ground),
        Command::PretrainFo { common, dataset } => cmd_pretrain_fo(&common, &dataset),
        Command::Train {
            common,
            dataset,
            fo,
        } => cmd_train(&common, &dataset, fo.as_deref()),
        Command::TrainActive {
            common,
            dataset,
            eval_dataset,
        } => cmd_train_active(&common, &dataset, eval_dataset.as_deref()),
        Command::Eval {
            common,
            dataset,
            checkpoint,
            oracle,
            recon,
        } => cmd_eval(&common, &dataset, checkpoint.as_deref(), oracle, recon.into()),
        Command::Ablate {
            common,
            dataset,
            eval_dataset,
        } => cmd_ablate(&common, &dataset, eval_dataset.as_deref()),
        Command::ExportPlots { common, metrics } => cmd_export_plots(&common, &metrics),
    }
}

fn cmd_simulate(common: &CommonOpts) -> Result<()> {
    let config = resolve_config(common)?;
    let out = out_dir(&config)?;
    let _lock = DirLock::acquire(&out)?;
    let sim_config = config.sim_config()?;
    export_dataset(&sim_config, config.train.v, &out)?;
    let mut manifest = RunManifest::new("simulate", &config)?;
    manifest.artifacts = vec![
        "manifest.json".into(),
        "annotations.json".into(),
        "frames/".into(),
        "flows/".into(),
        "optical/".into(),
    ];
    manifest.write(&out)?;
    println!(
        "simulated {} frames of {} agents into {}",
        sim_config.n_frames,
        sim_config.n_agents,
        out.display()
    );
    Ok(())
}

fn cmd_render_density(common: &CommonOpts, dataset_dir: &Path, ground: bool) -> Result<()> {
    let config = resolve_config(common)?;
    let out = out_dir(&config)?;
    let _lock = DirLock::acquire(&out)?;
    let dataset = load_dataset(dataset_dir)?;
    let kernel = config.kernel()?;
    let mut artifacts = Vec::new();
    for (&t, frame) in &dataset.annotations {
        let map = render_density(frame, &kernel, dataset.shape)?;
        let flc_path = out.join(format!("density_{t:06}.flc1"));
        flc::write_density(&flc_path, &map)?;
        let csv_path = out.join(format!("density_{t:06}.csv"));
        flc::write_density_csv(&csv_path, &map)?;
        artifacts.push(flc_path.file_name().unwrap().to_string_lossy().into_owned());
        artifacts.push(csv_path.file_name().unwrap().to_string_lossy().into_owned());
        if ground {
            let h = dataset.homography.ok_or_else(|| {
                FlowError::Config("dataset has no homography for ground-plane rendering".into())
            })?;
            let ground_kernel = KernelSpec::new(
                config.kernel.ground_sigma_m,
                config.kernel.truncation_radius,
            )?;
            let (map, clipped) = render_ground_density(
                frame,
                &h,
                &ground_kernel,
                dataset.shape,
                config.kernel.ground_cell_m,
            )?;
            if clipped > 0 {
                eprintln!("frame {t}: {clipped} heads clipped off the ground grid");
            }
            let path = out.join(format!("ground_density_{t:06}.flc1"));
            flc::write_density(&path, &map)?;
            artifacts.push(path.file_name().unwrap().to_string_lossy().into_owned());
        }
    }
    let mut manifest = RunManifest::new("render-density", &config)?;
    manifest.artifacts = artifacts;
    manifest.write(&out)?;
    println!(
        "rendered {} density maps into {}",
        dataset.annotations.len(),
        out.display()
    );
    Ok(())
}

/// Pre-training triples from consecutive annotated frames with stored
/// optical flow.
fn fo_triples(
    dataset: &Dataset,
    kernel: &KernelSpec,
) -> Result<Vec<(DensityMap, DensityMap, crate::grid::OpticalFlowField)>> {
    let targets = dataset.density_targets(kernel)?;
    let mut triples = Vec::new();
    for (&t, cur) in targets.iter() {
        if t == 0 {
            continue;
        }
        if let (Some(prev), Some(optical)) = (targets.get(&(t - 1)), dataset.optical.get(&(t - 1)))
        {
            triples.push((prev.clone(), cur.clone(), optical.clone()));
        }
    }
    if triples.is_empty() {
        return Err(FlowError::Config(
            "optical pre-training needs consecutive annotated frames with stored optical flow"
                .into(),
        ));
    }
    Ok(triples)
}

fn cmd_pretrain_fo(common: &CommonOpts, dataset_dir: &Path) -> Result<()> {
    let config = resolve_config(common)?;
    let out = out_dir(&config)?;
    let _lock = DirLock::acquire(&out)?;
    let dataset = load_dataset(dataset_dir)?;
    let triples = fo_triples(&dataset, &config.kernel()?)?;
    let (fo, curve) = pretrain_fo(
        &triples,
        config.optical_arch(),
        config.train.fo_steps,
        config.train.learning_rate,
        derive_seed(config.seed, "pretrain-fo"),
    )?;
    let ckpt = out.join("fo.fck");
    fo.save(&ckpt)?;
    let curve_path = out.join("fo_losses.csv");
    let mut body = String::from("step,loss\n");
    for (i, v) in curve.iter().enumerate() {
        body.push_str(&format!("{i},{v:.6}\n"));
    }
    fs::write(&curve_path, body)?;
    let mut manifest = RunManifest::new("pretrain-fo", &config)?;
    manifest.artifacts = vec!["fo.fck".into(), "fo_losses.csv".into()];
    manifest.summary = Some(serde_json::json!({
        "triples": triples.len(),
        "final_loss": curve.last().copied().unwrap_or(0.0),
    }));
    manifest.write(&out)?;
    println!(
        "pre-trained optical regressor on {} triples, final loss {:.6}",
        triples.len(),
        curve.last().copied().unwrap_or(0.0)
    );
    Ok(())
}

fn cmd_train(common: &CommonOpts, dataset_dir: &Path, fo: Option<&Path>) -> Result<()> {
    let config = resolve_config(common)?;
    let out = out_dir(&config)?;
    let _lock = DirLock::acquire(&out)?;
    let dataset = load_dataset(dataset_dir)?;
    let targets = dataset.density_targets(&config.kernel()?)?;
    let train_config = config.train_config()?;
    let arch = config.flow_arch(dataset.shape.cell_px);
    let mut regr = FlowRegressor::init(arch, derive_seed(config.seed, "flow-init"))?;
    let fo_loaded = fo.map(OpticalRegressor::load).transpose()?;
    let optical = match &fo_loaded {
        Some(fo) => {
            if dataset.optical.is_empty() {
                return Err(FlowError::Config(
                    "dataset has no stored optical flow for the optical term".into(),
                ));
            }
            Some((fo, &dataset.optical))
        }
        None => None,
    };
    let outcome = train_three_frame(&mut regr, &dataset.sequence, &targets, &train_config, optical)?;
    let ckpt = out.join("flow.fck");
    regr.save(&ckpt)?;
    let losses = out.join("losses.csv");
    outcome.log.write_csv(&losses)?;
    let mut manifest = RunManifest::new("train", &config)?;
    manifest.artifacts = vec!["flow.fck".into(), "losses.csv".into()];
    manifest.summary = Some(serde_json::json!({
        "steps": outcome.log.rows.len(),
        "final_loss": outcome.log.rows.last().map(|r| r.total).unwrap_or(0.0),
    }));
    manifest.write(&out)?;
    println!(
        "trained {} steps, final loss {:.6}, checkpoint {}",
        outcome.log.rows.len(),
        outcome.log.rows.last().map(|r| r.total).unwrap_or(0.0),
        ckpt.display()
    );
    Ok(())
}

fn cmd_train_active(
    common: &CommonOpts,
    dataset_dir: &Path,
    eval_dataset: Option<&Path>,
) -> Result<()> {
    let config = resolve_config(common)?;
    let out = out_dir(&config)?;
    let _lock = DirLock::acquire(&out)?;
    let dataset = load_dataset(dataset_dir)?;
    let eval_data = match eval_dataset {
        Some(path) => load_dataset(path)?,
        None => dataset.clone(),
    };
    let targets = dataset.density_targets(&config.kernel()?)?;
    let train_config = config.train_config()?;
    let al = config.active_config();
    let arch = config.flow_arch(dataset.shape.cell_px);
    let mut regr = FlowRegressor::init(arch, derive_seed(config.seed, "flow-init"))?;
    let grid = train::PatchGrid::new(al.patch_n, dataset.shape)?;
    let mut disc = train::discriminator_for(&grid, derive_seed(config.seed, "disc-init"));
    let eval_frames = eval_data.eval_frames(None)?;
    let eval_seq = eval_data.sequence.clone();
    let outcome = run_active_learning(
        &mut regr,
        &mut disc,
        &dataset.sequence,
        &targets,
        &train_config,
        &al,
        |model| evaluate_model(model, &eval_seq, &eval_frames, None, ReconMode::Averaged),
    )?;
    let ckpt = out.join("flow.fck");
    outcome.regressor.save(&ckpt)?;
    let metrics = out.join("metrics.csv");
    train::write_metrics_csv(&metrics, &outcome.records)?;
    let mut manifest = RunManifest::new("train-active", &config)?;
    manifest.artifacts = vec!["flow.fck".into(), "metrics.csv".into()];
    manifest.summary = Some(serde_json::json!({
        "labeled": outcome.budget.labeled,
        "iterations": outcome.records.len(),
        "final_mae": outcome.records.last().map(|r| r.mae),
        "curve": outcome.records.iter().map(|r| {
            serde_json::json!({
                "iteration": r.iteration,
                "annotation_ratio": r.annotation_ratio,
                "mae": r.mae,
                "rmse": r.rmse,
                "newly_labeled": r.newly_labeled,
            })
        }).collect::<Vec<_>>(),
    }));
    manifest.write(&out)?;
    for r in &outcome.records {
        println!(
            "iteration {}: ratio {:.4} MAE {:.3} RMSE {:.3}",
            r.iteration, r.annotation_ratio, r.mae, r.rmse
        );
    }
    Ok(())
}

fn cmd_eval(
    common: &CommonOpts,
    dataset_dir: &Path,
    checkpoint: Option<&Path>,
    oracle: bool,
    mode: ReconMode,
) -> Result<()> {
    let _config = resolve_config(common)?;
    let dataset = load_dataset(dataset_dir)?;
    let eval_frames = dataset.eval_frames(None)?;
    let (mae, rmse) = if oracle {
        evaluate_counts(
            |t| {
                let fwd = dataset.flows.get(&(t - 1)).ok_or_else(|| {
                    FlowError::Config(format!("dataset has no stored flow for pair ({}, {t})", t - 1))
                })?;
                reconstruct_density(fwd, &fwd.reversed(), mode)
            },
            &eval_frames,
            None,
        )?
    } else {
        let path = checkpoint.ok_or_else(|| {
            FlowError::Config("eval needs --checkpoint or --oracle".into())
        })?;
        let regr = FlowRegressor::load(path)?;
        evaluate_model(&regr, &dataset.sequence, &eval_frames, None, mode)?
    };
    println!("MAE {mae:.3} RMSE {rmse:.3}");
    Ok(())
}

fn cmd_ablate(
    common: &CommonOpts,
    dataset_dir: &Path,
    eval_dataset: Option<&Path>,
) -> Result<()> {
    let config = resolve_config(common)?;
    let out = out_dir(&config)?;
    let _lock = DirLock::acquire(&out)?;
    let dataset = load_dataset(dataset_dir)?;
    let eval_data = match eval_dataset {
        Some(path) => load_dataset(path)?,
        None => dataset.clone(),
    };
    let targets = dataset.density_targets(&config.kernel()?)?;
    let train_config = config.train_config()?;
    let arch = config.flow_arch(dataset.shape.cell_px);
    let eval_frames = eval_data.eval_frames(None)?;

    let mut results: Vec<(String, f64, f64)> = Vec::new();
    let init_seed = derive_seed(config.seed, "flow-init");

    // Full combined loss, evaluated under all three reconstructions.
    let mut combi = FlowRegressor::init(arch, init_seed)?;
    train_three_frame(&mut combi, &dataset.sequence, &targets, &train_config, None)?;
    for (name, mode) in [
        ("combi-fwd", ReconMode::Forward),
        ("combi-bwd", ReconMode::Backward),
        ("combi-avg", ReconMode::Averaged),
    ] {
        let (mae, rmse) =
            evaluate_model(&combi, &eval_data.sequence, &eval_frames, None, mode)?;
        results.push((name.to_string(), mae, rmse));
    }

    // Flow supervision without the cycle term.
    let mut no_cycle_config = train_config;
    no_cycle_config.weights = LossWeights {
        alpha: 0.0,
        ..train_config.weights
    };
    let mut flow_only = FlowRegressor::init(arch, init_seed)?;
    train_three_frame(
        &mut flow_only,
        &dataset.sequence,
        &targets,
        &no_cycle_config,
        None,
    )?;
    let (mae, rmse) = evaluate_model(
        &flow_only,
        &eval_data.sequence,
        &eval_frames,
        None,
        ReconMode::Averaged,
    )?;
    results.push(("flow-only".to_string(), mae, rmse));

    // Loose density-level constraints in place of per-flow conservation.
    let mut weak = FlowRegressor::init(arch, init_seed)?;
    train_weak(&mut weak, &dataset.sequence, &targets, &train_config)?;
    let (mae, rmse) = evaluate_model(
        &weak,
        &eval_data.sequence,
        &eval_frames,
        None,
        ReconMode::Averaged,
    )?;
    results.push(("weak".to_string(), mae, rmse));

    let mut body = String::from("variant,mae,rmse\n");
    println!("{:<12} {:>8} {:>8}", "variant", "MAE", "RMSE");
    for (name, mae, rmse) in &results {
        body.push_str(&format!("{name},{mae:.6},{rmse:.6}\n"));
        println!("{name:<12} {mae:>8.3} {rmse:>8.3}");
    }
    let results_path = out.join("results.csv");
    fs::write(&results_path, body)?;
    let mut manifest = RunManifest::new("ablate", &config)?;
    manifest.artifacts = vec!["results.csv".into()];
    manifest.summary = Some(serde_json::json!({
        "results": results.iter().map(|(n, mae, rmse)| {
            serde_json::json!({"variant": n, "mae": mae, "rmse": rmse})
        }).collect::<Vec<_>>(),
    }));
    manifest.write(&out)?;
    Ok(())
}

fn cmd_export_plots(common: &CommonOpts, metrics: &[PathBuf]) -> Result<()> {
    let config = resolve_config(common)?;
    let out = out_dir(&config)?;
    let _lock = DirLock::acquire(&out)?;
    let written = crate::plots::export_plots(metrics, &out)?;
    let mut manifest = RunManifest::new("export-plots", &config)?;
    manifest.artifacts = written
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    manifest.write(&out)?;
    println!("wrote {} plot artifacts into {}", written.len(), out.display());
    Ok(())
}
