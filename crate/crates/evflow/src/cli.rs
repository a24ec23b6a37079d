//! Command surface: synthesize datasets, generate ground-truth flow from
//! geometry, train, evaluate (including the warm-start ablation grid), and
//! visualize flow fields.
//!
//! Exit codes: 0 success, 2 validation error, 3 data error, 4 numeric
//! failure.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::dataset::{load_dataset, write_sequence_dir, Dataset};
use crate::error::{Error, Result};
use crate::flow::read_flow_any;
use crate::geometry::{flow_pair_at_rate, CameraModel, DisparityMap, PoseTrajectory};
use crate::metrics::{evaluate_dataset, EvalMode, EvalProtocol, EvalRun};
use crate::model::checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointMeta, TrainProgress,
};
use crate::model::{FlowNet, ModelConfig};
use crate::synthetic::{self, SceneSpec};
use crate::training::{
    schedule, train_phases, Adam, SchedulePreset, TrainConfig, TrainerOptions,
};

/// Environment variable holding the default dataset root.
pub const DATA_ROOT_ENV: &str = "EVFLOW_DATA_ROOT";

#[derive(Parser)]
#[command(
    name = "evflow",
    about = "Recurrent correlation-volume optical flow from event streams",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic event dataset with exact ground-truth flow.
    Synth(SynthArgs),
    /// Generate ground-truth flow from disparity, calibration and odometry.
    Gtgen(GtgenArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint (optionally the full warm-start ablation grid).
    Eval(EvalArgs),
    /// Render a flow file as a color-wheel image.
    Viz(VizArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Scene spec TOML, or a builtin name: translate-10px, rotate, grating.
    #[arg(long)]
    spec: String,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Also write lossless raw flow files next to the 16-bit PNGs.
    #[arg(long, default_value_t = true)]
    raw: bool,
}

#[derive(Args)]
struct GtgenArgs {
    /// Directory of 16-bit disparity PNGs named <timestamp_us>.png.
    #[arg(long)]
    disparity: PathBuf,
    /// Camera calibration TOML.
    #[arg(long)]
    calib: PathBuf,
    /// Trajectory text file: "t_us tx ty tz qx qy qz qw" per line.
    #[arg(long)]
    trajectory: PathBuf,
    /// Flow interval in microseconds (100000 = 10 Hz).
    #[arg(long)]
    dt_us: i64,
    #[arg(long)]
    out: PathBuf,
    /// Also write lossless raw flow files.
    #[arg(long, default_value_t = true)]
    raw: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PresetArg {
    Desk,
    Full,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScheduleArg {
    Single,
    Dsec,
    Mvsec,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config TOML (flat key-value; unknown keys rejected).
    #[arg(long)]
    config: PathBuf,
    /// Dataset root; defaults to $EVFLOW_DATA_ROOT.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = PresetArg::Desk)]
    preset: PresetArg,
    #[arg(long, value_enum, default_value_t = ScheduleArg::Single)]
    schedule: ScheduleArg,
    /// Proportional epoch scaling for desk-scale runs of the named schedules.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Resume from a checkpoint written by a previous run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum WarmstartArg {
    Off,
    Eval,
    TrainEval,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Dense,
    Sparse,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root; defaults to $EVFLOW_DATA_ROOT.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = WarmstartArg::Off)]
    warmstart: WarmstartArg,
    #[arg(long, default_value_t = 12)]
    iters: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Dense)]
    mode: ModeArg,
    /// Emit the five-row warm-start ablation grid in one invocation.
    #[arg(long, default_value_t = false)]
    grid: bool,
    /// Warm-start-trained checkpoint for the train+eval rows of the grid
    /// (defaults to --checkpoint).
    #[arg(long)]
    checkpoint_ws: Option<PathBuf>,
    /// Iteration count of the high-iteration grid rows.
    #[arg(long, default_value_t = 100)]
    grid_iters: usize,
}

#[derive(Args)]
struct VizArgs {
    /// Flow file (.png 16-bit codec or .raw container).
    #[arg(long)]
    flow: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Fixed magnitude mapped to full saturation (default: per-image max).
    #[arg(long)]
    scale: Option<f64>,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config: serde_json::Value,
    seed: Option<u64>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    version: String,
    wallclock_sec: f64,
}

fn write_manifest(out_dir: &Path, manifest: &RunManifest) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::data(format!("serialize manifest: {e}")))?;
    std::fs::write(out_dir.join("manifest.json"), json)?;
    Ok(())
}

fn data_root(arg: Option<PathBuf>) -> Result<PathBuf> {
    match arg {
        Some(p) => Ok(p),
        None => std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from).ok_or_else(|| {
            Error::config(format!(
                "no --data given and {DATA_ROOT_ENV} is not set"
            ))
        }),
    }
}

/// Parses argv and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Gtgen(a) => cmd_gtgen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Viz(a) => cmd_viz(a),
    }
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

fn builtin_spec(name: &str) -> Option<SceneSpec> {
    let base = synthetic::translating_scene(7, (64, 64), (1.0, 0.0), 10);
    match name {
        "translate-10px" => Some(SceneSpec {
            motion: synthetic::Motion {
                translation: (10.0, 0.0),
                rotation: 0.0,
                scale_rate: 0.0,
            },
            ..base
        }),
        "rotate" => Some(SceneSpec {
            motion: synthetic::Motion {
                translation: (0.0, 0.0),
                rotation: 0.6,
                scale_rate: 0.0,
            },
            ..base
        }),
        "grating" => Some(SceneSpec {
            pattern: synthetic::Pattern::BarGrating {
                period: 12.0,
                angle: 0.3,
                contrast: 1.0,
            },
            motion: synthetic::Motion {
                translation: (14.0, 5.0),
                rotation: 0.0,
                scale_rate: 0.0,
            },
            ..base
        }),
        _ => None,
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let started = Instant::now();
    let mut spec = match builtin_spec(&a.spec) {
        Some(s) => s,
        None => SceneSpec::load_toml(Path::new(&a.spec))?,
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    std::fs::create_dir_all(&a.out)?;
    let (events, gts, t_refs) = synthetic::scene_sequence(&spec)?;
    write_sequence_dir(
        &a.out,
        events.events(),
        spec.sensor,
        (events.t_start, events.t_end),
        spec.gt_interval_us,
        &t_refs,
        &gts,
        a.raw,
    )?;
    let outputs: Vec<String> = vec![
        "events.bin".into(),
        "samples.json".into(),
        format!("flow/fw_000000.png .. flow/fw_{:06}.png", gts.len() - 1),
    ];
    write_manifest(
        &a.out,
        &RunManifest {
            command: "synth".into(),
            config: serde_json::to_value(&spec).unwrap_or_default(),
            seed: Some(spec.seed),
            inputs: vec![a.spec.clone()],
            outputs,
            version: env!("CARGO_PKG_VERSION").into(),
            wallclock_sec: started.elapsed().as_secs_f64(),
        },
    )?;
    println!(
        "synth: {} events, {} ground-truth fields -> {}",
        events.len(),
        gts.len(),
        a.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// gtgen
// ---------------------------------------------------------------------------

fn cmd_gtgen(a: GtgenArgs) -> Result<()> {
    let started = Instant::now();
    if a.dt_us <= 0 {
        return Err(Error::config(format!("dt_us must be positive, got {}", a.dt_us)));
    }
    let cam = CameraModel::load_toml(&a.calib)?;
    let traj = PoseTrajectory::load_text(&a.trajectory)?;
    let mut frames: Vec<(i64, PathBuf)> = std::fs::read_dir(&a.disparity)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .filter_map(|p| {
            p.file_stem()
                .and_then(|s| s.to_string_lossy().parse::<i64>().ok())
                .map(|t| (t, p.clone()))
        })
        .collect();
    frames.sort();
    if frames.is_empty() {
        return Err(Error::data(format!(
            "{}: no <timestamp_us>.png disparity files",
            a.disparity.display()
        )));
    }
    std::fs::create_dir_all(&a.out)?;
    let mut outputs = Vec::new();
    for (t, path) in &frames {
        let disp = DisparityMap::read_png(path)?;
        let traj_range = traj.time_range();
        if *t - a.dt_us < traj_range.0 || *t + a.dt_us > traj_range.1 {
            return Err(Error::coverage(format!(
                "trajectory covers [{}, {}] but flow at {t} needs [{}, {}]",
                traj_range.0,
                traj_range.1,
                t - a.dt_us,
                t + a.dt_us
            )));
        }
        let (fwd, bwd) = flow_pair_at_rate(&disp, &cam, &traj, *t, a.dt_us)?;
        let fw_name = format!("fw_{t}.png");
        let bw_name = format!("bw_{t}.png");
        crate::flow::write_flow_png(&a.out.join(&fw_name), &fwd)?;
        crate::flow::write_flow_png(&a.out.join(&bw_name), &bwd)?;
        if a.raw {
            crate::flow::write_flow_raw(&a.out.join(format!("fw_{t}.raw")), &fwd)?;
            crate::flow::write_flow_raw(&a.out.join(format!("bw_{t}.raw")), &bwd)?;
        }
        outputs.push(fw_name);
        outputs.push(bw_name);
    }
    eprintln!(
        "gtgen: poses interpolated at the exact endpoint timestamps of each \
         [t - dt, t + dt] window"
    );
    write_manifest(
        &a.out,
        &RunManifest {
            command: "gtgen".into(),
            config: serde_json::json!({
                "dt_us": a.dt_us,
                "calib": a.calib.display().to_string(),
                "trajectory": a.trajectory.display().to_string(),
            }),
            seed: None,
            inputs: vec![
                a.disparity.display().to_string(),
                a.calib.display().to_string(),
                a.trajectory.display().to_string(),
            ],
            outputs,
            version: env!("CARGO_PKG_VERSION").into(),
            wallclock_sec: started.elapsed().as_secs_f64(),
        },
    )?;
    println!("gtgen: {} frames -> {}", frames.len(), a.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn cmd_train(a: TrainArgs) -> Result<()> {
    let started = Instant::now();
    let cfg = TrainConfig::load_toml(&a.config)?;
    let data = data_root(a.data)?;
    std::fs::create_dir_all(&a.out)?;

    let (mut model, start_step, resume_at, mut adam, warm_flag) = match &a.resume {
        Some(ckpt_path) => {
            let (model, meta, moments) = load_checkpoint(ckpt_path)?;
            let progress = meta.train_progress.clone().ok_or_else(|| {
                Error::data(format!(
                    "{}: checkpoint has no training progress to resume from",
                    ckpt_path.display()
                ))
            })?;
            let mut adam = Adam::new(cfg.lr);
            if let Some(m) = &moments {
                adam.restore(m, progress.adam_t);
            }
            (
                model,
                progress.step,
                Some((progress.phase, progress.epoch_in_phase)),
                adam,
                meta.warmstart_trained,
            )
        }
        None => {
            let mcfg = match a.preset {
                PresetArg::Desk => ModelConfig::desk(),
                PresetArg::Full => ModelConfig::default_config(),
            };
            (
                FlowNet::new(mcfg, a.seed)?,
                0,
                None,
                Adam::new(cfg.lr),
                false,
            )
        }
    };

    let dataset = load_dataset(&data, model.cfg.voxel_bins, model.cfg.split_polarity)?;
    let preset = match a.schedule {
        ScheduleArg::Single => SchedulePreset::Single,
        ScheduleArg::Dsec => SchedulePreset::Dsec,
        ScheduleArg::Mvsec => SchedulePreset::Mvsec,
    };
    let phases = schedule(preset, &cfg, a.scale);
    let warmstart_trained = warm_flag || phases.iter().any(|p| p.warmstart);

    let metrics_path = a.out.join("metrics.csv");
    let mut metrics = if a.resume.is_some() && metrics_path.exists() {
        std::fs::OpenOptions::new()
            .append(true)
            .open(&metrics_path)?
    } else {
        let mut f = std::fs::File::create(&metrics_path)?;
        writeln!(f, "step,phase,loss,lr,seq_len,wallclock")?;
        f
    };

    let opts = TrainerOptions {
        gamma: cfg.gamma,
        iters: cfg.iters,
        hflip_prob: cfg.hflip_prob,
        seed: a.seed,
    };
    let ckpt_path = a.out.join("checkpoint.ckpt");
    let final_step = train_phases(
        &mut model,
        &mut adam,
        &dataset,
        &phases,
        &opts,
        start_step,
        resume_at,
        |row| {
            writeln!(
                metrics,
                "{},{},{:.6},{},{},{:.3}",
                row.step, row.phase, row.loss, row.lr, row.seq_len, row.wallclock
            )?;
            if row.step % 25 == 0 {
                println!(
                    "step {:>6}  phase {:<10}  loss {:.4}",
                    row.step, row.phase, row.loss
                );
            }
            Ok(())
        },
        |net, opt, step, phase, epochs_done| {
            save_checkpoint(
                &ckpt_path,
                net,
                &CheckpointMeta {
                    config: net.cfg.clone(),
                    warmstart_trained,
                    train_progress: Some(TrainProgress {
                        step,
                        phase,
                        epoch_in_phase: epochs_done,
                        adam_t: opt.step_count(),
                    }),
                },
                Some(&opt.moments()),
            )
        },
    )?;

    write_manifest(
        &a.out,
        &RunManifest {
            command: "train".into(),
            config: serde_json::json!({
                "train": cfg,
                "model": model.cfg,
                "schedule": phases,
                "warmstart_protocol": if warmstart_trained { "warm" } else { "cold" },
                "resumed_from": a.resume.as_ref().map(|p| p.display().to_string()),
            }),
            seed: Some(a.seed),
            inputs: vec![data.display().to_string(), a.config.display().to_string()],
            outputs: vec!["checkpoint.ckpt".into(), "metrics.csv".into()],
            version: env!("CARGO_PKG_VERSION").into(),
            wallclock_sec: started.elapsed().as_secs_f64(),
        },
    )?;
    println!(
        "train: {} steps -> {}",
        final_step,
        ckpt_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn validate_dataset_for_model(dataset: &Dataset) -> Result<()> {
    for seq in &dataset.sequences {
        let (h, w) = seq.sensor;
        if h < 8 || w < 8 {
            return Err(Error::config(format!(
                "{}: sensor {h}x{w} below the minimum 8x8 resolution",
                seq.name
            )));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct GridRow {
    label: String,
    trained_with_warmstart: bool,
    eval_warmstart: bool,
    iters: usize,
    epe: f64,
    npe: [f64; 3],
    valid_pixel_count: usize,
}

fn render_report(run: &EvalRun) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:<24} {:>10} {:>8} {:>8} {:>8} {:>12}\n",
        "sequence", "EPE", "1PE%", "2PE%", "3PE%", "pixels"
    ));
    for seq in &run.sequences {
        s.push_str(&format!(
            "{:<24} {:>10.4} {:>8.2} {:>8.2} {:>8.2} {:>12}\n",
            seq.name,
            seq.report.epe,
            seq.report.npe[0],
            seq.report.npe[1],
            seq.report.npe[2],
            seq.report.valid_pixel_count
        ));
    }
    s.push_str(&format!(
        "{:<24} {:>10.4} {:>8.2} {:>8.2} {:>8.2} {:>12}\n",
        "aggregate",
        run.aggregate.epe,
        run.aggregate.npe[0],
        run.aggregate.npe[1],
        run.aggregate.npe[2],
        run.aggregate.valid_pixel_count
    ));
    s.push_str(&format!(
        "protocol: warmstart={} iters={} mode={:?} (aggregate is valid-pixel-weighted)\n",
        run.protocol.warmstart, run.protocol.iters, run.protocol.mode
    ));
    s
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let started = Instant::now();
    let (model, meta, _) = load_checkpoint(&a.checkpoint)?;
    let data = data_root(a.data)?;
    let dataset = load_dataset(&data, model.cfg.voxel_bins, model.cfg.split_polarity)?;
    validate_dataset_for_model(&dataset)?;
    std::fs::create_dir_all(&a.out)?;
    let mode = match a.mode {
        ModeArg::Dense => EvalMode::Dense,
        ModeArg::Sparse => EvalMode::Sparse,
    };

    let mut outputs = Vec::new();
    if a.grid {
        // the five-row ablation grid: {no-WS, eval-WS, train+eval-WS} at the
        // base iteration count plus the two 100-iteration variants
        let (ws_model, ws_meta) = match &a.checkpoint_ws {
            Some(p) => {
                let (m, meta2, _) = load_checkpoint(p)?;
                (m, meta2)
            }
            None => (model.clone(), meta.clone()),
        };
        if !ws_meta.warmstart_trained {
            eprintln!(
                "eval: warning: train+eval-WS rows use a checkpoint that was \
                 not fine-tuned with warm starting"
            );
        }
        let rows_spec: [(&str, &FlowNet, &CheckpointMeta, bool, usize); 5] = [
            ("no-WS", &model, &meta, false, a.iters),
            ("eval-WS", &model, &meta, true, a.iters),
            ("train+eval-WS", &ws_model, &ws_meta, true, a.iters),
            ("no-WS-100it", &model, &meta, false, a.grid_iters),
            ("train+eval-WS-100it", &ws_model, &ws_meta, true, a.grid_iters),
        ];
        let mut rows = Vec::new();
        let mut table = format!(
            "{:<22} {:>6} {:>9} {:>10} {:>8} {:>8} {:>8}\n",
            "protocol", "iters", "train-WS", "EPE", "1PE%", "2PE%", "3PE%"
        );
        for (label, net, net_meta, ws_eval, iters) in rows_spec {
            let run = evaluate_dataset(
                net,
                &dataset,
                &EvalProtocol {
                    warmstart: ws_eval,
                    iters,
                    mode,
                },
            )?;
            table.push_str(&format!(
                "{:<22} {:>6} {:>9} {:>10.4} {:>8.2} {:>8.2} {:>8.2}\n",
                label,
                iters,
                net_meta.warmstart_trained,
                run.aggregate.epe,
                run.aggregate.npe[0],
                run.aggregate.npe[1],
                run.aggregate.npe[2]
            ));
            rows.push(GridRow {
                label: label.to_string(),
                trained_with_warmstart: net_meta.warmstart_trained,
                eval_warmstart: ws_eval,
                iters,
                epe: run.aggregate.epe,
                npe: run.aggregate.npe,
                valid_pixel_count: run.aggregate.valid_pixel_count,
            });
        }
        print!("{table}");
        std::fs::write(a.out.join("ablation_grid.txt"), &table)?;
        std::fs::write(
            a.out.join("ablation_grid.json"),
            serde_json::to_string_pretty(&rows)
                .map_err(|e| Error::data(format!("serialize grid: {e}")))?,
        )?;
        outputs.push("ablation_grid.txt".into());
        outputs.push("ablation_grid.json".into());
    } else {
        let ws_eval = match a.warmstart {
            WarmstartArg::Off => false,
            WarmstartArg::Eval | WarmstartArg::TrainEval => true,
        };
        if a.warmstart == WarmstartArg::TrainEval && !meta.warmstart_trained {
            eprintln!(
                "eval: warning: --warmstart train-eval but the checkpoint was \
                 not fine-tuned with warm starting"
            );
        }
        let run = evaluate_dataset(
            &model,
            &dataset,
            &EvalProtocol {
                warmstart: ws_eval,
                iters: a.iters,
                mode,
            },
        )?;
        let table = render_report(&run);
        print!("{table}");
        std::fs::write(a.out.join("report.txt"), &table)?;
        std::fs::write(
            a.out.join("report.json"),
            serde_json::to_string_pretty(&run)
                .map_err(|e| Error::data(format!("serialize report: {e}")))?,
        )?;
        outputs.push("report.txt".into());
        outputs.push("report.json".into());
    }

    write_manifest(
        &a.out,
        &RunManifest {
            command: "eval".into(),
            config: serde_json::json!({
                "checkpoint": a.checkpoint.display().to_string(),
                "warmstart": match a.warmstart {
                    WarmstartArg::Off => "off",
                    WarmstartArg::Eval => "eval",
                    WarmstartArg::TrainEval => "train-eval",
                },
                "iters": a.iters,
                "mode": mode,
                "grid": a.grid,
            }),
            seed: None,
            inputs: vec![
                a.checkpoint.display().to_string(),
                data.display().to_string(),
            ],
            outputs,
            version: env!("CARGO_PKG_VERSION").into(),
            wallclock_sec: started.elapsed().as_secs_f64(),
        },
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// viz
// ---------------------------------------------------------------------------

fn cmd_viz(a: VizArgs) -> Result<()> {
    let flow = read_flow_any(&a.flow)?;
    crate::viz::write_flow_color_png(&a.out, &flow, a.scale)?;
    println!("viz: {} -> {}", a.flow.display(), a.out.display());
    Ok(())
}
