//! Command-line front end: synthetic dataset generation, two-stage
//! training, rendering, test-pose registration, evaluation, and trajectory
//! export. Exit codes: 0 on success, 1 on usage errors, 2 on runtime
//! errors (printed to standard error).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use velosdf::camera::Intrinsics;
use velosdf::field::FieldNetworks;
use velosdf::geometry::Pose;
use velosdf::io::checkpoint::{load_checkpoint, save_checkpoint};
use velosdf::io::config::{apply_overrides, parse_config_file, ConfigReader};
use velosdf::io::dataset::{load_dataset, SceneDataset};
use velosdf::io::pfm::write_pfm;
use velosdf::io::traj::write_trajectory;
use velosdf::io::{write_atomic, write_json_atomic, write_png_rgb, IoError};
use velosdf::motion::MotionNetwork;
use velosdf::synthetic::{generate_dataset, orbiter_config, orbiter_profile, orbiter_scene, GeneratorConfig};
use velosdf::trainer::{
    evaluate, initialize, loss_csv_text, predicted_trajectory, register_test_pose, render_views,
    resolve_world_frame, train_stage1, train_stage2, training_views, validate_checkpoint,
    LossRow, TimeAxis, TrainConfig, TrainError,
};

#[derive(Parser)]
#[command(
    name = "velosdf",
    version,
    about = "Joint camera-motion and time-dependent neural SDF estimation from image sequences"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration source shared by all subcommands: an optional flat
/// `key = value` file plus repeatable inline overrides.
#[derive(Args)]
struct ConfigArgs {
    /// Config file with `key = value` lines (`#` comments).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline config override, repeatable (highest precedence).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SceneKind {
    /// Unit sphere over a ground plane, quarter-circle camera orbit.
    Orbiter,
}

#[derive(Clone, Copy, ValueEnum)]
enum FrameSet {
    All,
    Test,
    Train,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset with analytic ground truth.
    Generate {
        #[arg(long, value_enum, default_value_t = SceneKind::Orbiter)]
        scene: SceneKind,
        /// Dataset output directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train on a dataset directory (both stages unless --stage is given).
    Train {
        /// Dataset directory (from `generate` or the same layout).
        #[arg(long)]
        data: PathBuf,
        /// Run directory for checkpoints, loss log, and the config echo.
        #[arg(long)]
        out: PathBuf,
        /// Run only one stage; stage 2 resumes from `stage1.ckpt` in --out.
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..=2))]
        stage: Option<u32>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Render dataset frames from a trained run's predicted poses.
    Render {
        /// Run directory holding effective.cfg and checkpoints.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory for `%04d.png` / `%04d.pfm` pairs.
        #[arg(long)]
        out: PathBuf,
        /// Which dataset frames to render.
        #[arg(long, value_enum, default_value_t = FrameSet::All)]
        frames: FrameSet,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Register held-out test frames against the trained field.
    RegisterPoses {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output trajectory file (default: <run>/registered_poses.txt).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a run: registers, renders, and scores the test views and
    /// the predicted trajectory; writes metrics.json.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory (default: <run>/eval).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Export the predicted camera trajectory at every dataset frame time
    /// (TUM format: timestamp tx ty tz qx qy qz qw).
    ExportTraj {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output trajectory file.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            std::process::exit(0);
        }
        Err(e) => {
            eprint!("{e}");
            std::process::exit(1);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        let mut source = std::error::Error::source(&e);
        while let Some(s) = source {
            eprintln!("  caused by: {s}");
            source = s.source();
        }
        std::process::exit(2);
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Msg(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { scene, out, cfg } => cmd_generate(scene, &out, &cfg),
        Command::Train {
            data,
            out,
            stage,
            cfg,
        } => cmd_train(&data, &out, stage, &cfg),
        Command::Render {
            run,
            data,
            out,
            frames,
            cfg,
        } => cmd_render(&run, &data, &out, frames, &cfg),
        Command::RegisterPoses {
            run,
            data,
            out,
            cfg,
        } => cmd_register(&run, &data, out.as_deref(), &cfg),
        Command::Eval {
            run,
            data,
            out,
            cfg,
        } => cmd_eval(&run, &data, out.as_deref(), &cfg),
        Command::ExportTraj {
            run,
            data,
            out,
            cfg,
        } => cmd_export_traj(&run, &data, &out, &cfg),
    }
}

// ---------------------------------------------------------------------------
// Configuration plumbing

/// Config map from `--config` (if any) plus `--set` overrides.
fn fresh_config_map(cfg: &ConfigArgs) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = match &cfg.config {
        Some(path) => parse_config_file(path)?,
        None => BTreeMap::new(),
    };
    apply_overrides(&mut map, &cfg.set)?;
    Ok(map)
}

/// Config map for commands operating on an existing run: the run's stored
/// `effective.cfg` as the base, then `--config`, then `--set`.
fn run_config_map(run: &Path, cfg: &ConfigArgs) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = parse_config_file(&run.join("effective.cfg"))?;
    if let Some(path) = &cfg.config {
        map.extend(parse_config_file(path)?);
    }
    apply_overrides(&mut map, &cfg.set)?;
    Ok(map)
}

/// `COPE_DETERMINISTIC=1` forces deterministic mode regardless of config.
fn deterministic_forced() -> bool {
    std::env::var("COPE_DETERMINISTIC").map(|v| v == "1").unwrap_or(false)
}

fn write_config_echo(path: &Path, map: &BTreeMap<String, String>) -> Result<(), IoError> {
    let mut text = String::new();
    for (k, v) in map {
        text.push_str(k);
        text.push_str(" = ");
        text.push_str(v);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

/// Loads the dataset and the training config together: `test_every` must
/// be known before the dataset can be split, and `near`/`far` defaults
/// come from the dataset metadata.
fn load_data_and_config(
    data: &Path,
    map: BTreeMap<String, String>,
) -> Result<(SceneDataset, TrainConfig), CliError> {
    let mut reader = ConfigReader::new(map);
    let test_every = reader.get_usize("test_every", TrainConfig::default().test_every)?;
    let ds = load_dataset(data, test_every)?;
    let mut cfg = TrainConfig::from_reader(&mut reader, ds.meta.near, ds.meta.far)?;
    reader.finish()?;
    if deterministic_forced() {
        cfg.deterministic = true;
    }
    Ok((ds, cfg))
}

/// Builds the networks for a config and loads the preferred checkpoint of
/// a run (`stage2.ckpt` if present, else `stage1.ckpt`).
fn load_model(
    run: &Path,
    cfg: &TrainConfig,
) -> Result<(FieldNetworks, MotionNetwork, velosdf::autodiff::ParameterStore), CliError> {
    let field = FieldNetworks::new(cfg.field.clone());
    let motion = MotionNetwork::new(cfg.motion.clone());
    let path = ["stage2.ckpt", "stage1.ckpt"]
        .iter()
        .map(|n| run.join(n))
        .find(|p| p.exists())
        .ok_or_else(|| {
            CliError::Msg(format!(
                "no checkpoint in {}: expected stage2.ckpt or stage1.ckpt",
                run.display()
            ))
        })?;
    let ckpt = load_checkpoint(&path)?;
    validate_checkpoint(&field, &motion, &ckpt.store)?;
    Ok((field, motion, ckpt.store))
}

// ---------------------------------------------------------------------------
// generate

fn cmd_generate(scene: SceneKind, out: &Path, cfg_args: &ConfigArgs) -> Result<(), CliError> {
    let SceneKind::Orbiter = scene;
    let base = orbiter_config();
    let mut reader = ConfigReader::new(fresh_config_map(cfg_args)?);
    let gen = GeneratorConfig {
        intrinsics: Intrinsics {
            fx: reader.get_f64("fx", base.intrinsics.fx)?,
            fy: reader.get_f64("fy", base.intrinsics.fy)?,
            cx: reader.get_f64("cx", base.intrinsics.cx)?,
            cy: reader.get_f64("cy", base.intrinsics.cy)?,
            width: reader.get_usize("width", base.intrinsics.width)?,
            height: reader.get_usize("height", base.intrinsics.height)?,
        },
        frames: reader.get_usize("frames", base.frames)?,
        near: reader.get_f64("near", base.near)?,
        far: reader.get_f64("far", base.far)?,
        seed: reader.get_u64("seed", base.seed)?,
    };
    reader.finish()?;
    if gen.frames < 2 {
        return Err(CliError::Msg("frames must be at least 2".into()));
    }

    generate_dataset(&orbiter_scene(), &orbiter_profile(), &gen, out)?;
    let mut echo = BTreeMap::new();
    echo.insert("scene".to_string(), "orbiter".to_string());
    echo.insert("fx".to_string(), gen.intrinsics.fx.to_string());
    echo.insert("fy".to_string(), gen.intrinsics.fy.to_string());
    echo.insert("cx".to_string(), gen.intrinsics.cx.to_string());
    echo.insert("cy".to_string(), gen.intrinsics.cy.to_string());
    echo.insert("width".to_string(), gen.intrinsics.width.to_string());
    echo.insert("height".to_string(), gen.intrinsics.height.to_string());
    echo.insert("frames".to_string(), gen.frames.to_string());
    echo.insert("near".to_string(), gen.near.to_string());
    echo.insert("far".to_string(), gen.far.to_string());
    echo.insert("seed".to_string(), gen.seed.to_string());
    write_config_echo(&out.join("effective.cfg"), &echo)?;
    println!(
        "generated {} frames of {}x{} at {}",
        gen.frames,
        gen.intrinsics.width,
        gen.intrinsics.height,
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train

/// Parses a loss CSV written by an earlier invocation, so `--stage 2` can
/// keep the stage-1 rows in the combined log. Returns an empty list when
/// the file is absent or malformed.
fn read_stage_rows(path: &Path, stage: u32) -> Vec<LossRow> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return Vec::new();
    };
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            continue;
        }
        let parse = |s: &str| s.parse::<f64>().ok();
        let (Ok(epoch), Ok(st)) = (f[0].parse::<usize>(), f[1].parse::<u32>()) else {
            continue;
        };
        let vals: Option<Vec<f64>> = f[2..9].iter().map(|s| parse(s)).collect();
        let Some(v) = vals else { continue };
        if st == stage {
            rows.push(LossRow {
                epoch,
                stage: st,
                rgb: v[0],
                eik: v[1],
                flow: v[2],
                photo: v[3],
                sdf: v[4],
                total: v[5],
                lambda_sdf: v[6],
            });
        }
    }
    rows
}

fn cmd_train(
    data: &Path,
    out: &Path,
    stage: Option<u32>,
    cfg_args: &ConfigArgs,
) -> Result<(), CliError> {
    let (ds, cfg) = load_data_and_config(data, fresh_config_map(cfg_args)?)?;
    std::fs::create_dir_all(out).map_err(IoError::from)?;
    let echo = cfg.echo();
    write_config_echo(&out.join("effective.cfg"), &echo)?;

    let views = training_views(&ds);
    let axis = TimeAxis::from_times(&ds.times)?;
    let run_stage1 = stage != Some(2);
    let run_stage2 = stage != Some(1);

    let (field, motion, mut store, mut rows) = if run_stage1 {
        let (f, m, s) = initialize(&cfg);
        (f, m, s, Vec::new())
    } else {
        let f = FieldNetworks::new(cfg.field.clone());
        let m = MotionNetwork::new(cfg.motion.clone());
        let ckpt = load_checkpoint(&out.join("stage1.ckpt"))?;
        validate_checkpoint(&f, &m, &ckpt.store)?;
        let prior = read_stage_rows(&out.join("loss.csv"), 1);
        (f, m, ckpt.store, prior)
    };

    let mut progress = |row: &LossRow| {
        if row.epoch % 50 == 0 {
            println!(
                "stage {} epoch {:>4}: total {:.6} (rgb {:.6}, eik {:.6})",
                row.stage, row.epoch, row.total, row.rgb, row.eik
            );
        }
    };

    if run_stage1 {
        let t0 = Instant::now();
        let r1 = train_stage1(
            &field,
            &motion,
            &mut store,
            &views,
            &ds.intrinsics,
            &axis,
            &cfg,
            &mut progress,
        )?;
        println!(
            "stage 1 done: {} epochs in {:.1}s, final total {:.6}",
            r1.len(),
            t0.elapsed().as_secs_f64(),
            r1.last().map_or(f64::NAN, |r| r.total)
        );
        save_checkpoint(
            &out.join("stage1.ckpt"),
            &store,
            r1.len() as u64,
            1,
            &echo,
        )?;
        rows.extend(r1);
        write_atomic(&out.join("loss.csv"), loss_csv_text(&rows).as_bytes())?;
    }
    if run_stage2 {
        let t0 = Instant::now();
        let r2 = train_stage2(
            &field,
            &motion,
            &mut store,
            &views,
            &ds.intrinsics,
            &axis,
            &cfg,
            &mut progress,
        )?;
        println!(
            "stage 2 done: {} epochs in {:.1}s, final total {:.6}",
            r2.len(),
            t0.elapsed().as_secs_f64(),
            r2.last().map_or(f64::NAN, |r| r.total)
        );
        save_checkpoint(
            &out.join("stage2.ckpt"),
            &store,
            r2.len() as u64,
            2,
            &echo,
        )?;
        rows.extend(r2);
        write_atomic(&out.join("loss.csv"), loss_csv_text(&rows).as_bytes())?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// render

fn frame_subset(ds: &SceneDataset, which: FrameSet) -> Vec<usize> {
    match which {
        FrameSet::All => (0..ds.frame_count()).collect(),
        FrameSet::Test => ds.test_indices.clone(),
        FrameSet::Train => ds.train_indices.clone(),
    }
}

fn write_view(
    dir: &Path,
    frame: usize,
    image: &[f64],
    depth: &[f64],
    width: usize,
    height: usize,
) -> Result<(), IoError> {
    write_png_rgb(&dir.join(format!("{frame:04}.png")), image, width, height)?;
    write_pfm(&dir.join(format!("{frame:04}.pfm")), depth, width, height)
}

fn cmd_render(
    run: &Path,
    data: &Path,
    out: &Path,
    frames: FrameSet,
    cfg_args: &ConfigArgs,
) -> Result<(), CliError> {
    let (ds, cfg) = load_data_and_config(data, run_config_map(run, cfg_args)?)?;
    let (field, motion, store) = load_model(run, &cfg)?;
    let views = training_views(&ds);
    let (_, t_w) = resolve_world_frame(&views, cfg.world_frame)?;
    let axis = TimeAxis::from_times(&ds.times)?;
    let icfg = cfg.integration(axis.frame_dt);

    let subset = frame_subset(&ds, frames);
    let traj = predicted_trajectory(&motion, &store, &ds.times, t_w, &icfg)?;
    std::fs::create_dir_all(out).map_err(IoError::from)?;
    for &i in &subset {
        let view = render_views(&field, &store, &[traj[i].1], &ds.intrinsics, &cfg, t_w)
            .pop()
            .expect("one pose in, one view out");
        write_view(out, i, &view.image, &view.depth, ds.width, ds.height)?;
    }
    println!("rendered {} frames to {}", subset.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// register-poses

fn cmd_register(
    run: &Path,
    data: &Path,
    out: Option<&Path>,
    cfg_args: &ConfigArgs,
) -> Result<(), CliError> {
    let (ds, cfg) = load_data_and_config(data, run_config_map(run, cfg_args)?)?;
    let (field, motion, store) = load_model(run, &cfg)?;
    let views = training_views(&ds);
    let (_, t_w) = resolve_world_frame(&views, cfg.world_frame)?;
    let axis = TimeAxis::from_times(&ds.times)?;
    let icfg = cfg.integration(axis.frame_dt);
    let traj = predicted_trajectory(&motion, &store, &ds.times, t_w, &icfg)?;

    let mut registered: Vec<(f64, Pose)> = Vec::new();
    for &i in &ds.test_indices {
        let nearest = *ds
            .train_indices
            .iter()
            .min_by_key(|&&j| (i.abs_diff(j), j))
            .expect("training split is non-empty");
        let outcome = register_test_pose(
            &field,
            &store,
            &ds.images[i],
            &traj[nearest].1,
            &ds.intrinsics,
            t_w,
            &cfg,
            i as u64,
        )?;
        println!(
            "frame {i:>3}: loss {:.6} -> {:.6} after {} iters{}",
            outcome.initial_loss,
            outcome.final_loss,
            outcome.iterations,
            if outcome.converged { "" } else { " (no improvement)" }
        );
        registered.push((ds.times[i], outcome.pose));
    }
    let out_path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run.join("registered_poses.txt"));
    write_trajectory(&out_path, &registered)?;
    println!("wrote {} poses to {}", registered.len(), out_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

fn cmd_eval(
    run: &Path,
    data: &Path,
    out: Option<&Path>,
    cfg_args: &ConfigArgs,
) -> Result<(), CliError> {
    let (ds, cfg) = load_data_and_config(data, run_config_map(run, cfg_args)?)?;
    let (field, motion, store) = load_model(run, &cfg)?;
    let out_dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run.join("eval"));
    let renders_dir = out_dir.join("renders");
    std::fs::create_dir_all(&renders_dir).map_err(IoError::from)?;

    let t0 = Instant::now();
    let ev = evaluate(&field, &motion, &store, &ds, &cfg)?;

    write_config_echo(&out_dir.join("effective.cfg"), &cfg.echo())?;
    write_json_atomic(&out_dir.join("metrics.json"), &ev.summary)?;
    let registered: Vec<(f64, Pose)> = ev
        .frames
        .iter()
        .map(|s| (ds.times[s.frame], s.register.pose))
        .collect();
    write_trajectory(&out_dir.join("registered_poses.txt"), &registered)?;
    write_trajectory(&out_dir.join("traj_pred.txt"), &ev.trajectory)?;
    for (score, view) in ev.frames.iter().zip(&ev.rendered) {
        write_view(
            &renders_dir,
            score.frame,
            &view.image,
            &view.depth,
            ds.width,
            ds.height,
        )?;
    }

    println!("evaluated {} test frames in {:.1}s", ev.frames.len(), t0.elapsed().as_secs_f64());
    for s in &ev.frames {
        println!(
            "frame {:>3}: psnr {:.2} ssim {:.4} abrel {:.4} delta1 {:.4}",
            s.frame, s.psnr, s.ssim, s.depth.abrel, s.depth.delta1
        );
    }
    let m = &ev.summary;
    println!(
        "summary: psnr {:.2} ssim {:.4} abrel {:.4} sqrel {:.4} delta1 {:.4}",
        m.psnr, m.ssim, m.abrel, m.sqrel, m.delta1
    );
    println!(
        "trajectory: ate {:.6} rpe_t {:.6} rpe_r {:.4} deg over {} frames",
        m.ate,
        m.rpe_t,
        m.rpe_r,
        ds.frame_count()
    );
    println!("wrote metrics.json to {}", out_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// export-traj

fn cmd_export_traj(
    run: &Path,
    data: &Path,
    out: &Path,
    cfg_args: &ConfigArgs,
) -> Result<(), CliError> {
    let (ds, cfg) = load_data_and_config(data, run_config_map(run, cfg_args)?)?;
    let (_, motion, store) = load_model(run, &cfg)?;
    let views = training_views(&ds);
    let (_, t_w) = resolve_world_frame(&views, cfg.world_frame)?;
    let axis = TimeAxis::from_times(&ds.times)?;
    let icfg = cfg.integration(axis.frame_dt);
    let traj = predicted_trajectory(&motion, &store, &ds.times, t_w, &icfg)?;
    write_trajectory(out, &traj)?;
    println!("wrote {} poses to {}", traj.len(), out.display());
    Ok(())
}
