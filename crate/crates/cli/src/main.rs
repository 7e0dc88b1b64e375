use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use sm3d_cli::*;
use sm3d_core::deteval::{Difficulty, IouMode};

#[derive(Parser)]
#[command(name = "sm3d", version, about = "Monocular mapping and pseudo-lidar 3D detection toolkit")]
struct Cli {
    /// Emit one JSON object per result instead of a table.
    #[arg(long, global = true)]
    json: bool,
    /// Worker threads for frame-level parallelism (0 = all cores).
    #[arg(long, global = true, env = "SM3D_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Bev,
    #[value(name = "3d")]
    ThreeD,
}

#[derive(Clone, Copy, ValueEnum)]
enum Level {
    Easy,
    Moderate,
    Hard,
}

#[derive(Subcommand)]
enum Command {
    /// Back-project a 16-bit depth PNG into a KITTI-style .bin point cloud.
    Pseudolidar {
        depth: PathBuf,
        calib: PathBuf,
        out: PathBuf,
        #[arg(long, default_value_t = 80.0)]
        max_depth: f64,
        /// Write points in the Velodyne axis convention instead of the camera frame.
        #[arg(long)]
        velodyne_frame: bool,
    },
    /// Windowed ATE of an estimated trajectory against ground truth.
    Traj {
        estimate: PathBuf,
        ground_truth: PathBuf,
        /// The estimate file holds frame-to-frame poses to be chained.
        #[arg(long)]
        relative: bool,
        #[arg(long, default_value_t = 3)]
        snippet_len: usize,
        /// Write a top-view plot of both trajectories.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Average precision of KITTI label predictions.
    Ap {
        pred_dir: PathBuf,
        gt_dir: PathBuf,
        #[arg(long, default_value_t = 0.7)]
        iou: f64,
        /// Restrict to one IoU mode (default: both).
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Restrict to one difficulty level (default: all three).
        #[arg(long, value_enum)]
        level: Option<Level>,
        /// Object class to evaluate; "all" keeps every class.
        #[arg(long, default_value = "Car")]
        class: String,
    },
    /// Pose recovery on synthetic snippets with and without the skip-time penalty.
    OptimizeDemo {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 0.05)]
        motion: f64,
        #[arg(long, default_value_t = 0.02)]
        noise: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda_pc: f64,
        #[arg(long, default_value_t = 50)]
        snippets: usize,
        #[arg(long, default_value_t = 208)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
    },
    /// Per-stage timing over depth PNG frames.
    Bench {
        frames: Vec<PathBuf>,
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long, default_value_t = MIN_BENCH_REPS)]
        reps: usize,
    },
}

fn run(cli: Cli) -> Result<Rendered> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(match cli.command {
        Command::Pseudolidar {
            depth,
            calib,
            out,
            max_depth,
            velodyne_frame,
        } => run_pseudolidar(&depth, &calib, &out, max_depth, velodyne_frame)?.render(),
        Command::Traj {
            estimate,
            ground_truth,
            relative,
            snippet_len,
            svg,
        } => render_ate(&run_traj(&estimate, &ground_truth, relative, snippet_len, svg.as_deref())?),
        Command::Ap {
            pred_dir,
            gt_dir,
            iou,
            mode,
            level,
            class,
        } => {
            let modes = match mode {
                Some(Mode::Bev) => vec![IouMode::Bev],
                Some(Mode::ThreeD) => vec![IouMode::ThreeD],
                None => vec![IouMode::Bev, IouMode::ThreeD],
            };
            let levels = match level {
                Some(Level::Easy) => vec![Difficulty::Easy],
                Some(Level::Moderate) => vec![Difficulty::Moderate],
                Some(Level::Hard) => vec![Difficulty::Hard],
                None => Difficulty::ALL.to_vec(),
            };
            let class = (class != "all").then_some(class);
            let cells = run_ap(&pred_dir, &gt_dir, iou, &modes, &levels, class.as_deref())?;
            render_ap(&cells, iou, class.as_deref())
        }
        Command::OptimizeDemo {
            seed,
            motion,
            noise,
            lambda_pc,
            snippets,
            width,
            height,
        } => {
            let cfg = DemoConfig {
                seed,
                motion,
                noise,
                lambda_pc,
                snippets,
                width,
                height,
            };
            render_demo(&cfg, &run_optimize_demo(&cfg)?)
        }
        Command::Bench { frames, calib, reps } => render_bench(&run_bench(&frames, calib.as_deref(), reps)?),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let as_json = cli.json;
    match run(cli) {
        Ok(rendered) => {
            let mut out = std::io::stdout().lock();
            if out.write_all(rendered.output(as_json).as_bytes()).is_err() {
                return ExitCode::FAILURE;
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
