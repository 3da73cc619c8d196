use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mosnet::datasets::{CameraMotion, ShapeMix, SyntheticConfig};
use mosnet_cli::commands::{self, EvaluateArgs, PredictArgs};
use mosnet_cli::config::RunConfig;
use mosnet_cli::error::{CliError, CliResult};

/// Moving-object segmentation: training, prediction and evaluation runs.
#[derive(Debug, Parser)]
#[command(name = "mosnet", version)]
struct Cli {
    /// Force serial execution. All commands currently run single-threaded,
    /// so this only documents intent in scripts.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set train.max_epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> CliResult<RunConfig> {
        RunConfig::load(&self.config, &self.overrides)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on the development scenes and write a run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from the latest epoch checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Predict masks for every eligible frame of a scene.
    Predict {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scene directory.
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write probability masks (`prob%06d.png`).
        #[arg(long)]
        probabilities: bool,
        /// Force alignment on or off regardless of the config.
        #[arg(long)]
        align: Option<bool>,
    },
    /// Score predictions (`<pred>/<scene>/bin%06d.png`) against ground truth.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        predictions: PathBuf,
        /// Ground-truth dataset root; defaults to `dataset.root`.
        #[arg(long)]
        gt_root: Option<PathBuf>,
        /// Scenes to score; defaults to `split.evaluation_scenes`.
        #[arg(long)]
        scene: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Also write `pr_curve.csv` (needs probability masks).
        #[arg(long)]
        pr_curve: bool,
        /// Also write `sweep.csv` (needs probability masks).
        #[arg(long)]
        sweep: bool,
    },
    /// Align every sliding block of a scene onto its center frame.
    Align {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write `homographies.txt`.
        #[arg(long)]
        dump_homographies: bool,
    },
    /// Pooled F-measure over thresholds 0.0..0.9 from probability masks.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        scene: Vec<String>,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-layer parameter counts as CSV.
    ReportParams {
        #[command(flatten)]
        cfg: OptionalConfig,
    },
    /// Receptive field per layer as CSV.
    ReportRf {
        #[command(flatten)]
        cfg: OptionalConfig,
    },
    /// Output dimensions per layer as CSV.
    ReportDims {
        #[command(flatten)]
        cfg: OptionalConfig,
    },
    /// Generate synthetic scenes in the CDNet layout.
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 30)]
        frames: usize,
        /// Frame size as HxW.
        #[arg(long, default_value = "64x64")]
        size: String,
        #[arg(long, default_value_t = 1)]
        objects: usize,
        /// `static`, `pan:DX,DY` or `jitter:SIGMA`.
        #[arg(long, default_value = "static")]
        camera: String,
        #[arg(long, default_value = "synthetic")]
        category: String,
        #[arg(long, default_value = "scene")]
        name: String,
    },
    /// Convert LASIESTA color annotations to gray label masks.
    RelabelLasiesta {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, clap::Args)]
struct OptionalConfig {
    /// Run configuration; the default model when absent.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl OptionalConfig {
    fn load(&self) -> CliResult<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p, &self.overrides),
            None => RunConfig::parse("", &self.overrides).map_err(CliError::Config),
        }
    }
}

fn parse_size(s: &str) -> CliResult<(usize, usize)> {
    let bad = || CliError::Config(format!("size `{s}` is not HxW"));
    let (h, w) = s.split_once('x').ok_or_else(bad)?;
    Ok((h.parse().map_err(|_| bad())?, w.parse().map_err(|_| bad())?))
}

fn parse_camera(s: &str) -> CliResult<CameraMotion> {
    let bad = || CliError::Config(format!("camera `{s}` is not static, pan:DX,DY or jitter:SIGMA"));
    match s.split_once(':') {
        None if s == "static" => Ok(CameraMotion::None),
        Some(("pan", v)) => {
            let (dx, dy) = v.split_once(',').ok_or_else(bad)?;
            Ok(CameraMotion::Pan {
                dx: dx.parse().map_err(|_| bad())?,
                dy: dy.parse().map_err(|_| bad())?,
            })
        }
        Some(("jitter", v)) => Ok(CameraMotion::Jitter {
            sigma: v.parse().map_err(|_| bad())?,
        }),
        _ => Err(bad()),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { cfg, resume } => {
            let run = commands::cmd_train(&cfg.load()?, resume)?;
            println!("{}", run.display());
        }
        Command::Predict {
            cfg,
            checkpoint,
            scene,
            out,
            probabilities,
            align,
        } => {
            let args = PredictArgs {
                checkpoint,
                scene,
                out,
                probabilities,
                align,
            };
            let n = commands::cmd_predict(&cfg.load()?, &args)?;
            println!("wrote {n} masks to {}", args.out.display());
        }
        Command::Evaluate {
            cfg,
            predictions,
            gt_root,
            scene,
            out,
            pr_curve,
            sweep,
        } => {
            let mut config = cfg.load()?;
            if let Some(root) = gt_root {
                config.dataset.root = root;
            }
            let args = EvaluateArgs {
                predictions,
                scenes: scene,
                out,
                pr_curve,
                sweep,
            };
            let summary = commands::cmd_evaluate(&config, &args)?;
            print!("{}", commands::summary_csv(&summary));
        }
        Command::Align {
            cfg,
            scene,
            out,
            dump_homographies,
        } => {
            let n = commands::cmd_align(&cfg.load()?, &scene, &out, dump_homographies)?;
            println!("aligned {n} blocks into {}", out.display());
        }
        Command::Sweep {
            cfg,
            predictions,
            scene,
            out,
        } => {
            let r = commands::cmd_sweep(&cfg.load()?, &predictions, &scene, &out)?;
            print!("{}", commands::sweep_csv(&r));
        }
        Command::ReportParams { cfg } => print!("{}", commands::cmd_report_params(&cfg.load()?)?),
        Command::ReportRf { cfg } => print!("{}", commands::cmd_report_rf(&cfg.load()?)?),
        Command::ReportDims { cfg } => print!("{}", commands::cmd_report_dims(&cfg.load()?)?),
        Command::MakeSynthetic {
            out,
            count,
            seed,
            frames,
            size,
            objects,
            camera,
            category,
            name,
        } => {
            let (height, width) = parse_size(&size)?;
            let base = SyntheticConfig {
                name,
                category,
                height,
                width,
                frames,
                object_count: objects,
                shapes: ShapeMix::Mixed,
                camera: parse_camera(&camera)?,
                seed,
                ..Default::default()
            };
            for s in commands::cmd_make_synthetic(&base, &out, count)? {
                println!("{s}");
            }
        }
        Command::RelabelLasiesta { input, out } => {
            let n = commands::cmd_relabel_lasiesta(&input, &out)?;
            println!("relabeled {n} masks into {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if cli.deterministic {
        log::debug!("deterministic mode");
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
