mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use commands::UsageError;

#[derive(Parser)]
#[command(name = "emfuse", version, about = "EM-sensor and camera fusion for body pose: simulate, calibrate, fit, evaluate, export")]
struct Cli {
    /// Caps internal parallelism.
    #[arg(long, env = "EMFUSE_THREADS", global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic sequence bundle with ground truth.
    Simulate {
        /// Scenario JSON; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        fps: Option<u32>,
        #[arg(long, default_value = "synthetic")]
        subject: String,
    },
    /// Run one calibration solver and merge its result into a calibration file.
    Calibrate {
        bundle: PathBuf,
        #[arg(long, value_enum)]
        mode: CalibMode,
        /// Calibration JSON; updated in place when it exists.
        #[arg(long)]
        out: PathBuf,
        /// Fitted solution, for `root`.
        #[arg(long)]
        solution: Option<PathBuf>,
    },
    /// Fit a sequence.
    Fit {
        bundle: PathBuf,
        #[arg(long)]
        calibration: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        stage: StageArg,
        /// Solver configuration JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Earlier solution providing the previous stage's output.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Metrics of every stage in a solution against the bundle's ground truth.
    Evaluate {
        solution: PathBuf,
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Maps device-world stages into the studio world.
        #[arg(long)]
        calibration: Option<PathBuf>,
        #[arg(long)]
        fps: Option<u32>,
    },
    /// Per-frame poses, joints and meshes of one stage.
    Export {
        solution: PathBuf,
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        stage: StageArg,
        #[arg(long)]
        calibration: Option<PathBuf>,
        /// Also write one OBJ mesh per frame.
        #[arg(long)]
        meshes: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CalibMode {
    Source,
    Skin,
    Camera,
    Root,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    All,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(UsageError("EMFUSE_THREADS must be positive".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Simulate {
            config,
            out,
            seed,
            fps,
            subject,
        } => commands::simulate(config.as_deref(), &out, seed, fps, &subject),
        Command::Calibrate {
            bundle,
            mode,
            out,
            solution,
        } => commands::calibrate(&bundle, mode, &out, solution.as_deref()),
        Command::Fit {
            bundle,
            calibration,
            out,
            stage,
            config,
            from,
        } => commands::fit(&bundle, &calibration, &out, stage, config.as_deref(), from.as_deref()),
        Command::Evaluate {
            solution,
            bundle,
            out,
            calibration,
            fps,
        } => commands::evaluate(&solution, &bundle, &out, calibration.as_deref(), fps),
        Command::Export {
            solution,
            bundle,
            out,
            stage,
            calibration,
            meshes,
        } => commands::export(&solution, &bundle, &out, stage, calibration.as_deref(), meshes),
    }
}

/// 3 for numerical failures, 2 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err
        .chain()
        .any(|e| e.downcast_ref::<emfuse::Error>().is_some_and(emfuse::Error::is_numerical));
    if numerical {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
