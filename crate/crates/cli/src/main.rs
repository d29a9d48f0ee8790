use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dydiff::experiment::{exit_code, run, Axis, Command, ExperimentConfig};
use dydiff::policy::Mode;

#[derive(Parser, Debug)]
#[command(name = "dydiff", version, about = "Diffusion-corrected rollouts for offline RL")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Flat JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run this seed only; overrides `seeds`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Baseline,
    Dydiff,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AxisArg {
    #[value(name = "M")]
    M,
    #[value(name = "L")]
    L,
    Eta,
    Alpha,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Collect the offline dataset.
    GenData(Common),
    /// Fit the dynamics and reward models.
    TrainWorld(Common),
    /// Fit the trajectory denoiser.
    TrainDiffusion(Common),
    /// Train TD3+BC with or without synthetic rollouts.
    TrainPolicy {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "dydiff")]
        mode: ModeArg,
    },
    /// Sweep one rollout hyperparameter in dydiff mode.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: AxisArg,
        #[arg(long, required = true, num_args = 1.., value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Check the return-gap bounds on random tabular MDPs.
    VerifyBounds(Common),
    /// Compare autoregressive and diffusion rollout error over the horizon.
    AnalyzeMse(Common),
}

fn fail(code: i32, message: &str) -> ExitCode {
    let line = message.lines().next().unwrap_or("").trim();
    eprintln!("DYDIFF-ERR: {line}");
    ExitCode::from(code as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let line = text.strip_prefix("error: ").unwrap_or(&text);
            return fail(2, line);
        }
    };
    let (common, command) = match cli.command {
        Cmd::GenData(c) => (c, Command::GenData),
        Cmd::TrainWorld(c) => (c, Command::TrainWorld),
        Cmd::TrainDiffusion(c) => (c, Command::TrainDiffusion),
        Cmd::TrainPolicy { common, mode } => {
            let mode = match mode {
                ModeArg::Baseline => Mode::Baseline,
                ModeArg::Dydiff => Mode::Dydiff,
            };
            (common, Command::TrainPolicy { mode })
        }
        Cmd::Ablate { common, axis, values } => {
            let axis = match axis {
                AxisArg::M => Axis::M,
                AxisArg::L => Axis::L,
                AxisArg::Eta => Axis::Eta,
                AxisArg::Alpha => Axis::Alpha,
            };
            (common, Command::Ablate { axis, values })
        }
        Cmd::VerifyBounds(c) => (c, Command::VerifyBounds),
        Cmd::AnalyzeMse(c) => (c, Command::AnalyzeMse),
    };
    let mut cfg = match ExperimentConfig::load(&common.config) {
        Ok(c) => c,
        Err(e) => return fail(exit_code(&e), &e.to_string()),
    };
    if let Some(out) = common.out {
        cfg.out_dir = out;
    }
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if let Err(e) = cfg.validate() {
        return fail(exit_code(&e), &e.to_string());
    }
    for &seed in &cfg.seeds {
        match run(&command, &cfg, seed) {
            Ok(m) => {
                for name in &m.outputs {
                    println!("{}", cfg.out_dir.join(name).display());
                }
            }
            Err(e) => return fail(exit_code(&e), &format!("{command} seed {seed}: {e}")),
        }
    }
    ExitCode::SUCCESS
}
