//! Config-driven experiment commands. Each run writes its outputs as
//! `<command>_<seed>[.<part>].<ext>` under the output directory, plus a
//! manifest recording the config, its hash, seeds and versions. Runs of
//! `train-policy` and `ablate` carry the mode or axis in every part name, so
//! runs that differ only in those never overwrite each other.

mod config;
mod output;

pub use config::ExperimentConfig;
pub use output::{write_csv, write_pretty_json, RunFiles};

use std::fmt;
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::diffusion::{train_denoiser, Denoiser};
use crate::envs::{
    collect_dataset, load_dataset, make_env, mix_assignment, save_dataset, slice_windows, Dataset,
    Environment, DATASET_FORMAT,
};
use crate::error::{Error, Result};
use crate::policy::{run_training, Components, Mode, TrainingRun};
use crate::rng::{self, tag};
use crate::rollout::Policy;
use crate::theory::{
    iterated_bound, lemma1_sweep, lemma2_bound, lemma2_sweep, rollout_mse_curve, theorem1_bound,
    theorem1_sweep, BoundParams, BoundRow,
};
use crate::world_models::{train_dynamics, train_reward, DynamicsModel, RewardModel};

pub const MANIFEST_FORMAT: &str = "dydiff-manifest/1";

/// Hyperparameter swept by `ablate`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    /// Correction rounds.
    M,
    /// Rollout (window) length.
    L,
    #[serde(rename = "eta")]
    Eta,
    #[serde(rename = "alpha")]
    Alpha,
}

impl Axis {
    pub fn as_str(&self) -> &'static str {
        match self {
            Axis::M => "M",
            Axis::L => "L",
            Axis::Eta => "eta",
            Axis::Alpha => "alpha",
        }
    }

    /// `cfg` with this axis set to `value`, validated.
    pub fn apply(&self, cfg: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let count = || {
            if value >= 0.0 && value.fract() == 0.0 && value < u32::MAX as f64 {
                Ok(value as usize)
            } else {
                Err(Error::Config(format!("axis {} needs a whole number, got {value}", self.as_str())))
            }
        };
        let mut out = cfg.clone();
        match self {
            Axis::M => out.iterations = count()?,
            Axis::L => out.window = count()?,
            Axis::Eta => out.eta = value,
            Axis::Alpha => out.alpha = value,
        }
        out.validate()?;
        Ok(out)
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "M" => Ok(Axis::M),
            "L" => Ok(Axis::L),
            "eta" => Ok(Axis::Eta),
            "alpha" => Ok(Axis::Alpha),
            other => Err(Error::Config(format!("unknown ablation axis {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Command {
    GenData,
    TrainWorld,
    TrainDiffusion,
    TrainPolicy { mode: Mode },
    Ablate { axis: Axis, values: Vec<f64> },
    VerifyBounds,
    AnalyzeMse,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainWorld => "train-world",
            Command::TrainDiffusion => "train-diffusion",
            Command::TrainPolicy { .. } => "train-policy",
            Command::Ablate { .. } => "ablate",
            Command::VerifyBounds => "verify-bounds",
            Command::AnalyzeMse => "analyze-mse",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub crate_version: String,
    pub manifest_format: String,
    pub dataset_format: String,
}

impl Default for Versions {
    fn default() -> Self {
        Self {
            crate_version: env!("CARGO_PKG_VERSION").into(),
            manifest_format: MANIFEST_FORMAT.into(),
            dataset_format: DATASET_FORMAT.into(),
        }
    }
}

/// Record of one command run. Only `created_unix` varies between identical
/// runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<Axis>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub values: Vec<f64>,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub versions: Versions,
    /// File names written by the run, relative to the output directory.
    pub outputs: Vec<String>,
    pub created_unix: u64,
}

/// Exit status for an error: 2 config, 3 missing input, 4 numeric failure.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Shape(_) | Error::Dimension { .. } => 2,
        Error::MissingInput(_) | Error::Io { .. } | Error::Parse { .. } | Error::Version { .. } => 3,
        Error::NonFinite { .. } | Error::Diverged { .. } => 4,
    }
}

/// Noise-free behavior controller of an environment.
pub struct BehaviorPolicy<'a>(pub &'a dyn Environment);

impl Policy for BehaviorPolicy<'_> {
    fn act_batch(&self, states: ArrayView2<f64>) -> Result<Array2<f64>> {
        let a = self.0.spec().action_dim;
        // Level-zero noise draws nothing, so the stream is never consumed.
        let mut unused = rng::stream(0, &[]);
        let mut out = Array2::zeros((states.nrows(), a));
        for (i, s) in states.outer_iter().enumerate() {
            let act = self.0.behavior_action(&s.to_vec(), 0.0, &mut unused);
            out.row_mut(i).assign(&ndarray::ArrayView1::from(&act));
        }
        Ok(out)
    }
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    files: RunFiles,
    outputs: Vec<String>,
}

impl Run<'_> {
    fn record(&mut self, path: &std::path::Path) {
        let name = path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
        self.outputs.push(name);
    }

    fn csv<T: Serialize>(&mut self, part: Option<&str>, rows: &[T]) -> Result<()> {
        let p = self.files.path(part, "csv");
        write_csv(&p, rows)?;
        self.record(&p);
        Ok(())
    }

    fn dataset(&self) -> Result<Dataset> {
        let path = self
            .cfg
            .dataset_path
            .clone()
            .unwrap_or_else(|| self.files.sibling("gen-data", None, "jsonl"));
        load_dataset(path)
    }

    fn world_models(&self) -> Result<(DynamicsModel, RewardModel)> {
        Ok((
            DynamicsModel::load(self.files.sibling("train-world", Some("dynamics"), "json"))?,
            RewardModel::load(self.files.sibling("train-world", Some("reward"), "json"))?,
        ))
    }

    fn denoiser(&self) -> Result<Denoiser> {
        Denoiser::load(self.files.sibling("train-diffusion", Some("denoiser"), "json"))
    }
}

/// Run `cmd` for one seed and write its manifest.
pub fn run(cmd: &Command, cfg: &ExperimentConfig, seed: u64) -> Result<Manifest> {
    cfg.validate()?;
    if let Command::Ablate { axis, values } = cmd {
        for &v in values {
            axis.apply(cfg, v)?;
        }
    }
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let mut run = Run {
        cfg,
        files: RunFiles {
            dir: cfg.out_dir.clone(),
            command: cmd.name(),
            seed,
        },
        outputs: Vec::new(),
    };
    match cmd {
        Command::GenData => gen_data(&mut run, seed)?,
        Command::TrainWorld => train_world(&mut run, seed)?,
        Command::TrainDiffusion => train_diffusion(&mut run, seed)?,
        Command::TrainPolicy { mode } => train_policy(&mut run, *mode, seed)?,
        Command::Ablate { axis, values } => ablate(&mut run, *axis, values, seed)?,
        Command::VerifyBounds => verify_bounds(&mut run, seed)?,
        Command::AnalyzeMse => analyze_mse(&mut run, seed)?,
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        command: cmd.name().into(),
        mode: match cmd {
            Command::TrainPolicy { mode } => Some(*mode),
            _ => None,
        },
        axis: match cmd {
            Command::Ablate { axis, .. } => Some(*axis),
            _ => None,
        },
        values: match cmd {
            Command::Ablate { values, .. } => values.clone(),
            _ => Vec::new(),
        },
        seed,
        seeds: cfg.seeds.clone(),
        config_hash: cfg.hash(),
        config: cfg.clone(),
        versions: Versions::default(),
        outputs: run.outputs,
        created_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
    };
    let part = match cmd {
        Command::TrainPolicy { mode } => format!("{}.manifest", mode.as_str()),
        Command::Ablate { axis, .. } => format!("{}.manifest", axis.as_str()),
        _ => "manifest".into(),
    };
    write_pretty_json(&run.files.path(Some(&part), "json"), &manifest)?;
    Ok(manifest)
}

#[derive(Serialize)]
struct EpisodeRow {
    episode: usize,
    component: usize,
    noise: f64,
    length: usize,
    episode_return: f64,
    terminal: bool,
}

fn gen_data(run: &mut Run, seed: u64) -> Result<()> {
    let cfg = run.cfg;
    let env = make_env(&cfg.env)?;
    let recipe = cfg.recipe(seed);
    let ds = collect_dataset(env.as_ref(), &recipe)?;
    let path = cfg
        .dataset_path
        .clone()
        .unwrap_or_else(|| run.files.path(None, "jsonl"));
    save_dataset(&ds, &path)?;
    run.record(&path);
    let assignment = mix_assignment(&recipe.mix, recipe.num_episodes);
    let rows: Vec<EpisodeRow> = ds
        .episodes
        .iter()
        .zip(ds.episode_returns())
        .zip(assignment)
        .enumerate()
        .map(|(i, ((ep, ret), c))| EpisodeRow {
            episode: i,
            component: c,
            noise: recipe.mix[c].noise,
            length: ep.len(),
            episode_return: ret,
            terminal: ep.terminal,
        })
        .collect();
    run.csv(None, &rows)
}

#[derive(Serialize)]
struct FitRow {
    model: &'static str,
    train_mse: f64,
    holdout_mse: Option<f64>,
    steps: u64,
}

fn train_world(run: &mut Run, seed: u64) -> Result<()> {
    let ds = run.dataset()?;
    let fit = run.cfg.world_fit();
    let (dynamics, dyn_rep) = train_dynamics(&ds, &fit, seed)?;
    let (reward, rew_rep) = train_reward(&ds, &fit, seed)?;
    let p = run.files.path(Some("dynamics"), "json");
    dynamics.save(&p)?;
    run.record(&p);
    let p = run.files.path(Some("reward"), "json");
    reward.save(&p)?;
    run.record(&p);
    let rows = [("dynamics", dyn_rep), ("reward", rew_rep)].map(|(model, r)| FitRow {
        model,
        train_mse: r.train_mse,
        holdout_mse: r.holdout_mse,
        steps: r.steps,
    });
    run.csv(None, &rows)
}

#[derive(Serialize)]
struct DenoiserRow {
    window: usize,
    n_windows: usize,
    train_loss: f64,
    holdout_loss: Option<f64>,
    steps: u64,
}

fn fit_denoiser(cfg: &ExperimentConfig, ds: &Dataset, seed: u64) -> Result<(Denoiser, DenoiserRow)> {
    let windows = slice_windows(ds, cfg.window)?;
    let (den, rep) = train_denoiser(&windows, ds.normalizer()?, &cfg.schedule(), &cfg.diffusion_fit(), seed)?;
    Ok((
        den,
        DenoiserRow {
            window: cfg.window,
            n_windows: windows.len(),
            train_loss: rep.train_loss,
            holdout_loss: rep.holdout_loss,
            steps: rep.steps,
        },
    ))
}

fn train_diffusion(run: &mut Run, seed: u64) -> Result<()> {
    let ds = run.dataset()?;
    let (den, row) = fit_denoiser(run.cfg, &ds, seed)?;
    let p = run.files.path(Some("denoiser"), "json");
    den.save(&p)?;
    run.record(&p);
    run.csv(None, &[row])
}

fn policy_run(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    env: &dyn Environment,
    mode: Mode,
    parts: Option<(&DynamicsModel, &RewardModel, &Denoiser)>,
    seed: u64,
) -> Result<TrainingRun> {
    let components = parts.map(|(dynamics, reward, denoiser)| Components {
        denoiser,
        dynamics,
        reward,
        sampler: cfg.sampler(),
    });
    run_training(ds, env, components.as_ref(), mode, &cfg.rollout(), &cfg.td3bc(), cfg.epochs, seed)
}

fn train_policy(run: &mut Run, mode: Mode, seed: u64) -> Result<()> {
    let cfg = run.cfg;
    let ds = run.dataset()?;
    let env = make_env(&cfg.env)?;
    let trained = match mode {
        Mode::Baseline => policy_run(cfg, &ds, env.as_ref(), mode, None, seed)?,
        Mode::Dydiff => {
            let (dynamics, reward) = run.world_models()?;
            let den = run.denoiser()?;
            policy_run(cfg, &ds, env.as_ref(), mode, Some((&dynamics, &reward, &den)), seed)?
        }
    };
    let tag = mode.as_str();
    run.csv(Some(tag), &trained.curve)?;
    if mode == Mode::Dydiff {
        run.csv(Some(&format!("{tag}.rollouts")), &trained.rollouts)?;
    }
    let p = run.files.path(Some(&format!("{tag}.agent")), "json");
    trained.agent.save(&p)?;
    run.record(&p);
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    axis: &'static str,
    value: f64,
    final_return: f64,
    final_syn_transitions: usize,
}

fn ablate(run: &mut Run, axis: Axis, values: &[f64], seed: u64) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Config("ablate needs at least one value".into()));
    }
    let ds = run.dataset()?;
    let env = make_env(&run.cfg.env)?;
    let (dynamics, reward) = run.world_models()?;
    let shared = if axis == Axis::L { None } else { Some(run.denoiser()?) };
    let mut summary = Vec::with_capacity(values.len());
    for &v in values {
        let cfg = axis.apply(run.cfg, v)?;
        let den = match &shared {
            Some(d) => d.clone(),
            None => fit_denoiser(&cfg, &ds, seed)?.0,
        };
        let trained = policy_run(&cfg, &ds, env.as_ref(), Mode::Dydiff, Some((&dynamics, &reward, &den)), seed)?;
        run.csv(Some(&format!("{}-{v}", axis.as_str())), &trained.curve)?;
        summary.push(AblationRow {
            axis: axis.as_str(),
            value: v,
            final_return: trained.final_score(),
            final_syn_transitions: trained.curve.last().map_or(0, |m| m.n_syn_transitions),
        });
    }
    run.csv(Some(axis.as_str()), &summary)
}

#[derive(Serialize)]
struct Eq15Row {
    k: u32,
    contraction: f64,
    eps_sd: f64,
    eps_m: f64,
    horizon: usize,
    bound: f64,
}

#[derive(Serialize)]
struct CheckSummary {
    instances: usize,
    holds: usize,
    min_slack: f64,
}

impl CheckSummary {
    fn of(rows: &[BoundRow]) -> Self {
        Self {
            instances: rows.len(),
            holds: rows.iter().filter(|r| r.holds).count(),
            min_slack: rows.iter().map(|r| r.slack).fold(f64::INFINITY, f64::min),
        }
    }
}

#[derive(Serialize)]
struct BoundsSummary {
    lemma1: CheckSummary,
    lemma2: CheckSummary,
    theorem1: CheckSummary,
    lemma2_plug_in: f64,
    theorem1_plug_in: f64,
    eq15_plug_in: f64,
}

fn verify_bounds(run: &mut Run, seed: u64) -> Result<()> {
    let sweep = run.cfg.sweep();
    let l1 = lemma1_sweep(&sweep, seed)?;
    let l2 = lemma2_sweep(&sweep, seed)?;
    let t1 = theorem1_sweep(&sweep, seed)?;
    run.csv(Some("lemma1"), &l1)?;
    run.csv(Some("lemma2"), &l2)?;
    run.csv(Some("theorem1"), &t1)?;
    let p = run.cfg.eq15_params();
    let eq15: Vec<Eq15Row> = (0..=run.cfg.eq15_max_k)
        .map(|k| Eq15Row {
            k,
            contraction: p.contraction(),
            eps_sd: p.eps_sd,
            eps_m: p.eps_m,
            horizon: p.horizon,
            bound: iterated_bound(&p, k),
        })
        .collect();
    run.csv(Some("eq15"), &eq15)?;
    let hand = BoundParams {
        gamma: 0.9,
        reward_bound: 1.0,
        eps_m: 0.1,
        eps_d: 0.1,
        eps_sd: 0.01,
        c_pi: 0.5,
        c_ad: 1.0,
        horizon: 10,
    };
    let summary = BoundsSummary {
        lemma1: CheckSummary::of(&l1),
        lemma2: CheckSummary::of(&l2),
        theorem1: CheckSummary::of(&t1),
        lemma2_plug_in: lemma2_bound(hand.gamma, hand.reward_bound, hand.eps_m),
        theorem1_plug_in: theorem1_bound(hand.gamma, hand.reward_bound, hand.eps_d),
        eq15_plug_in: iterated_bound(&hand, 2),
    };
    let path = run.files.path(None, "json");
    write_pretty_json(&path, &summary)?;
    run.record(&path);
    Ok(())
}

fn analyze_mse(run: &mut Run, seed: u64) -> Result<()> {
    let cfg = run.cfg;
    let env = make_env(&cfg.env)?;
    let (dynamics, _) = run.world_models()?;
    let den = run.denoiser()?;
    let sd = env.spec().state_dim;
    let mut pick = rng::stream(seed, &[tag::MSE]);
    let starts: Vec<f64> = (0..cfg.mse_starts).flat_map(|_| env.reset(&mut pick)).collect();
    let starts = Array2::from_shape_vec((cfg.mse_starts, sd), starts).map_err(|e| Error::Shape(e.to_string()))?;
    let mut rngs: Vec<_> = (0..cfg.mse_starts)
        .map(|i| rng::stream(seed, &[tag::MSE, i as u64 + 1]))
        .collect();
    let rows = rollout_mse_curve(
        env.as_ref(),
        &dynamics,
        Some(&den),
        &BehaviorPolicy(env.as_ref()),
        &cfg.mse_horizons,
        starts.view(),
        &cfg.sampler(),
        &mut rngs,
    )?;
    run.csv(None, &rows)
}
