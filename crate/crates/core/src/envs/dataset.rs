use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::Environment;
use crate::error::{Error, Result};
use crate::rng::{self, tag};

pub const DATASET_FORMAT: &str = "dydiff-ds-v1";
const STD_FLOOR: f64 = 1e-8;

/// One real trajectory `(s_0, a_0, s_1, ..., a_{H-1}, s_H)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub terminal: bool,
}

impl Episode {
    /// Number of transitions `H`.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    fn check(&self, state_dim: usize, action_dim: usize, record: usize) -> Result<()> {
        let dim_err = |message: String| Error::Dimension { record, message };
        if self.states.len() != self.actions.len() + 1 {
            return Err(dim_err(format!(
                "{} states for {} actions",
                self.states.len(),
                self.actions.len()
            )));
        }
        if self.rewards.len() != self.actions.len() {
            return Err(dim_err(format!(
                "{} rewards for {} actions",
                self.rewards.len(),
                self.actions.len()
            )));
        }
        if let Some(s) = self.states.iter().find(|s| s.len() != state_dim) {
            return Err(dim_err(format!("state of width {} (expected {state_dim})", s.len())));
        }
        if let Some(a) = self.actions.iter().find(|a| a.len() != action_dim) {
            return Err(dim_err(format!("action of width {} (expected {action_dim})", a.len())));
        }
        let finite = self
            .states
            .iter()
            .chain(&self.actions)
            .flatten()
            .chain(&self.rewards)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::non_finite(format!("episode record {record}")));
        }
        Ok(())
    }
}

/// Per-dimension affine normalization of states, actions and rewards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub action_mean: Vec<f64>,
    pub action_std: Vec<f64>,
    pub reward_mean: f64,
    pub reward_std: f64,
}

fn mean_std<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let rows: Vec<&[f64]> = rows.collect();
    let n = rows.len().max(1) as f64;
    let mut mean = vec![0.0; dim];
    for r in &rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for r in &rows {
        for ((acc, v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
            *acc += (v - m) * (v - m);
        }
    }
    let std = var.iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
    (mean, std)
}

impl Normalizer {
    pub fn fit(episodes: &[Episode], state_dim: usize, action_dim: usize) -> Option<Self> {
        if episodes.iter().all(|e| e.is_empty()) {
            return None;
        }
        let (state_mean, state_std) = mean_std(
            episodes.iter().flat_map(|e| e.states.iter().map(|s| s.as_slice())),
            state_dim,
        );
        let (action_mean, action_std) = mean_std(
            episodes.iter().flat_map(|e| e.actions.iter().map(|a| a.as_slice())),
            action_dim,
        );
        let (rm, rs) = mean_std(
            episodes
                .iter()
                .flat_map(|e| e.rewards.iter().map(std::slice::from_ref)),
            1,
        );
        Some(Self {
            state_mean,
            state_std,
            action_mean,
            action_std,
            reward_mean: rm[0],
            reward_std: rs[0],
        })
    }

    /// Identity normalization for the given dims.
    pub fn identity(state_dim: usize, action_dim: usize) -> Self {
        Self {
            state_mean: vec![0.0; state_dim],
            state_std: vec![1.0; state_dim],
            action_mean: vec![0.0; action_dim],
            action_std: vec![1.0; action_dim],
            reward_mean: 0.0,
            reward_std: 1.0,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_mean.len()
    }

    pub fn action_dim(&self) -> usize {
        self.action_mean.len()
    }

    pub fn norm_state(&self, s: &[f64]) -> Vec<f64> {
        affine(s, &self.state_mean, &self.state_std, true)
    }

    pub fn denorm_state(&self, s: &[f64]) -> Vec<f64> {
        affine(s, &self.state_mean, &self.state_std, false)
    }

    pub fn norm_action(&self, a: &[f64]) -> Vec<f64> {
        affine(a, &self.action_mean, &self.action_std, true)
    }

    pub fn denorm_action(&self, a: &[f64]) -> Vec<f64> {
        affine(a, &self.action_mean, &self.action_std, false)
    }

    pub fn norm_reward(&self, r: f64) -> f64 {
        (r - self.reward_mean) / self.reward_std
    }

    pub fn denorm_reward(&self, r: f64) -> f64 {
        r * self.reward_std + self.reward_mean
    }
}

fn affine(x: &[f64], mean: &[f64], std: &[f64], forward: bool) -> Vec<f64> {
    x.iter()
        .zip(mean.iter().zip(std))
        .map(|(&v, (&m, &s))| if forward { (v - m) / s } else { v * s + m })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixComponent {
    /// Standard deviation of the Gaussian action noise.
    pub noise: f64,
    pub fraction: f64,
}

/// How a dataset was collected: a mixture of noisy behavior controllers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollectRecipe {
    pub mix: Vec<MixComponent>,
    pub num_episodes: usize,
    pub seed: u64,
}

impl CollectRecipe {
    pub fn new(mix: &[(f64, f64)], num_episodes: usize, seed: u64) -> Self {
        Self {
            mix: mix
                .iter()
                .map(|&(noise, fraction)| MixComponent { noise, fraction })
                .collect(),
            num_episodes,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mix.is_empty() {
            return Err(Error::InvalidArgument("quality mix is empty".into()));
        }
        if self.mix.iter().any(|c| !(c.fraction >= 0.0) || !(c.noise >= 0.0)) {
            return Err(Error::InvalidArgument(
                "mix fractions and noise levels must be non-negative".into(),
            ));
        }
        let total: f64 = self.mix.iter().map(|c| c.fraction).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "mix fractions sum to {total}, expected 1"
            )));
        }
        Ok(())
    }
}

/// Component index of every episode: component `j` owns the contiguous block
/// `[round(c_{j-1} n), round(c_j n))` where `c_j` is the cumulative fraction.
pub fn mix_assignment(mix: &[MixComponent], n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    let mut cum = 0.0;
    let mut start = 0usize;
    for (j, c) in mix.iter().enumerate() {
        cum += c.fraction;
        let end = if j + 1 == mix.len() {
            n
        } else {
            ((cum * n as f64).round() as usize).min(n)
        };
        for _ in start..end.max(start) {
            out.push(j);
        }
        start = end.max(start);
    }
    out
}

/// An offline dataset of real episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub env: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub episodes: Vec<Episode>,
    /// `None` when the dataset holds no transitions.
    pub normalizer: Option<Normalizer>,
    pub recipe: Option<CollectRecipe>,
}

/// Flattened transitions `(s, a, r, s', done)` in raw units.
#[derive(Clone, Debug)]
pub struct Transitions {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Vec<f64>,
    pub next_states: Array2<f64>,
    pub dones: Vec<bool>,
}

impl Transitions {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

impl Dataset {
    pub fn from_episodes(
        env: &str,
        state_dim: usize,
        action_dim: usize,
        episodes: Vec<Episode>,
        recipe: Option<CollectRecipe>,
    ) -> Result<Self> {
        for (i, e) in episodes.iter().enumerate() {
            e.check(state_dim, action_dim, i + 1)?;
        }
        let normalizer = Normalizer::fit(&episodes, state_dim, action_dim);
        Ok(Self {
            env: env.to_string(),
            state_dim,
            action_dim,
            episodes,
            normalizer,
            recipe,
        })
    }

    pub fn num_transitions(&self) -> usize {
        self.episodes.iter().map(|e| e.len()).sum()
    }

    pub fn normalizer(&self) -> Result<&Normalizer> {
        self.normalizer
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("dataset is empty".into()))
    }

    pub fn transitions(&self) -> Transitions {
        let n = self.num_transitions();
        let (sd, ad) = (self.state_dim, self.action_dim);
        let mut states = Array2::zeros((n, sd));
        let mut actions = Array2::zeros((n, ad));
        let mut next_states = Array2::zeros((n, sd));
        let mut rewards = Vec::with_capacity(n);
        let mut dones = Vec::with_capacity(n);
        let mut row = 0;
        for e in &self.episodes {
            for t in 0..e.len() {
                for d in 0..sd {
                    states[[row, d]] = e.states[t][d];
                    next_states[[row, d]] = e.states[t + 1][d];
                }
                for d in 0..ad {
                    actions[[row, d]] = e.actions[t][d];
                }
                rewards.push(e.rewards[t]);
                dones.push(e.terminal && t + 1 == e.len());
                row += 1;
            }
        }
        Transitions {
            states,
            actions,
            rewards,
            next_states,
            dones,
        }
    }

    /// All states that begin some transition, in episode order.
    pub fn start_states(&self) -> Vec<&[f64]> {
        self.episodes
            .iter()
            .flat_map(|e| e.states[..e.len()].iter().map(|s| s.as_slice()))
            .collect()
    }

    pub fn episode_returns(&self) -> Vec<f64> {
        self.episodes.iter().map(|e| e.rewards.iter().sum()).collect()
    }
}

/// Roll out the recipe's behavior mixture in `env`. Episode `i` uses its own
/// random stream derived from `(seed, i)`.
pub fn collect_dataset(env: &dyn Environment, recipe: &CollectRecipe) -> Result<Dataset> {
    recipe.validate()?;
    let spec = env.spec();
    let assignment = mix_assignment(&recipe.mix, recipe.num_episodes);
    let mut episodes = Vec::with_capacity(recipe.num_episodes);
    for (i, &component) in assignment.iter().enumerate() {
        let noise = recipe.mix[component].noise;
        let mut rng = rng::stream(recipe.seed, &[tag::COLLECT, i as u64]);
        let mut s = env.reset(&mut rng);
        let mut ep = Episode {
            states: vec![s.clone()],
            actions: Vec::new(),
            rewards: Vec::new(),
            terminal: false,
        };
        for _ in 0..spec.horizon {
            let a = env.behavior_action(&s, noise, &mut rng);
            let step = env.step(&s, &a, &mut rng)?;
            ep.actions.push(a);
            ep.rewards.push(step.reward);
            ep.states.push(step.next_state.clone());
            s = step.next_state;
            if step.done {
                ep.terminal = true;
                break;
            }
        }
        episodes.push(ep);
    }
    Dataset::from_episodes(
        &spec.name,
        spec.state_dim,
        spec.action_dim,
        episodes,
        Some(recipe.clone()),
    )
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    env: String,
    state_dim: usize,
    action_dim: usize,
    normalizer: Option<Normalizer>,
    #[serde(default)]
    recipe: Option<CollectRecipe>,
}

fn to_jsonl(ds: &Dataset) -> Result<String> {
    let header = Header {
        format: DATASET_FORMAT.to_string(),
        env: ds.env.clone(),
        state_dim: ds.state_dim,
        action_dim: ds.action_dim,
        normalizer: ds.normalizer.clone(),
        recipe: ds.recipe.clone(),
    };
    let mut out = serde_json::to_string(&header)
        .map_err(|e| Error::Parse { record: 0, message: e.to_string() })?;
    out.push('\n');
    for (i, e) in ds.episodes.iter().enumerate() {
        let line = serde_json::to_string(e).map_err(|err| Error::Parse {
            record: i + 1,
            message: err.to_string(),
        })?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

/// Write the dataset as JSON lines: one header, then one episode per line.
pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let body = to_jsonl(ds)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingInput(path.display().to_string())
        } else {
            Error::io(path, e)
        }
    })?;
    parse_dataset(&text)
}

/// Parse the JSON-lines form. Records are numbered from 0 (the header).
pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let mut lines = text.lines();
    let first = lines.next().ok_or(Error::Parse {
        record: 0,
        message: "empty file".into(),
    })?;
    let probe: serde_json::Value = serde_json::from_str(first).map_err(|e| Error::Parse {
        record: 0,
        message: e.to_string(),
    })?;
    let found = probe
        .get("format")
        .and_then(|v| v.as_str())
        .unwrap_or("<missing>");
    if found != DATASET_FORMAT {
        return Err(Error::Version {
            found: found.to_string(),
            expected: DATASET_FORMAT.to_string(),
        });
    }
    let header: Header = serde_json::from_value(probe).map_err(|e| Error::Parse {
        record: 0,
        message: e.to_string(),
    })?;
    let mut episodes = Vec::new();
    for (i, line) in lines.enumerate() {
        let record = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let ep: Episode = serde_json::from_str(line).map_err(|e| Error::Parse {
            record,
            message: e.to_string(),
        })?;
        ep.check(header.state_dim, header.action_dim, record)?;
        episodes.push(ep);
    }
    if let Some(n) = &header.normalizer {
        if n.state_dim() != header.state_dim || n.action_dim() != header.action_dim {
            return Err(Error::Dimension {
                record: 0,
                message: "normalizer dims disagree with header".into(),
            });
        }
    }
    Ok(Dataset {
        env: header.env,
        state_dim: header.state_dim,
        action_dim: header.action_dim,
        episodes,
        normalizer: header.normalizer,
        recipe: header.recipe,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::PointMass;

    fn small() -> Dataset {
        let env = PointMass::default();
        collect_dataset(&env, &CollectRecipe::new(&[(0.5, 0.5), (0.1, 0.5)], 4, 3)).unwrap()
    }

    #[test]
    fn empty_collection_has_no_normalizer() {
        let env = PointMass::default();
        let ds = collect_dataset(&env, &CollectRecipe::new(&[(0.3, 1.0)], 0, 1)).unwrap();
        assert!(ds.episodes.is_empty());
        assert!(ds.normalizer.is_none());
        assert!(ds.normalizer().is_err());
    }

    #[test]
    fn noiseless_single_episode_is_seed_independent() {
        let env = PointMass::with_fixed_start([-1.5, -1.5]);
        let a = collect_dataset(&env, &CollectRecipe::new(&[(0.0, 1.0)], 1, 1)).unwrap();
        let b = collect_dataset(&env, &CollectRecipe::new(&[(0.0, 1.0)], 1, 99)).unwrap();
        assert_eq!(a.episodes, b.episodes);
    }

    #[test]
    fn fractions_must_sum_to_one() {
        let env = PointMass::default();
        let err = collect_dataset(&env, &CollectRecipe::new(&[(0.3, 0.5), (0.1, 0.4)], 3, 1));
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
        let ok = CollectRecipe::new(&[(0.3, 0.5), (0.1, 0.5 + 5e-10)], 3, 1);
        assert!(ok.validate().is_ok());
    }

    #[test]
    fn assignment_blocks() {
        let mix = CollectRecipe::new(&[(1.0, 0.5), (0.1, 0.5)], 7, 0).mix;
        assert_eq!(mix_assignment(&mix, 7), vec![0, 0, 0, 0, 1, 1, 1]);
        assert_eq!(mix_assignment(&mix, 0), Vec::<usize>::new());
    }

    #[test]
    fn normalizer_std_floor_and_round_trip() {
        let ds = small();
        let n = ds.normalizer().unwrap();
        assert!(n.state_std.iter().chain(&n.action_std).all(|&s| s >= 1e-8));
        let s = &ds.episodes[1].states[7];
        let back = n.denorm_state(&n.norm_state(s));
        for (x, y) in s.iter().zip(&back) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-300));
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.jsonl");
        let p2 = dir.path().join("b.jsonl");
        save_dataset(&ds, &p1).unwrap();
        let back = load_dataset(&p1).unwrap();
        assert_eq!(back, ds);
        save_dataset(&back, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn truncated_file_names_record() {
        let text = to_jsonl(&small()).unwrap();
        let cut = &text[..text.len() - 40];
        match parse_dataset(cut) {
            Err(Error::Parse { record, .. }) => assert_eq!(record, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn old_version_is_rejected() {
        let text = to_jsonl(&small()).unwrap().replacen("dydiff-ds-v1", "dydiff-ds-v0", 1);
        match parse_dataset(&text) {
            Err(Error::Version { found, expected }) => {
                assert_eq!(found, "dydiff-ds-v0");
                assert_eq!(expected, "dydiff-ds-v1");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dimension_inconsistency_is_distinct() {
        let mut ds = small();
        ds.episodes[2].actions[0].push(0.0);
        let text = to_jsonl(&ds).unwrap();
        assert!(matches!(
            parse_dataset(&text),
            Err(Error::Dimension { record: 3, .. })
        ));
    }

    #[test]
    fn transitions_mark_only_true_terminals() {
        let ds = small();
        let tr = ds.transitions();
        assert_eq!(tr.len(), ds.num_transitions());
        let terminals = ds.episodes.iter().filter(|e| e.terminal).count();
        assert_eq!(tr.dones.iter().filter(|&&d| d).count(), terminals);
    }
}
