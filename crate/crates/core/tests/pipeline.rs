use dydiff::diffusion::{train_denoiser, Denoise, Denoiser, NoiseSchedule};
use dydiff::envs::{collect_dataset, load_dataset, save_dataset, slice_windows, CollectRecipe, Dataset, Episode, PointMass};
use dydiff::experiment::{exit_code, run, Command, ExperimentConfig, Manifest};
use dydiff::fit::FitConfig;
use dydiff::Error;
use ndarray::Array2;
use proptest::prelude::*;

fn small_fit() -> FitConfig {
    FitConfig {
        epochs: 2,
        batch_size: 16,
        hidden: vec![16],
        lr: 1e-3,
        holdout: 0.0,
    }
}

#[test]
fn dataset_survives_a_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = collect_dataset(&PointMass::default(), &CollectRecipe::new(&[(0.5, 1.0)], 6, 11)).unwrap();
    let path = dir.path().join("data.jsonl");
    save_dataset(&ds, &path).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), ds);
}

#[test]
fn denoiser_checkpoint_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let ds = collect_dataset(&PointMass::default(), &CollectRecipe::new(&[(0.5, 1.0)], 4, 3)).unwrap();
    let windows = slice_windows(&ds, 8).unwrap();
    let (den, _) = train_denoiser(&windows, ds.normalizer().unwrap(), &NoiseSchedule::default(), &small_fit(), 3).unwrap();
    let path = dir.path().join("den.json");
    den.save(&path).unwrap();
    let back = Denoiser::load(&path).unwrap();
    let x = Array2::from_shape_fn((3, den.width()), |(i, j)| (i as f64 - j as f64) * 0.1);
    let sigmas = [0.01, 1.0, 40.0];
    assert_eq!(den.denoise(x.view(), &sigmas).unwrap(), back.denoise(x.view(), &sigmas).unwrap());
}

#[test]
fn commands_chain_through_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::parse(&format!(
        r#"{{"num_episodes": 6, "window": 8, "world_epochs": 1, "world_hidden": [16],
            "diffusion_epochs": 1, "diffusion_hidden": [16], "seeds": [4], "out_dir": {:?}}}"#,
        dir.path()
    ))
    .unwrap();
    for cmd in [Command::GenData, Command::TrainWorld, Command::TrainDiffusion] {
        let m = run(&cmd, &cfg, 4).unwrap();
        assert_eq!(m.command, cmd.name());
        assert_eq!(m.config_hash, cfg.hash());
        for f in &m.outputs {
            assert!(dir.path().join(f).exists(), "{f} missing");
        }
        let text = std::fs::read_to_string(dir.path().join(format!("{}_4.manifest.json", cmd.name()))).unwrap();
        let back: Manifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
    }
}

#[test]
fn training_before_data_is_a_missing_input() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::parse(&format!(r#"{{"out_dir": {:?}}}"#, dir.path())).unwrap();
    let err = run(&Command::TrainWorld, &cfg, 0).unwrap_err();
    assert!(matches!(err, Error::MissingInput(_)), "{err}");
    assert_eq!(exit_code(&err), 3);
}

fn synthetic(lengths: &[usize]) -> Dataset {
    let eps = lengths
        .iter()
        .map(|&h| Episode {
            states: (0..=h).map(|t| vec![t as f64, -(t as f64)]).collect(),
            actions: (0..h).map(|t| vec![t as f64 * 0.5]).collect(),
            rewards: vec![0.0; h],
            terminal: false,
        })
        .collect();
    Dataset::from_episodes("synthetic", 2, 1, eps, None).unwrap()
}

proptest! {
    #[test]
    fn window_count_matches_episode_lengths(lengths in prop::collection::vec(1usize..30, 1..6), l in 1usize..20) {
        let ds = synthetic(&lengths);
        let wins = slice_windows(&ds, l).unwrap();
        let expect: usize = lengths.iter().map(|&h| if h >= l { h - l + 1 } else { 1 }).sum();
        prop_assert_eq!(wins.len(), expect);
        for w in &wins {
            prop_assert_eq!(w.states.len(), l + 1);
            prop_assert_eq!(w.actions.len(), l);
        }
    }
}
