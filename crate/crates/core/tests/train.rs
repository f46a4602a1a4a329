mod common;

use std::collections::HashMap;
use std::path::Path;
use std::sync::OnceLock;

use common::synth_dataset;
use msenet_core::archive::{read_archive, write_archive};
use msenet_core::data::{sample_episode, EpisodeSpec, ImageStore, SplitSpec};
use msenet_core::model::{init_params, BackboneVariant, ModelConfig};
use msenet_core::train::{
    episode_loss_value, load_checkpoint, load_checkpoint_for, resolve_data, save_checkpoint, train, train_step,
    History, NormKind, RunConfig, TrainState,
};
use msenet_core::Error;
use msenet_tensor::Tensor;
use proptest::prelude::*;

/// 8 classes × 12 images, shared by every test in this file.
fn dataset() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| synth_dataset(8, 12, 5)).path()
}

fn small_config(episodes: u64) -> RunConfig {
    let mut cfg = RunConfig { seed: 17, ..RunConfig::default() };
    cfg.data.root = dataset().display().to_string();
    cfg.data.split_counts = [5, 1, 2];
    cfg.data.normalization = NormKind::Synthetic;
    cfg.train.task = EpisodeSpec::new(4, 2, 3).unwrap();
    cfg.train.episodes = episodes;
    cfg.train.lr = 1e-3;
    cfg.train.eval_interval = 5;
    cfg.train.val_episodes = 2;
    cfg.eval.task = EpisodeSpec::new(1, 1, 2).unwrap();
    cfg
}

fn resolved(cfg: &RunConfig) -> (ImageStore, SplitSpec) {
    resolve_data(cfg).unwrap()
}

#[test]
fn ten_episodes_record_history_and_checkpoint() {
    let cfg = small_config(10);
    let dir = tempfile::tempdir().unwrap();
    let out = train(&cfg, dir.path()).unwrap();
    assert_eq!(out.state.history.num_steps(), 10);
    assert_eq!(out.state.counter, 10);
    assert!(out.last_checkpoint.exists());
    assert!(out.best_checkpoint.as_ref().unwrap().exists());
    let text = std::fs::read_to_string(&out.history_file).unwrap();
    let history = History::from_jsonl(&text).unwrap();
    assert_eq!(history.num_steps(), 10);
    // validation after episodes 5 and 10
    assert_eq!(history.validations().len(), 2);
    assert_eq!(history, out.state.history);
}

#[test]
fn identical_runs_give_identical_histories() {
    let cfg = small_config(6);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ha = train(&cfg, a.path()).unwrap().state.history;
    let hb = train(&cfg, b.path()).unwrap().state.history;
    for (x, y) in ha.losses().iter().zip(hb.losses()) {
        assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
    }
    assert_eq!(ha.digests(), hb.digests());
    let mut other = cfg.clone();
    other.seed += 1;
    let c = tempfile::tempdir().unwrap();
    let hc = train(&other, c.path()).unwrap().state.history;
    assert_ne!(ha.digests(), hc.digests());
}

#[test]
fn too_few_training_classes_fail_before_any_step() {
    let mut cfg = small_config(3);
    cfg.train.task.n_way = 6;
    let dir = tempfile::tempdir().unwrap();
    let err = train(&cfg, dir.path()).unwrap_err();
    assert!(matches!(err, Error::TooFewClasses { have: 5, need: 6 }), "{err}");
    assert!(!dir.path().join("history.jsonl").exists());
}

fn fresh_state(cfg: &RunConfig) -> TrainState {
    TrainState::new(init_params::<f32>(&cfg.model, cfg.seed).unwrap(), cfg)
}

#[test]
fn zero_learning_rate_leaves_parameters_bitwise() {
    let cfg = small_config(1);
    let (store, split) = resolved(&cfg);
    let mut state = fresh_state(&cfg);
    state.adam.config.lr = 0.0;
    let before = state.model.clone();
    let ep = sample_episode(&store, &split.train, &cfg.train.task, 3).unwrap();
    train_step(&mut state, &ep).unwrap();
    assert_eq!(state.model, before);
    assert_eq!(state.counter, 1);
}

#[test]
fn one_step_lowers_loss_on_its_episode() {
    let mut cfg = small_config(1);
    cfg.train.lr = 1e-4;
    let (store, split) = resolved(&cfg);
    for seed in [1, 2, 3] {
        let mut state = fresh_state(&cfg);
        let ep = sample_episode(&store, &split.train, &cfg.train.task, seed).unwrap();
        let before = episode_loss_value(&state.model, &ep).unwrap();
        let reported = train_step(&mut state, &ep).unwrap();
        let after = episode_loss_value(&state.model, &ep).unwrap();
        assert!((reported - before).abs() < 1e-6);
        assert!(after < before, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn every_trainable_array_moves_after_one_step() {
    let cfg = small_config(1);
    let (store, split) = resolved(&cfg);
    let mut state = fresh_state(&cfg);
    let before = state.model.params.clone();
    let ep = sample_episode(&store, &split.train, &cfg.train.task, 8).unwrap();
    train_step(&mut state, &ep).unwrap();
    let mut unchanged = Vec::new();
    for (name, t) in before.iter() {
        if state.model.params.get(name).unwrap() == t {
            unchanged.push(name.to_string());
        }
    }
    assert!(unchanged.is_empty(), "unchanged: {unchanged:?}");
}

#[test]
fn non_finite_loss_reports_episode_seed() {
    let cfg = small_config(1);
    let (store, split) = resolved(&cfg);
    let mut state = fresh_state(&cfg);
    state.model.params.insert("head.w", Tensor::from_vec(&[5], vec![f32::NAN; 5]).unwrap());
    let ep = sample_episode(&store, &split.train, &cfg.train.task, 1234).unwrap();
    match train_step(&mut state, &ep).unwrap_err() {
        Error::Diverged { step, seed, norms } => {
            assert_eq!((step, seed), (1, 1234));
            assert!(norms.contains("head.w"));
        }
        e => panic!("unexpected {e}"),
    }
    assert_eq!(state.counter, 0);
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let cfg = small_config(1);
    let (store, split) = resolved(&cfg);
    let mut state = fresh_state(&cfg);
    for s in 0..2 {
        let ep = sample_episode(&store, &split.train, &cfg.train.task, s).unwrap();
        train_step(&mut state, &ep).unwrap();
    }
    state.best_val = Some(0.5);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.ckpt");
    save_checkpoint(&state, &p).unwrap();
    let back = load_checkpoint(&p).unwrap();
    assert_eq!(back, state);
    for (name, t) in state.adam.m.iter() {
        let b = back.adam.m.get(name).unwrap();
        assert!(t.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let cfg = small_config(1);
    let state = fresh_state(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.ckpt");
    save_checkpoint(&state, &p).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_checkpoint(&cut).is_err());
    // the intact file still loads
    assert_eq!(load_checkpoint(&p).unwrap(), state);
}

#[test]
fn variant_and_version_are_checked() {
    let cfg = small_config(1);
    let state = fresh_state(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.ckpt");
    save_checkpoint(&state, &p).unwrap();

    let mut other = ModelConfig::default();
    other.backbone.variant = BackboneVariant::Residual18;
    let err = load_checkpoint_for(&p, &other).unwrap_err();
    assert!(matches!(&err, Error::VariantMismatch { found, expected } if found == "tiny" && expected == "residual18"));
    assert!(err.to_string().contains("tiny"));

    let archive = read_archive::<f32>(&p).unwrap();
    let mut meta: HashMap<String, String> = archive.metadata.clone();
    meta.insert("format_version".into(), "0".into());
    let old = dir.path().join("old.ckpt");
    write_archive(&old, archive.tensors.iter().map(|(n, t)| (n.clone(), t)), meta).unwrap();
    assert!(matches!(load_checkpoint(&old).unwrap_err(), Error::Version { .. }));
}

#[test]
fn missing_checkpoint_names_the_path() {
    let err = load_checkpoint(Path::new("/nonexistent/run/last.ckpt")).unwrap_err();
    assert!(err.to_string().contains("/nonexistent/run/last.ckpt"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    /// At initialisation the loss stays within ln N + 5 on random inputs.
    #[test]
    fn initial_loss_is_bounded(seed in 0u64..1000, n_way in 2usize..6, k in 1usize..3) {
        use msenet_tensor::Tape;
        use rand::Rng;
        let model = init_params::<f32>(&ModelConfig::default(), seed).unwrap();
        let mut r = common::rng(seed + 1);
        let side = 32;
        let mut images = |b: usize| Tensor::<f32>::from_fn(&[b, 3, side, side], |_| r.gen_range(-1.0..1.0));
        let s_labels: Vec<usize> = (0..n_way).flat_map(|c| std::iter::repeat_n(c, k)).collect();
        let q_labels: Vec<usize> = (0..n_way).flat_map(|c| [c, c]).collect();
        let tape = Tape::new();
        let bound = model.bind_frozen(&tape);
        let s = tape.constant(images(s_labels.len()));
        let q = tape.constant(images(q_labels.len()));
        let (loss, _) = model.episode_loss(&bound, s, &s_labels, q, &q_labels, n_way).unwrap();
        let v = loss.value().item() as f64;
        prop_assert!(v.is_finite() && v <= (n_way as f64).ln() + 5.0, "loss {v}");
    }
}
