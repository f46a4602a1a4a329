//! Episodic training with Adam, periodic validation and checkpointing.

mod adam;
mod checkpoint;
mod config;
mod history;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use msenet_tensor::{Scalar, Tape};

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, FORMAT_VERSION};
pub use config::{apply_override, DataConfig, EvalConfig, NormKind, RunConfig, RuntimeConfig, TrainConfig};
pub use history::{timestamp, History, HistoryWriter, Record};

use crate::data::{build_index, check_split, make_splits, sample_episode, Episode, ImageStore, SplitSpec};
use crate::error::{Error, Result};
use crate::eval::{evaluate, ModelScorer};
use crate::model::{init_params, stack_images, ModelParams};
use crate::seed::{derive_seed, STREAM_TRAIN, STREAM_VAL};

pub const HISTORY_FILE: &str = "history.jsonl";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: ModelParams<f32>,
    pub adam: Adam<f32>,
    /// Completed training steps.
    pub counter: u64,
    pub history: History,
    pub config_hash: String,
    pub best_val: Option<f64>,
}

impl TrainState {
    pub fn new(model: ModelParams<f32>, cfg: &RunConfig) -> Self {
        let t = &cfg.train;
        Self {
            model,
            adam: Adam::new(AdamConfig { lr: t.lr, beta1: t.beta1, beta2: t.beta2, eps: t.eps }),
            counter: 0,
            history: History::default(),
            config_hash: cfg.hash(),
            best_val: None,
        }
    }
}

/// Mean query loss of `model` on `episode`, without updating anything.
pub fn episode_loss_value(model: &ModelParams<f32>, episode: &Episode) -> Result<f64> {
    let tape = Tape::new();
    let bound = model.bind_frozen(&tape);
    let plan = &episode.plan;
    let s = tape.constant(stack_images(&episode.support)?);
    let q = tape.constant(stack_images(&episode.query)?);
    let (loss, _) = model.episode_loss(&bound, s, &plan.support_labels(), q, &plan.query_labels(), plan.spec.n_way)?;
    let value = loss.value().item().as_f64();
    Ok(value)
}

fn norm_summary(model: &ModelParams<f32>) -> String {
    model.norms().iter().map(|(n, v)| format!("{n}={v:.4e}")).collect::<Vec<_>>().join(", ")
}

/// One Adam step on `episode`. Returns the loss before the update.
pub fn train_step(state: &mut TrainState, episode: &Episode) -> Result<f64> {
    let plan = &episode.plan;
    let diverged = |state: &TrainState| Error::Diverged {
        step: state.counter + 1,
        seed: plan.seed,
        norms: norm_summary(&state.model),
    };
    let grads: BTreeMap<String, _> = {
        let tape = Tape::new();
        let model = &state.model;
        let bound = model.bind(&tape);
        let s = tape.constant(stack_images(&episode.support)?);
        let q = tape.constant(stack_images(&episode.query)?);
        let (loss, _) =
            model.episode_loss(&bound, s, &plan.support_labels(), q, &plan.query_labels(), plan.spec.n_way)?;
        let value = loss.value().item().as_f64();
        if !value.is_finite() {
            return Err(diverged(state));
        }
        let g = tape.backward(loss);
        let grads = bound
            .iter()
            .filter(|(n, _)| model.is_trainable(n))
            .map(|(n, v)| (n.to_string(), g.get_or_zeros(v)))
            .collect();
        state.history.push(Record::Step {
            episode: state.counter + 1,
            loss: value,
            lr: state.adam.config.lr,
            timestamp: timestamp(),
            digest: plan.digest(),
        });
        grads
    };
    state.adam.update(&mut state.model.params, &grads)?;
    if !state.model.params.all_finite() {
        return Err(diverged(state));
    }
    state.counter += 1;
    match state.history.records.last() {
        Some(Record::Step { loss, .. }) => Ok(*loss),
        _ => unreachable!("step record pushed above"),
    }
}

/// Index, split and image store resolved from a configuration.
pub fn resolve_data(cfg: &RunConfig) -> Result<(ImageStore, SplitSpec)> {
    let root = cfg.data_root()?;
    let index = build_index(&root)?;
    let split = if cfg.data.split_file.is_empty() {
        let [a, b, c] = cfg.data.split_counts;
        make_splits(&index, (a, b, c), cfg.seed)?
    } else {
        SplitSpec::load(Path::new(&cfg.data.split_file))?
    };
    split.validate(&index)?;
    Ok((ImageStore::new(index, cfg.data.normalization.normalization()), split))
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub last_checkpoint: PathBuf,
    /// Best-by-validation checkpoint; absent when the split has no validation classes.
    pub best_checkpoint: Option<PathBuf>,
    pub history_file: PathBuf,
}

/// Resolves data from `cfg` and trains into `run_dir`.
pub fn train(cfg: &RunConfig, run_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (store, split) = resolve_data(cfg)?;
    train_with(cfg, &store, &split, run_dir)
}

/// Trains on the `train` part of `split`, validating on its `val` part with
/// the evaluation task. An empty validation part disables validation.
pub fn train_with(cfg: &RunConfig, store: &ImageStore, split: &SplitSpec, run_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_split(store.index(), &split.train, &cfg.train.task)?;
    let validate = !split.val.is_empty() && cfg.train.val_episodes > 0;
    if validate {
        check_split(store.index(), &split.val, &cfg.eval.task)?;
    }
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(format!("creating {}", run_dir.display()), e))?;
    let history_file = run_dir.join(HISTORY_FILE);
    let last = run_dir.join(LAST_CHECKPOINT);
    let best = run_dir.join(BEST_CHECKPOINT);
    let mut writer = HistoryWriter::create(&history_file)?;

    let mut state = TrainState::new(init_params::<f32>(&cfg.model, cfg.seed)?, cfg);
    let interval = cfg.train.eval_interval.max(1);
    for e in 0..cfg.train.episodes {
        let episode = sample_episode(store, &split.train, &cfg.train.task, derive_seed(cfg.seed, STREAM_TRAIN, e))?;
        train_step(&mut state, &episode)?;
        writer.write(state.history.records.last().expect("step recorded"))?;

        let done = e + 1 == cfg.train.episodes;
        if (e + 1) % interval != 0 && !done {
            continue;
        }
        if validate {
            let scorer = ModelScorer::new(&state.model, store);
            let report = evaluate(
                &scorer,
                store.index(),
                &split.val,
                &cfg.eval.task,
                cfg.train.val_episodes,
                derive_seed(cfg.seed, STREAM_VAL, 0),
            )?;
            let record = Record::Validation {
                episode: state.counter,
                val_accuracy: report.accuracy,
                ci95: report.ci95,
                timestamp: timestamp(),
            };
            writer.write(&record)?;
            state.history.push(record);
            if state.best_val.is_none_or(|b| report.accuracy > b) {
                state.best_val = Some(report.accuracy);
                save_checkpoint(&state, &best)?;
            }
        }
        save_checkpoint(&state, &last)?;
    }
    Ok(TrainOutcome { state, last_checkpoint: last, best_checkpoint: validate.then_some(best), history_file })
}
