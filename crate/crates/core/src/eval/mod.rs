//! Episodic evaluation, confusion matrices, sample export, ablations and
//! cross-domain runs.

mod ablation;
mod confusion;
mod samples;
mod scorer;

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use ablation::{default_grid, run_ablation, run_ablation_with, time_inference, AblationGrid, AblationRow};
pub use confusion::ConfusionMatrix;
pub use samples::{export_samples, SampleRecord};
pub use scorer::{EpisodeScorer, ModelScorer, Scored};

use crate::data::{
    build_index, check_split, sample_episode_plan, DatasetIndex, EpisodePlan, EpisodeSpec, ImageStore, Normalization,
};
use crate::error::Result;
use crate::seed::{derive_seed, STREAM_EVAL};
use crate::train::load_checkpoint;

/// Fraction of correct queries plus a 95% interval over episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: EpisodeSpec,
    pub episodes: usize,
    pub accuracy: f64,
    /// Half-width `1.96 σ / √episodes` with σ the population deviation.
    pub ci95: f64,
    pub seed: u64,
    pub per_episode: Vec<f64>,
    /// Dataset the episodes came from, when recorded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
}

impl EvalReport {
    pub fn from_accuracies(task: EpisodeSpec, seed: u64, per_episode: Vec<f64>) -> Self {
        let n = per_episode.len();
        let (accuracy, ci95) = if n == 0 {
            (0.0, 0.0)
        } else {
            let mean = per_episode.iter().sum::<f64>() / n as f64;
            let var = per_episode.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
            (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
        };
        Self { task, episodes: n, accuracy, ci95, seed, per_episode, dataset: None }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

/// One scored episode.
#[derive(Clone, Debug)]
pub struct EpisodeOutcome {
    pub plan: EpisodePlan,
    pub scored: Scored,
}

impl EpisodeOutcome {
    pub fn accuracy(&self) -> f64 {
        let q = self.plan.query.len();
        let correct = self.plan.query.iter().zip(&self.scored.predictions).filter(|(e, &p)| e.label == p).count();
        correct as f64 / q as f64
    }
}

/// Seed of evaluation episode `e` under base `seed`.
pub fn episode_seed(seed: u64, e: usize) -> u64 {
    derive_seed(seed, STREAM_EVAL, e as u64)
}

/// Samples and scores `episodes` episodes in order.
pub fn run_episodes(
    scorer: &dyn EpisodeScorer,
    index: &DatasetIndex,
    split: &BTreeSet<String>,
    spec: &EpisodeSpec,
    episodes: usize,
    seed: u64,
) -> Result<Vec<EpisodeOutcome>> {
    check_split(index, split, spec)?;
    (0..episodes)
        .map(|e| {
            let plan = sample_episode_plan(index, split, spec, episode_seed(seed, e))?;
            let scored = scorer.score(&plan)?;
            Ok(EpisodeOutcome { plan, scored })
        })
        .collect()
}

pub fn report_from(outcomes: &[EpisodeOutcome], spec: &EpisodeSpec, seed: u64) -> EvalReport {
    EvalReport::from_accuracies(*spec, seed, outcomes.iter().map(EpisodeOutcome::accuracy).collect())
}

pub fn evaluate(
    scorer: &dyn EpisodeScorer,
    index: &DatasetIndex,
    split: &BTreeSet<String>,
    spec: &EpisodeSpec,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    let outcomes = run_episodes(scorer, index, split, spec, episodes, seed)?;
    Ok(report_from(&outcomes, spec, seed))
}

/// Report and confusion matrix from a single episode stream.
pub fn evaluate_with_confusion(
    scorer: &dyn EpisodeScorer,
    index: &DatasetIndex,
    split: &BTreeSet<String>,
    spec: &EpisodeSpec,
    episodes: usize,
    seed: u64,
) -> Result<(EvalReport, ConfusionMatrix)> {
    let outcomes = run_episodes(scorer, index, split, spec, episodes, seed)?;
    Ok((report_from(&outcomes, spec, seed), ConfusionMatrix::from_outcomes(split, &outcomes)))
}

pub fn confusion(
    scorer: &dyn EpisodeScorer,
    index: &DatasetIndex,
    split: &BTreeSet<String>,
    spec: &EpisodeSpec,
    episodes: usize,
    seed: u64,
) -> Result<ConfusionMatrix> {
    Ok(evaluate_with_confusion(scorer, index, split, spec, episodes, seed)?.1)
}

/// Evaluates a checkpoint on every class of another dataset, without any
/// adaptation. The report records the target dataset.
pub fn cross_domain_eval(
    checkpoint: &Path,
    target_root: &Path,
    norm: Normalization,
    spec: &EpisodeSpec,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    let state = load_checkpoint(checkpoint)?;
    let index = build_index(target_root)?;
    let classes: BTreeSet<String> = index.class_names().map(String::from).collect();
    check_split(&index, &classes, spec)?;
    let identity = format!("{} ({})", index.name(), target_root.display());
    let store = ImageStore::new(index, norm);
    let scorer = ModelScorer::new(&state.model, &store);
    let mut report = evaluate(&scorer, store.index(), &classes, spec, episodes, seed)?;
    report.dataset = Some(identity);
    Ok(report)
}
