use std::collections::HashSet;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::data::{sample_episode_plan, EpisodeSpec, ImageStore, ItemRef, SplitSpec};
use crate::error::{Error, Result};
use crate::eval::{episode_seed, evaluate, EpisodeScorer, EvalReport, ModelScorer};
use crate::model::{Components, ModelParams};
use crate::train::{train_with, RunConfig};

const TIMED_EPISODES: usize = 50;

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub components: Components,
    /// One report per evaluated task.
    pub reports: Vec<EvalReport>,
    /// Median wall-clock seconds to score one evaluation episode.
    pub inference_time_s: f64,
    pub param_count: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationGrid {
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationGrid {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("grid serialises")
    }
}

/// Baseline, then multiscale, learnable weights and attention added in turn.
pub fn default_grid() -> Vec<Components> {
    let mut rows = vec![Components::BASELINE];
    let mut c = Components::BASELINE;
    c.multiscale = true;
    rows.push(c);
    c.learnable_weights = true;
    rows.push(c);
    c.self_attention = true;
    rows.push(c);
    rows
}

/// Median seconds per episode for an uncached model, with images already
/// decoded.
pub fn time_inference(
    model: &ModelParams<f32>,
    store: &ImageStore,
    split: &SplitSpec,
    spec: &EpisodeSpec,
    episodes: usize,
    seed: u64,
) -> Result<f64> {
    let scorer = ModelScorer::uncached(model, store);
    let mut times = Vec::new();
    for e in 0..episodes.clamp(1, TIMED_EPISODES) {
        let plan = sample_episode_plan(store.index(), &split.test, spec, episode_seed(seed, e))?;
        let items: Vec<ItemRef> = plan.support.iter().chain(&plan.query).map(|i| i.item).collect();
        store.get_many(&items)?;
        let t0 = Instant::now();
        scorer.score(&plan)?;
        times.push(t0.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let n = times.len();
    Ok(if n % 2 == 1 { times[n / 2] } else { 0.5 * (times[n / 2 - 1] + times[n / 2]) })
}

/// Runs each toggle combination of `grid` with models produced by `train_fn`
/// and evaluates them on the test split under the shared seed.
pub fn run_ablation_with(
    base: &RunConfig,
    grid: &[Components],
    store: &ImageStore,
    split: &SplitSpec,
    mut train_fn: impl FnMut(&RunConfig) -> Result<ModelParams<f32>>,
) -> Result<AblationGrid> {
    let mut seen = HashSet::new();
    for c in grid {
        if !seen.insert(*c) {
            return Err(Error::Config(format!("ablation grid repeats the row ({c})")));
        }
    }
    let task = base.eval.task;
    let tasks: Vec<EpisodeSpec> = base.eval.ablation_shots.iter().map(|&k| EpisodeSpec { k_shot: k, ..task }).collect();
    let mut rows = Vec::with_capacity(grid.len());
    for &components in grid {
        let mut cfg = base.clone();
        cfg.model.components = components;
        let model = train_fn(&cfg)?;
        let scorer = ModelScorer::new(&model, store);
        let reports = tasks
            .iter()
            .map(|spec| evaluate(&scorer, store.index(), &split.test, spec, base.eval.episodes, base.seed))
            .collect::<Result<Vec<_>>>()?;
        rows.push(AblationRow {
            components,
            reports,
            inference_time_s: time_inference(&model, store, split, &task, base.eval.episodes, base.seed)?,
            param_count: model.num_parameters(),
        });
    }
    Ok(AblationGrid { seed: base.seed, rows })
}

/// Trains every row into `work_dir/row_<i>` and evaluates it.
pub fn run_ablation(
    base: &RunConfig,
    grid: &[Components],
    store: &ImageStore,
    split: &SplitSpec,
    work_dir: &Path,
) -> Result<AblationGrid> {
    let mut row = 0;
    run_ablation_with(base, grid, store, split, |cfg| {
        let dir = work_dir.join(format!("row_{row}"));
        row += 1;
        Ok(train_with(cfg, store, split, &dir)?.state.model)
    })
}
