mod common;

use std::collections::BTreeSet;

use common::synth_dataset;
use msenet_core::data::{
    build_index, ClassEntry, DatasetIndex, EpisodePlan, EpisodeSpec, ImageStore, Normalization, SplitSpec,
};
use msenet_core::eval::{
    confusion, cross_domain_eval, evaluate, evaluate_with_confusion, export_samples, run_ablation_with, run_episodes,
    EpisodeScorer, ModelScorer, SampleRecord, Scored,
};
use msenet_core::head::class_posterior;
use msenet_core::model::{init_params, stack_images, Components, ModelConfig, Role};
use msenet_core::train::{save_checkpoint, RunConfig, TrainState};
use msenet_core::Error;
use msenet_tensor::Tensor;
use proptest::prelude::*;

fn virtual_index(classes: usize, items: usize) -> DatasetIndex {
    let entries = (0..classes)
        .map(|c| ClassEntry {
            name: format!("c{c:02}"),
            items: (0..items).map(|i| format!("c{c:02}/{i}.png").into()).collect(),
        })
        .collect();
    DatasetIndex::from_entries("/virtual", entries).unwrap()
}

fn all(index: &DatasetIndex) -> BTreeSet<String> {
    index.class_names().map(String::from).collect()
}

fn uniform_probs(q: usize, n: usize) -> Tensor<f64> {
    Tensor::full(&[q, n], 1.0 / n as f64)
}

struct AlwaysZero;

impl EpisodeScorer for AlwaysZero {
    fn score(&self, plan: &EpisodePlan) -> msenet_core::Result<Scored> {
        Ok(Scored { predictions: vec![0; plan.query.len()], probs: uniform_probs(plan.query.len(), plan.spec.n_way) })
    }
}

struct Truth;

impl EpisodeScorer for Truth {
    fn score(&self, plan: &EpisodePlan) -> msenet_core::Result<Scored> {
        Ok(Scored { predictions: plan.query_labels(), probs: uniform_probs(plan.query.len(), plan.spec.n_way) })
    }
}

/// Correct with probability `p`, decided by a hash of the episode seed and
/// query position; otherwise predicts the next label.
struct Bernoulli(f64);

impl EpisodeScorer for Bernoulli {
    fn score(&self, plan: &EpisodePlan) -> msenet_core::Result<Scored> {
        let predictions = plan
            .query
            .iter()
            .enumerate()
            .map(|(i, q)| {
                let h = msenet_core::seed::derive_seed(plan.seed, 99, i as u64);
                let u = (h >> 11) as f64 / (1u64 << 53) as f64;
                if u < self.0 {
                    q.label
                } else {
                    (q.label + 1) % plan.spec.n_way
                }
            })
            .collect();
        Ok(Scored { predictions, probs: uniform_probs(plan.query.len(), plan.spec.n_way) })
    }
}

#[test]
fn constant_scorer_sits_at_chance() {
    let idx = virtual_index(12, 30);
    let spec = EpisodeSpec::new(5, 1, 15).unwrap();
    let r = evaluate(&AlwaysZero, &idx, &all(&idx), &spec, 400, 1).unwrap();
    assert!((r.accuracy - 0.2).abs() < 1e-12, "{}", r.accuracy);
    // every episode scores exactly 1/5, so the interval is rounding noise
    assert!(r.ci95 < 1e-12, "{}", r.ci95);
    assert_eq!(r.per_episode.len(), 400);
}

#[test]
fn true_label_scorer_is_perfect() {
    let idx = virtual_index(8, 20);
    let spec = EpisodeSpec::new(5, 5, 15).unwrap();
    let (r, cm) = evaluate_with_confusion(&Truth, &idx, &all(&idx), &spec, 50, 4).unwrap();
    assert_eq!((r.accuracy, r.ci95), (1.0, 0.0));
    for (i, row) in cm.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if i != j {
                assert_eq!(c, 0);
            }
        }
    }
    assert_eq!(cm.trace(), cm.total());
}

#[test]
fn seeds_control_the_episode_stream() {
    let idx = virtual_index(10, 25);
    let spec = EpisodeSpec::new(5, 1, 5).unwrap();
    let split = all(&idx);
    let a = evaluate(&Bernoulli(0.6), &idx, &split, &spec, 100, 1).unwrap();
    let b = evaluate(&Bernoulli(0.6), &idx, &split, &spec, 100, 2).unwrap();
    let again = evaluate(&Bernoulli(0.6), &idx, &split, &spec, 100, 1).unwrap();
    assert_ne!(a.per_episode, b.per_episode);
    assert_eq!(a, again);
}

#[test]
fn ci_matches_population_formula() {
    let idx = virtual_index(10, 25);
    let spec = EpisodeSpec::new(5, 1, 5).unwrap();
    let r = evaluate(&Bernoulli(0.7), &idx, &all(&idx), &spec, 60, 3).unwrap();
    let n = r.per_episode.len() as f64;
    let mean = r.per_episode.iter().sum::<f64>() / n;
    let sd = (r.per_episode.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n).sqrt();
    assert!((r.accuracy - mean).abs() < 1e-12);
    assert!((r.ci95 - 1.96 * sd / n.sqrt()).abs() < 1e-12);
    assert!((0.0..=1.0).contains(&r.accuracy) && r.ci95 >= 0.0);
}

#[test]
fn confusion_rows_recount_the_episode_log() {
    let idx = virtual_index(9, 20);
    let spec = EpisodeSpec::new(4, 2, 3).unwrap();
    let split = all(&idx);
    let outcomes = run_episodes(&AlwaysZero, &idx, &split, &spec, 40, 8).unwrap();
    let cm = confusion(&AlwaysZero, &idx, &split, &spec, 40, 8).unwrap();
    let labels: Vec<String> = split.iter().cloned().collect();
    assert_eq!(cm.labels, labels);
    let mut expected = vec![vec![0u64; labels.len()]; labels.len()];
    for o in &outcomes {
        let first = labels.iter().position(|l| *l == o.plan.class_ids[0]).unwrap();
        for q in &o.plan.query {
            let t = labels.iter().position(|l| *l == o.plan.class_ids[q.label]).unwrap();
            expected[t][first] += 1;
        }
    }
    assert_eq!(cm.counts, expected);
    for (name, sum) in labels.iter().zip(cm.row_sums()) {
        let appearances = outcomes.iter().filter(|o| o.plan.class_ids.contains(name)).count() as u64;
        assert_eq!(sum, appearances * spec.n_query as u64);
    }
    let csv = cm.to_csv();
    assert!(csv.lines().next().unwrap().ends_with(&labels.join(",")));
    assert_eq!(csv.lines().count(), labels.len() + 1);
}

#[test]
fn accuracy_equals_confusion_trace_fraction() {
    let idx = virtual_index(9, 20);
    let spec = EpisodeSpec::new(5, 1, 4).unwrap();
    let (r, cm) = evaluate_with_confusion(&Bernoulli(0.5), &idx, &all(&idx), &spec, 70, 2).unwrap();
    assert!((r.accuracy - cm.accuracy()).abs() < 1e-12);
}

#[test]
fn too_few_classes_for_the_task_are_rejected() {
    let idx = virtual_index(3, 20);
    let spec = EpisodeSpec::new(5, 1, 1).unwrap();
    let err = evaluate(&Truth, &idx, &all(&idx), &spec, 1, 0).unwrap_err();
    assert!(matches!(err, Error::TooFewClasses { have: 3, need: 5 }));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn interval_shrinks_with_more_episodes(seed in 0u64..10_000, p in 0.3f64..0.8) {
        let idx = virtual_index(10, 25);
        let spec = EpisodeSpec::new(5, 1, 5).unwrap();
        let split = all(&idx);
        let small = evaluate(&Bernoulli(p), &idx, &split, &spec, 100, seed).unwrap();
        let large = evaluate(&Bernoulli(p), &idx, &split, &spec, 1000, seed).unwrap();
        prop_assert!(large.ci95 < small.ci95, "{} vs {}", large.ci95, small.ci95);
    }
}

#[test]
fn duplicate_ablation_rows_are_rejected() {
    let idx = virtual_index(6, 10);
    let store = ImageStore::new(idx, Normalization::SYNTHETIC);
    let split = SplitSpec { train: BTreeSet::new(), val: BTreeSet::new(), test: all(store.index()), seed: 0 };
    let grid = [Components::FULL, Components::BASELINE, Components::FULL];
    let err = run_ablation_with(&RunConfig::default(), &grid, &store, &split, |_| unreachable!()).unwrap_err();
    assert!(err.to_string().contains("repeats"), "{err}");
}

#[test]
fn full_model_adds_exactly_the_attention_parameters() {
    let mut cfg = ModelConfig::default();
    let full = init_params::<f32>(&cfg, 0).unwrap();
    cfg.components = Components::BASELINE;
    let base = init_params::<f32>(&cfg, 0).unwrap();
    let attention: usize = full.params.iter().filter(|(n, _)| n.starts_with("attn.")).map(|(_, t)| t.len()).sum();
    // baseline freezes w, so the five weights are not counted either
    assert_eq!(full.num_parameters(), base.num_parameters() + attention + 5);
    assert!(base.num_parameters() < full.num_parameters());
}

#[test]
fn cached_and_uncached_scoring_agree() {
    let dir = synth_dataset(6, 8, 2);
    let store = ImageStore::new(build_index(dir.path()).unwrap(), Normalization::SYNTHETIC);
    let model = init_params::<f32>(&ModelConfig::default(), 3).unwrap();
    let split = all(store.index());
    let spec = EpisodeSpec::new(3, 2, 2).unwrap();
    let cached = ModelScorer::new(&model, &store);
    let fresh = ModelScorer::uncached(&model, &store);
    for o in run_episodes(&cached, store.index(), &split, &spec, 4, 1).unwrap() {
        let direct = fresh.score(&o.plan).unwrap();
        assert_eq!(direct.predictions, o.scored.predictions);
        let diff = common::max_abs_diff(direct.probs.data(), o.scored.probs.data());
        assert!(diff < 1e-6, "{diff}");
    }
}

#[test]
fn exported_samples_carry_max_posterior_confidence() {
    let dir = synth_dataset(6, 8, 2);
    let out = tempfile::tempdir().unwrap();
    let store = ImageStore::new(build_index(dir.path()).unwrap(), Normalization::SYNTHETIC);
    let model = init_params::<f32>(&ModelConfig::default(), 3).unwrap();
    let split = all(store.index());
    let spec = EpisodeSpec::new(3, 2, 2).unwrap();
    let scorer = ModelScorer::new(&model, &store);
    let records = export_samples(&scorer, &store, &split, &spec, 2, 11, 4, out.path()).unwrap();
    assert!(!records.is_empty());
    let sidecar = std::fs::read_to_string(out.path().join("samples.jsonl")).unwrap();
    let parsed: Vec<SampleRecord> = sidecar.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(parsed, records);
    for r in &records {
        assert!(out.path().join(&r.file).is_file());
        assert_eq!(r.correct, r.true_class == r.predicted_class);
    }

    // Recompute the posterior of the first exported case from scratch.
    let plan =
        msenet_core::data::sample_episode_plan(store.index(), &split, &spec, msenet_core::eval::episode_seed(11, 0))
            .unwrap();
    let first = &records[0];
    assert_eq!(first.episode, 0);
    let qi = plan.query.iter().position(|q| store.index().path(q.item).display().to_string() == first.query).unwrap();
    let s = model
        .embed_batch(
            &stack_images(&store.get_many(&plan.support.iter().map(|e| e.item).collect::<Vec<_>>()).unwrap()).unwrap(),
            Role::Support,
        )
        .unwrap();
    let q = model
        .embed_batch(
            &stack_images(&store.get_many(&plan.query.iter().map(|e| e.item).collect::<Vec<_>>()).unwrap()).unwrap(),
            Role::Query,
        )
        .unwrap();
    let agg = model.distances(&s, &plan.support_labels(), &q, spec.n_way).unwrap().to_f64();
    let probs = class_posterior(&agg).unwrap();
    let row = &probs.data()[qi * spec.n_way..(qi + 1) * spec.n_way];
    let max = row.iter().copied().fold(f64::MIN, f64::max);
    assert!((first.confidence - max).abs() < 1e-6, "{} vs {max}", first.confidence);
}

#[test]
fn export_to_unwritable_directory_fails() {
    let idx = virtual_index(4, 5);
    let store = ImageStore::new(idx, Normalization::SYNTHETIC);
    let spec = EpisodeSpec::new(2, 1, 1).unwrap();
    let blocker = tempfile::NamedTempFile::new().unwrap();
    let err =
        export_samples(&Truth, &store, &all(store.index()), &spec, 1, 0, 1, &blocker.path().join("x")).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err}");
}

#[test]
fn cross_domain_reports_record_their_dataset() {
    let ckpt_dir = tempfile::tempdir().unwrap();
    let ckpt = ckpt_dir.path().join("m.ckpt");
    let cfg = RunConfig::default();
    save_checkpoint(&TrainState::new(init_params::<f32>(&cfg.model, 0).unwrap(), &cfg), &ckpt).unwrap();

    let a = synth_dataset(3, 8, 21);
    let b = synth_dataset(4, 8, 22);
    let spec = EpisodeSpec::new(3, 1, 2).unwrap();
    let ra = cross_domain_eval(&ckpt, a.path(), Normalization::SYNTHETIC, &spec, 3, 0).unwrap();
    let rb = cross_domain_eval(&ckpt, b.path(), Normalization::SYNTHETIC, &spec, 3, 0).unwrap();
    assert_eq!(ra.episodes, 3);
    assert_ne!(ra.dataset, rb.dataset);
    assert!(ra.dataset.as_ref().unwrap().contains(&a.path().display().to_string()));

    let five = EpisodeSpec::new(5, 1, 2).unwrap();
    let err = cross_domain_eval(&ckpt, a.path(), Normalization::SYNTHETIC, &five, 3, 0).unwrap_err();
    assert!(matches!(err, Error::TooFewClasses { have: 3, need: 5 }));
}
