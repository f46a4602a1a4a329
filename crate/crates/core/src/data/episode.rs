use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::index::{DatasetIndex, ItemRef};
use crate::data::preprocess::ImageTensor;
use crate::data::store::ImageStore;
use crate::error::{Error, Result};
use crate::seed;

/// N-way K-shot task shape with `n_query` queries per class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
}

impl EpisodeSpec {
    pub fn new(n_way: usize, k_shot: usize, n_query: usize) -> Result<Self> {
        let spec = Self { n_way, k_shot, n_query };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        // n_way = 1 is accepted for degenerate single-class checks.
        if self.n_way == 0 {
            return Err(Error::InvalidSpec("n_way must be positive".into()));
        }
        if self.k_shot == 0 || self.n_query == 0 {
            return Err(Error::InvalidSpec(format!(
                "k_shot and n_query must be positive, got {} and {}",
                self.k_shot, self.n_query
            )));
        }
        Ok(())
    }

    pub fn items_per_class(&self) -> usize {
        self.k_shot + self.n_query
    }

    pub fn label(&self) -> String {
        format!("{}-way {}-shot", self.n_way, self.k_shot)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EpisodeItem {
    pub item: ItemRef,
    /// Episode-local class index in `0..n_way`.
    pub label: usize,
}

/// Which images form one episode, without pixel data.
///
/// Support and query lists are class-major: all items of label 0 first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpisodePlan {
    pub spec: EpisodeSpec,
    pub seed: u64,
    /// Original class names, indexed by episode-local label.
    pub class_ids: Vec<String>,
    pub support: Vec<EpisodeItem>,
    pub query: Vec<EpisodeItem>,
}

impl EpisodePlan {
    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|e| e.label).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|e| e.label).collect()
    }

    /// Short stable fingerprint of the sampled items, for comparing streams.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (tag, items) in [(b'S', &self.support), (b'Q', &self.query)] {
            for e in items {
                h.update([tag]);
                h.update((e.item.class as u64).to_le_bytes());
                h.update((e.item.item as u64).to_le_bytes());
                h.update((e.label as u64).to_le_bytes());
            }
        }
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// An [`EpisodePlan`] together with its preprocessed images.
#[derive(Clone, Debug)]
pub struct Episode {
    pub plan: EpisodePlan,
    pub support: Vec<Arc<ImageTensor>>,
    pub query: Vec<Arc<ImageTensor>>,
}

/// Resolves split class names to index positions, failing on unknown names.
pub fn split_positions(index: &DatasetIndex, split: &BTreeSet<String>) -> Result<Vec<usize>> {
    split
        .iter()
        .map(|name| {
            index
                .class_position(name)
                .ok_or_else(|| Error::InvalidSplit(format!("class '{name}' is not in the dataset")))
        })
        .collect()
}

/// Checks that `split` can serve episodes of shape `spec`.
pub fn check_split(index: &DatasetIndex, split: &BTreeSet<String>, spec: &EpisodeSpec) -> Result<()> {
    spec.validate()?;
    let positions = split_positions(index, split)?;
    if positions.len() < spec.n_way {
        return Err(Error::TooFewClasses { have: positions.len(), need: spec.n_way });
    }
    for p in positions {
        let class = &index.classes()[p];
        if class.items.len() < spec.items_per_class() {
            return Err(Error::ClassTooSmall {
                class: class.name.clone(),
                have: class.items.len(),
                need: spec.items_per_class(),
            });
        }
    }
    Ok(())
}

/// Draws one episode. Classes get labels in the order they are sampled;
/// within a class the first `k_shot` sampled items are support.
pub fn sample_episode_plan(
    index: &DatasetIndex,
    split: &BTreeSet<String>,
    spec: &EpisodeSpec,
    rng_seed: u64,
) -> Result<EpisodePlan> {
    check_split(index, split, spec)?;
    let positions = split_positions(index, split)?;
    let mut rng = seed::rng(rng_seed);
    let chosen = sample(&mut rng, positions.len(), spec.n_way).into_vec();

    let mut plan = EpisodePlan {
        spec: *spec,
        seed: rng_seed,
        class_ids: Vec::with_capacity(spec.n_way),
        support: Vec::with_capacity(spec.n_way * spec.k_shot),
        query: Vec::with_capacity(spec.n_way * spec.n_query),
    };
    for (label, &c) in chosen.iter().enumerate() {
        let class = positions[c];
        let entry = &index.classes()[class];
        plan.class_ids.push(entry.name.clone());
        let picks = sample(&mut rng, entry.items.len(), spec.items_per_class()).into_vec();
        for (j, item) in picks.into_iter().enumerate() {
            let e = EpisodeItem { item: ItemRef { class, item }, label };
            if j < spec.k_shot {
                plan.support.push(e);
            } else {
                plan.query.push(e);
            }
        }
    }
    Ok(plan)
}

/// Draws one episode and loads its images through `store`.
pub fn sample_episode(
    store: &ImageStore,
    split: &BTreeSet<String>,
    spec: &EpisodeSpec,
    rng_seed: u64,
) -> Result<Episode> {
    let plan = sample_episode_plan(store.index(), split, spec, rng_seed)?;
    store.load_episode(plan)
}
