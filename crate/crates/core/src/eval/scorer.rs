use std::collections::HashMap;
use std::sync::Mutex;

use msenet_tensor::Tensor;

use crate::data::{EpisodeItem, EpisodePlan, ImageStore, ItemRef};
use crate::error::Result;
use crate::head::{class_posterior, predict};
use crate::model::{stack_images, ModelParams, Role};

/// Predictions for the queries of one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    /// Episode-local label per query.
    pub predictions: Vec<usize>,
    /// Posterior `[Q, N]`.
    pub probs: Tensor<f64>,
}

pub trait EpisodeScorer: Sync {
    fn score(&self, plan: &EpisodePlan) -> Result<Scored>;
}

const EMBED_BATCH: usize = 64;

type StageCache = HashMap<(ItemRef, Role), Vec<Vec<f32>>>;

/// Scores episodes with a trained model, optionally caching stage vectors
/// per (image, role).
pub struct ModelScorer<'a> {
    model: &'a ModelParams<f32>,
    store: &'a ImageStore,
    cache: Option<Mutex<StageCache>>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a ModelParams<f32>, store: &'a ImageStore) -> Self {
        Self { model, store, cache: Some(Mutex::new(HashMap::new())) }
    }

    /// A scorer that embeds every episode from scratch.
    pub fn uncached(model: &'a ModelParams<f32>, store: &'a ImageStore) -> Self {
        Self { model, store, cache: None }
    }

    /// Stage vectors `[B, C_p]` for `items`.
    fn embed(&self, items: &[EpisodeItem], role: Role) -> Result<Vec<Tensor<f32>>> {
        let refs: Vec<ItemRef> = items.iter().map(|e| e.item).collect();
        let Some(cache) = &self.cache else {
            let images = self.store.get_many(&refs)?;
            return self.model.embed_batch(&stack_images(&images)?, role);
        };
        let missing: Vec<ItemRef> = {
            let c = cache.lock().expect("cache lock");
            let mut m: Vec<ItemRef> = refs.iter().copied().filter(|r| !c.contains_key(&(*r, role))).collect();
            m.sort();
            m.dedup();
            m
        };
        for chunk in missing.chunks(EMBED_BATCH) {
            let images = self.store.get_many(chunk)?;
            let stages = self.model.embed_batch(&stack_images(&images)?, role)?;
            let mut c = cache.lock().expect("cache lock");
            for (i, &r) in chunk.iter().enumerate() {
                let rows = stages
                    .iter()
                    .map(|t| {
                        let width = t.shape()[1];
                        t.data()[i * width..(i + 1) * width].to_vec()
                    })
                    .collect();
                c.insert((r, role), rows);
            }
        }
        let c = cache.lock().expect("cache lock");
        let stages = self.model.active_stages().len();
        (0..stages)
            .map(|s| {
                let width = c[&(refs[0], role)][s].len();
                let mut data = Vec::with_capacity(refs.len() * width);
                for r in &refs {
                    data.extend_from_slice(&c[&(*r, role)][s]);
                }
                Ok(Tensor::from_vec(&[refs.len(), width], data)?)
            })
            .collect()
    }
}

impl EpisodeScorer for ModelScorer<'_> {
    fn score(&self, plan: &EpisodePlan) -> Result<Scored> {
        let support = self.embed(&plan.support, Role::Support)?;
        let query = self.embed(&plan.query, Role::Query)?;
        let agg = self.model.distances(&support, &plan.support_labels(), &query, plan.spec.n_way)?;
        Ok(Scored { predictions: predict(&agg)?, probs: class_posterior(&agg.to_f64())? })
    }
}
