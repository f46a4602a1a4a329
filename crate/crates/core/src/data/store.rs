use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use rayon::prelude::*;

use crate::data::episode::{Episode, EpisodePlan};
use crate::data::index::{DatasetIndex, ItemRef};
use crate::data::preprocess::{preprocess_file, ImageTensor, Normalization};
use crate::error::Result;

/// Loads preprocessed images for an index, memoising each decoded file.
pub struct ImageStore {
    index: DatasetIndex,
    norm: Normalization,
    cache: RwLock<HashMap<ItemRef, Arc<ImageTensor>>>,
}

impl ImageStore {
    pub fn new(index: DatasetIndex, norm: Normalization) -> Self {
        Self { index, norm, cache: RwLock::new(HashMap::new()) }
    }

    pub fn index(&self) -> &DatasetIndex {
        &self.index
    }

    pub fn normalization(&self) -> &Normalization {
        &self.norm
    }

    pub fn get(&self, item: ItemRef) -> Result<Arc<ImageTensor>> {
        if let Some(t) = self.cache.read().expect("cache lock").get(&item) {
            return Ok(Arc::clone(t));
        }
        let tensor = Arc::new(preprocess_file(self.index.path(item), &self.norm)?);
        self.cache.write().expect("cache lock").entry(item).or_insert_with(|| Arc::clone(&tensor));
        Ok(tensor)
    }

    pub fn get_many(&self, items: &[ItemRef]) -> Result<Vec<Arc<ImageTensor>>> {
        items.par_iter().map(|&i| self.get(i)).collect()
    }

    pub fn load_episode(&self, plan: EpisodePlan) -> Result<Episode> {
        let s: Vec<ItemRef> = plan.support.iter().map(|e| e.item).collect();
        let q: Vec<ItemRef> = plan.query.iter().map(|e| e.item).collect();
        Ok(Episode { support: self.get_many(&s)?, query: self.get_many(&q)?, plan })
    }
}
