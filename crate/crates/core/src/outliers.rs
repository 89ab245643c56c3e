//! Outlier memory and pseudo-domain discovery.

use serde::{Deserialize, Serialize};

use crate::error::{CasaError, Result};
use crate::iforest::{ForestParams, IsolationForest};
use crate::image::Image;
use crate::style::StyleEmbedding;

#[derive(Debug, Clone, PartialEq)]
pub struct OutlierItem {
    pub sample_id: u64,
    pub image: Image,
    pub embedding: StyleEmbedding,
    /// Controller steps spent in the outlier memory.
    pub age: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierParams {
    /// Discovery is attempted only once this many items are held.
    pub discovery_size: usize,
    /// Neighbourhood radius in embedding space.
    pub distance_threshold: f64,
    pub max_age: u64,
    pub min_group: usize,
}

/// A dense group removed from the outlier memory together with its forest.
#[derive(Debug, Clone)]
pub struct Discovery {
    pub members: Vec<OutlierItem>,
    pub forest: IsolationForest,
}

#[derive(Debug, Clone)]
pub struct OutlierMemory {
    items: Vec<OutlierItem>,
    params: OutlierParams,
}

impl OutlierMemory {
    pub fn new(params: OutlierParams) -> Result<Self> {
        if params.min_group < 2 {
            return Err(CasaError::Config("min_group must be >= 2".into()));
        }
        if !(params.distance_threshold > 0.0) {
            return Err(CasaError::Config(format!(
                "distance threshold t must be positive, got {}",
                params.distance_threshold
            )));
        }
        Ok(Self {
            items: Vec::new(),
            params,
        })
    }

    pub fn params(&self) -> &OutlierParams {
        &self.params
    }

    pub fn items(&self) -> &[OutlierItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn add(&mut self, sample_id: u64, image: Image, embedding: StyleEmbedding) {
        self.items.push(OutlierItem {
            sample_id,
            image,
            embedding,
            age: 0,
        });
    }

    /// Ages every item by one step and removes those older than `max_age`,
    /// keeping survivors in their original order.
    pub fn tick_and_evict(&mut self) -> Vec<OutlierItem> {
        let max_age = self.params.max_age;
        let mut evicted = Vec::new();
        let mut kept = Vec::with_capacity(self.items.len());
        for mut it in self.items.drain(..) {
            it.age = it.age.saturating_add(1);
            if it.age > max_age {
                evicted.push(it);
            } else {
                kept.push(it);
            }
        }
        self.items = kept;
        evicted
    }

    /// Seed index and its neighbour indices (distance below `t`), choosing the
    /// item with the most neighbours; lowest index wins ties.
    pub fn densest_group(&self) -> Option<Vec<usize>> {
        let n = self.items.len();
        if n == 0 {
            return None;
        }
        let t = self.params.distance_threshold;
        let mut neighbours: Vec<Vec<usize>> = vec![Vec::new(); n];
        for i in 0..n {
            for j in (i + 1)..n {
                if self.items[i].embedding.distance(&self.items[j].embedding) < t {
                    neighbours[i].push(j);
                    neighbours[j].push(i);
                }
            }
        }
        let seed = (0..n).max_by(|&a, &b| neighbours[a].len().cmp(&neighbours[b].len()).then(b.cmp(&a)))?;
        let mut group = neighbours[seed].clone();
        group.push(seed);
        group.sort_unstable();
        Some(group)
    }

    /// Looks for a dense region once `discovery_size` items are held. On
    /// success the group leaves the memory and a forest fitted on its
    /// embeddings is returned alongside it.
    pub fn try_discover(&mut self, forest: ForestParams, seed: u64) -> Result<Option<Discovery>> {
        if self.items.len() < self.params.discovery_size {
            return Ok(None);
        }
        let Some(group) = self.densest_group() else {
            return Ok(None);
        };
        if group.len() < self.params.min_group {
            return Ok(None);
        }
        let points: Vec<&[f64]> = group.iter().map(|&i| self.items[i].embedding.values()).collect();
        let fitted = match IsolationForest::fit(&points, forest, seed) {
            Ok(f) => f,
            Err(CasaError::DegenerateFit(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        let mut members = Vec::with_capacity(group.len());
        let mut kept = Vec::with_capacity(self.items.len() - group.len());
        let mut g = group.iter().peekable();
        for (i, it) in self.items.drain(..).enumerate() {
            if g.peek() == Some(&&i) {
                g.next();
                members.push(it);
            } else {
                kept.push(it);
            }
        }
        self.items = kept;
        Ok(Some(Discovery {
            members,
            forest: fitted,
        }))
    }
}
