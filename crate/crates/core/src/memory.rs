//! Rehearsal memories.
//!
//! [`TrainingMemory`] is the quota-balanced store used by CASA: every
//! pseudo-domain may hold at most `floor(M / D)` unflagged items, surplus items
//! are flagged when a new pseudo-domain appears, and an insertion into a full
//! domain replaces the same-domain item closest in style space.
//! [`FifoMemory`] is the single-domain first-in-first-out store of the naive
//! active-learning baseline.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CasaError, Result};
use crate::image::Image;
use crate::style::StyleEmbedding;

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryItem {
    /// Stream or dataset identifier of the sample the item came from.
    pub sample_id: u64,
    pub image: Image,
    pub label: f64,
    pub domain: usize,
    pub embedding: StyleEmbedding,
    pub flagged: bool,
}

/// Labelled candidate for insertion.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelledItem {
    pub sample_id: u64,
    pub image: Image,
    pub label: f64,
    pub embedding: StyleEmbedding,
}

impl LabelledItem {
    fn into_memory(self, domain: usize) -> MemoryItem {
        MemoryItem {
            sample_id: self.sample_id,
            image: self.image,
            label: self.label,
            domain,
            embedding: self.embedding,
            flagged: false,
        }
    }
}

/// Where an inserted item ended up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InsertOutcome {
    Appended { slot: usize },
    ReplacedFlagged { slot: usize, victim: u64, victim_domain: usize },
    ReplacedNearest { slot: usize, victim: u64 },
    Evicted { victim: u64 },
}

impl InsertOutcome {
    /// Sample id that left memory, if any.
    pub fn removed(&self) -> Option<u64> {
        match *self {
            InsertOutcome::Appended { .. } => None,
            InsertOutcome::ReplacedFlagged { victim, .. }
            | InsertOutcome::ReplacedNearest { victim, .. }
            | InsertOutcome::Evicted { victim } => Some(victim),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainCount {
    pub unflagged: usize,
    pub flagged: usize,
}

impl DomainCount {
    pub fn total(&self) -> usize {
        self.unflagged + self.flagged
    }
}

/// One record of a memory snapshot export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryRecord {
    pub sample_id: u64,
    pub image_digest: String,
    pub label: f64,
    pub domain: usize,
    pub flagged: bool,
    pub embedding: Vec<f64>,
}

impl From<&MemoryItem> for MemoryRecord {
    fn from(item: &MemoryItem) -> Self {
        Self {
            sample_id: item.sample_id,
            image_digest: item.image.digest(),
            label: item.label,
            domain: item.domain,
            flagged: item.flagged,
            embedding: item.embedding.0.clone(),
        }
    }
}

fn sample_with_replacement<'a, R: Rng + ?Sized>(
    items: &'a [MemoryItem],
    size: usize,
    rng: &mut R,
) -> Result<Vec<&'a MemoryItem>> {
    if items.is_empty() {
        return Err(CasaError::Empty("cannot sample a batch from an empty memory"));
    }
    Ok((0..size)
        .map(|_| &items[rng.random_range(0..items.len())])
        .collect())
}

fn choose_subset<R: Rng + ?Sized>(pool: Vec<LabelledItem>, capacity: usize, rng: &mut R) -> Vec<LabelledItem> {
    if pool.len() <= capacity {
        return pool;
    }
    let mut keep = index::sample(rng, pool.len(), capacity).into_vec();
    keep.sort_unstable();
    let mut slots: Vec<Option<LabelledItem>> = pool.into_iter().map(Some).collect();
    keep.into_iter().filter_map(|i| slots[i].take()).collect()
}

#[derive(Debug, Clone)]
pub struct TrainingMemory {
    items: Vec<MemoryItem>,
    capacity: usize,
    n_domains: usize,
}

impl TrainingMemory {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(CasaError::Config("memory capacity M must be >= 1".into()));
        }
        Ok(Self {
            items: Vec::with_capacity(capacity),
            capacity,
            n_domains: 1,
        })
    }

    /// Fills the memory with a uniform random subset of the pretraining set,
    /// every item assigned to pseudo-domain 0. Smaller pools are taken whole.
    pub fn init_from_pretrain<R: Rng + ?Sized>(
        pool: Vec<LabelledItem>,
        capacity: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut mem = Self::new(capacity)?;
        mem.items = choose_subset(pool, capacity, rng)
            .into_iter()
            .map(|it| it.into_memory(0))
            .collect();
        Ok(mem)
    }

    pub fn items(&self) -> &[MemoryItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn n_domains(&self) -> usize {
        self.n_domains
    }

    /// Protected slots per pseudo-domain, `floor(M / D)`.
    pub fn quota(&self) -> usize {
        self.capacity / self.n_domains.max(1)
    }

    fn unflagged_count(&self, domain: usize) -> usize {
        self.items
            .iter()
            .filter(|it| it.domain == domain && !it.flagged)
            .count()
    }

    /// Registers a new pseudo-domain count and flags random surplus items of
    /// every earlier domain so that each keeps at most `floor(M / D)` protected.
    pub fn requota<R: Rng + ?Sized>(&mut self, n_domains: usize, rng: &mut R) -> Result<()> {
        if n_domains == 0 {
            return Err(CasaError::Config("pseudo-domain count must be >= 1".into()));
        }
        self.n_domains = n_domains;
        let quota = self.quota();
        let mut domains: Vec<usize> = self.items.iter().map(|it| it.domain).collect();
        domains.sort_unstable();
        domains.dedup();
        for d in domains {
            let slots: Vec<usize> = (0..self.items.len())
                .filter(|&i| self.items[i].domain == d && !self.items[i].flagged)
                .collect();
            if slots.len() <= quota {
                continue;
            }
            let surplus = slots.len() - quota;
            let mut picks = index::sample(rng, slots.len(), surplus).into_vec();
            picks.sort_unstable();
            for p in picks {
                self.items[slots[p]].flagged = true;
            }
        }
        Ok(())
    }

    /// Slot of a flagged item to overwrite: taken from the domain currently
    /// holding the most items, lowest slot first.
    fn flagged_victim(&self) -> Option<usize> {
        let comp = self.composition();
        self.items
            .iter()
            .enumerate()
            .filter(|(_, it)| it.flagged)
            .max_by(|(ia, a), (ib, b)| {
                let ca = comp[&a.domain].total();
                let cb = comp[&b.domain].total();
                ca.cmp(&cb).then(ib.cmp(ia))
            })
            .map(|(i, _)| i)
    }

    /// Unflagged same-domain item with the smallest squared embedding
    /// distance to `e`; lowest slot wins ties.
    pub fn nearest_same_domain(&self, domain: usize, e: &StyleEmbedding) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, it) in self.items.iter().enumerate() {
            if it.domain != domain || it.flagged {
                continue;
            }
            let d = it.embedding.sq_distance(e);
            if best.is_none_or(|(_, b)| d < b) {
                best = Some((i, d));
            }
        }
        best.map(|(i, _)| i)
    }

    pub fn insert(&mut self, item: LabelledItem, domain: usize) -> Result<InsertOutcome> {
        let outcome = if self.unflagged_count(domain) < self.quota() {
            if self.items.len() < self.capacity {
                self.items.push(item.into_memory(domain));
                InsertOutcome::Appended {
                    slot: self.items.len() - 1,
                }
            } else if let Some(slot) = self.flagged_victim() {
                let old = std::mem::replace(&mut self.items[slot], item.into_memory(domain));
                InsertOutcome::ReplacedFlagged {
                    slot,
                    victim: old.sample_id,
                    victim_domain: old.domain,
                }
            } else {
                self.replace_nearest(item, domain)?
            }
        } else {
            self.replace_nearest(item, domain)?
        };
        debug_assert!(self.items.len() <= self.capacity);
        Ok(outcome)
    }

    fn replace_nearest(&mut self, item: LabelledItem, domain: usize) -> Result<InsertOutcome> {
        let slot = self.nearest_same_domain(domain, &item.embedding).ok_or_else(|| {
            CasaError::Invariant(format!(
                "pseudo-domain {domain} at quota {} with no replaceable item",
                self.quota()
            ))
        })?;
        let old = std::mem::replace(&mut self.items[slot], item.into_memory(domain));
        Ok(InsertOutcome::ReplacedNearest {
            slot,
            victim: old.sample_id,
        })
    }

    pub fn sample_batch<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Result<Vec<&MemoryItem>> {
        sample_with_replacement(&self.items, size, rng)
    }

    pub fn composition(&self) -> BTreeMap<usize, DomainCount> {
        let mut out: BTreeMap<usize, DomainCount> = BTreeMap::new();
        for it in &self.items {
            let c = out.entry(it.domain).or_default();
            if it.flagged {
                c.flagged += 1;
            } else {
                c.unflagged += 1;
            }
        }
        out
    }

    /// True when no pseudo-domain holds more than `floor(M / D)` unflagged items.
    pub fn quota_respected(&self) -> bool {
        let q = self.quota();
        self.composition().values().all(|c| c.unflagged <= q)
    }

    pub fn records(&self) -> Vec<MemoryRecord> {
        self.items.iter().map(MemoryRecord::from).collect()
    }
}

/// Fixed-capacity first-in-first-out memory with a single implicit domain.
#[derive(Debug, Clone)]
pub struct FifoMemory {
    items: Vec<MemoryItem>,
    capacity: usize,
    /// Slot holding the oldest item once the memory is full.
    head: usize,
}

impl FifoMemory {
    pub fn init_from_pretrain<R: Rng + ?Sized>(
        pool: Vec<LabelledItem>,
        capacity: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if capacity == 0 {
            return Err(CasaError::Config("memory capacity M must be >= 1".into()));
        }
        let items = choose_subset(pool, capacity, rng)
            .into_iter()
            .map(|it| it.into_memory(0))
            .collect();
        Ok(Self {
            items,
            capacity,
            head: 0,
        })
    }

    pub fn items(&self) -> &[MemoryItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn insert(&mut self, item: LabelledItem) -> InsertOutcome {
        if self.items.len() < self.capacity {
            self.items.push(item.into_memory(0));
            return InsertOutcome::Appended {
                slot: self.items.len() - 1,
            };
        }
        let slot = self.head;
        let old = std::mem::replace(&mut self.items[slot], item.into_memory(0));
        self.head = (self.head + 1) % self.capacity;
        InsertOutcome::Evicted {
            victim: old.sample_id,
        }
    }

    pub fn sample_batch<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Result<Vec<&MemoryItem>> {
        sample_with_replacement(&self.items, size, rng)
    }

    pub fn records(&self) -> Vec<MemoryRecord> {
        self.items.iter().map(MemoryRecord::from).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn item(id: u64, e: Vec<f64>) -> LabelledItem {
        LabelledItem {
            sample_id: id,
            image: Image::zeros(2, 2),
            label: id as f64,
            embedding: StyleEmbedding(e),
        }
    }

    fn pool(n: u64) -> Vec<LabelledItem> {
        (0..n).map(|i| item(i, vec![i as f64, 0.0])).collect()
    }

    #[test]
    fn init_samples_subset_into_domain_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mem = TrainingMemory::init_from_pretrain(pool(201), 128, &mut rng).unwrap();
        assert_eq!(mem.len(), 128);
        assert!(mem.items().iter().all(|it| it.domain == 0 && !it.flagged));
        assert_eq!(mem.composition()[&0], DomainCount { unflagged: 128, flagged: 0 });

        let small = TrainingMemory::init_from_pretrain(pool(50), 64, &mut rng).unwrap();
        assert_eq!(small.len(), 50);

        let ids = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            TrainingMemory::init_from_pretrain(pool(201), 128, &mut r)
                .unwrap()
                .items()
                .iter()
                .map(|it| it.sample_id)
                .collect::<Vec<_>>()
        };
        assert_eq!(ids(7), ids(7));
    }

    #[test]
    fn requota_flags_surplus() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut mem = TrainingMemory::init_from_pretrain(pool(128), 128, &mut rng).unwrap();
        mem.requota(2, &mut rng).unwrap();
        assert_eq!(mem.composition()[&0], DomainCount { unflagged: 64, flagged: 64 });
        assert_eq!(mem.len(), 128);
    }

    #[test]
    fn requota_two_to_three() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut mem = TrainingMemory::init_from_pretrain(pool(128), 128, &mut rng).unwrap();
        mem.requota(2, &mut rng).unwrap();
        for i in 0..64 {
            mem.insert(item(1000 + i, vec![100.0 + i as f64, 1.0]), 1).unwrap();
        }
        let comp = mem.composition();
        assert_eq!(comp[&0].total(), 64);
        assert_eq!(comp[&1].unflagged, 64);
        mem.requota(3, &mut rng).unwrap();
        assert_eq!(mem.quota(), 42);
        for c in mem.composition().values() {
            assert!(c.unflagged <= 42);
        }
    }

    #[test]
    fn requota_leaves_small_domains_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut mem = TrainingMemory::init_from_pretrain(pool(10), 128, &mut rng).unwrap();
        mem.requota(2, &mut rng).unwrap();
        assert_eq!(mem.composition()[&0].flagged, 0);
    }

    #[test]
    fn insert_replaces_flagged_when_under_quota() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut mem = TrainingMemory::init_from_pretrain(pool(4), 4, &mut rng).unwrap();
        mem.requota(2, &mut rng).unwrap();
        let flagged_before: Vec<u64> = mem.items().iter().filter(|i| i.flagged).map(|i| i.sample_id).collect();
        assert_eq!(flagged_before.len(), 2);
        let out = mem.insert(item(99, vec![9.0, 9.0]), 1).unwrap();
        match out {
            InsertOutcome::ReplacedFlagged { victim, victim_domain, .. } => {
                assert!(flagged_before.contains(&victim));
                assert_eq!(victim_domain, 0);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(mem.len(), 4);
    }

    #[test]
    fn insert_appends_into_free_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut mem = TrainingMemory::init_from_pretrain(pool(3), 8, &mut rng).unwrap();
        let out = mem.insert(item(50, vec![0.5, 0.5]), 0).unwrap();
        assert_eq!(out, InsertOutcome::Appended { slot: 3 });
        assert_eq!(mem.len(), 4);
    }

    #[test]
    fn insert_at_quota_replaces_nearest_same_domain() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut mem = TrainingMemory::init_from_pretrain(pool(6), 6, &mut rng).unwrap();
        mem.requota(2, &mut rng).unwrap();
        for (i, x) in [10.0, 20.0, 30.0].into_iter().enumerate() {
            mem.insert(item(100 + i as u64, vec![x, 0.0]), 1).unwrap();
        }
        // domain 1 is at quota 3; nearest to 21 is the item at 20
        let out = mem.insert(item(200, vec![21.0, 0.0]), 1).unwrap();
        assert!(matches!(out, InsertOutcome::ReplacedNearest { victim: 101, .. }));
        assert!(mem.quota_respected());
    }

    #[test]
    fn insert_without_candidates_is_invariant_violation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut mem = TrainingMemory::init_from_pretrain(pool(2), 2, &mut rng).unwrap();
        mem.requota(3, &mut rng).unwrap();
        // quota 0 for a fresh domain and nothing to replace
        assert!(matches!(mem.insert(item(9, vec![0.0, 0.0]), 2), Err(CasaError::Invariant(_))));
    }

    #[test]
    fn sample_batch_with_replacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mem = TrainingMemory::init_from_pretrain(pool(128), 128, &mut rng).unwrap();
        assert_eq!(mem.sample_batch(8, &mut rng).unwrap().len(), 8);

        let one = TrainingMemory::init_from_pretrain(pool(1), 4, &mut rng).unwrap();
        let b = one.sample_batch(4, &mut rng).unwrap();
        assert!(b.iter().all(|it| it.sample_id == 0));
        assert_eq!(b.len(), 4);

        let draw = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            mem.sample_batch(8, &mut r).unwrap().iter().map(|i| i.sample_id).collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));

        let empty = TrainingMemory::new(4).unwrap();
        assert!(empty.sample_batch(2, &mut rng).is_err());
        assert!(empty.composition().is_empty());
    }

    #[test]
    fn fifo_evicts_oldest() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut mem = FifoMemory::init_from_pretrain(pool(3), 3, &mut rng).unwrap();
        let first = mem.items()[0].sample_id;
        let out = mem.insert(item(10, vec![0.0, 0.0]));
        assert_eq!(out, InsertOutcome::Evicted { victim: first });
        let second = mem.items()[1].sample_id;
        assert_eq!(mem.insert(item(11, vec![0.0, 0.0])).removed(), Some(second));
        assert_eq!(mem.len(), 3);
    }
}
