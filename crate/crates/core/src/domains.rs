//! Pseudo-domain bookkeeping: membership assignment, running task performance
//! and completion state.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{CasaError, Result};
use crate::iforest::IsolationForest;
use crate::style::StyleEmbedding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Lower metric is better; complete when the running mean drops below `k`.
    Regression,
    /// Higher metric is better; complete when the running mean exceeds `k`.
    Classification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoDomain {
    pub id: usize,
    pub forest: IsolationForest,
    window: VecDeque<f64>,
    mean: f64,
    completed: bool,
}

impl PseudoDomain {
    pub fn window(&self) -> impl Iterator<Item = f64> + '_ {
        self.window.iter().copied()
    }

    /// Running mean of the window; 0 when the window is empty.
    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn completed(&self) -> bool {
        self.completed
    }

    pub fn snapshot(&self) -> DomainSnapshot {
        DomainSnapshot {
            id: self.id,
            mean: self.mean,
            completed: self.completed,
            window: self.window.iter().copied().collect(),
        }
    }
}

/// Logged view of a pseudo-domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSnapshot {
    pub id: usize,
    pub mean: f64,
    pub completed: bool,
    pub window: Vec<f64>,
}

/// Index of the largest decision value if it is positive; lowest index wins ties.
pub fn select_domain(decisions: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (id, &v) in decisions.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((id, v));
        }
    }
    best.filter(|&(_, v)| v > 0.0).map(|(id, _)| id)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSet {
    domains: Vec<PseudoDomain>,
    task_kind: TaskKind,
    window_len: usize,
    threshold: f64,
}

impl DomainSet {
    pub fn new(task_kind: TaskKind, window_len: usize, threshold: f64) -> Result<Self> {
        if window_len == 0 {
            return Err(CasaError::Config("performance window P must be >= 1".into()));
        }
        Ok(Self {
            domains: Vec::new(),
            task_kind,
            window_len,
            threshold,
        })
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn domains(&self) -> &[PseudoDomain] {
        &self.domains
    }

    pub fn get(&self, id: usize) -> Result<&PseudoDomain> {
        self.domains.get(id).ok_or(CasaError::UnknownDomain(id))
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Decision value of every pseudo-domain's forest, indexed by id.
    pub fn decisions(&self, e: &StyleEmbedding) -> Vec<f64> {
        self.domains
            .iter()
            .map(|d| d.forest.decision_function(e.values()))
            .collect()
    }

    /// Highest-scoring forest if its decision value is positive.
    pub fn assign(&self, e: &StyleEmbedding) -> Option<usize> {
        select_domain(&self.decisions(e))
    }

    /// Appends a new pseudo-domain with an empty window; returns its id.
    pub fn add_domain(&mut self, forest: IsolationForest) -> usize {
        let id = self.domains.len();
        self.domains.push(PseudoDomain {
            id,
            forest,
            window: VecDeque::with_capacity(self.window_len),
            mean: 0.0,
            completed: false,
        });
        id
    }

    /// Marks a domain completed without a full window. Used for the initial
    /// domain when the pretrained model already meets the threshold.
    pub fn mark_completed(&mut self, id: usize) -> Result<()> {
        let d = self.domains.get_mut(id).ok_or(CasaError::UnknownDomain(id))?;
        d.completed = true;
        Ok(())
    }

    fn passes(&self, mean: f64) -> bool {
        match self.task_kind {
            TaskKind::Regression => mean < self.threshold,
            TaskKind::Classification => mean > self.threshold,
        }
    }

    /// Pushes a metric value measured before training on the sample. Returns
    /// the updated running mean and completion flag.
    pub fn record_performance(&mut self, id: usize, metric: f64) -> Result<(f64, bool)> {
        if !metric.is_finite() {
            return Err(CasaError::Domain(format!("non-finite metric {metric}")));
        }
        let window_len = self.window_len;
        let d = self.domains.get(id).ok_or(CasaError::UnknownDomain(id))?;
        let mut window = d.window.clone();
        if window.len() == window_len {
            window.pop_front();
        }
        window.push_back(metric);
        let mean = window.iter().sum::<f64>() / window.len() as f64;
        let full = window.len() == window_len;
        let passes = self.passes(mean);

        let d = &mut self.domains[id];
        d.window = window;
        d.mean = mean;
        // completion is monotone
        d.completed = d.completed || (full && passes);
        Ok((d.mean, d.completed))
    }

    pub fn training_needed(&self) -> bool {
        self.domains.iter().any(|d| !d.completed)
    }

    pub fn snapshots(&self) -> Vec<DomainSnapshot> {
        self.domains.iter().map(PseudoDomain::snapshot).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::iforest::ForestParams;

    fn forest_around(center: f64, seed: u64) -> IsolationForest {
        let pts: Vec<Vec<f64>> = (0..32)
            .map(|i| vec![center + 0.01 * (i as f64 - 16.0), center - 0.01 * ((i * 7 % 32) as f64 - 16.0)])
            .collect();
        let refs: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
        IsolationForest::fit(&refs, ForestParams::default(), seed).unwrap()
    }

    #[test]
    fn empty_set_assigns_none_and_needs_no_training() {
        let ds = DomainSet::new(TaskKind::Regression, 3, 5.0).unwrap();
        assert_eq!(ds.assign(&StyleEmbedding(vec![0.0, 0.0])), None);
        assert!(!ds.training_needed());
    }

    #[test]
    fn select_domain_examples() {
        assert_eq!(select_domain(&[0.1, -0.2]), Some(0));
        assert_eq!(select_domain(&[-0.05, -0.3]), None);
        assert_eq!(select_domain(&[]), None);
        assert_eq!(select_domain(&[0.0]), None);
        assert_eq!(select_domain(&[0.2, 0.3, 0.3]), Some(1));
    }

    #[test]
    fn add_domain_ids_are_dense() {
        let mut ds = DomainSet::new(TaskKind::Regression, 3, 5.0).unwrap();
        assert_eq!(ds.add_domain(forest_around(0.0, 1)), 0);
        assert_eq!(ds.add_domain(forest_around(5.0, 2)), 1);
        assert_eq!(ds.add_domain(forest_around(9.0, 3)), 2);
        assert_eq!(ds.len(), 3);
        assert!(ds.domains().iter().all(|d| !d.completed() && d.window().count() == 0));
    }

    #[test]
    fn assign_picks_owning_forest_or_none() {
        let mut ds = DomainSet::new(TaskKind::Regression, 3, 5.0).unwrap();
        ds.add_domain(forest_around(0.0, 1));
        ds.add_domain(forest_around(5.0, 2));
        assert_eq!(ds.assign(&StyleEmbedding(vec![5.0, 5.0])), Some(1));
        assert_eq!(ds.assign(&StyleEmbedding(vec![0.0, 0.0])), Some(0));
        assert_eq!(ds.assign(&StyleEmbedding(vec![100.0, -100.0])), None);
    }

    #[test]
    fn regression_completion() {
        let mut ds = DomainSet::new(TaskKind::Regression, 3, 5.0).unwrap();
        ds.add_domain(forest_around(0.0, 1));
        ds.record_performance(0, 4.0).unwrap();
        ds.record_performance(0, 4.0).unwrap();
        assert_eq!(ds.record_performance(0, 4.0).unwrap(), (4.0, true));

        ds.add_domain(forest_around(1.0, 2));
        ds.record_performance(1, 4.0).unwrap();
        let (mean, done) = ds.record_performance(1, 9.0).unwrap();
        assert_eq!(mean, 6.5);
        assert!(!done, "window not full");
        // window [4, 9, 1] -> mean 4.67, full
        assert!(ds.record_performance(1, 1.0).unwrap().1);
    }

    #[test]
    fn partial_window_never_completes() {
        let mut ds = DomainSet::new(TaskKind::Regression, 3, 5.0).unwrap();
        ds.add_domain(forest_around(0.0, 1));
        let (_, done) = ds.record_performance(0, 0.1).unwrap();
        assert!(!done);
        let (_, done) = ds.record_performance(0, 0.1).unwrap();
        assert!(!done);
    }

    #[test]
    fn classification_completion() {
        let mut ds = DomainSet::new(TaskKind::Classification, 3, 0.8).unwrap();
        ds.add_domain(forest_around(0.0, 1));
        for _ in 0..2 {
            assert!(!ds.record_performance(0, 0.9).unwrap().1);
        }
        let (mean, done) = ds.record_performance(0, 0.9).unwrap();
        assert!((mean - 0.9).abs() < 1e-12);
        assert!(done);
    }

    #[test]
    fn completion_is_monotone_and_window_evicts_oldest() {
        let mut ds = DomainSet::new(TaskKind::Regression, 2, 5.0).unwrap();
        ds.add_domain(forest_around(0.0, 1));
        ds.record_performance(0, 1.0).unwrap();
        assert!(ds.record_performance(0, 1.0).unwrap().1);
        let (mean, done) = ds.record_performance(0, 50.0).unwrap();
        assert_eq!(mean, 25.5);
        assert!(done);
        assert_eq!(ds.get(0).unwrap().window().collect::<Vec<_>>(), vec![1.0, 50.0]);
        assert!(!ds.training_needed());
    }

    #[test]
    fn training_needed_tracks_incomplete_domains() {
        let mut ds = DomainSet::new(TaskKind::Regression, 1, 5.0).unwrap();
        ds.add_domain(forest_around(0.0, 1));
        ds.add_domain(forest_around(3.0, 1));
        assert!(ds.training_needed());
        ds.record_performance(0, 1.0).unwrap();
        assert!(ds.training_needed());
        ds.mark_completed(1).unwrap();
        assert!(!ds.training_needed());
    }

    #[test]
    fn errors() {
        let mut ds = DomainSet::new(TaskKind::Regression, 3, 5.0).unwrap();
        assert!(matches!(ds.record_performance(0, 1.0), Err(CasaError::UnknownDomain(0))));
        ds.add_domain(forest_around(0.0, 1));
        assert!(ds.record_performance(0, f64::NAN).is_err());
        assert!(DomainSet::new(TaskKind::Regression, 0, 5.0).is_err());
    }
}
