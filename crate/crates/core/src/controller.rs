//! Stream orchestration: the CASA loop and the three comparison baselines.
//!
//! Every run starts from the same [`Setup`]: a generated experiment, the
//! style encoder and a learner pretrained on the first domain. Runs are
//! sequential over input batches and fully determined by the run seed.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DistanceThreshold, ExperimentConfig, StyleConfig};
use crate::domains::{DomainSet, DomainSnapshot, TaskKind};
use crate::error::{CasaError, Result};
use crate::eval::{entropy, evaluate_checkpoint, purity_report, Checkpoint, PurityReport, RMatrix};
use crate::iforest::{ForestParams, IsolationForest};
use crate::image::Image;
use crate::learner::{metric, TaskLearner};
use crate::memory::{DomainCount, FifoMemory, LabelledItem, MemoryItem, MemoryRecord, TrainingMemory};
use crate::outliers::{OutlierMemory, OutlierParams};
use crate::stream::{generate_experiment, Experiment, Oracle, Stream, StreamSample, Truth};
use crate::style::{FeatureBank, SparseProjection, StyleEmbedding, StyleEncoder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Casa,
    Naive,
    Joint,
    PerDomain,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Casa, Mode::Naive, Mode::Joint, Mode::PerDomain];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Casa => "casa",
            Mode::Naive => "naive",
            Mode::Joint => "joint",
            Mode::PerDomain => "per-domain",
        }
    }

    /// Whether the mode learns from the stream through the oracle.
    pub fn is_streaming(self) -> bool {
        matches!(self, Mode::Casa | Mode::Naive)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = CasaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "casa" => Ok(Mode::Casa),
            "naive" | "naive-al" => Ok(Mode::Naive),
            "joint" => Ok(Mode::Joint),
            "per-domain" => Ok(Mode::PerDomain),
            other => Err(CasaError::Config(format!(
                "unknown mode {other:?}; expected casa, naive, joint or per-domain"
            ))),
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent sub-seed for one consumer of randomness within a run.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    splitmix64(seed ^ splitmix64(salt))
}

const SALT_LEARNER_INIT: u64 = 1;
const SALT_PRETRAIN: u64 = 2;
const SALT_MEMORY: u64 = 3;
const SALT_FIRST_FOREST: u64 = 4;
const SALT_DISCOVERY: u64 = 5;
const SALT_OFFLINE: u64 = 6;

pub fn build_encoder(style: &StyleConfig, height: usize, width: usize) -> Result<StyleEncoder> {
    let bank = FeatureBank::seeded(height, width, &style.layers, style.bank_seed)?;
    let proj = SparseProjection::new(bank.raw_dim(), style.embedding_dim, style.sparsity, style.projection_seed)?;
    StyleEncoder::new(bank, proj)
}

fn pairs(samples: &[StreamSample]) -> Vec<(&Image, f64)> {
    samples.iter().map(|s| (&s.image, s.truth().label)).collect()
}

/// Untrained learner with inputs centred and labels scaled to the
/// pretraining distribution.
fn fresh_learner(cfg: &ExperimentConfig, exp: &Experiment) -> Result<TaskLearner> {
    let h = cfg.stream.height;
    let w = cfg.stream.width;
    let mut learner = TaskLearner::new(h * w, &cfg.learner.spec(), derive_seed(exp.seed, SALT_LEARNER_INIT))?;
    let labels: Vec<f64> = exp.pretrain.iter().map(|s| s.truth().label).collect();
    let n = labels.len() as f64;
    let mean = labels.iter().sum::<f64>() / n;
    let sd = (labels.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n).sqrt();
    learner.set_label_scaling(mean, if sd > 0.0 { sd } else { 1.0 })?;
    let mut pixel_mean = vec![0.0; h * w];
    for s in &exp.pretrain {
        for (m, p) in pixel_mean.iter_mut().zip(s.image.pixels()) {
            *m += p / n;
        }
    }
    learner.set_input_centering(pixel_mean)?;
    Ok(learner)
}

/// Shared starting point of every mode for one seed.
#[derive(Debug, Clone)]
pub struct Setup {
    pub config: ExperimentConfig,
    pub experiment: Experiment,
    pub encoder: StyleEncoder,
    pub pretrained: TaskLearner,
    /// Validation error of the pretrained learner on the first domain.
    pub pretrain_val_mae: f64,
    /// Test error per true domain of the pretrained learner.
    pub baseline: Vec<f64>,
    truth: HashMap<u64, Truth>,
}

impl Setup {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let exp = generate_experiment(&cfg.stream, seed)?;
        Self::from_experiment(cfg, exp)
    }

    pub fn from_experiment(cfg: &ExperimentConfig, experiment: Experiment) -> Result<Self> {
        let encoder = build_encoder(&cfg.style, cfg.stream.height, cfg.stream.width)?;
        let mut learner = fresh_learner(cfg, &experiment)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(experiment.seed, SALT_PRETRAIN));
        let val = experiment.validation.first().filter(|v| !v.is_empty()).unwrap_or(&experiment.pretrain);
        let pretrain_val_mae = learner.pretrain(
            &pairs(&experiment.pretrain),
            &pairs(val),
            cfg.learner.pretrain_epochs,
            cfg.learner.pretrain_batch,
            &mut rng,
        )?;
        let baseline = evaluate_checkpoint(&learner, &experiment.test)?;
        let truth = experiment.all_samples().map(|s| (s.id, s.truth())).collect();
        Ok(Self {
            config: cfg.clone(),
            experiment,
            encoder,
            pretrained: learner,
            pretrain_val_mae,
            baseline,
            truth,
        })
    }

    pub fn seed(&self) -> u64 {
        self.experiment.seed
    }

    /// Evaluation-only lookup of a sample's true label and domain.
    pub fn truth_of(&self, id: u64) -> Option<Truth> {
        self.truth.get(&id).copied()
    }

    /// Schedule segment in which each true domain first appears in the
    /// continual stream; `None` if some domain never does.
    pub fn intro_segments(&self) -> Option<Vec<usize>> {
        let segs = &self.config.stream.segments;
        (0..self.experiment.n_domains())
            .map(|d| segs.iter().position(|s| s[d] > 0))
            .collect()
    }

    /// `auto_threshold_scale` times the median pairwise embedding distance of
    /// the pretraining images, or the fixed configured value.
    pub fn distance_threshold(&self) -> Result<f64> {
        match self.config.casa.distance_threshold {
            DistanceThreshold::Fixed(t) => Ok(t),
            DistanceThreshold::Auto(_) => {
                let embs = self.embed_all(&self.experiment.pretrain)?;
                let mut d = Vec::with_capacity(embs.len() * embs.len().saturating_sub(1) / 2);
                for i in 0..embs.len() {
                    for j in (i + 1)..embs.len() {
                        d.push(embs[i].distance(&embs[j]));
                    }
                }
                if d.is_empty() {
                    return Err(CasaError::Empty("pretraining pairs for the distance threshold"));
                }
                d.sort_by(f64::total_cmp);
                let n = d.len();
                let median = if n % 2 == 1 { d[n / 2] } else { 0.5 * (d[n / 2 - 1] + d[n / 2]) };
                if !(median > 0.0) {
                    return Err(CasaError::DegenerateFit(
                        "pretraining embeddings are identical; set casa.distance_threshold".into(),
                    ));
                }
                Ok(self.config.casa.auto_threshold_scale * median)
            }
        }
    }

    pub fn embed_all(&self, samples: &[StreamSample]) -> Result<Vec<StyleEmbedding>> {
        let imgs: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
        self.encoder.embed_batch(&imgs)
    }

    fn labelled_pool(&self, embeddings: Vec<StyleEmbedding>) -> Vec<LabelledItem> {
        self.experiment
            .pretrain
            .iter()
            .zip(embeddings)
            .map(|(s, e)| LabelledItem {
                sample_id: s.id,
                image: s.image.clone(),
                label: s.truth().label,
                embedding: e,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteKind {
    /// Labelled by the oracle and inserted into the training memory.
    Labelled,
    /// Assigned to a completed pseudo-domain.
    Discarded,
    /// Assigned to a pseudo-domain that still trains, but the budget is spent.
    OverBudget,
    /// No pseudo-domain claimed the image.
    Outlier,
    /// Not selected by the fixed labelling interval.
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteRecord {
    pub sample: u64,
    pub route: RouteKind,
    pub domain: Option<usize>,
    /// Absolute error of the prediction made before training on the sample.
    pub error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryRecord {
    pub domain: usize,
    pub members: Vec<u64>,
    pub labelled: usize,
}

/// One line of the step log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub processed: usize,
    pub routes: Vec<RouteRecord>,
    pub labels_step: usize,
    pub labels_used: usize,
    pub discoveries: Vec<DiscoveryRecord>,
    pub evicted: Vec<u64>,
    pub train_losses: Vec<f64>,
    pub domains: Vec<DomainSnapshot>,
    pub composition: BTreeMap<usize, DomainCount>,
    pub quota: Option<usize>,
    pub outliers: usize,
    /// Per-domain test error if a checkpoint was taken after this step.
    pub checkpoint: Option<Vec<f64>>,
}

/// Where every continual sample ended up.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fates {
    pub labelled: usize,
    pub discarded: usize,
    pub evicted: usize,
    pub outlier_resident: usize,
}

impl Fates {
    pub fn total(&self) -> usize {
        self.labelled + self.discarded + self.evicted + self.outlier_resident
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CasaParams {
    pub k: f64,
    pub task: TaskKind,
    pub window: usize,
    pub memory_size: usize,
    pub train_batch: usize,
    pub train_steps: usize,
    pub forest: ForestParams,
    pub outlier: OutlierParams,
}

impl CasaParams {
    pub fn from_setup(setup: &Setup) -> Result<Self> {
        let c = &setup.config.casa;
        Ok(Self {
            k: c.k,
            task: c.task,
            window: c.window,
            memory_size: c.memory_size,
            train_batch: c.train_batch,
            train_steps: c.train_steps,
            forest: setup.config.forest,
            outlier: OutlierParams {
                discovery_size: c.discovery_size,
                distance_threshold: setup.distance_threshold()?,
                max_age: c.max_age,
                min_group: c.min_group,
            },
        })
    }
}

/// Mutable state of a CASA run.
#[derive(Debug, Clone)]
pub struct ControllerState {
    pub domains: DomainSet,
    pub memory: TrainingMemory,
    pub outliers: OutlierMemory,
    pub learner: TaskLearner,
    pub oracle: Oracle,
    encoder: StyleEncoder,
    params: CasaParams,
    /// Truth records of outlier-held samples, consulted only by the oracle.
    held: HashMap<u64, Truth>,
    rng: ChaCha8Rng,
    seed: u64,
    step: usize,
    processed: usize,
    fates: Fates,
}

impl ControllerState {
    /// Pseudo-domain 0 from the pretraining embeddings, memory filled from
    /// the pretraining set, domain 0 completed if the pretrained learner
    /// already meets `k` on validation.
    pub fn new(setup: &Setup, params: CasaParams, oracle: Oracle) -> Result<Self> {
        let seed = setup.seed();
        let embs = setup.embed_all(&setup.experiment.pretrain)?;
        let points: Vec<&[f64]> = embs.iter().map(StyleEmbedding::values).collect();
        let forest = IsolationForest::fit(&points, params.forest, derive_seed(seed, SALT_FIRST_FOREST))?;
        let mut domains = DomainSet::new(params.task, params.window, params.k)?;
        let first = domains.add_domain(forest);
        let meets = match params.task {
            TaskKind::Regression => setup.pretrain_val_mae < params.k,
            TaskKind::Classification => setup.pretrain_val_mae > params.k,
        };
        if meets {
            domains.mark_completed(first)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SALT_MEMORY));
        let memory = TrainingMemory::init_from_pretrain(setup.labelled_pool(embs), params.memory_size, &mut rng)?;
        let outliers = OutlierMemory::new(params.outlier.clone())?;
        Ok(Self {
            domains,
            memory,
            outliers,
            learner: setup.pretrained.clone(),
            oracle,
            encoder: setup.encoder.clone(),
            params,
            held: HashMap::new(),
            rng,
            seed,
            step: 0,
            processed: 0,
            fates: Fates::default(),
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn processed(&self) -> usize {
        self.processed
    }

    pub fn fates(&self) -> Fates {
        Fates {
            outlier_resident: self.outliers.len(),
            ..self.fates
        }
    }

    /// Routes one input batch, runs outlier ageing and discovery, then
    /// trains from memory if any pseudo-domain is still incomplete.
    pub fn casa_step(&mut self, batch: &[StreamSample]) -> Result<StepRecord> {
        let imgs: Vec<&Image> = batch.iter().map(|s| &s.image).collect();
        let embs = self.encoder.embed_batch(&imgs)?;
        let used_before = self.oracle.used();

        let mut routes = Vec::with_capacity(batch.len());
        for (s, e) in batch.iter().zip(embs) {
            routes.push(self.route(s, e)?);
        }
        self.processed += batch.len();

        let evicted: Vec<u64> = self.outliers.tick_and_evict().into_iter().map(|o| o.sample_id).collect();
        for id in &evicted {
            self.held.remove(id);
        }
        self.fates.evicted += evicted.len();

        let mut discoveries = Vec::new();
        let disc_seed = derive_seed(self.seed, SALT_DISCOVERY.wrapping_add((self.step as u64) << 8));
        if let Some(found) = self.outliers.try_discover(self.params.forest, disc_seed)? {
            let id = self.domains.add_domain(found.forest);
            self.memory.requota(self.domains.len(), &mut self.rng)?;
            let mut rec = DiscoveryRecord {
                domain: id,
                members: Vec::with_capacity(found.members.len()),
                labelled: 0,
            };
            for m in found.members {
                rec.members.push(m.sample_id);
                let truth = self
                    .held
                    .remove(&m.sample_id)
                    .ok_or_else(|| CasaError::Invariant(format!("outlier {} has no truth record", m.sample_id)))?;
                match self.oracle.label_truth(truth) {
                    Ok(label) => {
                        let item = LabelledItem {
                            sample_id: m.sample_id,
                            image: m.image,
                            label,
                            embedding: m.embedding,
                        };
                        self.memory.insert(item, id)?;
                        self.fates.labelled += 1;
                        rec.labelled += 1;
                    }
                    Err(CasaError::BudgetExhausted { .. }) => self.fates.discarded += 1,
                    Err(e) => return Err(e),
                }
            }
            discoveries.push(rec);
        }

        let mut train_losses = Vec::new();
        if self.domains.training_needed() {
            for _ in 0..self.params.train_steps {
                let loss = train_from(&mut self.learner, self.memory.sample_batch(self.params.train_batch, &mut self.rng)?)?;
                train_losses.push(loss);
            }
        }

        self.step += 1;
        self.check_invariants()?;
        Ok(StepRecord {
            step: self.step,
            processed: self.processed,
            routes,
            labels_step: self.oracle.used() - used_before,
            labels_used: self.oracle.used(),
            discoveries,
            evicted,
            train_losses,
            domains: self.domains.snapshots(),
            composition: self.memory.composition(),
            quota: Some(self.memory.quota()),
            outliers: self.outliers.len(),
            checkpoint: None,
        })
    }

    fn route(&mut self, s: &StreamSample, e: StyleEmbedding) -> Result<RouteRecord> {
        let Some(d) = self.domains.assign(&e) else {
            self.held.insert(s.id, s.truth());
            self.outliers.add(s.id, s.image.clone(), e);
            return Ok(RouteRecord {
                sample: s.id,
                route: RouteKind::Outlier,
                domain: None,
                error: None,
            });
        };
        let record = |route, error| RouteRecord {
            sample: s.id,
            route,
            domain: Some(d),
            error,
        };
        if self.domains.get(d)?.completed() {
            self.fates.discarded += 1;
            return Ok(record(RouteKind::Discarded, None));
        }
        match self.oracle.label(s) {
            Ok(label) => {
                let err = metric(self.learner.predict(&s.image), label);
                self.domains.record_performance(d, err)?;
                let item = LabelledItem {
                    sample_id: s.id,
                    image: s.image.clone(),
                    label,
                    embedding: e,
                };
                self.memory.insert(item, d)?;
                self.fates.labelled += 1;
                Ok(record(RouteKind::Labelled, Some(err)))
            }
            Err(CasaError::BudgetExhausted { .. }) => {
                self.fates.discarded += 1;
                Ok(record(RouteKind::OverBudget, None))
            }
            Err(e) => Err(e),
        }
    }

    fn check_invariants(&self) -> Result<()> {
        if !self.memory.quota_respected() {
            return Err(CasaError::Invariant(format!(
                "unflagged count above quota {} after step {}",
                self.memory.quota(),
                self.step
            )));
        }
        let in_memory: HashSet<u64> = self.memory.items().iter().map(|it| it.sample_id).collect();
        if let Some(o) = self.outliers.items().iter().find(|o| in_memory.contains(&o.sample_id)) {
            return Err(CasaError::Invariant(format!(
                "sample {} is in both the training and outlier memory",
                o.sample_id
            )));
        }
        Ok(())
    }
}

fn train_from(learner: &mut TaskLearner, batch: Vec<&MemoryItem>) -> Result<f64> {
    let pairs: Vec<(&Image, f64)> = batch.iter().map(|it| (&it.image, it.label)).collect();
    let loss = learner.train_step(&pairs)?;
    if !loss.is_finite() {
        return Err(CasaError::Divergence {
            step: learner.steps(),
            loss,
        });
    }
    Ok(loss)
}

/// Takes R rows after the pretrained model, every `every` steps, at the end
/// of every schedule segment and at the end of the stream.
struct Checkpointer<'a> {
    test: &'a [Vec<StreamSample>],
    segment_ends: &'a [usize],
    next_segment: usize,
    every: usize,
    r: RMatrix,
}

impl<'a> Checkpointer<'a> {
    fn new(setup: &'a Setup) -> Result<Self> {
        let mut r = RMatrix::new(setup.baseline.clone());
        r.push(
            Checkpoint {
                step: 0,
                processed: 0,
                segment_end: None,
            },
            setup.baseline.clone(),
        )?;
        Ok(Self {
            test: &setup.experiment.test,
            segment_ends: &setup.experiment.segment_ends,
            next_segment: 0,
            every: setup.config.casa.eval_every,
            r,
        })
    }

    fn after_step(&mut self, step: usize, processed: usize, last: bool, learner: &TaskLearner) -> Result<Option<Vec<f64>>> {
        let mut segment_end = None;
        while self.next_segment < self.segment_ends.len() && processed >= self.segment_ends[self.next_segment] {
            segment_end = Some(self.next_segment);
            self.next_segment += 1;
        }
        if segment_end.is_none() && step % self.every != 0 && !last {
            return Ok(None);
        }
        let row = evaluate_checkpoint(learner, self.test)?;
        self.r.push(
            Checkpoint {
                step,
                processed,
                segment_end,
            },
            row.clone(),
        )?;
        Ok(Some(row))
    }
}

/// Everything a finished run reports.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub mode: Mode,
    pub seed: u64,
    pub domain_names: Vec<String>,
    pub stream_len: usize,
    pub budget: usize,
    pub labels_used: usize,
    pub pretrain_val_mae: f64,
    pub r_matrix: RMatrix,
    pub final_mae: Vec<f64>,
    pub bwt: Option<f64>,
    pub fwt: Option<f64>,
    pub steps: Vec<StepRecord>,
    pub memory: Vec<MemoryRecord>,
    /// True domain of each entry of `memory`.
    pub memory_truth: Vec<usize>,
    pub purity: PurityReport,
    pub domains: Vec<DomainSnapshot>,
    pub forests: Vec<IsolationForest>,
    pub distance_threshold: Option<f64>,
    pub fates: Option<Fates>,
    /// Final learners; one per true domain for the per-domain baseline.
    pub learners: Vec<TaskLearner>,
}

impl RunResult {
    /// Pseudo-domains found during the stream (excluding the initial one).
    pub fn discovered(&self) -> usize {
        self.forests.len().saturating_sub(1)
    }

    /// Memory item counts per true domain.
    pub fn composition_true(&self) -> Vec<usize> {
        let mut c = vec![0; self.domain_names.len()];
        for &d in &self.memory_truth {
            c[d] += 1;
        }
        c
    }

    pub fn memory_entropy(&self) -> f64 {
        entropy(&self.composition_true())
    }

    /// `true` if no logged step shows an unflagged count above its quota.
    pub fn quota_always_respected(&self) -> bool {
        self.steps.iter().all(|s| match s.quota {
            Some(q) => s.composition.values().all(|c| c.unflagged <= q),
            None => true,
        })
    }

    /// Steps that trained while every pseudo-domain was completed.
    pub fn idle_training_steps(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| !s.domains.is_empty() && s.domains.iter().all(|d| d.completed) && !s.train_losses.is_empty())
            .count()
    }
}

fn transfer(setup: &Setup, r: &RMatrix) -> (Option<f64>, Option<f64>) {
    let rows = setup.intro_segments().and_then(|intro| r.boundary_rows(&intro));
    match rows {
        Some(rows) => (
            crate::eval::compute_bwt(&rows).ok(),
            crate::eval::compute_fwt(&rows, &setup.baseline).ok(),
        ),
        None => (None, None),
    }
}

fn memory_truth(setup: &Setup, items: &[MemoryItem]) -> Result<Vec<usize>> {
    items
        .iter()
        .map(|it| {
            setup
                .truth_of(it.sample_id)
                .map(|t| t.domain)
                .ok_or_else(|| CasaError::Invariant(format!("memory item {} has no truth record", it.sample_id)))
        })
        .collect()
}

pub fn run(setup: &Setup, mode: Mode) -> Result<RunResult> {
    match mode {
        Mode::Casa => run_casa(setup),
        Mode::Naive => run_naive_al(setup),
        Mode::Joint => run_joint(setup),
        Mode::PerDomain => run_per_domain(setup),
    }
}

pub fn run_casa(setup: &Setup) -> Result<RunResult> {
    let params = CasaParams::from_setup(setup)?;
    let threshold = params.outlier.distance_threshold;
    let oracle = Oracle::with_fraction(setup.config.casa.beta, setup.experiment.continual.len());
    let mut state = ControllerState::new(setup, params, oracle)?;
    let mut checkpoints = Checkpointer::new(setup)?;
    let mut stream = Stream::new(&setup.experiment.continual);
    let input_batch = setup.config.casa.input_batch;
    let mut steps = Vec::new();
    while stream.remaining() > 0 {
        let batch = stream.next_batch(input_batch)?;
        let mut rec = state.casa_step(batch)?;
        rec.checkpoint = checkpoints.after_step(rec.step, rec.processed, stream.remaining() == 0, &state.learner)?;
        steps.push(rec);
    }

    let fates = state.fates();
    if fates.total() != setup.experiment.continual.len() {
        return Err(CasaError::Invariant(format!(
            "sample conservation: {} accounted for, {} streamed",
            fates.total(),
            setup.experiment.continual.len()
        )));
    }
    if state.oracle.used() > state.oracle.budget_max() {
        return Err(CasaError::Invariant("oracle budget exceeded".into()));
    }

    let items = state.memory.items();
    let truth = memory_truth(setup, items)?;
    let pairs: Vec<(usize, usize)> = items.iter().zip(&truth).map(|(it, &t)| (it.domain, t)).collect();
    let r = checkpoints.r;
    let (bwt, fwt) = transfer(setup, &r);
    Ok(RunResult {
        mode: Mode::Casa,
        seed: setup.seed(),
        domain_names: setup.experiment.domain_names.clone(),
        stream_len: setup.experiment.continual.len(),
        budget: state.oracle.budget_max(),
        labels_used: state.oracle.used(),
        pretrain_val_mae: setup.pretrain_val_mae,
        final_mae: r.final_row().cloned().unwrap_or_default(),
        r_matrix: r,
        bwt,
        fwt,
        steps,
        memory: state.memory.records(),
        purity: purity_report(&pairs, setup.experiment.n_domains()),
        memory_truth: truth,
        domains: state.domains.snapshots(),
        forests: state.domains.domains().iter().map(|d| d.forest.clone()).collect(),
        distance_threshold: Some(threshold),
        fates: Some(fates),
        learners: vec![state.learner],
    })
}

/// Labelling interval of the naive baseline: `round(1 / beta)`, at least 1.
pub fn naive_interval(beta: f64) -> usize {
    ((1.0 / beta).round() as usize).max(1)
}

/// Labels every `round(1/beta)`-th stream sample into a FIFO memory and
/// trains from it after every batch.
pub fn run_naive_al(setup: &Setup) -> Result<RunResult> {
    let cfg = &setup.config.casa;
    let seed = setup.seed();
    let n = naive_interval(cfg.beta);
    let mut oracle = Oracle::with_fraction(cfg.beta, setup.experiment.continual.len());
    let embs = setup.embed_all(&setup.experiment.pretrain)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SALT_MEMORY));
    let mut memory = FifoMemory::init_from_pretrain(setup.labelled_pool(embs), cfg.memory_size, &mut rng)?;
    let mut learner = setup.pretrained.clone();
    let mut checkpoints = Checkpointer::new(setup)?;
    let mut stream = Stream::new(&setup.experiment.continual);
    let mut steps = Vec::new();
    let mut step = 0;
    while stream.remaining() > 0 {
        let start = stream.position();
        let batch = stream.next_batch(cfg.input_batch)?;
        let used_before = oracle.used();
        let mut routes = Vec::with_capacity(batch.len());
        let selected: Vec<bool> = (0..batch.len()).map(|i| (start + i + 1) % n == 0).collect();
        let to_embed: Vec<&Image> = batch.iter().zip(&selected).filter(|(_, &sel)| sel).map(|(s, _)| &s.image).collect();
        let mut embs = setup.encoder.embed_batch(&to_embed)?.into_iter();
        for (s, &sel) in batch.iter().zip(&selected) {
            let route = if !sel {
                RouteKind::Skipped
            } else {
                let e = embs.next().ok_or_else(|| CasaError::Invariant("embedding count".into()))?;
                match oracle.label(s) {
                    Ok(label) => {
                        memory.insert(LabelledItem {
                            sample_id: s.id,
                            image: s.image.clone(),
                            label,
                            embedding: e,
                        });
                        RouteKind::Labelled
                    }
                    Err(CasaError::BudgetExhausted { .. }) => RouteKind::OverBudget,
                    Err(e) => return Err(e),
                }
            };
            routes.push(RouteRecord {
                sample: s.id,
                route,
                domain: None,
                error: None,
            });
        }
        let mut train_losses = Vec::with_capacity(cfg.train_steps);
        for _ in 0..cfg.train_steps {
            train_losses.push(train_from(&mut learner, memory.sample_batch(cfg.train_batch, &mut rng)?)?);
        }
        step += 1;
        let composition = BTreeMap::from([(
            0,
            DomainCount {
                unflagged: memory.len(),
                flagged: 0,
            },
        )]);
        let processed = stream.position();
        let checkpoint = checkpoints.after_step(step, processed, stream.remaining() == 0, &learner)?;
        steps.push(StepRecord {
            step,
            processed,
            routes,
            labels_step: oracle.used() - used_before,
            labels_used: oracle.used(),
            discoveries: Vec::new(),
            evicted: Vec::new(),
            train_losses,
            domains: Vec::new(),
            composition,
            quota: None,
            outliers: 0,
            checkpoint,
        });
    }

    let truth = memory_truth(setup, memory.items())?;
    let pairs: Vec<(usize, usize)> = truth.iter().map(|&t| (0, t)).collect();
    let r = checkpoints.r;
    let (bwt, fwt) = transfer(setup, &r);
    Ok(RunResult {
        mode: Mode::Naive,
        seed,
        domain_names: setup.experiment.domain_names.clone(),
        stream_len: setup.experiment.continual.len(),
        budget: oracle.budget_max(),
        labels_used: oracle.used(),
        pretrain_val_mae: setup.pretrain_val_mae,
        final_mae: r.final_row().cloned().unwrap_or_default(),
        r_matrix: r,
        bwt,
        fwt,
        steps,
        memory: memory.records(),
        purity: purity_report(&pairs, setup.experiment.n_domains()),
        memory_truth: truth,
        domains: Vec::new(),
        forests: Vec::new(),
        distance_threshold: None,
        fates: None,
        learners: vec![learner],
    })
}

/// Epoch-based training of a fresh learner on fully labelled data.
fn offline_learner(setup: &Setup, data: &[(&Image, f64)]) -> Result<TaskLearner> {
    let mut learner = fresh_learner(&setup.config, &setup.experiment)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(setup.seed(), SALT_OFFLINE));
    learner.pretrain(
        data,
        data,
        setup.config.learner.offline_epochs,
        setup.config.learner.pretrain_batch,
        &mut rng,
    )?;
    Ok(learner)
}

fn offline_result(setup: &Setup, mode: Mode, final_row: Vec<f64>, learners: Vec<TaskLearner>) -> Result<RunResult> {
    let mut r = RMatrix::new(setup.baseline.clone());
    r.push(
        Checkpoint {
            step: 0,
            processed: 0,
            segment_end: None,
        },
        setup.baseline.clone(),
    )?;
    let n = setup.experiment.continual.len();
    r.push(
        Checkpoint {
            step: 1,
            processed: n,
            segment_end: setup.experiment.segment_ends.len().checked_sub(1),
        },
        final_row.clone(),
    )?;
    Ok(RunResult {
        mode,
        seed: setup.seed(),
        domain_names: setup.experiment.domain_names.clone(),
        stream_len: n,
        budget: n,
        labels_used: n,
        pretrain_val_mae: setup.pretrain_val_mae,
        r_matrix: r,
        final_mae: final_row,
        bwt: None,
        fwt: None,
        steps: Vec::new(),
        memory: Vec::new(),
        memory_truth: Vec::new(),
        purity: PurityReport::default(),
        domains: Vec::new(),
        forests: Vec::new(),
        distance_threshold: None,
        fates: None,
        learners,
    })
}

/// One learner trained on the pretraining set plus the whole labelled stream.
pub fn run_joint(setup: &Setup) -> Result<RunResult> {
    let exp = &setup.experiment;
    let mut data = pairs(&exp.pretrain);
    data.extend(pairs(&exp.continual));
    let learner = offline_learner(setup, &data)?;
    let row = evaluate_checkpoint(&learner, &exp.test)?;
    offline_result(setup, Mode::Joint, row, vec![learner])
}

/// One learner per true domain, each trained and evaluated on its own domain
/// only. The first domain's learner also sees the pretraining set.
pub fn run_per_domain(setup: &Setup) -> Result<RunResult> {
    let exp = &setup.experiment;
    let mut learners = Vec::with_capacity(exp.n_domains());
    let mut row = Vec::with_capacity(exp.n_domains());
    for d in 0..exp.n_domains() {
        let mut data = if d == 0 { pairs(&exp.pretrain) } else { Vec::new() };
        data.extend(exp.continual.iter().filter(|s| s.truth().domain == d).map(|s| (&s.image, s.truth().label)));
        let learner = offline_learner(setup, &data)?;
        row.push(evaluate_checkpoint(&learner, std::slice::from_ref(&exp.test[d]))?[0]);
        learners.push(learner);
    }
    offline_result(setup, Mode::PerDomain, row, learners)
}
