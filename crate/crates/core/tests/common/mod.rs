//! Independent reference implementations shared by the oracle tests and the
//! acceptance harness. Each check returns the measured quantity so callers can
//! both assert on it and print it.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use casa_core::config::ExperimentConfig;
use casa_core::eval::{compute_bwt, compute_fwt};
use casa_core::iforest::{ForestParams, IsolationForest};
use casa_core::learner::{Init, LearnerSpec, TaskLearner};
use casa_core::memory::{InsertOutcome, LabelledItem, TrainingMemory};
use casa_core::style::{gram_matrix, FeatureMaps, SparseProjection, StyleEmbedding};
use casa_core::Image;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn shipped_config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

/// A tiny two-domain experiment that runs in well under a second.
pub fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seeds = vec![1];
    cfg.stream.height = 16;
    cfg.stream.width = 16;
    cfg.stream.domains.truncate(2);
    cfg.stream.pretrain = 32;
    cfg.stream.validation = vec![8, 8];
    cfg.stream.test = vec![10, 10];
    cfg.stream.segments = vec![vec![8, 0], vec![0, 32]];
    cfg.learner.pretrain_epochs = 10;
    cfg.learner.offline_epochs = 10;
    cfg.casa.beta = 0.25;
    cfg
}

fn random_maps(rng: &mut ChaCha8Rng, n: usize, m: usize) -> FeatureMaps {
    FeatureMaps {
        height: 1,
        width: m,
        maps: (0..n).map(|_| gaussian(rng, m)).collect(),
    }
}

/// Largest absolute difference between the library gram matrix and a
/// triple loop over random feature maps.
pub fn gram_bruteforce_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for &(n, m) in &[(1, 4), (3, 7), (8, 49), (8, 9)] {
        let maps = random_maps(&mut r, n, m);
        let g = gram_matrix(&maps).unwrap();
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..m {
                    s += maps.maps[i][k] * maps.maps[j][k];
                }
                let expect = s / (n * m) as f64;
                worst = worst.max((g[i * n + j] - expect).abs());
            }
        }
    }
    worst
}

/// Smallest eigenvalue and largest asymmetry of gram matrices of random maps.
pub fn gram_spectrum(seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let mut min_eig = f64::INFINITY;
    let mut asym = 0.0f64;
    for _ in 0..20 {
        let n = r.random_range(1..=8);
        // rectified, then scaled to unit max so the bound applies to normalized input
        let m = r.random_range(1..=40);
        let mut maps = random_maps(&mut r, n, m);
        let peak = maps.maps.iter().flatten().fold(1e-12f64, |a, &v| a.max(v.abs()));
        for v in maps.maps.iter_mut().flatten() {
            *v = v.max(0.0) / peak;
        }
        let g = gram_matrix(&maps).unwrap();
        let mat = DMatrix::from_row_slice(n, n, &g);
        asym = asym.max((&mat - mat.transpose()).abs().max());
        let eig = mat.symmetric_eigen().eigenvalues;
        min_eig = min_eig.min(eig.min());
    }
    (min_eig, asym)
}

/// Share of pairs among 200 Gaussian vectors whose projected distance stays
/// within `(1 +/- 0.3)` times the original, as `(squared, plain)` distances.
pub fn jl_fractions(input_dim: usize, output_dim: usize, seed: u64) -> (f64, f64) {
    let proj = SparseProjection::new(input_dim, output_dim, None, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    let raw: Vec<Vec<f64>> = (0..200).map(|_| gaussian(&mut r, input_dim)).collect();
    let out: Vec<Vec<f64>> = raw.iter().map(|v| proj.project(v).unwrap()).collect();
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let (mut ok_sq, mut ok, mut total) = (0usize, 0usize, 0usize);
    for i in 0..raw.len() {
        for j in i + 1..raw.len() {
            let ratio = sq(&out[i], &out[j]) / sq(&raw[i], &raw[j]);
            total += 1;
            ok_sq += usize::from((0.7..=1.3).contains(&ratio));
            ok += usize::from((0.7..=1.3).contains(&ratio.sqrt()));
        }
    }
    (ok_sq as f64 / total as f64, ok as f64 / total as f64)
}

pub struct ForestCheck {
    pub scores_in_unit_interval: bool,
    pub mean_train_decision: f64,
    pub mean_far_decision: f64,
}

/// Fits a forest on a unit Gaussian cluster and scores its own points and
/// points drawn at five to eight radii from the centre.
pub fn forest_ordering(seed: u64, dim: usize) -> ForestCheck {
    let mut r = rng(seed);
    let centre = gaussian(&mut r, dim);
    let train: Vec<Vec<f64>> = (0..128)
        .map(|_| gaussian(&mut r, dim).iter().zip(&centre).map(|(a, c)| a + c).collect())
        .collect();
    let far: Vec<Vec<f64>> = (0..64)
        .map(|_| {
            let d = gaussian(&mut r, dim);
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            let radius = r.random_range(5.0..8.0) * (dim as f64).sqrt();
            d.iter().zip(&centre).map(|(v, c)| c + v / norm * radius).collect()
        })
        .collect();
    let refs: Vec<&[f64]> = train.iter().map(Vec::as_slice).collect();
    let forest = IsolationForest::fit(&refs, ForestParams::default(), seed).unwrap();
    let all = train.iter().chain(&far);
    let scores_in_unit_interval = all.clone().all(|x| {
        let s = forest.anomaly_score(x);
        s > 0.0 && s < 1.0
    });
    let mean = |xs: &[Vec<f64>]| xs.iter().map(|x| forest.decision_function(x)).sum::<f64>() / xs.len() as f64;
    ForestCheck {
        scores_in_unit_interval,
        mean_train_decision: mean(&train),
        mean_far_decision: mean(&far),
    }
}

/// Worst norm-wise relative error between the analytic gradient and central
/// differences, over several random networks and batches.
pub fn gradient_relative_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for hidden in [vec![], vec![5], vec![6, 4]] {
        let spec = LearnerSpec {
            hidden,
            learning_rate: 1e-2,
            init: Init::He,
        };
        let dim = 7;
        let mut learner = TaskLearner::new(dim, &spec, r.random()).unwrap();
        // nonzero biases keep hidden units away from the rectifier kink
        let p: Vec<f64> = learner.params().iter().map(|v| v + 0.1 * r.random::<f64>()).collect();
        learner.set_params(&p).unwrap();
        let xs: Vec<Vec<f64>> = (0..6).map(|_| gaussian(&mut r, dim)).collect();
        let ys: Vec<f64> = (0..6).map(|_| 10.0 * r.random::<f64>() - 5.0).collect();
        let batch: Vec<(&[f64], f64)> = xs.iter().map(Vec::as_slice).zip(ys.iter().copied()).collect();
        let (_, grad) = learner.loss_and_grad(&batch).unwrap();
        let h = 1e-6;
        let mut numeric = Vec::with_capacity(p.len());
        let mut probe = learner.clone();
        for i in 0..p.len() {
            let mut q = p.clone();
            q[i] = p[i] + h;
            probe.set_params(&q).unwrap();
            let up = probe.loss_and_grad(&batch).unwrap().0;
            q[i] = p[i] - h;
            probe.set_params(&q).unwrap();
            let down = probe.loss_and_grad(&batch).unwrap().0;
            numeric.push((up - down) / (2.0 * h));
        }
        let diff = grad.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = grad
            .iter()
            .map(|a| a * a)
            .sum::<f64>()
            .sqrt()
            .max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt())
            .max(1e-12);
        worst = worst.max(diff / scale);
    }
    worst
}

/// Hand-computed transfer fixtures: `(computed, expected)` pairs.
pub fn transfer_fixtures() -> Vec<(f64, f64)> {
    let rows = vec![vec![2.0, 9.0, 8.0], vec![3.0, 4.0, 7.0], vec![1.0, 2.0, 5.0]];
    let baseline = [2.0, 10.0, 12.0];
    // BWT = ((2 - 1) + (4 - 2)) / 2, FWT = ((10 - 9) + (12 - 7)) / 2
    let forgetting = vec![vec![5.0, 6.0], vec![7.0, 1.0]];
    vec![
        (compute_bwt(&rows).unwrap(), 1.5),
        (compute_fwt(&rows, &baseline).unwrap(), 3.0),
        (compute_bwt(&forgetting).unwrap(), -2.0),
        (compute_fwt(&[vec![0.0, 6.0], vec![0.0, 0.0]], &[0.0, 9.0]).unwrap(), 3.0),
        (compute_bwt(&[vec![5.0, 0.0], vec![4.0, 0.0]]).unwrap(), 1.0),
    ]
}

pub fn item(id: u64, emb: Vec<f64>) -> LabelledItem {
    LabelledItem {
        sample_id: id,
        image: Image::zeros(1, 1),
        label: id as f64,
        embedding: StyleEmbedding(emb),
    }
}

/// Fills a two-domain memory, inserts into a domain at quota, and returns how
/// many trials picked the same victim as an exhaustive scan, out of `trials`.
pub fn victim_agreement(seed: u64, trials: usize) -> usize {
    let mut r = rng(seed);
    let mut agree = 0;
    for t in 0..trials {
        let cap = r.random_range(2..=16usize) * 2;
        let dim = r.random_range(1..=6);
        let mut mem = TrainingMemory::new(cap).unwrap();
        mem.requota(2, &mut r).unwrap();
        let mut id = 0u64;
        for d in 0..2 {
            for _ in 0..cap / 2 {
                // coarse grid values so exact distance ties actually occur
                let e: Vec<f64> = (0..dim).map(|_| r.random_range(-2..=2) as f64).collect();
                mem.insert(item(id, e), d).unwrap();
                id += 1;
            }
        }
        let d = (t % 2) as usize;
        let probe: Vec<f64> = (0..dim).map(|_| r.random_range(-2..=2) as f64).collect();
        let mut best: Option<(usize, f64)> = None;
        for (slot, it) in mem.items().iter().enumerate() {
            if it.domain != d || it.flagged {
                continue;
            }
            let dist: f64 = it.embedding.0.iter().zip(&probe).map(|(a, b)| (a - b) * (a - b)).sum();
            if best.map_or(true, |(_, b)| dist < b) {
                best = Some((slot, dist));
            }
        }
        let (want_slot, _) = best.unwrap();
        let want_victim = mem.items()[want_slot].sample_id;
        let out = mem.insert(item(10_000, probe), d).unwrap();
        if out
            == (InsertOutcome::ReplacedNearest {
                slot: want_slot,
                victim: want_victim,
            })
        {
            agree += 1;
        }
    }
    agree
}

/// Counts per key of an iterator, for composition comparisons.
pub fn tally<I: IntoIterator<Item = usize>>(it: I) -> BTreeMap<usize, usize> {
    let mut m = BTreeMap::new();
    for k in it {
        *m.entry(k).or_insert(0) += 1;
    }
    m
}
