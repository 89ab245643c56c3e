//! Run artifacts on disk: step logs, snapshots, report tables, embedding
//! exports and parameter sweeps.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, GridPoint};
use crate::controller::{run, Fates, Mode, RunResult, Setup, StepRecord};
use crate::error::{CasaError, Result};
use crate::eval::{PurityReport, RMatrix};
use crate::memory::MemoryRecord;

pub const CONFIG_FILE: &str = "config.toml";
pub const STEP_LOG: &str = "steps.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const R_MATRIX_CSV: &str = "r_matrix.csv";
pub const MEMORY_FILE: &str = "memory.json";
pub const DOMAINS_FILE: &str = "domains.json";
pub const FORESTS_FILE: &str = "forests.json";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const CURVE_CSV: &str = "curve.csv";
pub const PURITY_CSV: &str = "purity.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SWEEP_CSV: &str = "sweep_summary.csv";
pub const SWEEP_JSON: &str = "sweep_summary.json";

/// Artifacts `emit_reports` reads.
const REQUIRED: [&str; 4] = [CONFIG_FILE, STEP_LOG, SUMMARY_FILE, MEMORY_FILE];

/// Scalar outcome of one run, stored as `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub seed: u64,
    pub domain_names: Vec<String>,
    pub stream_len: usize,
    pub budget: usize,
    pub labels_used: usize,
    pub pretrain_val_mae: f64,
    pub final_mae: Vec<f64>,
    pub bwt: Option<f64>,
    pub fwt: Option<f64>,
    pub discovered: usize,
    pub distance_threshold: Option<f64>,
    pub fates: Option<Fates>,
    pub composition_true: Vec<usize>,
    pub memory_entropy: f64,
    pub quota_respected: bool,
    pub r_matrix: RMatrix,
    pub purity: PurityReport,
}

impl RunSummary {
    pub fn from_result(r: &RunResult) -> Self {
        Self {
            mode: r.mode,
            seed: r.seed,
            domain_names: r.domain_names.clone(),
            stream_len: r.stream_len,
            budget: r.budget,
            labels_used: r.labels_used,
            pretrain_val_mae: r.pretrain_val_mae,
            final_mae: r.final_mae.clone(),
            bwt: r.bwt,
            fwt: r.fwt,
            discovered: r.discovered(),
            distance_threshold: r.distance_threshold,
            fates: r.fates,
            composition_true: r.composition_true(),
            memory_entropy: r.memory_entropy(),
            quota_respected: r.quota_always_respected(),
            r_matrix: r.r_matrix.clone(),
            purity: r.purity.clone(),
        }
    }
}

/// Final training memory with the evaluation-only true domain of each item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorySnapshot {
    pub items: Vec<MemoryRecord>,
    pub truth: Vec<usize>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CasaError::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CasaError::io(path, e))
}

fn json_pretty<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(v)?;
    s.push(b'\n');
    Ok(s)
}

/// One JSON object per step, newline-terminated.
pub fn write_step_log<W: Write>(steps: &[StepRecord], mut w: W) -> Result<()> {
    for s in steps {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| CasaError::io("<step log>", e))?;
    }
    Ok(())
}

pub fn step_log_bytes(steps: &[StepRecord]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_step_log(steps, &mut buf)?;
    Ok(buf)
}

pub fn read_step_log(path: &Path) -> Result<Vec<StepRecord>> {
    read_file(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(CasaError::from))
        .collect()
}

fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let ser = |e: csv::Error| CasaError::Serde(e.to_string());
    w.write_record(header).map_err(ser)?;
    for r in rows {
        w.write_record(r).map_err(ser)?;
    }
    w.into_inner().map_err(|e| CasaError::Serde(e.to_string()))
}

fn opt<T: fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Wide R matrix: one row per checkpoint, baseline first.
pub fn r_matrix_csv(r: &RMatrix, names: &[String]) -> Result<Vec<u8>> {
    let mut header = vec!["step".to_string(), "processed".into(), "segment_end".into()];
    header.extend(names.iter().cloned());
    let mut rows = vec![{
        let mut row = vec!["baseline".to_string(), "0".into(), String::new()];
        row.extend(r.baseline.iter().map(f64::to_string));
        row
    }];
    for (cp, vals) in r.checkpoints.iter().zip(&r.rows) {
        let mut row = vec![cp.step.to_string(), cp.processed.to_string(), opt(cp.segment_end)];
        row.extend(vals.iter().map(f64::to_string));
        rows.push(row);
    }
    csv_bytes(&header, &rows)
}

/// Writes every artifact of a finished run into `dir` (created if needed).
pub fn write_run(result: &RunResult, config: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| CasaError::io(dir, e))?;
    let mut files: Vec<(String, Vec<u8>)> = vec![
        (CONFIG_FILE.into(), config.to_toml_string()?.into_bytes()),
        (STEP_LOG.into(), step_log_bytes(&result.steps)?),
        (SUMMARY_FILE.into(), json_pretty(&RunSummary::from_result(result))?),
        (R_MATRIX_CSV.into(), r_matrix_csv(&result.r_matrix, &result.domain_names)?),
        (
            MEMORY_FILE.into(),
            json_pretty(&MemorySnapshot {
                items: result.memory.clone(),
                truth: result.memory_truth.clone(),
            })?,
        ),
    ];
    if result.mode.is_streaming() {
        files.push((DOMAINS_FILE.into(), json_pretty(&result.domains)?));
        files.push((FORESTS_FILE.into(), serde_json::to_vec(&result.forests)?));
    }
    for (i, l) in result.learners.iter().enumerate() {
        files.push((format!("learner-{i}.bin"), l.to_blob()));
    }
    let mut written = Vec::with_capacity(files.len());
    for (name, bytes) in files {
        let path = dir.join(name);
        write_file(&path, &bytes)?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub mode: Mode,
    pub seed: u64,
    pub files: Vec<ManifestEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn summary_table(s: &RunSummary) -> Result<Vec<u8>> {
    let mut header: Vec<String> = ["mode", "seed", "budget", "labels_used"].map(String::from).to_vec();
    header.extend(s.domain_names.iter().map(|n| format!("mae_{n}")));
    header.extend(["bwt", "fwt", "discovered", "memory_entropy"].map(String::from));
    let mut row = vec![
        s.mode.to_string(),
        s.seed.to_string(),
        s.budget.to_string(),
        s.labels_used.to_string(),
    ];
    row.extend(s.final_mae.iter().map(f64::to_string));
    row.extend([opt(s.bwt), opt(s.fwt), s.discovered.to_string(), s.memory_entropy.to_string()]);
    csv_bytes(&header, &[row])
}

/// Long-format learning curve; one row per checkpoint and true domain.
fn curve_table(s: &RunSummary) -> Result<Vec<u8>> {
    let header = ["step", "processed", "segment_end", "domain", "mae"].map(String::from);
    let r = &s.r_matrix;
    let rows: Vec<Vec<String>> = r
        .checkpoints
        .iter()
        .zip(&r.rows)
        .flat_map(|(cp, vals)| {
            vals.iter().zip(&s.domain_names).map(move |(v, name)| {
                vec![
                    cp.step.to_string(),
                    cp.processed.to_string(),
                    opt(cp.segment_end),
                    name.clone(),
                    v.to_string(),
                ]
            })
        })
        .collect();
    csv_bytes(&header, &rows)
}

fn purity_table(s: &RunSummary) -> Result<Vec<u8>> {
    let mut header = vec!["pseudo_domain".to_string()];
    header.extend(s.domain_names.iter().cloned());
    header.extend(["total", "purity"].map(String::from));
    let rows: Vec<Vec<String>> = s
        .purity
        .table
        .iter()
        .map(|(d, counts)| {
            let mut row = vec![d.to_string()];
            row.extend(counts.iter().map(usize::to_string));
            row.push(counts.iter().sum::<usize>().to_string());
            row.push(opt(s.purity.purity.get(d)));
            row
        })
        .collect();
    csv_bytes(&header, &rows)
}

/// Builds the summary, curve and purity tables plus a manifest of every
/// file in the run directory. Rerunning on the same logs rewrites the same
/// bytes.
pub fn emit_reports(dir: &Path) -> Result<Vec<PathBuf>> {
    let missing: Vec<String> = REQUIRED
        .iter()
        .filter(|f| !dir.join(f).is_file())
        .map(|f| f.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(CasaError::MissingArtifacts {
            dir: dir.to_path_buf(),
            missing,
        });
    }
    let summary: RunSummary = serde_json::from_str(&read_file(&dir.join(SUMMARY_FILE))?)?;
    let tables = [
        (SUMMARY_CSV, summary_table(&summary)?),
        (CURVE_CSV, curve_table(&summary)?),
        (PURITY_CSV, purity_table(&summary)?),
    ];
    let mut written = Vec::new();
    for (name, bytes) in &tables {
        let path = dir.join(name);
        write_file(&path, bytes)?;
        written.push(path);
    }

    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| CasaError::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n != MANIFEST_FILE)
        .collect();
    names.sort();
    let mut files = Vec::with_capacity(names.len());
    for name in names {
        let path = dir.join(&name);
        let bytes = fs::read(&path).map_err(|e| CasaError::io(&path, e))?;
        files.push(ManifestEntry {
            file: name,
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = Manifest {
        mode: summary.mode,
        seed: summary.seed,
        files,
    };
    let path = dir.join(MANIFEST_FILE);
    write_file(&path, &json_pretty(&manifest)?)?;
    written.push(path);
    Ok(written)
}

/// Writes `id,split,domain,label,e0..` for every sample of the experiment.
/// Returns the number of rows.
pub fn export_embeddings(setup: &Setup, path: &Path) -> Result<usize> {
    let exp = &setup.experiment;
    let mut splits: Vec<(&str, &[crate::stream::StreamSample])> =
        vec![("pretrain", &exp.pretrain), ("continual", &exp.continual)];
    for v in &exp.validation {
        splits.push(("validation", v));
    }
    for t in &exp.test {
        splits.push(("test", t));
    }
    let dim = setup.config.style.embedding_dim;
    let mut header: Vec<String> = ["id", "split", "domain", "label"].map(String::from).to_vec();
    header.extend((0..dim).map(|i| format!("e{i}")));
    let mut rows = Vec::new();
    for (split, samples) in splits {
        for (s, e) in samples.iter().zip(setup.embed_all(samples)?) {
            let t = s.truth();
            let mut row = vec![s.id.to_string(), split.to_string(), exp.domain_names[t.domain].clone(), t.label.to_string()];
            row.extend(e.values().iter().map(f64::to_string));
            rows.push(row);
        }
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CasaError::io(parent, e))?;
    }
    write_file(path, &csv_bytes(&header, &rows)?)?;
    Ok(rows.len())
}

/// Mean with the min–max interval over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some(Self {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            min,
            max,
        })
    }
}

impl fmt::Display for Spread {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3} [{:.3}, {:.3}]", self.mean, self.min, self.max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRange {
    pub min: usize,
    pub max: usize,
}

impl fmt::Display for LabelRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.min == self.max {
            write!(f, "{}", self.min)
        } else {
            write!(f, "[{}-{}]", self.min, self.max)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepFailure {
    pub seed: u64,
    pub error: String,
}

/// One (mode, grid point) cell aggregated over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub mode: Mode,
    pub point: GridPoint,
    pub seeds: Vec<u64>,
    pub failures: Vec<SweepFailure>,
    pub labels: Option<LabelRange>,
    pub mae: Vec<Option<Spread>>,
    pub bwt: Option<Spread>,
    pub fwt: Option<Spread>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub domain_names: Vec<String>,
    pub cells: Vec<SweepCell>,
}

impl SweepSummary {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut header: Vec<String> = ["mode", "beta", "k", "memory_size", "runs", "failed", "labelled"]
            .map(String::from)
            .to_vec();
        header.extend(self.domain_names.iter().map(|n| format!("mae_{n}")));
        header.extend(["bwt", "fwt"].map(String::from));
        let rows: Vec<Vec<String>> = self
            .cells
            .iter()
            .map(|c| {
                let mut row = vec![
                    c.mode.to_string(),
                    c.point.beta.to_string(),
                    c.point.k.to_string(),
                    c.point.memory_size.to_string(),
                    c.seeds.len().to_string(),
                    c.failures.len().to_string(),
                    opt(c.labels),
                ];
                row.extend(c.mae.iter().map(|m| opt(*m)));
                row.push(opt(c.bwt));
                row.push(opt(c.fwt));
                row
            })
            .collect();
        csv_bytes(&header, &rows)
    }
}

/// Directory of one sweep run below the sweep root.
pub fn sweep_run_dir(root: &Path, mode: Mode, p: GridPoint, seed: u64) -> PathBuf {
    root.join(mode.as_str())
        .join(format!("beta{}_k{}_m{}", p.beta, p.k, p.memory_size))
        .join(format!("seed{seed}"))
}

/// Runs every (mode, grid point, seed) in parallel and aggregates the cells
/// in mode-major, grid-minor order. A failing run is recorded in its cell
/// and the sweep continues. With `out` set, each run also writes its
/// artifacts and reports, and the summary lands at the root.
pub fn run_sweep(config: &ExperimentConfig, modes: &[Mode], out: Option<&Path>) -> Result<SweepSummary> {
    config.validate()?;
    if modes.is_empty() {
        return Ok(SweepSummary::default());
    }
    let grid = config.grid();
    let seeds = &config.seeds;
    let jobs: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|g| (0..seeds.len()).map(move |s| (g, s)))
        .collect();
    let setups: Vec<std::result::Result<Setup, String>> = jobs
        .par_iter()
        .map(|&(g, s)| Setup::new(&config.at(grid[g]), seeds[s]).map_err(|e| e.to_string()))
        .collect();

    let runs: Vec<(usize, usize, usize)> = (0..modes.len())
        .flat_map(|m| jobs.iter().enumerate().map(move |(j, &(g, _))| (m, g, j)))
        .collect();
    let outcomes: Vec<std::result::Result<RunSummary, String>> = runs
        .par_iter()
        .map(|&(m, g, j)| {
            let setup = setups[j].as_ref().map_err(Clone::clone)?;
            let result = run(setup, modes[m]).map_err(|e| e.to_string())?;
            if let Some(root) = out {
                let dir = sweep_run_dir(root, modes[m], grid[g], setup.seed());
                write_run(&result, &setup.config, &dir).map_err(|e| e.to_string())?;
                emit_reports(&dir).map_err(|e| e.to_string())?;
            }
            Ok(RunSummary::from_result(&result))
        })
        .collect();

    let domain_names = config.stream.domains.iter().map(|d| d.name.clone()).collect::<Vec<_>>();
    let mut cells = Vec::with_capacity(modes.len() * grid.len());
    for (m, &mode) in modes.iter().enumerate() {
        for (g, &point) in grid.iter().enumerate() {
            let mut ok = Vec::new();
            let mut failures = Vec::new();
            for (idx, &(rm, rg, j)) in runs.iter().enumerate() {
                if rm != m || rg != g {
                    continue;
                }
                match &outcomes[idx] {
                    Ok(s) => ok.push(s),
                    Err(e) => failures.push(SweepFailure {
                        seed: seeds[jobs[j].1],
                        error: e.clone(),
                    }),
                }
            }
            let labels = ok.iter().map(|s| s.labels_used).min().zip(ok.iter().map(|s| s.labels_used).max());
            let mae = (0..domain_names.len())
                .map(|d| Spread::of(&ok.iter().map(|s| s.final_mae[d]).collect::<Vec<_>>()))
                .collect();
            let collect = |f: fn(&RunSummary) -> Option<f64>| Spread::of(&ok.iter().filter_map(|s| f(s)).collect::<Vec<_>>());
            cells.push(SweepCell {
                mode,
                point,
                seeds: seeds.clone(),
                failures,
                labels: labels.map(|(min, max)| LabelRange { min, max }),
                mae,
                bwt: collect(|s| s.bwt),
                fwt: collect(|s| s.fwt),
            });
        }
    }
    let summary = SweepSummary { domain_names, cells };
    if let Some(root) = out {
        fs::create_dir_all(root).map_err(|e| CasaError::io(root, e))?;
        write_file(&root.join(SWEEP_CSV), &summary.to_csv()?)?;
        write_file(&root.join(SWEEP_JSON), &json_pretty(&summary)?)?;
    }
    Ok(summary)
}
