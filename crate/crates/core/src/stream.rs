//! Synthetic domain-shifted image streams, the labelling oracle and budget
//! accounting.
//!
//! Every sample is rendered from a latent content vector. The regression label
//! is a fixed linear function of that latent, so it never depends on the
//! acquisition style of the domain the sample is drawn from.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CasaError, Result};
use crate::image::Image;

/// Acquisition style of one synthetic domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    /// Exponent applied to every pixel.
    pub gamma: f64,
    /// Amplitude of the domain's fixed additive noise texture.
    pub noise_amplitude: f64,
    pub texture_seed: u64,
    /// Box-blur radius in pixels; 0 disables smoothing.
    pub smoothing_radius: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSpec {
    pub height: usize,
    pub width: usize,
    pub domains: Vec<DomainSpec>,
    /// Pretraining samples, all drawn from the first domain.
    pub pretrain: usize,
    /// Per-domain validation set sizes.
    pub validation: Vec<usize>,
    /// Per-domain test set sizes.
    pub test: Vec<usize>,
    /// Continual schedule: one row per segment, one count per domain. Samples
    /// inside a segment are shuffled; segments follow each other in order.
    pub segments: Vec<Vec<usize>>,
    /// Standard deviation of independent per-pixel acquisition noise.
    pub pixel_noise: f64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            domains: vec![
                DomainSpec {
                    name: "A".into(),
                    gamma: 1.0,
                    noise_amplitude: 0.02,
                    texture_seed: 101,
                    smoothing_radius: 0,
                },
                DomainSpec {
                    name: "B".into(),
                    gamma: 0.6,
                    noise_amplitude: 0.12,
                    texture_seed: 202,
                    smoothing_radius: 0,
                },
                DomainSpec {
                    name: "C".into(),
                    gamma: 0.8,
                    noise_amplitude: 0.09,
                    texture_seed: 303,
                    smoothing_radius: 1,
                },
            ],
            pretrain: 50,
            validation: vec![8, 5, 47],
            test: vec![40, 40, 40],
            segments: vec![vec![8, 0, 0], vec![3, 29, 0], vec![2, 7, 376]],
            pixel_noise: 0.01,
        }
    }
}

impl StreamSpec {
    pub fn validate(&self) -> Result<()> {
        let d = self.domains.len();
        if d == 0 {
            return Err(CasaError::Config("stream.domains must list at least one domain".into()));
        }
        if self.height < 4 || self.width < 4 {
            return Err(CasaError::Config("stream image size must be at least 4x4".into()));
        }
        if self.validation.len() != d || self.test.len() != d {
            return Err(CasaError::Config(format!(
                "stream.validation and stream.test need one entry per domain ({d})"
            )));
        }
        if self.test.iter().any(|&n| n == 0) {
            return Err(CasaError::Config("stream.test sizes must be positive".into()));
        }
        if self.segments.is_empty() {
            return Err(CasaError::Config("stream.segments is empty".into()));
        }
        for (i, seg) in self.segments.iter().enumerate() {
            if seg.len() != d {
                return Err(CasaError::Config(format!(
                    "stream.segments[{i}] has {} entries, expected {d}",
                    seg.len()
                )));
            }
            if seg.iter().sum::<usize>() == 0 {
                return Err(CasaError::Config(format!("stream.segments[{i}] is empty")));
            }
        }
        if self.pretrain == 0 {
            return Err(CasaError::Config("stream.pretrain must be positive".into()));
        }
        for dom in &self.domains {
            if !(dom.gamma > 0.0) || dom.noise_amplitude < 0.0 {
                return Err(CasaError::Config(format!("invalid style for domain {}", dom.name)));
            }
        }
        if self.pixel_noise < 0.0 {
            return Err(CasaError::Config("stream.pixel_noise must be >= 0".into()));
        }
        Ok(())
    }

    pub fn continual_len(&self) -> usize {
        self.segments.iter().flatten().sum()
    }

    /// Continual sample counts per domain.
    pub fn continual_per_domain(&self) -> Vec<usize> {
        (0..self.domains.len())
            .map(|d| self.segments.iter().map(|s| s[d]).sum())
            .collect()
    }
}

/// Hidden ground truth of a sample; read only by the oracle and evaluators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub label: f64,
    pub domain: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamSample {
    pub id: u64,
    pub image: Image,
    truth: Truth,
}

impl StreamSample {
    pub fn new(id: u64, image: Image, truth: Truth) -> Self {
        Self { id, image, truth }
    }

    /// Evaluation-only access to the hidden label and domain.
    pub fn truth(&self) -> Truth {
        self.truth
    }
}

/// Latent content of a synthetic image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Latent {
    /// Drives the label.
    pub severity: f64,
    pub shift_y: f64,
    pub shift_x: f64,
    pub shape: f64,
}

impl Latent {
    fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            severity: rng.random(),
            shift_y: rng.random(),
            shift_x: rng.random(),
            shape: rng.random(),
        }
    }

    /// Age-like label in `[20, 80]`.
    pub fn label(&self) -> f64 {
        20.0 + 60.0 * self.severity
    }
}

fn smoothstep_edge(dist: f64, radius: f64) -> f64 {
    // soft boundary, ~1px wide
    1.0 / (1.0 + ((dist - radius) * 2.5).exp())
}

/// Style-free content image.
pub fn render_content(latent: &Latent, height: usize, width: usize) -> Vec<f64> {
    let (h, w) = (height as f64, width as f64);
    let cy = h / 2.0 + (latent.shift_y - 0.5) * 0.12 * h;
    let cx = w / 2.0 + (latent.shift_x - 0.5) * 0.12 * w;
    let ry = 0.40 * h * (0.9 + 0.2 * latent.shape);
    let rx = 0.32 * w;
    let tissue = 0.75 - 0.35 * latent.severity;
    let vent_r = (0.05 + 0.17 * latent.severity) * h.min(w);
    let mut px = vec![0.0; height * width];
    for y in 0..height {
        for x in 0..width {
            let dy = (y as f64 + 0.5 - cy) / ry;
            let dx = (x as f64 + 0.5 - cx) / rx;
            let head = smoothstep_edge((dy * dy + dx * dx).sqrt() * rx.min(ry), rx.min(ry));
            let vy = y as f64 + 0.5 - cy;
            let vx = (x as f64 + 0.5 - cx) * 1.6;
            let vent = smoothstep_edge((vy * vy + vx * vx).sqrt(), vent_r);
            px[y * width + x] = 0.05 + head * (tissue - 0.05) - vent * head * (tissue - 0.12);
        }
    }
    px
}

fn texture(spec: &DomainSpec, height: usize, width: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.texture_seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..height * width).map(|_| normal.sample(&mut rng)).collect()
}

fn box_blur(px: &[f64], height: usize, width: usize, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return px.to_vec();
    }
    let r = radius as isize;
    let mut out = vec![0.0; px.len()];
    for y in 0..height as isize {
        for x in 0..width as isize {
            let mut acc = 0.0;
            let mut n = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0 && xx >= 0 && (yy as usize) < height && (xx as usize) < width {
                        acc += px[yy as usize * width + xx as usize];
                        n += 1.0;
                    }
                }
            }
            out[y as usize * width + x as usize] = acc / n;
        }
    }
    out
}

/// Renders style-transformed images for one domain.
#[derive(Debug, Clone)]
pub struct StyleRenderer {
    spec: DomainSpec,
    height: usize,
    width: usize,
    texture: Vec<f64>,
    pixel_noise: f64,
}

impl StyleRenderer {
    pub fn new(spec: &DomainSpec, height: usize, width: usize, pixel_noise: f64) -> Self {
        Self {
            spec: spec.clone(),
            height,
            width,
            texture: texture(spec, height, width),
            pixel_noise,
        }
    }

    pub fn render<R: Rng + ?Sized>(&self, latent: &Latent, rng: &mut R) -> Image {
        let content = render_content(latent, self.height, self.width);
        let gamma: Vec<f64> = content.iter().map(|p| p.powf(self.spec.gamma)).collect();
        let smooth = box_blur(&gamma, self.height, self.width, self.spec.smoothing_radius);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let px: Vec<f64> = smooth
            .iter()
            .zip(&self.texture)
            .map(|(p, t)| {
                let iid = if self.pixel_noise > 0.0 {
                    self.pixel_noise * normal.sample(rng)
                } else {
                    0.0
                };
                p + self.spec.noise_amplitude * t + iid
            })
            .collect();
        Image::from_clamped(self.height, self.width, px).expect("shape fixed by renderer")
    }
}

/// Every split of a generated experiment.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub domain_names: Vec<String>,
    pub pretrain: Vec<StreamSample>,
    pub continual: Vec<StreamSample>,
    /// Per true domain.
    pub validation: Vec<Vec<StreamSample>>,
    /// Per true domain.
    pub test: Vec<Vec<StreamSample>>,
    /// Cumulative continual index at the end of each schedule segment.
    pub segment_ends: Vec<usize>,
    pub seed: u64,
}

impl Experiment {
    pub fn n_domains(&self) -> usize {
        self.domain_names.len()
    }

    /// Looks up any sample by id across all splits.
    pub fn truth_of(&self, id: u64) -> Option<Truth> {
        self.all_samples().find(|s| s.id == id).map(|s| s.truth)
    }

    pub fn all_samples(&self) -> impl Iterator<Item = &StreamSample> {
        self.pretrain
            .iter()
            .chain(&self.continual)
            .chain(self.validation.iter().flatten())
            .chain(self.test.iter().flatten())
    }

    pub fn manifest(&self) -> DatasetManifest {
        let per = |sets: &[Vec<StreamSample>]| sets.iter().map(Vec::len).collect::<Vec<_>>();
        let mut continual_per_domain = vec![0; self.n_domains()];
        for s in &self.continual {
            continual_per_domain[s.truth.domain] += 1;
        }
        DatasetManifest {
            seed: self.seed,
            domain_names: self.domain_names.clone(),
            height: self.pretrain.first().map_or(0, |s| s.image.height()),
            width: self.pretrain.first().map_or(0, |s| s.image.width()),
            pretrain: self.pretrain.len(),
            continual: self.continual.len(),
            continual_per_domain,
            validation: per(&self.validation),
            test: per(&self.test),
            segment_ends: self.segment_ends.clone(),
        }
    }
}

/// Generates all splits deterministically from `seed`.
pub fn generate_experiment(spec: &StreamSpec, seed: u64) -> Result<Experiment> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let renderers: Vec<StyleRenderer> = spec
        .domains
        .iter()
        .map(|d| StyleRenderer::new(d, spec.height, spec.width, spec.pixel_noise))
        .collect();
    let mut next_id = 0u64;
    let mut make = |domain: usize, rng: &mut ChaCha8Rng| {
        let latent = Latent::draw(rng);
        let image = renderers[domain].render(&latent, rng);
        let s = StreamSample::new(
            next_id,
            image,
            Truth {
                label: latent.label(),
                domain,
            },
        );
        next_id += 1;
        s
    };

    let pretrain: Vec<StreamSample> = (0..spec.pretrain).map(|_| make(0, &mut rng)).collect();

    let mut continual = Vec::with_capacity(spec.continual_len());
    let mut segment_ends = Vec::with_capacity(spec.segments.len());
    for seg in &spec.segments {
        let mut order: Vec<usize> = seg
            .iter()
            .enumerate()
            .flat_map(|(d, &n)| std::iter::repeat_n(d, n))
            .collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for d in order {
            continual.push(make(d, &mut rng));
        }
        segment_ends.push(continual.len());
    }

    let validation = spec
        .validation
        .iter()
        .enumerate()
        .map(|(d, &n)| (0..n).map(|_| make(d, &mut rng)).collect())
        .collect();
    let test = spec
        .test
        .iter()
        .enumerate()
        .map(|(d, &n)| (0..n).map(|_| make(d, &mut rng)).collect())
        .collect();

    Ok(Experiment {
        domain_names: spec.domains.iter().map(|d| d.name.clone()).collect(),
        pretrain,
        continual,
        validation,
        test,
        segment_ends,
        seed,
    })
}

/// Sequential cursor over the continual stream.
#[derive(Debug, Clone)]
pub struct Stream<'a> {
    samples: &'a [StreamSample],
    cursor: usize,
}

impl<'a> Stream<'a> {
    pub fn new(samples: &'a [StreamSample]) -> Self {
        Self { samples, cursor: 0 }
    }

    pub fn position(&self) -> usize {
        self.cursor
    }

    pub fn remaining(&self) -> usize {
        self.samples.len() - self.cursor
    }

    /// Next `size` samples in stream order; the last batch may be short.
    pub fn next_batch(&mut self, size: usize) -> Result<&'a [StreamSample]> {
        if size == 0 {
            return Err(CasaError::Config("input batch size must be >= 1".into()));
        }
        if self.cursor >= self.samples.len() {
            return Err(CasaError::EndOfStream);
        }
        let end = (self.cursor + size).min(self.samples.len());
        let batch = &self.samples[self.cursor..end];
        self.cursor = end;
        Ok(batch)
    }
}

/// `floor(beta * n)`, tolerant of binary rounding just below an integer.
pub fn label_budget(beta: f64, n: usize) -> usize {
    (beta * n as f64 + 1e-9).floor().max(0.0) as usize
}

/// Budgeted labelling authority.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Oracle {
    budget_max: usize,
    used: usize,
}

impl Oracle {
    pub fn new(budget_max: usize) -> Self {
        Self { budget_max, used: 0 }
    }

    pub fn with_fraction(beta: f64, stream_len: usize) -> Self {
        Self::new(label_budget(beta, stream_len))
    }

    pub fn budget_max(&self) -> usize {
        self.budget_max
    }

    pub fn used(&self) -> usize {
        self.used
    }

    pub fn remaining(&self) -> usize {
        self.budget_max - self.used
    }

    /// Returns the true label and charges one unit; repeated queries are charged again.
    pub fn label(&mut self, sample: &StreamSample) -> Result<f64> {
        self.label_truth(sample.truth)
    }

    /// Same as [`Self::label`] for a sample held elsewhere whose truth record
    /// was kept aside by the caller.
    pub fn label_truth(&mut self, truth: Truth) -> Result<f64> {
        if self.used >= self.budget_max {
            return Err(CasaError::BudgetExhausted {
                used: self.used,
                max: self.budget_max,
            });
        }
        self.used += 1;
        Ok(truth.label)
    }
}

/// Counts and seeds describing an exported dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub domain_names: Vec<String>,
    pub height: usize,
    pub width: usize,
    pub pretrain: usize,
    pub continual: usize,
    pub continual_per_domain: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub segment_ends: Vec<usize>,
}

const SPLITS: [&str; 4] = ["pretrain", "continual", "validation", "test"];

fn write_records(path: &Path, samples: &[&StreamSample]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| CasaError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| CasaError::io(path, e));
    for s in samples {
        put(&s.id.to_le_bytes())?;
        put(&(s.truth.domain as u32).to_le_bytes())?;
        put(&s.truth.label.to_le_bytes())?;
        put(&(s.image.height() as u32).to_le_bytes())?;
        put(&(s.image.width() as u32).to_le_bytes())?;
        for p in s.image.pixels() {
            put(&p.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| CasaError::io(path, e))
}

fn read_records(path: &Path) -> Result<Vec<StreamSample>> {
    let file = fs::File::open(path).map_err(|e| CasaError::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut out = Vec::new();
    let mut u64b = [0u8; 8];
    let mut u32b = [0u8; 4];
    loop {
        match r.read_exact(&mut u64b) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(CasaError::io(path, e)),
        }
        let id = u64::from_le_bytes(u64b);
        let mut get4 = |r: &mut BufReader<fs::File>| -> Result<u32> {
            r.read_exact(&mut u32b).map_err(|e| CasaError::io(path, e))?;
            Ok(u32::from_le_bytes(u32b))
        };
        let domain = get4(&mut r)? as usize;
        r.read_exact(&mut u64b).map_err(|e| CasaError::io(path, e))?;
        let label = f64::from_le_bytes(u64b);
        let h = get4(&mut r)? as usize;
        let w = get4(&mut r)? as usize;
        let mut px = Vec::with_capacity(h * w);
        for _ in 0..h * w {
            r.read_exact(&mut u64b).map_err(|e| CasaError::io(path, e))?;
            px.push(f64::from_le_bytes(u64b));
        }
        out.push(StreamSample::new(id, Image::new(h, w, px)?, Truth { label, domain }));
    }
    Ok(out)
}

/// Writes the experiment as binary sample records plus `manifest.json`.
pub fn export_dataset(exp: &Experiment, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CasaError::io(dir, e))?;
    let splits: [Vec<&StreamSample>; 4] = [
        exp.pretrain.iter().collect(),
        exp.continual.iter().collect(),
        exp.validation.iter().flatten().collect(),
        exp.test.iter().flatten().collect(),
    ];
    for (name, samples) in SPLITS.iter().zip(splits.iter()) {
        write_records(&dir.join(format!("{name}.bin")), samples)?;
    }
    let manifest = serde_json::to_string_pretty(&exp.manifest())?;
    let path = dir.join("manifest.json");
    fs::write(&path, manifest).map_err(|e| CasaError::io(&path, e))
}

pub fn import_dataset(dir: &Path) -> Result<Experiment> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| CasaError::io(&path, e))?;
    let m: DatasetManifest = serde_json::from_str(&text)?;
    let n = m.domain_names.len();
    let split_by_domain = |samples: Vec<StreamSample>| {
        let mut sets = vec![Vec::new(); n];
        for s in samples {
            let d = s.truth.domain;
            sets[d].push(s);
        }
        sets
    };
    let pretrain = read_records(&dir.join("pretrain.bin"))?;
    let continual = read_records(&dir.join("continual.bin"))?;
    let validation = split_by_domain(read_records(&dir.join("validation.bin"))?);
    let test = split_by_domain(read_records(&dir.join("test.bin"))?);
    let exp = Experiment {
        domain_names: m.domain_names.clone(),
        pretrain,
        continual,
        validation,
        test,
        segment_ends: m.segment_ends.clone(),
        seed: m.seed,
    };
    if exp.manifest() != m {
        return Err(CasaError::Serde(format!(
            "dataset in {} does not match its manifest",
            dir.display()
        )));
    }
    Ok(exp)
}
