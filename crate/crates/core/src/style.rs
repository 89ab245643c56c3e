//! Gram-matrix style embeddings.
//!
//! An image is passed through a fixed, seeded convolutional feature bank. Each
//! layer's feature maps are summarized by their normalized gram matrix, the
//! upper triangles (diagonal included) are concatenated, and the result is
//! reduced with a very sparse random projection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CasaError, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Nonlinearity {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Nonlinearity::Identity => v,
            Nonlinearity::Relu => v.max(0.0),
            Nonlinearity::Tanh => v.tanh(),
            Nonlinearity::Sigmoid => 1.0 / (1.0 + (-v).exp()),
        }
    }
}

/// Shape of one layer of the feature bank.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub kernels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub nonlinearity: Nonlinearity,
    /// Centre every kernel so it ignores constant input. Gram statistics then
    /// follow texture and edges rather than overall brightness.
    #[serde(default)]
    pub zero_mean: bool,
}

/// A single strided "valid" convolution layer without bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    in_channels: usize,
    out_channels: usize,
    kernel_size: usize,
    stride: usize,
    nonlinearity: Nonlinearity,
    /// Layout: `[out][in][ky][kx]`.
    weights: Vec<f64>,
}

impl ConvLayer {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        nonlinearity: Nonlinearity,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let expected = out_channels * in_channels * kernel_size * kernel_size;
        if weights.len() != expected {
            return Err(CasaError::DimensionMismatch {
                expected,
                actual: weights.len(),
                context: "convolution weights",
            });
        }
        if in_channels == 0 || out_channels == 0 || kernel_size == 0 || stride == 0 {
            return Err(CasaError::Config(
                "convolution layer dimensions must be positive".into(),
            ));
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel_size,
            stride,
            nonlinearity,
            weights,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    fn output_shape(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h < self.kernel_size || w < self.kernel_size {
            return Err(CasaError::Config(format!(
                "feature map {h}x{w} smaller than kernel {k}x{k}",
                k = self.kernel_size
            )));
        }
        Ok((
            (h - self.kernel_size) / self.stride + 1,
            (w - self.kernel_size) / self.stride + 1,
        ))
    }

    fn forward(&self, input: &FeatureMaps) -> Result<FeatureMaps> {
        if input.maps.len() != self.in_channels {
            return Err(CasaError::DimensionMismatch {
                expected: self.in_channels,
                actual: input.maps.len(),
                context: "layer input channels",
            });
        }
        let (oh, ow) = self.output_shape(input.height, input.width)?;
        let k = self.kernel_size;
        let mut maps = Vec::with_capacity(self.out_channels);
        for o in 0..self.out_channels {
            let mut out = vec![0.0; oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..self.in_channels {
                        let src = &input.maps[c];
                        let wbase = ((o * self.in_channels) + c) * k * k;
                        for ky in 0..k {
                            let row = (oy * self.stride + ky) * input.width + ox * self.stride;
                            for kx in 0..k {
                                acc += self.weights[wbase + ky * k + kx] * src[row + kx];
                            }
                        }
                    }
                    out[oy * ow + ox] = self.nonlinearity.apply(acc);
                }
            }
            maps.push(out);
        }
        Ok(FeatureMaps {
            height: oh,
            width: ow,
            maps,
        })
    }
}

/// Stack of same-shaped feature maps produced by one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMaps {
    pub height: usize,
    pub width: usize,
    pub maps: Vec<Vec<f64>>,
}

/// Fixed convolutional feature bank standing in for a pretrained style network.
/// Weights never change after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    input_height: usize,
    input_width: usize,
    layers: Vec<ConvLayer>,
}

impl FeatureBank {
    /// Draws every kernel weight from `N(0, 1/fan_in)` using `seed`; kernels
    /// of `zero_mean` layers are then shifted to sum to zero.
    pub fn seeded(
        input_height: usize,
        input_width: usize,
        specs: &[LayerSpec],
        seed: u64,
    ) -> Result<Self> {
        if specs.is_empty() {
            return Err(CasaError::Config("feature bank needs at least one layer".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(specs.len());
        let mut in_channels = 1;
        for spec in specs {
            let fan_in = (in_channels * spec.kernel_size * spec.kernel_size).max(1);
            let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt())
                .map_err(|e| CasaError::Config(e.to_string()))?;
            let n = spec.kernels * fan_in;
            let mut weights: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
            if spec.zero_mean {
                for kernel in weights.chunks_mut(fan_in) {
                    let mean = kernel.iter().sum::<f64>() / fan_in as f64;
                    kernel.iter_mut().for_each(|w| *w -= mean);
                }
            }
            layers.push(ConvLayer::new(
                in_channels,
                spec.kernels,
                spec.kernel_size,
                spec.stride,
                spec.nonlinearity,
                weights,
            )?);
            in_channels = spec.kernels;
        }
        Self::from_layers(input_height, input_width, layers)
    }

    pub fn from_layers(input_height: usize, input_width: usize, layers: Vec<ConvLayer>) -> Result<Self> {
        let bank = Self {
            input_height,
            input_width,
            layers,
        };
        // validate shapes end to end
        let (mut h, mut w, mut c) = (input_height, input_width, 1);
        for layer in &bank.layers {
            if layer.in_channels != c {
                return Err(CasaError::DimensionMismatch {
                    expected: c,
                    actual: layer.in_channels,
                    context: "layer input channels",
                });
            }
            (h, w) = layer.output_shape(h, w)?;
            c = layer.out_channels;
        }
        Ok(bank)
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    /// Length of the concatenated upper-triangular gram vector.
    pub fn raw_dim(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.out_channels * (l.out_channels + 1) / 2)
            .sum()
    }

    pub fn apply(&self, img: &Image) -> Result<Vec<FeatureMaps>> {
        if img.height() != self.input_height || img.width() != self.input_width {
            return Err(CasaError::DimensionMismatch {
                expected: self.input_height * self.input_width,
                actual: img.height() * img.width(),
                context: "image shape vs feature bank",
            });
        }
        let mut current = FeatureMaps {
            height: img.height(),
            width: img.width(),
            maps: vec![img.pixels().to_vec()],
        };
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            current = layer.forward(&current)?;
            out.push(current.clone());
        }
        Ok(out)
    }
}

/// Normalized gram matrix `G_ij = <f_i, f_j> / (N * M)`, row-major `N x N`.
pub fn gram_matrix(maps: &FeatureMaps) -> Result<Vec<f64>> {
    let n = maps.maps.len();
    if n == 0 {
        return Err(CasaError::Empty("gram matrix of zero feature maps"));
    }
    let m = maps.maps[0].len();
    if m == 0 {
        return Err(CasaError::Empty("gram matrix of empty feature maps"));
    }
    if let Some(bad) = maps.maps.iter().find(|f| f.len() != m) {
        return Err(CasaError::DimensionMismatch {
            expected: m,
            actual: bad.len(),
            context: "feature map length",
        });
    }
    let norm = 1.0 / (n as f64 * m as f64);
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let dot: f64 = maps.maps[i]
                .iter()
                .zip(&maps.maps[j])
                .map(|(a, b)| a * b)
                .sum();
            g[i * n + j] = dot * norm;
            g[j * n + i] = dot * norm;
        }
    }
    Ok(g)
}

/// Upper triangle of a row-major `n x n` matrix, diagonal included.
pub fn upper_triangle(g: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        out.extend_from_slice(&g[i * n + i..(i + 1) * n]);
    }
    out
}

/// Fixed-length style descriptor of an image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StyleEmbedding(pub Vec<f64>);

impl StyleEmbedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn sq_distance(&self, other: &StyleEmbedding) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn distance(&self, other: &StyleEmbedding) -> f64 {
        self.sq_distance(other).sqrt()
    }
}

/// Very sparse random projection: entries are `+-sqrt(s/E)` with probability
/// `1/(2s)` each and zero otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseProjection {
    input_dim: usize,
    output_dim: usize,
    sparsity: f64,
    seed: u64,
    /// Per output coordinate: `(input index, weight)` in increasing input order.
    columns: Vec<Vec<(usize, f64)>>,
}

impl SparseProjection {
    /// `sparsity = None` selects `s = sqrt(input_dim)`.
    pub fn new(input_dim: usize, output_dim: usize, sparsity: Option<f64>, seed: u64) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(CasaError::Config("projection dimensions must be positive".into()));
        }
        let s = sparsity.unwrap_or_else(|| (input_dim as f64).sqrt());
        if !(s >= 1.0) {
            return Err(CasaError::Config(format!("projection sparsity {s} must be >= 1")));
        }
        let scale = (s / output_dim as f64).sqrt();
        let half = 1.0 / (2.0 * s);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut columns = vec![Vec::new(); output_dim];
        for i in 0..input_dim {
            for col in columns.iter_mut() {
                let u: f64 = rng.random();
                if u < half {
                    col.push((i, scale));
                } else if u < 2.0 * half {
                    col.push((i, -scale));
                }
            }
        }
        Ok(Self {
            input_dim,
            output_dim,
            sparsity: s,
            seed,
            columns,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn sparsity(&self) -> f64 {
        self.sparsity
    }

    pub fn nonzeros(&self) -> usize {
        self.columns.iter().map(Vec::len).sum()
    }

    /// Iterates `(input, output, weight)` over nonzero entries.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.columns
            .iter()
            .enumerate()
            .flat_map(|(j, col)| col.iter().map(move |&(i, v)| (i, j, v)))
    }

    pub fn project(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.input_dim {
            return Err(CasaError::DimensionMismatch {
                expected: self.input_dim,
                actual: raw.len(),
                context: "projection input",
            });
        }
        Ok(self
            .columns
            .iter()
            .map(|col| col.iter().map(|&(i, v)| v * raw[i]).sum())
            .collect())
    }
}

/// Style encoder bundling the feature bank and projection of one experiment.
#[derive(Debug, Clone)]
pub struct StyleEncoder {
    bank: FeatureBank,
    projection: SparseProjection,
}

impl StyleEncoder {
    pub fn new(bank: FeatureBank, projection: SparseProjection) -> Result<Self> {
        if projection.input_dim() != bank.raw_dim() {
            return Err(CasaError::DimensionMismatch {
                expected: bank.raw_dim(),
                actual: projection.input_dim(),
                context: "projection input vs gram vector",
            });
        }
        Ok(Self { bank, projection })
    }

    pub fn bank(&self) -> &FeatureBank {
        &self.bank
    }

    pub fn projection(&self) -> &SparseProjection {
        &self.projection
    }

    pub fn dim(&self) -> usize {
        self.projection.output_dim()
    }

    /// Concatenated upper-triangular gram entries over all layers.
    pub fn raw_gram_vector(&self, img: &Image) -> Result<Vec<f64>> {
        let layers = self.bank.apply(img)?;
        let mut raw = Vec::with_capacity(self.bank.raw_dim());
        for maps in &layers {
            let g = gram_matrix(maps)?;
            raw.extend(upper_triangle(&g, maps.maps.len()));
        }
        Ok(raw)
    }

    pub fn embed(&self, img: &Image) -> Result<StyleEmbedding> {
        let raw = self.raw_gram_vector(img)?;
        Ok(StyleEmbedding(self.projection.project(&raw)?))
    }

    /// Embeds a batch in parallel; output order follows input order.
    pub fn embed_batch(&self, imgs: &[&Image]) -> Result<Vec<StyleEmbedding>> {
        imgs.par_iter().map(|img| self.embed(img)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_bank(h: usize, w: usize) -> FeatureBank {
        let layer = ConvLayer::new(1, 1, 1, 1, Nonlinearity::Identity, vec![1.0]).unwrap();
        FeatureBank::from_layers(h, w, vec![layer]).unwrap()
    }

    fn default_specs() -> Vec<LayerSpec> {
        vec![
            LayerSpec {
                kernels: 8,
                kernel_size: 3,
                stride: 2,
                nonlinearity: Nonlinearity::Relu,
                zero_mean: false,
            };
            2
        ]
    }

    fn test_image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = (0..32 * 32).map(|_| rng.random::<f64>()).collect();
        Image::new(32, 32, px).unwrap()
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let img = test_image(3);
        let maps = identity_bank(32, 32).apply(&img).unwrap();
        assert_eq!(maps.len(), 1);
        assert_eq!(maps[0].maps[0], img.pixels());
    }

    #[test]
    fn zero_image_gives_zero_maps() {
        let bank = FeatureBank::seeded(32, 32, &default_specs(), 7).unwrap();
        let maps = bank.apply(&Image::zeros(32, 32)).unwrap();
        assert!(maps.iter().all(|l| l.maps.iter().flatten().all(|&v| v == 0.0)));

        // sigmoid is not zero-preserving: zero pre-activations map to 0.5
        let spec = LayerSpec {
            kernels: 2,
            kernel_size: 3,
            stride: 1,
            nonlinearity: Nonlinearity::Sigmoid,
            zero_mean: false,
        };
        let bank = FeatureBank::seeded(8, 8, &[spec], 1).unwrap();
        let maps = bank.apply(&Image::zeros(8, 8)).unwrap();
        assert!(maps[0].maps.iter().flatten().all(|&v| v == 0.5));
    }

    #[test]
    fn feature_bank_shapes_and_determinism() {
        let a = FeatureBank::seeded(32, 32, &default_specs(), 11).unwrap();
        let b = FeatureBank::seeded(32, 32, &default_specs(), 11).unwrap();
        assert_eq!(a, b);
        let img = test_image(5);
        let ma = a.apply(&img).unwrap();
        let mb = b.apply(&img).unwrap();
        assert_eq!(ma, mb);
        assert_eq!((ma[0].height, ma[0].width, ma[0].maps.len()), (15, 15, 8));
        assert_eq!((ma[1].height, ma[1].width, ma[1].maps.len()), (7, 7, 8));
        assert_eq!(a.raw_dim(), 72);
    }

    #[test]
    fn feature_bank_rejects_wrong_image_shape() {
        let bank = FeatureBank::seeded(32, 32, &default_specs(), 11).unwrap();
        assert!(matches!(
            bank.apply(&Image::zeros(16, 32)),
            Err(CasaError::DimensionMismatch { .. })
        ));
        assert!(FeatureBank::seeded(2, 2, &default_specs(), 0).is_err());
    }

    #[test]
    fn gram_examples() {
        let one = FeatureMaps {
            height: 2,
            width: 2,
            maps: vec![vec![1.0; 4]],
        };
        assert_eq!(gram_matrix(&one).unwrap(), vec![1.0]);

        let ortho = FeatureMaps {
            height: 1,
            width: 2,
            maps: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        };
        assert_eq!(gram_matrix(&ortho).unwrap(), vec![0.25, 0.0, 0.0, 0.25]);
    }

    #[test]
    fn gram_rejects_empty() {
        let none = FeatureMaps {
            height: 0,
            width: 0,
            maps: vec![],
        };
        assert!(gram_matrix(&none).is_err());
        let hollow = FeatureMaps {
            height: 0,
            width: 0,
            maps: vec![vec![]],
        };
        assert!(gram_matrix(&hollow).is_err());
    }

    #[test]
    fn upper_triangle_order() {
        let g = vec![1.0, 2.0, 3.0, 2.0, 4.0, 5.0, 3.0, 5.0, 6.0];
        assert_eq!(upper_triangle(&g, 3), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn projection_entries_follow_sparse_scheme() {
        let p = SparseProjection::new(400, 64, None, 9).unwrap();
        let s = 20.0;
        assert_eq!(p.sparsity(), s);
        let v = (s / 64.0_f64).sqrt();
        assert!(p.entries().all(|(_, _, w)| w == v || w == -v));
        let frac = p.nonzeros() as f64 / (400.0 * 64.0);
        assert!((frac - 1.0 / s).abs() < 0.01, "nonzero fraction {frac}");
    }

    #[test]
    fn zero_image_embeds_to_zero() {
        let bank = FeatureBank::seeded(32, 32, &default_specs(), 1).unwrap();
        let proj = SparseProjection::new(bank.raw_dim(), 64, None, 2).unwrap();
        let enc = StyleEncoder::new(bank, proj).unwrap();
        let e = enc.embed(&Image::zeros(32, 32)).unwrap();
        assert_eq!(e.dim(), 64);
        assert!(e.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_rejects_mismatched_projection() {
        let bank = FeatureBank::seeded(32, 32, &default_specs(), 1).unwrap();
        let proj = SparseProjection::new(71, 64, None, 2).unwrap();
        assert!(StyleEncoder::new(bank, proj).is_err());
    }

    #[test]
    fn batch_embedding_matches_single() {
        let bank = FeatureBank::seeded(32, 32, &default_specs(), 1).unwrap();
        let proj = SparseProjection::new(bank.raw_dim(), 64, None, 2).unwrap();
        let enc = StyleEncoder::new(bank, proj).unwrap();
        let imgs: Vec<Image> = (0..6).map(test_image).collect();
        let refs: Vec<&Image> = imgs.iter().collect();
        let batch = enc.embed_batch(&refs).unwrap();
        for (img, e) in imgs.iter().zip(&batch) {
            assert_eq!(&enc.embed(img).unwrap(), e);
        }
    }
}
