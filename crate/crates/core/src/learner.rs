//! Small feed-forward regressor trained with plain SGD on mean absolute error.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CasaError, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// He-normal hidden weights, zero biases.
    He,
    /// All parameters zero.
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerSpec {
    /// Hidden layer widths; empty gives a linear model.
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub init: Init,
}

impl Default for LearnerSpec {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            learning_rate: 1e-3,
            init: Init::He,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Dense {
    inputs: usize,
    outputs: usize,
    /// Row-major `[outputs][inputs]`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Dense {
    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.outputs {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            let dot: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum();
            out.push(dot + self.bias[o]);
        }
    }

    fn n_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Absolute error of one prediction.
pub fn metric(pred: f64, truth: f64) -> f64 {
    (pred - truth).abs()
}

/// Mean absolute error over `(prediction, truth)` pairs.
pub fn mean_absolute_error(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(CasaError::Empty("mean absolute error of no pairs"));
    }
    Ok(pairs.iter().map(|&(p, t)| metric(p, t)).sum::<f64>() / pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLearner {
    layers: Vec<Dense>,
    learning_rate: f64,
    /// Predictions are `offset + scale * network(x)`.
    label_offset: f64,
    label_scale: f64,
    /// Subtracted from every input before the first layer; empty means none.
    input_mean: Vec<f64>,
    steps: u64,
}

impl TaskLearner {
    pub fn new(input_dim: usize, spec: &LearnerSpec, seed: u64) -> Result<Self> {
        if input_dim == 0 || spec.hidden.contains(&0) {
            return Err(CasaError::Config("learner layer widths must be positive".into()));
        }
        if !(spec.learning_rate > 0.0 && spec.learning_rate.is_finite()) {
            return Err(CasaError::Config(format!(
                "learning rate must be positive, got {}",
                spec.learning_rate
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![input_dim];
        widths.extend(&spec.hidden);
        widths.push(1);
        let last = widths.len() - 2;
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (l, pair) in widths.windows(2).enumerate() {
            let (inputs, outputs) = (pair[0], pair[1]);
            let weights = match spec.init {
                Init::Zero => vec![0.0; inputs * outputs],
                Init::He => {
                    let gain = if l == last { 1.0 } else { 2.0 };
                    let normal = Normal::new(0.0, (gain / inputs as f64).sqrt())
                        .map_err(|e| CasaError::Config(e.to_string()))?;
                    (0..inputs * outputs).map(|_| normal.sample(&mut rng)).collect()
                }
            };
            layers.push(Dense {
                inputs,
                outputs,
                weights,
                bias: vec![0.0; outputs],
            });
        }
        Ok(Self {
            layers,
            learning_rate: spec.learning_rate,
            label_offset: 0.0,
            label_scale: 1.0,
            input_mean: Vec::new(),
            steps: 0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Dense::n_params).sum()
    }

    /// Fixes the affine output map so the network works on standardized labels.
    pub fn set_label_scaling(&mut self, offset: f64, scale: f64) -> Result<()> {
        if !(scale > 0.0 && scale.is_finite() && offset.is_finite()) {
            return Err(CasaError::Config(format!("invalid label scaling ({offset}, {scale})")));
        }
        self.label_offset = offset;
        self.label_scale = scale;
        Ok(())
    }

    /// Fixes a per-feature offset removed from every input.
    pub fn set_input_centering(&mut self, mean: Vec<f64>) -> Result<()> {
        if mean.len() != self.input_dim() {
            return Err(CasaError::DimensionMismatch {
                expected: self.input_dim(),
                actual: mean.len(),
                context: "input centering",
            });
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(CasaError::Config("input centering must be finite".into()));
        }
        self.input_mean = mean;
        Ok(())
    }

    /// Flattened parameters: per layer, weights then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend(&l.weights);
            out.extend(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(CasaError::DimensionMismatch {
                expected: self.n_params(),
                actual: params.len(),
                context: "learner parameters",
            });
        }
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&params[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    /// Activations of every layer; hidden layers are rectified, the output is linear.
    fn forward(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len() + 1);
        if self.input_mean.is_empty() {
            acts.push(x.to_vec());
        } else {
            acts.push(x.iter().zip(&self.input_mean).map(|(v, m)| v - m).collect());
        }
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.outputs);
            layer.forward(&acts[l], &mut out);
            if l != last {
                for v in &mut out {
                    *v = v.max(0.0);
                }
            }
            acts.push(out);
        }
        acts
    }

    pub fn predict_raw(&self, x: &[f64]) -> f64 {
        let acts = self.forward(x);
        self.label_offset + self.label_scale * acts[acts.len() - 1][0]
    }

    pub fn predict(&self, img: &Image) -> f64 {
        self.predict_raw(img.pixels())
    }

    /// Mean absolute error of a batch and its gradient w.r.t. [`Self::params`].
    /// The subgradient at a zero residual is 0.
    pub fn loss_and_grad(&self, batch: &[(&[f64], f64)]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(CasaError::Empty("training batch"));
        }
        let n = batch.len() as f64;
        let mut grads: Vec<(Vec<f64>, Vec<f64>)> = self
            .layers
            .iter()
            .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
            .collect();
        let mut loss = 0.0;
        for &(x, y) in batch {
            if x.len() != self.input_dim() {
                return Err(CasaError::DimensionMismatch {
                    expected: self.input_dim(),
                    actual: x.len(),
                    context: "learner input",
                });
            }
            let acts = self.forward(x);
            let pred = self.label_offset + self.label_scale * acts[acts.len() - 1][0];
            let residual = pred - y;
            loss += residual.abs();
            let sign = if residual > 0.0 {
                1.0
            } else if residual < 0.0 {
                -1.0
            } else {
                0.0
            };
            let mut delta = vec![sign * self.label_scale / n];
            for l in (0..self.layers.len()).rev() {
                let layer = &self.layers[l];
                let input = &acts[l];
                let (gw, gb) = &mut grads[l];
                for o in 0..layer.outputs {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                    for (g, v) in row.iter_mut().zip(input) {
                        *g += d * v;
                    }
                }
                if l > 0 {
                    let mut prev = vec![0.0; layer.inputs];
                    for o in 0..layer.outputs {
                        let d = delta[o];
                        if d == 0.0 {
                            continue;
                        }
                        let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                        for (p, w) in prev.iter_mut().zip(row) {
                            *p += d * w;
                        }
                    }
                    // rectifier derivative of the hidden layer feeding this one
                    for (p, a) in prev.iter_mut().zip(input) {
                        if *a <= 0.0 {
                            *p = 0.0;
                        }
                    }
                    delta = prev;
                }
            }
        }
        let mut flat = Vec::with_capacity(self.n_params());
        for (gw, gb) in grads {
            flat.extend(gw);
            flat.extend(gb);
        }
        Ok((loss / n, flat))
    }

    /// One SGD update; returns the loss before the update.
    pub fn train_step(&mut self, batch: &[(&Image, f64)]) -> Result<f64> {
        let raw: Vec<(&[f64], f64)> = batch.iter().map(|(img, y)| (img.pixels(), *y)).collect();
        self.train_step_raw(&raw)
    }

    pub fn train_step_raw(&mut self, batch: &[(&[f64], f64)]) -> Result<f64> {
        let (loss, grad) = self.loss_and_grad(batch)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(CasaError::Divergence {
                step: self.steps,
                loss,
            });
        }
        let lr = self.learning_rate;
        let mut at = 0;
        for l in &mut self.layers {
            for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *w -= lr * grad[at];
                at += 1;
            }
        }
        self.steps += 1;
        Ok(loss)
    }

    /// Epoch-based training on shuffled mini-batches; returns validation MAE.
    pub fn pretrain<R: Rng + ?Sized>(
        &mut self,
        train: &[(&Image, f64)],
        validation: &[(&Image, f64)],
        epochs: usize,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<f64> {
        if batch_size == 0 {
            return Err(CasaError::Config("batch size must be >= 1".into()));
        }
        if train.len() < batch_size {
            return Err(CasaError::Config(format!(
                "pretraining set of {} is smaller than batch size {batch_size}",
                train.len()
            )));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        for _ in 0..epochs {
            order.shuffle(rng);
            for chunk in order.chunks(batch_size) {
                let batch: Vec<(&Image, f64)> = chunk.iter().map(|&i| train[i]).collect();
                self.train_step(&batch)?;
            }
        }
        self.evaluate(validation)
    }

    pub fn evaluate(&self, data: &[(&Image, f64)]) -> Result<f64> {
        let pairs: Vec<(f64, f64)> = data.iter().map(|(img, y)| (self.predict(img), *y)).collect();
        mean_absolute_error(&pairs)
    }

    /// Little-endian `f64` parameter blob.
    pub fn to_blob(&self) -> Vec<u8> {
        self.params().iter().flat_map(|p| p.to_le_bytes()).collect()
    }
}
