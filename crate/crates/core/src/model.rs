//! Multilayer perceptron with tanh hidden units and a softmax
//! cross-entropy head.
//!
//! Every function here works on a flat [`ParamVector`]. The layout is
//! layer by layer: the `fan_out x fan_in` weight matrix in row-major order,
//! followed by the `fan_out` biases. With no hidden layers the model is a
//! plain multinomial logistic regression.

use std::ops::{Index, IndexMut};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
}

/// Position of one dense layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerShape {
    #[inline]
    pub fn weight(&self, out: usize, inp: usize) -> usize {
        self.weight_offset + out * self.fan_in + inp
    }
}

impl ModelConfig {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Result<Self> {
        let config = Self {
            input_dim,
            hidden_dims,
            num_classes,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn linear(input_dim: usize, num_classes: usize) -> Result<Self> {
        Self::new(input_dim, Vec::new(), num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn layers(&self) -> Vec<LayerShape> {
        let mut widths = Vec::with_capacity(self.hidden_dims.len() + 2);
        widths.push(self.input_dim);
        widths.extend_from_slice(&self.hidden_dims);
        widths.push(self.num_classes);

        let mut offset = 0;
        widths
            .windows(2)
            .map(|w| {
                let shape = LayerShape {
                    fan_in: w[0],
                    fan_out: w[1],
                    weight_offset: offset,
                    bias_offset: offset + w[0] * w[1],
                };
                offset += w[0] * w[1] + w[1];
                shape
            })
            .collect()
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|l| l.fan_in * l.fan_out + l.fan_out)
            .sum()
    }
}

/// Flat vector of model parameters, or of an update to them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn check_dim(&self, expected: usize) -> Result<()> {
        if self.dim() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: self.dim(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &ParamVector) -> ParamVector {
        debug_assert_eq!(self.dim(), other.dim());
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        debug_assert_eq!(self.dim(), other.dim());
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn scale(&self, factor: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|v| v * factor).collect())
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Cosine similarity; `None` when either vector has zero norm.
    pub fn cosine(&self, other: &ParamVector) -> Option<f64> {
        let denom = self.norm() * other.norm();
        if denom == 0.0 || !denom.is_finite() {
            return None;
        }
        Some((self.dot(other) / denom).clamp(-1.0, 1.0))
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for ParamVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

/// Row-major feature matrix with integer labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    features: Vec<f64>,
    labels: Vec<usize>,
    input_dim: usize,
}

impl Batch {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, input_dim: usize) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Config("batch input_dim must be positive".into()));
        }
        if features.len() != labels.len() * input_dim {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * input_dim,
                actual: features.len(),
            });
        }
        Ok(Self {
            features,
            labels,
            input_dim,
        })
    }

    pub fn empty(input_dim: usize) -> Self {
        Self {
            features: Vec::new(),
            labels: Vec::new(),
            input_dim,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    /// New batch made of the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Batch {
        let mut features = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Batch {
            features,
            labels,
            input_dim: self.input_dim,
        }
    }
}

fn check_inputs(params: &ParamVector, config: &ModelConfig, batch: &Batch) -> Result<()> {
    params.check_dim(config.param_count())?;
    if batch.input_dim() != config.input_dim {
        return Err(Error::DimensionMismatch {
            expected: config.input_dim,
            actual: batch.input_dim(),
        });
    }
    if batch.is_empty() {
        return Err(Error::Config("batch is empty".into()));
    }
    if let Some(&bad) = batch.labels().iter().find(|&&y| y >= config.num_classes) {
        return Err(Error::Config(format!(
            "label {bad} out of range for {} classes",
            config.num_classes
        )));
    }
    Ok(())
}

/// Weights uniform in +-1/sqrt(fan_in), biases zero.
pub fn init_params(config: &ModelConfig, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = vec![0.0; config.param_count()];
    for layer in config.layers() {
        let bound = 1.0 / (layer.fan_in as f64).sqrt();
        for w in &mut params[layer.weight_offset..layer.bias_offset] {
            *w = rng.random_range(-bound..bound);
        }
    }
    ParamVector(params)
}

/// Activations of every layer for a single sample; the last entry holds the
/// logits.
fn forward_sample(params: &[f64], layers: &[LayerShape], x: &[f64]) -> Vec<Vec<f64>> {
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(layers.len() + 1);
    acts.push(x.to_vec());
    for (li, layer) in layers.iter().enumerate() {
        let input = &acts[li];
        let w = &params[layer.weight_offset..layer.bias_offset];
        let b = &params[layer.bias_offset..layer.bias_offset + layer.fan_out];
        let last = li + 1 == layers.len();
        let out: Vec<f64> = (0..layer.fan_out)
            .map(|o| {
                let row = &w[o * layer.fan_in..(o + 1) * layer.fan_in];
                let z = b[o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                if last {
                    z
                } else {
                    z.tanh()
                }
            })
            .collect();
        acts.push(out);
    }
    acts
}

/// Numerically stable softmax, returning the probabilities and log-sum-exp.
pub(crate) fn softmax(logits: &[f64]) -> (Vec<f64>, f64) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let lse = max + sum.ln();
    (exps.into_iter().map(|e| e / sum).collect(), lse)
}

/// Index of the largest logit; the first one wins ties.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-sample logits, concatenated row by row.
pub fn predict_logits(params: &ParamVector, config: &ModelConfig, batch: &Batch) -> Result<Vec<f64>> {
    params.check_dim(config.param_count())?;
    if batch.input_dim() != config.input_dim {
        return Err(Error::DimensionMismatch {
            expected: config.input_dim,
            actual: batch.input_dim(),
        });
    }
    let layers = config.layers();
    let mut out = Vec::with_capacity(batch.len() * config.num_classes);
    for i in 0..batch.len() {
        let acts = forward_sample(params.as_slice(), &layers, batch.row(i));
        out.extend_from_slice(acts.last().expect("at least one layer"));
    }
    Ok(out)
}

/// Mean cross-entropy and argmax accuracy.
pub fn forward_loss(params: &ParamVector, config: &ModelConfig, batch: &Batch) -> Result<(f64, f64)> {
    check_inputs(params, config, batch)?;
    let layers = config.layers();
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (i, &y) in batch.labels().iter().enumerate() {
        let acts = forward_sample(params.as_slice(), &layers, batch.row(i));
        let logits = acts.last().expect("at least one layer");
        let (_, lse) = softmax(logits);
        loss += lse - logits[y];
        if argmax(logits) == y {
            correct += 1;
        }
    }
    let n = batch.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Fraction of samples whose argmax prediction matches the label.
pub fn accuracy(params: &ParamVector, config: &ModelConfig, dataset: &Batch) -> Result<f64> {
    check_inputs(params, config, dataset)?;
    let layers = config.layers();
    let correct = dataset
        .labels()
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let acts = forward_sample(params.as_slice(), &layers, dataset.row(i));
            argmax(acts.last().expect("at least one layer")) == y
        })
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}

/// Gradient of the mean cross-entropy with respect to every parameter.
pub fn backward(params: &ParamVector, config: &ModelConfig, batch: &Batch) -> Result<ParamVector> {
    check_inputs(params, config, batch)?;
    let layers = config.layers();
    let p = params.as_slice();
    let mut grad = vec![0.0; p.len()];

    for (i, &y) in batch.labels().iter().enumerate() {
        let acts = forward_sample(p, &layers, batch.row(i));
        let (mut delta, _) = softmax(acts.last().expect("at least one layer"));
        delta[y] -= 1.0;

        for (li, layer) in layers.iter().enumerate().rev() {
            let input = &acts[li];
            for o in 0..layer.fan_out {
                let d = delta[o];
                grad[layer.bias_offset + o] += d;
                let row = &mut grad[layer.weight(o, 0)..layer.weight(o, 0) + layer.fan_in];
                for (g, a) in row.iter_mut().zip(input) {
                    *g += d * a;
                }
            }
            if li == 0 {
                break;
            }
            // Propagate through W^T and the tanh of the layer below.
            let mut next = vec![0.0; layer.fan_in];
            for o in 0..layer.fan_out {
                let d = delta[o];
                let row = &p[layer.weight(o, 0)..layer.weight(o, 0) + layer.fan_in];
                for (n, w) in next.iter_mut().zip(row) {
                    *n += d * w;
                }
            }
            for (n, a) in next.iter_mut().zip(input) {
                *n *= 1.0 - a * a;
            }
            delta = next;
        }
    }

    let n = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok(ParamVector(grad))
}
