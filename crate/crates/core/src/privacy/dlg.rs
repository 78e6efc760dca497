//! Gradient-matching reconstruction ("deep leakage from gradients").
//!
//! A dummy batch of features and soft-label logits is optimized so that the
//! model gradient it induces matches an observed gradient in squared
//! Euclidean distance. Derivatives of that objective with respect to the
//! dummy inputs come from the reverse-mode tape in [`crate::autodiff`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{soft_label_gradient, Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{argmax, softmax, Batch, ModelConfig, ParamVector};
use crate::optim::lbfgs_minimize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DlgConfig {
    #[serde(default = "DlgConfig::default_iterations")]
    pub iterations: usize,
    /// L-BFGS history length.
    #[serde(default = "DlgConfig::default_memory")]
    pub memory: usize,
    /// Stop once the matching loss or its gradient norm drops below this.
    #[serde(default = "DlgConfig::default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub seed: u64,
    /// Treat exact zeros in the observed gradient as pruned and leave them
    /// out of the matching loss.
    #[serde(default = "DlgConfig::default_skip_zeros")]
    pub skip_zeros: bool,
}

impl DlgConfig {
    fn default_iterations() -> usize {
        300
    }
    fn default_memory() -> usize {
        20
    }
    fn default_tolerance() -> f64 {
        1e-24
    }
    fn default_skip_zeros() -> bool {
        true
    }

    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }
}

impl Default for DlgConfig {
    fn default() -> Self {
        Self {
            iterations: Self::default_iterations(),
            memory: Self::default_memory(),
            tolerance: Self::default_tolerance(),
            seed: 0,
            skip_zeros: Self::default_skip_zeros(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    /// Recovered features, labeled by the argmax of the soft labels.
    pub batch: Batch,
    /// Row-major soft label probabilities.
    pub soft_labels: Vec<f64>,
    pub matching_loss: f64,
    pub iterations: usize,
}

/// Starting point of the attack: features uniform in `[0, 1)`, label logits
/// standard normal. Returned as one flat vector, features first.
pub fn dummy_init(config: &ModelConfig, samples: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..samples * config.input_dim)
        .map(|_| rng.random::<f64>())
        .collect();
    x.extend((0..samples * config.num_classes).map(|_| rng.sample::<f64, _>(StandardNormal)));
    x
}

/// Matching loss `||grad(dummy) - observed||^2` and its derivative with
/// respect to the flattened dummy inputs.
pub fn matching_objective(
    params: &ParamVector,
    config: &ModelConfig,
    observed: &ParamVector,
    samples: usize,
    point: &[f64],
    skip_zeros: bool,
) -> (f64, Vec<f64>) {
    let split = samples * config.input_dim;
    let tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|&v| tape.var(v)).collect();
    let grad = soft_label_gradient(params.as_slice(), config, &vars[..split], &vars[split..]);
    let loss = grad
        .iter()
        .zip(observed.iter())
        .filter(|&(_, &o)| !(skip_zeros && o == 0.0))
        .map(|(g, &o)| {
            let d = g.add_const(-o);
            d * d
        })
        .reduce(|a, b| a + b)
        .unwrap_or_else(|| tape.var(0.0));
    let adjoint = tape.gradient(loss);
    (loss.value(), vars.iter().map(|v| adjoint[v.index()]).collect())
}

fn to_reconstruction(config: &ModelConfig, samples: usize, point: &[f64], loss: f64, iterations: usize) -> Reconstruction {
    let split = samples * config.input_dim;
    let k = config.num_classes;
    let mut soft = Vec::with_capacity(samples * k);
    let mut labels = Vec::with_capacity(samples);
    for s in 0..samples {
        let (p, _) = softmax(&point[split + s * k..split + (s + 1) * k]);
        labels.push(argmax(&p));
        soft.extend(p);
    }
    Reconstruction {
        batch: Batch::new(point[..split].to_vec(), labels, config.input_dim)
            .expect("dummy features sized from config"),
        soft_labels: soft,
        matching_loss: loss,
        iterations,
    }
}

/// Reconstruct `samples` training examples from a leaked gradient.
pub fn dlg_reconstruct(
    params: &ParamVector,
    config: &ModelConfig,
    observed_gradient: &ParamVector,
    samples: usize,
    dlg: &DlgConfig,
) -> Result<Reconstruction> {
    let d = config.param_count();
    params.check_dim(d)?;
    observed_gradient.check_dim(d)?;
    if samples == 0 {
        return Err(Error::Config("reconstruction needs at least one sample".into()));
    }
    if dlg.iterations == 0 {
        return Err(Error::Config("dlg.iterations must be at least 1".into()));
    }

    let start = dummy_init(config, samples, dlg.seed);
    let objective = |p: &[f64]| matching_objective(params, config, observed_gradient, samples, p, dlg.skip_zeros);
    match lbfgs_minimize(objective, start, dlg.iterations, dlg.memory.max(1), dlg.tolerance) {
        Ok(min) => Ok(to_reconstruction(config, samples, &min.x, min.value, min.iterations)),
        Err(nf) => Err(Error::ReconstructionDiverged {
            iteration: nf.iteration,
            last_finite: Box::new(to_reconstruction(config, samples, &nf.last_finite, f64::NAN, nf.iteration).batch),
        }),
    }
}
