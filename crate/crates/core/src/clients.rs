//! Client behaviors: honest local training and four free-rider variants.
//!
//! Free riders never touch a private shard. Plain and disguised riders replay
//! the last global update (the latter with Gaussian noise); anonymous riders
//! start from noise and selfish riders from a model trained on public data,
//! and both then evolve the replayed global update with Adam.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{backward, Batch, ModelConfig, ParamVector};
use crate::optim::{adam_step, sgd_step, AdamState};

/// How Adam-driven free riders turn the replayed global update into an
/// upload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MimicStrategy {
    /// Treat the update as the iterate and as its own gradient; upload the
    /// iterate after one Adam step.
    #[default]
    SelfGradient,
    /// Feed the negated update to Adam from a zero iterate, so the upload is
    /// the Adam step along the update's direction.
    Follow,
}

#[derive(Debug, Clone)]
pub enum ClientKind {
    Fair,
    PlainFr,
    DisguisedFr {
        sigma: f64,
    },
    AnonymousFr {
        adam: AdamState,
        /// Variance of the round-0 noise upload.
        init_variance: f64,
    },
    SelfishFr {
        adam: AdamState,
        public_data: Dataset,
        pretrain_epochs: usize,
    },
}

impl ClientKind {
    pub fn is_free_rider(&self) -> bool {
        !matches!(self, ClientKind::Fair)
    }

    pub fn label(&self) -> &'static str {
        match self {
            ClientKind::Fair => "fair",
            ClientKind::PlainFr => "plain_fr",
            ClientKind::DisguisedFr { .. } => "disguised_fr",
            ClientKind::AnonymousFr { .. } => "anonymous_fr",
            ClientKind::SelfishFr { .. } => "selfish_fr",
        }
    }
}

/// Everything the server hands a client for one round.
#[derive(Debug, Clone, Copy)]
pub struct RoundContext<'a> {
    pub round: usize,
    pub model: &'a ModelConfig,
    pub global: &'a ParamVector,
    /// `None` before any aggregation has happened.
    pub prev_global_update: Option<&'a ParamVector>,
    pub eta: f64,
    pub local_epochs: usize,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub kind: ClientKind,
    shard: Dataset,
    pub eliminated: bool,
    pub last_global: Option<ParamVector>,
    rng: ChaCha8Rng,
    private_reads: u64,
    public_reads: u64,
}

impl ClientState {
    pub fn new(id: usize, kind: ClientKind, shard: Dataset, rng: ChaCha8Rng) -> Self {
        Self {
            id,
            kind,
            shard,
            eliminated: false,
            last_global: None,
            rng,
            private_reads: 0,
            public_reads: 0,
        }
    }

    /// The private shard, for auditing peers.
    pub fn shard(&self) -> &Dataset {
        &self.shard
    }

    pub fn private_reads(&self) -> u64 {
        self.private_reads
    }

    pub fn public_reads(&self) -> u64 {
        self.public_reads
    }

    pub fn shard_len(&self) -> usize {
        self.shard.len()
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// The update this client uploads for the round, before any privacy
    /// transform.
    pub fn compute_update(&mut self, ctx: &RoundContext<'_>, strategy: MimicStrategy) -> Result<ParamVector> {
        if self.eliminated {
            return Err(Error::Config(format!("client {} is eliminated", self.id)));
        }
        let dim = ctx.model.param_count();
        let update = match &mut self.kind {
            ClientKind::Fair => {
                self.private_reads += 1;
                fair_update(&self.shard, ctx, &mut self.rng)?
            }
            ClientKind::PlainFr => plain_fr_update(ctx.prev_global_update, dim),
            ClientKind::DisguisedFr { sigma } => {
                disguised_fr_update(ctx.prev_global_update, dim, *sigma, &mut self.rng)?
            }
            ClientKind::AnonymousFr {
                adam,
                init_variance,
            } => afr_update(adam, ctx.prev_global_update, *init_variance, strategy, &mut self.rng)?,
            ClientKind::SelfishFr {
                adam,
                public_data,
                pretrain_epochs,
            } => {
                if ctx.prev_global_update.is_none() {
                    self.public_reads += 1;
                }
                sfr_update(adam, public_data, *pretrain_epochs, ctx, strategy, &mut self.rng)?
            }
        };
        self.last_global = Some(ctx.global.clone());
        Ok(update)
    }
}

/// Run `epochs` of SGD from `start` and return the trained parameters.
pub fn local_train(
    start: &ParamVector,
    model: &ModelConfig,
    data: &Batch,
    eta: f64,
    epochs: usize,
    batch_size: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<ParamVector> {
    if data.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    let mut params = start.clone();
    let full = batch_size.is_none_or(|b| b == 0 || b >= data.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..epochs {
        if full {
            let g = backward(&params, model, data)?;
            params = sgd_step(&params, &g, eta)?;
            continue;
        }
        order.shuffle(rng);
        for chunk in order.chunks(batch_size.unwrap_or(data.len())) {
            let mini = data.select(chunk);
            let g = backward(&params, model, &mini)?;
            params = sgd_step(&params, &g, eta)?;
        }
    }
    Ok(params)
}

/// Local SGD on the private shard; returns `trained - global`.
pub fn fair_update(shard: &Dataset, ctx: &RoundContext<'_>, rng: &mut ChaCha8Rng) -> Result<ParamVector> {
    if shard.is_empty() {
        return Err(Error::Config("fair client has an empty shard".into()));
    }
    let trained = local_train(
        ctx.global,
        ctx.model,
        &shard.samples,
        ctx.eta,
        ctx.local_epochs,
        ctx.batch_size,
        rng,
    )?;
    Ok(trained.sub(ctx.global))
}

/// Replays the previous global update; zeros before the first aggregation.
pub fn plain_fr_update(prev_global_update: Option<&ParamVector>, dim: usize) -> ParamVector {
    prev_global_update
        .cloned()
        .unwrap_or_else(|| ParamVector::zeros(dim))
}

fn gaussian(dim: usize, std: f64, rng: &mut ChaCha8Rng) -> Result<ParamVector> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::Domain(format!("noise scale {std} is invalid")));
    }
    if std == 0.0 {
        return Ok(ParamVector::zeros(dim));
    }
    let normal = Normal::new(0.0, std).expect("valid std");
    Ok(ParamVector::new((0..dim).map(|_| normal.sample(rng)).collect()))
}

/// Previous global update plus `N(0, sigma^2)` noise per coordinate.
pub fn disguised_fr_update(
    prev_global_update: Option<&ParamVector>,
    dim: usize,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ParamVector> {
    let base = plain_fr_update(prev_global_update, dim);
    if sigma == 0.0 {
        return Ok(base);
    }
    Ok(base.add(&gaussian(dim, sigma, rng)?))
}

fn adam_mimic(adam: &mut AdamState, prev: &ParamVector, strategy: MimicStrategy) -> Result<ParamVector> {
    let (out, next) = match strategy {
        MimicStrategy::SelfGradient => adam_step(adam, prev, prev)?,
        MimicStrategy::Follow => adam_step(adam, &ParamVector::zeros(prev.dim()), &prev.scale(-1.0))?,
    };
    *adam = next;
    Ok(out)
}

/// Round 0: Gaussian noise. Later rounds: one Adam step on the replayed
/// global update.
pub fn afr_update(
    adam: &mut AdamState,
    prev_global_update: Option<&ParamVector>,
    init_variance: f64,
    strategy: MimicStrategy,
    rng: &mut ChaCha8Rng,
) -> Result<ParamVector> {
    match prev_global_update {
        None => gaussian(adam.dim(), init_variance.max(0.0).sqrt(), rng),
        Some(prev) => adam_mimic(adam, prev, strategy),
    }
}

/// Round 0: train on public data for `pretrain_epochs` and upload the delta.
/// Later rounds: as [`afr_update`].
pub fn sfr_update(
    adam: &mut AdamState,
    public_data: &Dataset,
    pretrain_epochs: usize,
    ctx: &RoundContext<'_>,
    strategy: MimicStrategy,
    rng: &mut ChaCha8Rng,
) -> Result<ParamVector> {
    if public_data.is_empty() {
        return Err(Error::Config("selfish free rider needs public data".into()));
    }
    match ctx.prev_global_update {
        None => {
            let pretrain = RoundContext {
                local_epochs: pretrain_epochs,
                ..*ctx
            };
            fair_update(public_data, &pretrain, rng)
        }
        Some(prev) => adam_mimic(adam, prev, strategy),
    }
}
