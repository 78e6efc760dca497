//! The round loop.
//!
//! Round `r` runs in two phases. First the uploads of round `r - 1` are
//! scored against `theta_r` and `theta_{r-1}` and low scorers are
//! eliminated. Then every remaining client computes an upload from
//! `theta_r`, the server aggregates, and `theta_{r+1}` is logged.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{coord_median, fedavg, signsgd_aggregate, trimmed_mean, AggregatorKind};
use crate::clients::{ClientKind, ClientState, RoundContext};
use crate::data::{generate_synthetic, load_idx, partition, Dataset, PartitionSpec};
use crate::defense::{
    apply_pass_reports, audit_against, dsr, fpr, pass_eliminate, rffl_contribution_step, AuditMatrix,
    ContributionLedger, DefenseKind, ThresholdPopulation,
};
use crate::error::{Error, Result};
use crate::model::{accuracy, init_params, ModelConfig, ParamVector};
use crate::optim::AdamState;
use crate::privacy::{privatize, pruned_count};

use super::config::{DataSource, ExperimentConfig};

const STREAM_DATA: u64 = 1;
const STREAM_PARTITION: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_CLIENT: u64 = 4;
const STREAM_PRIVACY: u64 = 5;

/// Independent generator for `(seed, tag, id)`.
pub fn derive_rng(seed: u64, tag: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((tag << 32) | id);
    rng
}

fn derive_seed(seed: u64, tag: u64) -> u64 {
    use rand::RngCore;
    derive_rng(seed, tag, u32::MAX as u64).next_u64()
}

/// Scalars sent from the server in one round: the global payload to each
/// active client plus every peer's pruned upload for auditing.
pub fn comm_cost(n_active: usize, gamma: f64, d: usize) -> u64 {
    let n = n_active as u64;
    let kept = (d - pruned_count(d, gamma)) as u64;
    n * d as u64 + n * n.saturating_sub(1) * kept
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    /// Held-out accuracy of the parameters produced by this round.
    pub global_accuracy: f64,
    /// Contributions after this round's scoring step.
    pub contributions: Vec<f64>,
    pub newly_eliminated: Vec<usize>,
    pub active: usize,
    pub comm_scalars: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub seed: u64,
    pub param_count: usize,
    pub fair_ids: BTreeSet<usize>,
    pub fr_ids: BTreeSet<usize>,
    /// Free riders as a percentage of the roster.
    pub fr_ratio: f64,
    pub rounds: Vec<RoundLog>,
    pub eliminated: BTreeSet<usize>,
    pub dsr: Option<f64>,
    pub fpr: Option<f64>,
    pub final_accuracy: f64,
    pub total_comm: u64,
    /// True when every client was eliminated before the last round.
    pub halted: bool,
}

impl ExperimentResult {
    pub fn accuracy_curve(&self) -> Vec<f64> {
        self.rounds.iter().map(|r| r.global_accuracy).collect()
    }

    /// Round index at which `client` was eliminated.
    pub fn elimination_round(&self, client: usize) -> Option<usize> {
        self.rounds
            .iter()
            .find(|r| r.newly_eliminated.contains(&client))
            .map(|r| r.round)
    }
}

/// Datasets for one experiment: private shards for the fair clients, the
/// held-out test set and the public pool.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub shards: Vec<Dataset>,
    pub test: Dataset,
    pub public: Dataset,
}

pub fn prepare_data(config: &ExperimentConfig) -> Result<ExperimentData> {
    let d = &config.data;
    let fair = config.roster.fair;
    let train_n = fair * d.samples_per_client;
    let public_n = if config.roster.selfish_fr > 0 { d.public_samples } else { 0 };
    let total = train_n + d.test_samples + public_n;
    let all = match &d.source {
        DataSource::Synthetic { separation } => generate_synthetic(
            config.model.num_classes,
            config.model.input_dim,
            total,
            *separation,
            derive_seed(config.seed, STREAM_DATA),
        )?,
        DataSource::Idx { images, labels } => {
            let loaded = load_idx(images, labels)?;
            if loaded.len() < total {
                return Err(Error::Config(format!(
                    "idx data has {} samples, experiment needs {total}",
                    loaded.len()
                )));
            }
            loaded
        }
    };
    if all.input_dim() != config.model.input_dim {
        return Err(Error::Config(format!(
            "data has {} features, model.input_dim is {}",
            all.input_dim(),
            config.model.input_dim
        )));
    }
    if all.num_classes > config.model.num_classes {
        return Err(Error::Config(format!(
            "data has {} classes, model.num_classes is {}",
            all.num_classes, config.model.num_classes
        )));
    }
    let num_classes = config.model.num_classes;
    let slice = |range: std::ops::Range<usize>| {
        let idx: Vec<usize> = range.collect();
        Dataset::new(all.samples.select(&idx), num_classes)
    };
    let train = slice(0..train_n)?;
    let test = slice(train_n..train_n + d.test_samples)?;
    let public = slice(train_n + d.test_samples..total)?;
    let spec = PartitionSpec {
        num_clients: fair,
        samples_per_client: d.samples_per_client,
        mode: d.mode,
        non_iid_concentration: d.non_iid_concentration,
        seed: derive_seed(config.seed, STREAM_PARTITION),
    };
    Ok(ExperimentData {
        shards: partition(&train, &spec)?,
        test,
        public,
    })
}

/// Live state of one experiment.
#[derive(Debug, Clone)]
pub struct Simulation {
    config: ExperimentConfig,
    clients: Vec<ClientState>,
    privacy_rngs: Vec<ChaCha8Rng>,
    weights: Vec<f64>,
    test: Dataset,
    global: ParamVector,
    prev_global: Option<ParamVector>,
    prev_update: Option<ParamVector>,
    uploads: Vec<Option<ParamVector>>,
    ledger: ContributionLedger,
    logs: Vec<RoundLog>,
    halted: bool,
}

impl Simulation {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let data = prepare_data(&config)?;
        let dim = config.model.param_count();
        let r = &config.roster;
        let spc = config.data.samples_per_client as f64;
        let num_classes = config.model.num_classes;
        let empty = || Dataset::empty(config.model.input_dim, num_classes);
        let adam = || AdamState::new(dim, r.fr_learning_rate, r.fr_decay);

        let mut roster: Vec<(ClientKind, Dataset, f64)> = Vec::with_capacity(r.total());
        for shard in data.shards {
            let w = shard.len() as f64;
            roster.push((ClientKind::Fair, shard, w));
        }
        roster.extend((0..r.plain_fr).map(|_| (ClientKind::PlainFr, empty(), spc)));
        roster.extend((0..r.disguised_fr).map(|_| {
            (ClientKind::DisguisedFr { sigma: r.disguised_sigma }, empty(), spc)
        }));
        roster.extend((0..r.anonymous_fr).map(|_| {
            let kind = ClientKind::AnonymousFr {
                adam: adam(),
                init_variance: r.afr_init_variance,
            };
            (kind, empty(), spc)
        }));
        roster.extend((0..r.selfish_fr).map(|_| {
            let kind = ClientKind::SelfishFr {
                adam: adam(),
                public_data: data.public.clone(),
                pretrain_epochs: r.pretrain_epochs,
            };
            (kind, empty(), spc)
        }));

        let n = roster.len();
        let mut clients = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for (id, (kind, shard, w)) in roster.into_iter().enumerate() {
            clients.push(ClientState::new(id, kind, shard, derive_rng(config.seed, STREAM_CLIENT, id as u64)));
            weights.push(w);
        }
        let privacy_rngs = (0..n)
            .map(|id| derive_rng(config.seed, STREAM_PRIVACY, id as u64))
            .collect();
        let c0 = config.defense.pass.initial_contribution.unwrap_or(1.0 / n as f64);
        let global = init_params(&config.model, derive_seed(config.seed, STREAM_INIT));

        Ok(Self {
            clients,
            privacy_rngs,
            weights,
            test: data.test,
            global,
            prev_global: None,
            prev_update: None,
            uploads: vec![None; n],
            ledger: ContributionLedger::new(n, c0),
            logs: Vec::new(),
            halted: false,
            config,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn global(&self) -> &ParamVector {
        &self.global
    }

    pub fn ledger(&self) -> &ContributionLedger {
        &self.ledger
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn logs(&self) -> &[RoundLog] {
        &self.logs
    }

    /// Uploads of the most recent round, indexed by client id.
    pub fn uploads(&self) -> &[Option<ParamVector>] {
        &self.uploads
    }

    pub fn halted(&self) -> bool {
        self.halted
    }

    fn model(&self) -> &ModelConfig {
        &self.config.model
    }

    /// Every active data holder audits every other active client's last
    /// upload on its own shard.
    fn pass_audits(&self, round: usize, theta_prev: &ParamVector) -> Result<AuditMatrix> {
        let active = self.ledger.active_ids();
        let model = self.model();
        let rows: Vec<(usize, Vec<(usize, f64)>)> = active
            .par_iter()
            .filter(|&&a| !self.clients[a].kind.is_free_rider() && !self.clients[a].shard().is_empty())
            .map(|&auditor| {
                let shard = &self.clients[auditor].shard().samples;
                let current = accuracy(&self.global, model, shard)?;
                let mut row = Vec::new();
                for &target in &active {
                    if target == auditor {
                        continue;
                    }
                    if let Some(upload) = &self.uploads[target] {
                        row.push((target, audit_against(current, shard, model, theta_prev, upload)?));
                    }
                }
                Ok((auditor, row))
            })
            .collect::<Result<_>>()?;
        let mut matrix = AuditMatrix::new(round, self.clients.len());
        for (auditor, row) in rows {
            for (target, v) in row {
                matrix.record(auditor, target, v)?;
            }
        }
        Ok(matrix)
    }

    fn score(&mut self, round: usize) -> Result<Vec<usize>> {
        let (Some(theta_prev), Some(global_update)) = (self.prev_global.clone(), self.prev_update.clone()) else {
            return Ok(Vec::new());
        };
        match self.config.defense.kind {
            DefenseKind::None => Ok(Vec::new()),
            DefenseKind::Pass => {
                let pass = self.config.defense.pass.clone();
                let matrix = self.pass_audits(round, &theta_prev)?;
                apply_pass_reports(&mut self.ledger, &matrix, pass.alpha);
                let n = match pass.threshold_population {
                    ThresholdPopulation::Current => self.ledger.active_count(),
                    ThresholdPopulation::Initial => self.ledger.clients(),
                };
                Ok(pass_eliminate(&mut self.ledger, pass.beta, n))
            }
            DefenseKind::Rffl => {
                let rffl = self.config.defense.rffl.clone();
                for id in self.ledger.active_ids() {
                    if let Some(upload) = &self.uploads[id] {
                        let c = self.ledger.contributions[id];
                        self.ledger.contributions[id] = rffl_contribution_step(c, &global_update, upload, rffl.alpha);
                    }
                }
                let threshold = rffl.threshold_for(self.ledger.active_count());
                Ok(self.ledger.eliminate_below(threshold))
            }
        }
    }

    fn aggregate(&self, ids: &[usize], uploads: &[ParamVector]) -> Result<ParamVector> {
        let agg = &self.config.aggregator;
        match agg.kind {
            AggregatorKind::Fedavg => {
                let w: Vec<f64> = ids.iter().map(|&i| self.weights[i]).collect();
                fedavg(uploads, &w)
            }
            AggregatorKind::Median => coord_median(uploads),
            AggregatorKind::TrimmedMean => trimmed_mean(uploads, agg.trim_fraction),
            AggregatorKind::Signsgd => {
                let pseudo: Vec<ParamVector> = uploads.iter().map(|u| u.scale(-1.0)).collect();
                signsgd_aggregate(&pseudo, agg.sign_step.unwrap_or(self.config.eta))
            }
        }
    }

    /// Run the next round. A round that eliminates every remaining client
    /// is logged with no aggregation and halts the experiment.
    pub fn run_round(&mut self) -> Result<RoundLog> {
        if self.halted {
            return Err(Error::Config("experiment halted: no active clients".into()));
        }
        let round = self.logs.len();
        let newly_eliminated = self.score(round)?;
        for &id in &newly_eliminated {
            self.clients[id].eliminated = true;
        }
        self.ledger.snapshot();

        let active = self.ledger.active_ids();
        if active.is_empty() {
            self.halted = true;
            self.uploads = vec![None; self.clients.len()];
            let log = RoundLog {
                round,
                global_accuracy: accuracy(&self.global, self.model(), &self.test.samples)?,
                contributions: self.ledger.contributions.clone(),
                newly_eliminated,
                active: 0,
                comm_scalars: 0,
            };
            self.logs.push(log.clone());
            return Ok(log);
        }

        let cfg = &self.config;
        let ctx = RoundContext {
            round,
            model: &cfg.model,
            global: &self.global,
            prev_global_update: self.prev_update.as_ref(),
            eta: cfg.eta,
            local_epochs: cfg.local_epochs,
            batch_size: cfg.batch_size,
        };
        let strategy = cfg.roster.mimic;
        let fr_private = cfg.roster.free_riders_apply_privacy;
        let privacy = &cfg.privacy;
        let results: Vec<(usize, Result<ParamVector>)> = self
            .clients
            .par_iter_mut()
            .zip(self.privacy_rngs.par_iter_mut())
            .filter(|(c, _)| !c.eliminated)
            .map(|(client, rng)| {
                let raw = client.compute_update(&ctx, strategy);
                let out = raw.and_then(|u| {
                    if client.kind.is_free_rider() && !fr_private {
                        Ok(u)
                    } else {
                        privatize(&u, privacy, rng)
                    }
                });
                (client.id, out)
            })
            .collect();

        let mut ids = Vec::with_capacity(results.len());
        let mut uploads = Vec::with_capacity(results.len());
        for (id, r) in results {
            ids.push(id);
            uploads.push(r?);
        }
        let delta = self.aggregate(&ids, &uploads)?;
        let next = self.global.add(&delta);

        self.uploads = vec![None; self.clients.len()];
        for (id, u) in ids.iter().zip(uploads) {
            self.uploads[*id] = Some(u);
        }
        self.prev_global = Some(std::mem::replace(&mut self.global, next));
        self.prev_update = Some(delta);

        let d = self.config.model.param_count();
        let comm_scalars = match self.config.defense.kind {
            DefenseKind::Pass => comm_cost(active.len(), self.config.privacy.prune_rate, d),
            _ => (active.len() * d) as u64,
        };
        let log = RoundLog {
            round,
            global_accuracy: accuracy(&self.global, self.model(), &self.test.samples)?,
            contributions: self.ledger.contributions.clone(),
            newly_eliminated,
            active: active.len(),
            comm_scalars,
        };
        self.logs.push(log.clone());
        Ok(log)
    }

    /// Run the remaining rounds and summarize.
    pub fn run(mut self) -> Result<ExperimentResult> {
        while self.logs.len() < self.config.rounds && !self.halted {
            self.run_round()?;
        }
        Ok(self.into_result())
    }

    pub fn into_result(self) -> ExperimentResult {
        let fair_ids: BTreeSet<usize> = self
            .clients
            .iter()
            .filter(|c| !c.kind.is_free_rider())
            .map(|c| c.id)
            .collect();
        let fr_ids: BTreeSet<usize> = self
            .clients
            .iter()
            .filter(|c| c.kind.is_free_rider())
            .map(|c| c.id)
            .collect();
        let eliminated = self.ledger.eliminated.clone();
        ExperimentResult {
            seed: self.config.seed,
            param_count: self.config.model.param_count(),
            fr_ratio: self.config.roster.fr_ratio(),
            dsr: dsr(&eliminated, &fr_ids),
            fpr: fpr(&eliminated, &fair_ids),
            final_accuracy: self.logs.last().map_or(0.0, |l| l.global_accuracy),
            total_comm: self.logs.iter().map(|l| l.comm_scalars).sum(),
            halted: self.halted,
            rounds: self.logs,
            fair_ids,
            fr_ids,
            eliminated,
        }
    }
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    Simulation::new(config.clone())?.run()
}
