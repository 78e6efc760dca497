//! JSON experiment configuration.
//!
//! Every field except `model` has a default, so the smallest valid file is
//! `{"model": {"input_dim": 32, "num_classes": 4}}`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregation::AggregatorKind;
use crate::clients::MimicStrategy;
use crate::defense::{DefenseKind, PassConfig, RfflConfig};
use crate::error::{Error, FieldError, Result};
use crate::model::ModelConfig;
use crate::privacy::{DlgConfig, PrivacyConfig};
use crate::data::PartitionMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Gaussian class clusters; see [`crate::data::generate_synthetic`].
    Synthetic {
        #[serde(default = "default_separation")]
        separation: f64,
    },
    Idx { images: PathBuf, labels: PathBuf },
}

fn default_separation() -> f64 {
    3.0
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            separation: default_separation(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Number of private shards. Must equal `roster.fair` when given.
    pub num_clients: Option<usize>,
    pub samples_per_client: usize,
    pub mode: PartitionMode,
    pub non_iid_concentration: f64,
    /// Held-out samples for global accuracy.
    pub test_samples: usize,
    /// Public samples available to selfish free riders.
    pub public_samples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::default(),
            num_clients: None,
            samples_per_client: 100,
            mode: PartitionMode::Iid,
            non_iid_concentration: 0.5,
            test_samples: 1000,
            public_samples: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RosterConfig {
    pub fair: usize,
    pub plain_fr: usize,
    pub disguised_fr: usize,
    pub anonymous_fr: usize,
    pub selfish_fr: usize,
    /// Standard deviation of the disguised riders' noise.
    pub disguised_sigma: f64,
    /// Variance of the anonymous riders' round-0 noise.
    pub afr_init_variance: f64,
    pub fr_learning_rate: f64,
    pub fr_decay: f64,
    pub pretrain_epochs: usize,
    pub mimic: MimicStrategy,
    pub free_riders_apply_privacy: bool,
}

impl Default for RosterConfig {
    fn default() -> Self {
        Self {
            fair: 10,
            plain_fr: 0,
            disguised_fr: 0,
            anonymous_fr: 0,
            selfish_fr: 0,
            disguised_sigma: 0.1,
            afr_init_variance: 1e-2,
            fr_learning_rate: 0.015,
            fr_decay: 0.997,
            pretrain_epochs: 5,
            mimic: MimicStrategy::SelfGradient,
            free_riders_apply_privacy: false,
        }
    }
}

impl RosterConfig {
    pub fn free_riders(&self) -> usize {
        self.plain_fr + self.disguised_fr + self.anonymous_fr + self.selfish_fr
    }

    pub fn total(&self) -> usize {
        self.fair + self.free_riders()
    }

    /// Free riders as a percentage of the roster.
    pub fn fr_ratio(&self) -> f64 {
        if self.total() == 0 {
            return 0.0;
        }
        self.free_riders() as f64 / self.total() as f64 * 100.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregatorConfig {
    pub kind: AggregatorKind,
    pub trim_fraction: f64,
    /// Sign-vote step size; `None` uses `eta`.
    pub sign_step: Option<f64>,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        Self {
            kind: AggregatorKind::Fedavg,
            trim_fraction: 0.1,
            sign_step: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseConfig {
    pub kind: DefenseKind,
    pub pass: PassConfig,
    pub rffl: RfflConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub roster: RosterConfig,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_local_epochs")]
    pub local_epochs: usize,
    /// Minibatch size for local training; full batch when absent.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub aggregator: AggregatorConfig,
    #[serde(default)]
    pub defense: DefenseConfig,
    #[serde(default)]
    pub privacy: PrivacyConfig,
    #[serde(default)]
    pub seed: u64,
}

fn default_rounds() -> usize {
    200
}

fn default_eta() -> f64 {
    0.1
}

fn default_local_epochs() -> usize {
    1
}

fn check(errors: &mut Vec<FieldError>, ok: bool, path: &str, message: impl Into<String>) {
    if !ok {
        errors.push(FieldError::new(path, message));
    }
}

fn finite_positive(v: f64) -> bool {
    v.is_finite() && v > 0.0
}

impl ExperimentConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            data: DataConfig::default(),
            roster: RosterConfig::default(),
            rounds: default_rounds(),
            eta: default_eta(),
            local_epochs: default_local_epochs(),
            batch_size: None,
            aggregator: AggregatorConfig::default(),
            defense: DefenseConfig::default(),
            privacy: PrivacyConfig::default(),
            seed: 0,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Check every constraint and report all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        let e = &mut errors;

        if let Err(err) = self.model.validate() {
            e.push(FieldError::new("model", err.to_string()));
        }
        check(e, self.rounds >= 1, "rounds", "must be at least 1");
        check(e, finite_positive(self.eta), "eta", "must be a positive number");
        check(e, self.batch_size != Some(0), "batch_size", "must be positive");

        let d = &self.data;
        check(e, d.samples_per_client >= 1, "data.samples_per_client", "must be positive");
        check(e, d.test_samples >= 1, "data.test_samples", "must be positive");
        check(
            e,
            finite_positive(d.non_iid_concentration),
            "data.non_iid_concentration",
            "must be a positive number",
        );
        if let DataSource::Synthetic { separation } = d.source {
            check(e, finite_positive(separation), "data.source.separation", "must be a positive number");
        }
        if let Some(n) = d.num_clients {
            check(
                e,
                n == self.roster.fair,
                "data.num_clients",
                format!("{n} shards for {} fair clients", self.roster.fair),
            );
        }

        let r = &self.roster;
        check(e, r.total() >= 1, "roster", "needs at least one client");
        check(e, r.fair >= 1, "roster.fair", "needs at least one fair client");
        check(
            e,
            r.disguised_sigma.is_finite() && r.disguised_sigma >= 0.0,
            "roster.disguised_sigma",
            "must be non-negative",
        );
        check(
            e,
            r.afr_init_variance.is_finite() && r.afr_init_variance >= 0.0,
            "roster.afr_init_variance",
            "must be non-negative",
        );
        check(e, finite_positive(r.fr_learning_rate), "roster.fr_learning_rate", "must be positive");
        check(e, finite_positive(r.fr_decay), "roster.fr_decay", "must be positive");
        if r.selfish_fr > 0 {
            check(e, d.public_samples >= 1, "data.public_samples", "selfish free riders need public data");
        }

        let a = &self.aggregator;
        check(
            e,
            (0.0..0.5).contains(&a.trim_fraction),
            "aggregator.trim_fraction",
            "must lie in [0, 0.5)",
        );
        if let Some(step) = a.sign_step {
            check(e, finite_positive(step), "aggregator.sign_step", "must be positive");
        }

        let p = &self.defense.pass;
        check(e, p.beta.is_finite() && p.beta >= 1.0, "defense.pass.beta", format!("{} is below 1", p.beta));
        check(e, (0.0..=1.0).contains(&p.alpha), "defense.pass.alpha", "must lie in [0, 1]");
        if let Some(c0) = p.initial_contribution {
            check(e, c0.is_finite(), "defense.pass.initial_contribution", "must be finite");
        }
        let f = &self.defense.rffl;
        check(e, (0.0..=1.0).contains(&f.alpha), "defense.rffl.alpha", "must lie in [0, 1]");
        if let Some(t) = f.threshold {
            check(e, t.is_finite(), "defense.rffl.threshold", "must be finite");
        }

        let q = &self.privacy;
        check(
            e,
            q.noise_variance.is_finite() && q.noise_variance >= 0.0,
            "privacy.noise_variance",
            "must be non-negative",
        );
        check(e, (0.0..1.0).contains(&q.prune_rate), "privacy.prune_rate", "must lie in [0, 1)");

        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errors))
        }
    }
}

/// Grid for the `sweep` subcommand. Empty axes keep the base value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub beta: Vec<f64>,
    pub prune_rate: Vec<f64>,
    pub noise_variance: Vec<f64>,
    /// Number of free riders, filled with the base config's rider kind.
    pub free_riders: Vec<usize>,
    /// Seeds averaged per cell; the base seed alone when empty.
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub base: ExperimentConfig,
    #[serde(default)]
    pub grid: SweepGrid,
}

/// Setup of the leakage evaluation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DlgExperimentConfig {
    pub input_dim: usize,
    pub num_classes: usize,
    pub hidden_dims: Vec<usize>,
    pub instances: usize,
    /// Learning rate of the leaked SGD step.
    pub eta: f64,
    pub noise_variances: Vec<f64>,
    pub prune_rates: Vec<f64>,
    pub attack: DlgConfig,
    pub seed: u64,
}

impl Default for DlgExperimentConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            num_classes: 4,
            hidden_dims: Vec::new(),
            instances: 10,
            eta: 0.1,
            noise_variances: vec![0.0, 1e-4, 1e-3, 1e-2, 1e-1],
            prune_rates: vec![0.0, 0.9],
            attack: DlgConfig::default(),
            seed: 0,
        }
    }
}

impl DlgExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        let e = &mut errors;
        if let Err(err) = ModelConfig::new(self.input_dim, self.hidden_dims.clone(), self.num_classes) {
            e.push(FieldError::new("model", err.to_string()));
        }
        check(e, self.instances >= 1, "instances", "must be at least 1");
        check(e, finite_positive(self.eta), "eta", "must be positive");
        check(e, self.attack.iterations >= 1, "attack.iterations", "must be at least 1");
        check(e, !self.noise_variances.is_empty(), "noise_variances", "must not be empty");
        check(e, !self.prune_rates.is_empty(), "prune_rates", "must not be empty");
        for (i, v) in self.noise_variances.iter().enumerate() {
            check(e, v.is_finite() && *v >= 0.0, &format!("noise_variances[{i}]"), "must be non-negative");
        }
        for (i, g) in self.prune_rates.iter().enumerate() {
            check(e, (0.0..1.0).contains(g), &format!("prune_rates[{i}]"), "must lie in [0, 1)");
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errors))
        }
    }
}
