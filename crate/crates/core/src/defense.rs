//! Contribution scoring and elimination.
//!
//! The audit defense has every active data-holding client evaluate each
//! peer's previous-round upload on its own shard. The accuracy divergence
//! `Acc(global_now) - Acc(global_prev + peer_update)` is averaged per target,
//! squashed with `tanh`, and folded into an exponential moving average. A
//! client whose contribution drops below `1 / (beta * N)` is removed for
//! good. The cosine-reputation baseline scores each upload by its cosine
//! with the aggregate instead.

use std::collections::BTreeSet;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{accuracy, Batch, ModelConfig, ParamVector};

/// Elimination is suspended below this many active clients.
pub const MIN_ACTIVE_FOR_ELIMINATION: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    #[default]
    Pass,
    Rffl,
    None,
}

/// Which client count enters the `1 / (beta * N)` threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdPopulation {
    /// Clients still active when the threshold is applied.
    #[default]
    Current,
    /// The roster size at the start of the experiment.
    Initial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PassConfig {
    pub alpha: f64,
    pub beta: f64,
    /// `None` means `1 / N`.
    pub initial_contribution: Option<f64>,
    pub threshold_population: ThresholdPopulation,
}

impl PassConfig {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let config = Self {
            alpha,
            beta,
            initial_contribution: None,
            threshold_population: ThresholdPopulation::Current,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.beta >= 1.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta {} must be >= 1", self.beta)));
        }
        Ok(())
    }
}

impl Default for PassConfig {
    fn default() -> Self {
        Self {
            alpha: 0.95,
            beta: 1.75,
            initial_contribution: None,
            threshold_population: ThresholdPopulation::Current,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RfflConfig {
    pub alpha: f64,
    /// `None` means `1 / (3 N)`.
    pub threshold: Option<f64>,
}

impl Default for RfflConfig {
    fn default() -> Self {
        Self {
            alpha: 0.95,
            threshold: None,
        }
    }
}

impl RfflConfig {
    pub fn threshold_for(&self, roster_size: usize) -> f64 {
        self.threshold
            .unwrap_or(1.0 / (3.0 * roster_size.max(1) as f64))
    }
}

/// Accuracy divergence reports for one round, `entries[auditor][target]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditMatrix {
    pub round: usize,
    entries: Vec<Vec<Option<f64>>>,
}

impl AuditMatrix {
    pub fn new(round: usize, clients: usize) -> Self {
        Self {
            round,
            entries: vec![vec![None; clients]; clients],
        }
    }

    pub fn clients(&self) -> usize {
        self.entries.len()
    }

    pub fn record(&mut self, auditor: usize, target: usize, accdiv: f64) -> Result<()> {
        if auditor == target {
            return Err(Error::Audit(format!("client {auditor} cannot audit itself")));
        }
        if !accdiv.is_finite() {
            return Err(Error::Audit(format!("non-finite report from {auditor} about {target}")));
        }
        self.entries[auditor][target] = Some(accdiv);
        Ok(())
    }

    pub fn get(&self, auditor: usize, target: usize) -> Option<f64> {
        self.entries[auditor][target]
    }

    /// Reports about `target` from auditors that are not eliminated, in
    /// auditor order.
    pub fn reports_about(&self, target: usize, eliminated: &BTreeSet<usize>) -> Vec<f64> {
        (0..self.clients())
            .filter(|a| *a != target && !eliminated.contains(a))
            .filter_map(|a| self.entries[a][target])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionLedger {
    pub contributions: Vec<f64>,
    pub eliminated: BTreeSet<usize>,
    /// Contribution vector after each scoring step.
    pub history: Vec<Vec<f64>>,
}

impl ContributionLedger {
    pub fn new(clients: usize, initial: f64) -> Self {
        Self {
            contributions: vec![initial; clients],
            eliminated: BTreeSet::new(),
            history: Vec::new(),
        }
    }

    pub fn clients(&self) -> usize {
        self.contributions.len()
    }

    pub fn is_active(&self, id: usize) -> bool {
        !self.eliminated.contains(&id)
    }

    pub fn active_ids(&self) -> Vec<usize> {
        (0..self.clients()).filter(|id| self.is_active(*id)).collect()
    }

    pub fn active_count(&self) -> usize {
        self.clients() - self.eliminated.len()
    }

    pub fn snapshot(&mut self) {
        self.history.push(self.contributions.clone());
    }

    /// Eliminate every active client whose contribution is below
    /// `threshold`. Suspended with fewer than three active clients.
    pub fn eliminate_below(&mut self, threshold: f64) -> Vec<usize> {
        if self.active_count() < MIN_ACTIVE_FOR_ELIMINATION {
            return Vec::new();
        }
        let out: Vec<usize> = self
            .active_ids()
            .into_iter()
            .filter(|&id| self.contributions[id] < threshold)
            .collect();
        self.eliminated.extend(out.iter().copied());
        out
    }
}

/// `Acc(theta_curr) - Acc(theta_prev + peer_update)` on the auditor's shard.
pub fn audit(
    auditor_shard: &Batch,
    model: &ModelConfig,
    theta_global_curr: &ParamVector,
    theta_global_prev: &ParamVector,
    peer_update: &ParamVector,
) -> Result<f64> {
    let current = accuracy(theta_global_curr, model, auditor_shard).map_err(audit_error)?;
    audit_against(current, auditor_shard, model, theta_global_prev, peer_update)
}

/// As [`audit`], with the accuracy of the current global model already
/// known.
pub fn audit_against(
    current_accuracy: f64,
    auditor_shard: &Batch,
    model: &ModelConfig,
    theta_global_prev: &ParamVector,
    peer_update: &ParamVector,
) -> Result<f64> {
    peer_update
        .check_dim(theta_global_prev.dim())
        .map_err(audit_error)?;
    let candidate = theta_global_prev.add(peer_update);
    let peer = accuracy(&candidate, model, auditor_shard).map_err(audit_error)?;
    Ok(current_accuracy - peer)
}

fn audit_error(e: Error) -> Error {
    Error::Audit(e.to_string())
}

/// `alpha * c_prev + (1 - alpha) * tanh(mean(reports))`; `None` when there
/// are no reports, in which case the caller keeps `c_prev`.
pub fn pass_contribution_step(c_prev: f64, reports: &[f64], alpha: f64) -> Option<f64> {
    if reports.is_empty() {
        return None;
    }
    let mean = reports.iter().sum::<f64>() / reports.len() as f64;
    Some(alpha * c_prev + (1.0 - alpha) * mean.tanh())
}

pub fn pass_threshold(beta: f64, n_active: usize) -> f64 {
    1.0 / (beta * n_active as f64)
}

/// Remove every active client with `c < 1 / (beta * n_active)`.
pub fn pass_eliminate(ledger: &mut ContributionLedger, beta: f64, n_active: usize) -> Vec<usize> {
    if n_active == 0 {
        return Vec::new();
    }
    ledger.eliminate_below(pass_threshold(beta, n_active))
}

/// Fold every target's reports into the ledger.
pub fn apply_pass_reports(ledger: &mut ContributionLedger, matrix: &AuditMatrix, alpha: f64) {
    let excluded = ledger.eliminated.clone();
    for target in ledger.active_ids() {
        let reports = matrix.reports_about(target, &excluded);
        match pass_contribution_step(ledger.contributions[target], &reports, alpha) {
            Some(c) => ledger.contributions[target] = c,
            None => debug!("round {}: no audit reports for client {target}", matrix.round),
        }
    }
}

/// `alpha * c_prev + (1 - alpha) * cos(global, local)`, with the cosine
/// taken as 0 when either vector is zero.
pub fn rffl_contribution_step(
    c_prev: f64,
    global_update: &ParamVector,
    local_update: &ParamVector,
    alpha: f64,
) -> f64 {
    let cos = global_update.cosine(local_update).unwrap_or_else(|| {
        debug!("zero-norm vector in cosine; scoring 0");
        0.0
    });
    alpha * c_prev + (1.0 - alpha) * cos
}

fn rate(eliminated: &BTreeSet<usize>, group: &BTreeSet<usize>) -> Option<f64> {
    if group.is_empty() {
        return None;
    }
    Some(eliminated.intersection(group).count() as f64 / group.len() as f64 * 100.0)
}

/// Percentage of free riders eliminated.
pub fn dsr(eliminated: &BTreeSet<usize>, fr_ids: &BTreeSet<usize>) -> Option<f64> {
    rate(eliminated, fr_ids)
}

/// Percentage of fair clients eliminated.
pub fn fpr(eliminated: &BTreeSet<usize>, fair_ids: &BTreeSet<usize>) -> Option<f64> {
    rate(eliminated, fair_ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn ids(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    #[test]
    fn beta_below_one_is_rejected() {
        assert!(PassConfig::new(0.95, 0.5).is_err());
        assert!(PassConfig::new(0.95, 1.0).is_ok());
        assert!(PassConfig::new(1.5, 2.0).is_err());
    }

    #[test]
    fn contribution_step_arithmetic() {
        let c = pass_contribution_step(0.1, &[0.1, 0.3], 0.95).unwrap();
        let expected = 0.95 * 0.1 + 0.05 * 0.2f64.tanh();
        assert!((c - expected).abs() < 1e-15);
        assert!((c - 0.104869).abs() < 1e-6);
        assert_eq!(pass_contribution_step(0.1, &[], 0.95), None);
    }

    #[test]
    fn zero_reports_decay_geometrically() {
        let c0 = 1.0 / 15.0;
        let mut c = c0;
        for k in 1..=30 {
            c = pass_contribution_step(c, &[0.0, 0.0, 0.0], 0.95).unwrap();
            assert!((c - 0.95f64.powi(k) * c0).abs() < 1e-15);
        }
    }

    #[test]
    fn huge_reports_are_bounded_by_tanh() {
        let c = pass_contribution_step(0.2, &[1e9], 0.9).unwrap();
        assert!(c <= 0.9 * 0.2 + 0.1 + 1e-15);
    }

    #[test]
    fn threshold_example() {
        let t = pass_threshold(1.75, 10);
        assert!((t - 1.0 / 17.5).abs() < 1e-15);
        let mut ledger = ContributionLedger::new(10, 0.1);
        ledger.contributions[3] = 0.05;
        ledger.contributions[4] = 0.06;
        assert_eq!(pass_eliminate(&mut ledger, 1.75, 10), vec![3]);
        assert!(ledger.is_active(4));
    }

    #[test]
    fn initial_share_is_never_below_threshold() {
        for n in 3..40 {
            let mut ledger = ContributionLedger::new(n, 1.0 / n as f64);
            assert!(pass_eliminate(&mut ledger, 1.0, n).is_empty());
        }
    }

    #[test]
    fn elimination_suspended_below_three_active() {
        let mut ledger = ContributionLedger::new(2, -1.0);
        assert!(pass_eliminate(&mut ledger, 1.75, 2).is_empty());
    }

    #[test]
    fn elimination_is_permanent() {
        let mut ledger = ContributionLedger::new(4, 0.0);
        ledger.contributions = vec![1.0, 1.0, 1.0, -1.0];
        assert_eq!(pass_eliminate(&mut ledger, 1.0, 4), vec![3]);
        ledger.contributions[3] = 5.0;
        assert!(pass_eliminate(&mut ledger, 1.0, 3).is_empty());
        assert!(!ledger.is_active(3));
    }

    #[test]
    fn audit_matrix_excludes_self_and_eliminated() {
        let mut m = AuditMatrix::new(1, 4);
        assert!(m.record(2, 2, 0.1).is_err());
        m.record(0, 1, 0.1).unwrap();
        m.record(2, 1, 0.3).unwrap();
        m.record(3, 1, 0.5).unwrap();
        assert_eq!(m.reports_about(1, &ids(&[3])), vec![0.1, 0.3]);
    }

    #[test]
    fn audit_reductions() {
        let config = ModelConfig::linear(2, 2).unwrap();
        let shard = Batch::new(vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.2, 0.1, 0.9], vec![0, 1, 0, 1], 2).unwrap();
        let prev = init_params(&config, 1);
        let mut curr = prev.clone();
        // Make the current model the obvious classifier.
        curr[0] = 2.0;
        curr[3] = 2.0;
        let delta = curr.sub(&prev);
        assert_eq!(audit(&shard, &config, &curr, &prev, &delta).unwrap(), 0.0);

        let zero = ParamVector::zeros(config.param_count());
        let acc_curr = accuracy(&curr, &config, &shard).unwrap();
        let acc_prev = accuracy(&prev, &config, &shard).unwrap();
        assert_eq!(audit(&shard, &config, &curr, &prev, &zero).unwrap(), acc_curr - acc_prev);
        assert!(audit(&shard, &config, &curr, &prev, &ParamVector::zeros(2)).is_err());
    }

    #[test]
    fn rffl_examples() {
        let g = ParamVector::new(vec![1.0, 2.0, -1.0]);
        assert!((rffl_contribution_step(0.2, &g, &g, 0.95) - (0.95 * 0.2 + 0.05)).abs() < 1e-15);
        assert!((rffl_contribution_step(0.2, &g, &g.scale(-1.0), 0.95) - (0.95 * 0.2 - 0.05)).abs() < 1e-15);
        assert_eq!(rffl_contribution_step(0.2, &g, &ParamVector::zeros(3), 0.5), 0.1);
    }

    #[test]
    fn rate_metrics() {
        let fr = ids(&[10, 11, 12, 13, 14]);
        let fair = ids(&(0..10).collect::<Vec<_>>());
        assert_eq!(dsr(&fr, &fr), Some(100.0));
        assert_eq!(dsr(&ids(&[]), &fr), Some(0.0));
        assert_eq!(dsr(&ids(&[10, 12, 14, 3]), &fr), Some(60.0));
        assert_eq!(fpr(&ids(&[1, 7, 12]), &fair), Some(20.0));
        assert_eq!(fpr(&ids(&[]), &fair), Some(0.0));
        assert_eq!(fpr(&fair, &fair), Some(100.0));
        assert_eq!(dsr(&fr, &ids(&[])), None);
    }
}
