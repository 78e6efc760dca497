//! Grid sweeps over beta, prune rate, noise variance and free-rider count.

use crate::error::Result;

use super::config::{ExperimentConfig, RosterConfig, SweepConfig};
use super::engine::run_experiment;
use super::report::SweepRow;

fn axis<T: Copy>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

/// Put `count` riders of the base roster's first free-rider kind (plain
/// when it has none) and drop the others.
pub fn with_free_riders(roster: &RosterConfig, count: usize) -> RosterConfig {
    let mut out = roster.clone();
    let kinds = [roster.plain_fr, roster.disguised_fr, roster.anonymous_fr, roster.selfish_fr];
    let which = kinds.iter().position(|&k| k > 0).unwrap_or(0);
    out.plain_fr = 0;
    out.disguised_fr = 0;
    out.anonymous_fr = 0;
    out.selfish_fr = 0;
    match which {
        0 => out.plain_fr = count,
        1 => out.disguised_fr = count,
        2 => out.anonymous_fr = count,
        _ => out.selfish_fr = count,
    }
    out
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Every combination of the grid axes, seeds averaged per cell, in
/// lexicographic axis order.
pub fn run_sweep(sweep: &SweepConfig) -> Result<Vec<SweepRow>> {
    let base = &sweep.base;
    base.validate()?;
    let g = &sweep.grid;
    let seeds = axis(&g.seeds, base.seed);
    let mut rows = Vec::new();
    for &beta in &axis(&g.beta, base.defense.pass.beta) {
        for &prune_rate in &axis(&g.prune_rate, base.privacy.prune_rate) {
            for &noise_variance in &axis(&g.noise_variance, base.privacy.noise_variance) {
                for &free_riders in &axis(&g.free_riders, base.roster.free_riders()) {
                    let mut cell: ExperimentConfig = base.clone();
                    cell.defense.pass.beta = beta;
                    cell.privacy.prune_rate = prune_rate;
                    cell.privacy.noise_variance = noise_variance;
                    cell.roster = with_free_riders(&base.roster, free_riders);
                    let mut results = Vec::with_capacity(seeds.len());
                    for &seed in &seeds {
                        cell.seed = seed;
                        results.push(run_experiment(&cell)?);
                    }
                    rows.push(SweepRow {
                        beta,
                        prune_rate,
                        noise_variance,
                        free_riders,
                        fr_ratio: cell.roster.fr_ratio(),
                        seeds: seeds.len(),
                        dsr: mean(results.iter().filter_map(|r| r.dsr)),
                        fpr: mean(results.iter().filter_map(|r| r.fpr)),
                        final_accuracy: mean(results.iter().map(|r| r.final_accuracy)).unwrap_or(0.0),
                        total_comm: mean(results.iter().map(|r| r.total_comm as f64)).unwrap_or(0.0),
                    });
                }
            }
        }
    }
    Ok(rows)
}
