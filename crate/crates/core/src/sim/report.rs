//! CSV and JSON renderings of results.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;

use super::engine::ExperimentResult;

pub const RUN_CSV_HEADER: &str = "round,accuracy,client_id,contribution,eliminated,comm_scalars";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

impl OutputFormat {
    pub fn extension(self) -> &'static str {
        match self {
            OutputFormat::Csv => "csv",
            OutputFormat::Json => "json",
        }
    }
}

/// One row per (round, client). `eliminated` is cumulative.
pub fn run_csv(result: &ExperimentResult) -> String {
    let mut out = String::from(RUN_CSV_HEADER);
    out.push('\n');
    let mut gone = BTreeSet::new();
    for log in &result.rounds {
        gone.extend(log.newly_eliminated.iter().copied());
        for (id, c) in log.contributions.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                log.round,
                log.global_accuracy,
                id,
                c,
                gone.contains(&id),
                log.comm_scalars
            );
        }
    }
    out
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn render_run(result: &ExperimentResult, format: OutputFormat) -> Result<String> {
    match format {
        OutputFormat::Csv => Ok(run_csv(result)),
        OutputFormat::Json => to_json(result),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub beta: f64,
    pub prune_rate: f64,
    pub noise_variance: f64,
    pub free_riders: usize,
    pub fr_ratio: f64,
    pub seeds: usize,
    /// Means over seeds; absent when undefined for the roster.
    pub dsr: Option<f64>,
    pub fpr: Option<f64>,
    pub final_accuracy: f64,
    pub total_comm: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("beta,prune_rate,noise_variance,free_riders,fr_ratio,seeds,dsr,fpr,final_accuracy,total_comm\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.beta,
            r.prune_rate,
            r.noise_variance,
            r.free_riders,
            r.fr_ratio,
            r.seeds,
            opt(r.dsr),
            opt(r.fpr),
            r.final_accuracy,
            r.total_comm
        );
    }
    out
}
