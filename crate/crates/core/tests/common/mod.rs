#![allow(dead_code)]

use fedaudit::sim::{DataSource, ExperimentConfig};
use fedaudit::ModelConfig;

/// Linear model on well separated synthetic classes with minibatch local
/// training. Used by the elimination and neutrality scenarios.
pub fn desk_scenario() -> ExperimentConfig {
    let mut c = ExperimentConfig::new(ModelConfig::new(200, vec![], 4).unwrap());
    c.rounds = 100;
    c.data.source = DataSource::Synthetic { separation: 5.0 };
    c.local_epochs = 5;
    c.batch_size = Some(10);
    c
}

/// Small fast configuration for plumbing tests.
pub fn tiny(fair: usize, rounds: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(ModelConfig::new(8, vec![], 3).unwrap());
    c.rounds = rounds;
    c.roster.fair = fair;
    c.data.samples_per_client = 30;
    c.data.test_samples = 100;
    c
}

pub fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}
