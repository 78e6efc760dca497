//! Classification datasets: synthetic Gaussian clusters, IDX files, and
//! client partitioning.

pub mod idx;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;

pub use idx::load_idx;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Batch,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(samples: Batch, num_classes: usize) -> Result<Self> {
        if let Some(&bad) = samples.labels().iter().find(|&&y| y >= num_classes) {
            return Err(Error::Config(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            samples,
            num_classes,
        })
    }

    pub fn empty(input_dim: usize, num_classes: usize) -> Self {
        Self {
            samples: Batch::empty(input_dim),
            num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.samples.input_dim()
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: self.samples.select(indices),
            num_classes: self.num_classes,
        }
    }

    /// Fraction of samples in each class.
    pub fn label_distribution(&self) -> Vec<f64> {
        let mut counts = vec![0.0; self.num_classes];
        for &y in self.samples.labels() {
            counts[y] += 1.0;
        }
        let n = self.len().max(1) as f64;
        counts.iter_mut().for_each(|c| *c /= n);
        counts
    }
}

/// Gaussian class clusters with unit covariance.
///
/// Class means sit `separation` apart from each other: on scaled basis
/// vectors when `input_dim >= num_classes`, otherwise on random directions
/// at radius `separation / 2`. Labels cycle through the classes before the
/// sample order is shuffled, so class counts differ by at most one.
pub fn generate_synthetic(
    num_classes: usize,
    input_dim: usize,
    n: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::Config("num_classes must be at least 2".into()));
    }
    if input_dim == 0 {
        return Err(Error::Config("input_dim must be positive".into()));
    }
    if n < num_classes {
        return Err(Error::Config(format!(
            "need at least one sample per class ({n} < {num_classes})"
        )));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::Config("separation must be positive".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = if input_dim >= num_classes {
        let r = separation / std::f64::consts::SQRT_2;
        (0..num_classes)
            .map(|c| {
                let mut m = vec![0.0; input_dim];
                m[c] = r;
                m
            })
            .collect()
    } else {
        (0..num_classes)
            .map(|_| {
                let v: Vec<f64> = (0..input_dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.iter().map(|x| x * separation / 2.0 / norm).collect()
            })
            .collect()
    };

    let mut labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    labels.shuffle(&mut rng);
    let mut features = Vec::with_capacity(n * input_dim);
    for &y in &labels {
        for mean in &means[y] {
            let noise: f64 = rng.sample(StandardNormal);
            features.push(mean + noise);
        }
    }
    Dataset::new(Batch::new(features, labels, input_dim)?, num_classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    Iid,
    NonIid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub samples_per_client: usize,
    pub mode: PartitionMode,
    /// Dirichlet concentration for `NonIid`; smaller means more skew.
    pub non_iid_concentration: f64,
    pub seed: u64,
}

/// Split `dataset` into `spec.num_clients` disjoint shards.
///
/// `Iid` shuffles the first `num_clients * samples_per_client` samples and
/// slices them evenly. `NonIid` draws per-client class proportions from a
/// symmetric Dirichlet and fills each shard from per-class pools, falling
/// back to the remaining classes when a pool runs dry.
pub fn partition(dataset: &Dataset, spec: &PartitionSpec) -> Result<Vec<Dataset>> {
    if spec.num_clients == 0 || spec.samples_per_client == 0 {
        return Err(Error::Config(
            "num_clients and samples_per_client must be positive".into(),
        ));
    }
    let needed = spec.num_clients * spec.samples_per_client;
    if needed > dataset.len() {
        return Err(Error::Config(format!(
            "partition needs {needed} samples but the dataset has {}",
            dataset.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let shards: Vec<Vec<usize>> = match spec.mode {
        PartitionMode::Iid => {
            let mut indices: Vec<usize> = (0..needed).collect();
            indices.shuffle(&mut rng);
            indices
                .chunks(spec.samples_per_client)
                .map(<[usize]>::to_vec)
                .collect()
        }
        PartitionMode::NonIid => {
            if !(spec.non_iid_concentration > 0.0 && spec.non_iid_concentration.is_finite()) {
                return Err(Error::Config(
                    "non_iid_concentration must be positive".into(),
                ));
            }
            let k = dataset.num_classes;
            let mut pools: Vec<Vec<usize>> = vec![Vec::new(); k];
            for (i, &y) in dataset.samples.labels().iter().enumerate() {
                pools[y].push(i);
            }
            for pool in &mut pools {
                pool.shuffle(&mut rng);
            }
            let gamma = Gamma::new(spec.non_iid_concentration, 1.0)
                .map_err(|e| Error::Config(format!("bad concentration: {e}")))?;

            let mut shards = Vec::with_capacity(spec.num_clients);
            for _ in 0..spec.num_clients {
                let draws: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng)).collect();
                let total: f64 = draws.iter().sum();
                let props: Vec<f64> = if total > 0.0 {
                    draws.iter().map(|g| g / total).collect()
                } else {
                    vec![1.0 / k as f64; k]
                };
                let mut shard = Vec::with_capacity(spec.samples_per_client);
                while shard.len() < spec.samples_per_client {
                    let available: Vec<usize> = (0..k).filter(|&c| !pools[c].is_empty()).collect();
                    let weight: f64 = available.iter().map(|&c| props[c]).sum();
                    let class = if weight > 0.0 {
                        let mut u = rng.random::<f64>() * weight;
                        let mut pick = *available.last().expect("enough samples checked above");
                        for &c in &available {
                            if u < props[c] {
                                pick = c;
                                break;
                            }
                            u -= props[c];
                        }
                        pick
                    } else {
                        available[rng.random_range(0..available.len())]
                    };
                    shard.push(pools[class].pop().expect("class pool non-empty"));
                }
                shards.push(shard);
            }
            shards
        }
    };

    Ok(shards.iter().map(|s| dataset.select(s)).collect())
}

/// Mean over shards of the total-variation distance between each shard's
/// label distribution and the pooled distribution.
pub fn label_skew(shards: &[Dataset]) -> f64 {
    if shards.is_empty() {
        return 0.0;
    }
    let k = shards[0].num_classes;
    let total: usize = shards.iter().map(Dataset::len).sum();
    let mut pooled = vec![0.0; k];
    for shard in shards {
        for &y in shard.samples.labels() {
            pooled[y] += 1.0 / total as f64;
        }
    }
    shards
        .iter()
        .map(|s| {
            let dist = s.label_distribution();
            0.5 * dist.iter().zip(&pooled).map(|(a, b)| (a - b).abs()).sum::<f64>()
        })
        .sum::<f64>()
        / shards.len() as f64
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;
    use crate::model::{backward, init_params, accuracy, ModelConfig};
    use crate::optim::sgd_step;

    /// Synthetic data with a trailing index column so shards can be traced
    /// back to source rows.
    fn indexed(n: usize, classes: usize, seed: u64) -> Dataset {
        let base = generate_synthetic(classes, 3, n, 4.0, seed).unwrap();
        let mut features = Vec::with_capacity(n * 4);
        for i in 0..n {
            features.extend_from_slice(base.samples.row(i));
            features.push(i as f64);
        }
        Dataset::new(
            Batch::new(features, base.samples.labels().to_vec(), 4).unwrap(),
            classes,
        )
        .unwrap()
    }

    fn source_ids(shard: &Dataset) -> Vec<usize> {
        (0..shard.len())
            .map(|i| shard.samples.row(i)[3] as usize)
            .collect()
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(3, 5, 40, 2.0, 17).unwrap();
        let b = generate_synthetic(3, 5, 40, 2.0, 17).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synthetic_classes_are_balanced() {
        let d = generate_synthetic(5, 4, 10, 1.0, 3).unwrap();
        for c in 0..5 {
            assert_eq!(d.samples.labels().iter().filter(|&&y| y == c).count(), 2);
        }
    }

    #[test]
    fn synthetic_rejects_bad_counts() {
        assert!(generate_synthetic(1, 4, 10, 1.0, 0).is_err());
        assert!(generate_synthetic(4, 4, 3, 1.0, 0).is_err());
        assert!(generate_synthetic(2, 4, 10, 0.0, 0).is_err());
    }

    #[test]
    fn well_separated_data_is_learnable() {
        let data = generate_synthetic(2, 2, 200, 10.0, 5).unwrap();
        let config = ModelConfig::linear(2, 2).unwrap();
        let mut params = init_params(&config, 1);
        for _ in 0..100 {
            let g = backward(&params, &config, &data.samples).unwrap();
            params = sgd_step(&params, &g, 0.1).unwrap();
        }
        assert!(accuracy(&params, &config, &data.samples).unwrap() >= 0.99);
    }

    #[test]
    fn iid_partition_gives_equal_disjoint_shards() {
        let data = indexed(5400, 10, 1);
        let spec = PartitionSpec {
            num_clients: 10,
            samples_per_client: 540,
            mode: PartitionMode::Iid,
            non_iid_concentration: 1.0,
            seed: 4,
        };
        let shards = partition(&data, &spec).unwrap();
        assert_eq!(shards.len(), 10);
        let mut seen = HashSet::new();
        for shard in &shards {
            assert_eq!(shard.len(), 540);
            for id in source_ids(shard) {
                assert!(seen.insert(id), "sample {id} appears twice");
            }
        }
        assert_eq!(seen.len(), 5400);
    }

    #[test]
    fn single_client_gets_permutation_of_prefix() {
        let data = indexed(50, 2, 2);
        let spec = PartitionSpec {
            num_clients: 1,
            samples_per_client: 20,
            mode: PartitionMode::Iid,
            non_iid_concentration: 1.0,
            seed: 9,
        };
        let shard = &partition(&data, &spec).unwrap()[0];
        let mut ids = source_ids(shard);
        ids.sort_unstable();
        assert_eq!(ids, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn partition_rejects_oversubscription() {
        let data = indexed(30, 2, 0);
        let spec = PartitionSpec {
            num_clients: 4,
            samples_per_client: 8,
            mode: PartitionMode::Iid,
            non_iid_concentration: 1.0,
            seed: 0,
        };
        assert!(matches!(partition(&data, &spec), Err(Error::Config(_))));
    }

    #[test]
    fn non_iid_shards_are_disjoint_and_skewed() {
        let data = indexed(2000, 5, 3);
        let mut found_majority = false;
        for seed in 0..5 {
            let spec = PartitionSpec {
                num_clients: 10,
                samples_per_client: 100,
                mode: PartitionMode::NonIid,
                non_iid_concentration: 0.1,
                seed,
            };
            let shards = partition(&data, &spec).unwrap();
            let mut seen = HashSet::new();
            for shard in &shards {
                assert_eq!(shard.len(), 100);
                for id in source_ids(shard) {
                    assert!(seen.insert(id));
                }
                let top = shard.label_distribution().into_iter().fold(0.0, f64::max);
                found_majority |= top > 0.6;
            }
        }
        assert!(found_majority);
    }

    #[test]
    fn non_iid_is_more_skewed_than_iid() {
        let data = indexed(3000, 5, 8);
        let mk = |mode| PartitionSpec {
            num_clients: 10,
            samples_per_client: 200,
            mode,
            non_iid_concentration: 0.3,
            seed: 1,
        };
        let iid = label_skew(&partition(&data, &mk(PartitionMode::Iid)).unwrap());
        let non_iid = label_skew(&partition(&data, &mk(PartitionMode::NonIid)).unwrap());
        assert!(iid < 0.1, "iid skew {iid}");
        assert!(non_iid > iid);
    }

    #[test]
    fn partition_is_deterministic() {
        let data = indexed(400, 4, 5);
        let spec = PartitionSpec {
            num_clients: 3,
            samples_per_client: 100,
            mode: PartitionMode::NonIid,
            non_iid_concentration: 0.5,
            seed: 12,
        };
        assert_eq!(partition(&data, &spec).unwrap(), partition(&data, &spec).unwrap());
    }
}
