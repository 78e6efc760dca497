//! Aggregation rules over client updates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    #[default]
    Fedavg,
    Median,
    TrimmedMean,
    Signsgd,
}

fn check_updates(updates: &[ParamVector]) -> Result<usize> {
    let first = updates
        .first()
        .ok_or_else(|| Error::Aggregation("no updates to aggregate".into()))?;
    let dim = first.dim();
    for u in updates {
        u.check_dim(dim)?;
    }
    Ok(dim)
}

/// Weighted mean `sum(w_i * u_i) / sum(w_i)`.
pub fn fedavg(updates: &[ParamVector], weights: &[f64]) -> Result<ParamVector> {
    let dim = check_updates(updates)?;
    if weights.len() != updates.len() {
        return Err(Error::Aggregation(format!(
            "{} weights for {} updates",
            weights.len(),
            updates.len()
        )));
    }
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::Aggregation("weights must be non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Aggregation("weights sum to zero".into()));
    }
    let mut out = vec![0.0; dim];
    for (u, &w) in updates.iter().zip(weights) {
        for (o, v) in out.iter_mut().zip(u.iter()) {
            *o += w * v;
        }
    }
    out.iter_mut().for_each(|o| *o /= total);
    Ok(ParamVector::new(out))
}

/// Values of coordinate `j` across all updates, sorted ascending.
fn sorted_column(updates: &[ParamVector], j: usize) -> Vec<f64> {
    let mut column: Vec<f64> = updates.iter().map(|u| u[j]).collect();
    column.sort_by(f64::total_cmp);
    column
}

/// Coordinate-wise median; even counts average the two central values.
pub fn coord_median(updates: &[ParamVector]) -> Result<ParamVector> {
    let dim = check_updates(updates)?;
    let n = updates.len();
    Ok(ParamVector::new(
        (0..dim)
            .map(|j| {
                let col = sorted_column(updates, j);
                if n % 2 == 1 {
                    col[n / 2]
                } else {
                    (col[n / 2 - 1] + col[n / 2]) / 2.0
                }
            })
            .collect(),
    ))
}

/// Coordinate-wise trimmed mean: drop the `floor(delta * n)` largest and
/// smallest values at every coordinate and average the rest.
pub fn trimmed_mean(updates: &[ParamVector], delta: f64) -> Result<ParamVector> {
    let dim = check_updates(updates)?;
    if !(0.0..0.5).contains(&delta) {
        return Err(Error::Aggregation(format!("trim fraction {delta} outside [0, 0.5)")));
    }
    let n = updates.len();
    let k = (delta * n as f64).floor() as usize;
    if 2 * k >= n {
        return Err(Error::Aggregation(format!(
            "trimming {k} per side leaves nothing of {n} updates"
        )));
    }
    let kept = (n - 2 * k) as f64;
    Ok(ParamVector::new(
        (0..dim)
            .map(|j| sorted_column(updates, j)[k..n - k].iter().sum::<f64>() / kept)
            .collect(),
    ))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Majority vote over gradient signs; returns the applied delta
/// `-eta * vote`. Tied coordinates vote 0.
pub fn signsgd_aggregate(gradients: &[ParamVector], eta: f64) -> Result<ParamVector> {
    let dim = check_updates(gradients)?;
    Ok(ParamVector::new(
        (0..dim)
            .map(|j| {
                let tally: f64 = gradients.iter().map(|g| sign(g[j])).sum();
                -eta * sign(tally)
            })
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec())
    }

    #[test]
    fn empty_inputs_fail() {
        assert!(matches!(fedavg(&[], &[]), Err(Error::Aggregation(_))));
        assert!(matches!(coord_median(&[]), Err(Error::Aggregation(_))));
        assert!(matches!(trimmed_mean(&[], 0.1), Err(Error::Aggregation(_))));
        assert!(matches!(signsgd_aggregate(&[], 0.1), Err(Error::Aggregation(_))));
    }

    #[test]
    fn fedavg_examples() {
        let u = pv(&[0.3, -0.7]);
        assert_eq!(fedavg(std::slice::from_ref(&u), &[5.0]).unwrap(), u);
        let avg = fedavg(&[pv(&[1.0, 3.0]), pv(&[3.0, 1.0])], &[1.0, 1.0]).unwrap();
        assert_eq!(avg, pv(&[2.0, 2.0]));
        assert!(fedavg(std::slice::from_ref(&u), &[0.0]).is_err());
        assert!(fedavg(&[u], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn median_examples() {
        let m = coord_median(&[pv(&[1.0, 2.0]), pv(&[3.0, 0.0]), pv(&[5.0, 4.0])]).unwrap();
        assert_eq!(m, pv(&[3.0, 2.0]));
        let same = pv(&[1.5, -2.0, 0.0]);
        assert_eq!(coord_median(&vec![same.clone(); 4]).unwrap(), same);
        let even = coord_median(&[pv(&[1.0]), pv(&[4.0]), pv(&[2.0]), pv(&[10.0])]).unwrap();
        assert_eq!(even, pv(&[3.0]));
    }

    #[test]
    fn median_ignores_single_outlier() {
        let honest = [pv(&[1.0]), pv(&[2.0]), pv(&[3.0]), pv(&[4.0])];
        let mut with_outlier = honest.to_vec();
        with_outlier.push(pv(&[1e9]));
        let mut with_normal = honest.to_vec();
        with_normal.push(pv(&[3.5]));
        assert_eq!(
            coord_median(&with_outlier).unwrap(),
            coord_median(&with_normal).unwrap()
        );
    }

    #[test]
    fn trimmed_mean_examples() {
        let ups = [pv(&[1.0, 9.0]), pv(&[3.0, -1.0]), pv(&[5.0, 4.0])];
        assert_eq!(
            trimmed_mean(&ups, 0.0).unwrap(),
            fedavg(&ups, &[1.0, 1.0, 1.0]).unwrap()
        );
        assert_eq!(trimmed_mean(&[pv(&[1.0]), pv(&[3.0]), pv(&[5.0])], 1.0 / 3.0).unwrap(), pv(&[3.0]));
        // N = 5, delta = 0.2: drop 100 and -100, average 1, 2, 3.
        let five = [pv(&[100.0]), pv(&[1.0]), pv(&[-100.0]), pv(&[2.0]), pv(&[3.0])];
        assert_eq!(trimmed_mean(&five, 0.2).unwrap(), pv(&[2.0]));
        assert!(trimmed_mean(&five, 0.5).is_err());
    }

    #[test]
    fn trimmed_mean_rejects_over_trimming() {
        // floor(0.49 * 2) = 0, fine; floor(0.45 * 3) = 1 leaves one value.
        assert!(trimmed_mean(&[pv(&[1.0]), pv(&[2.0])], 0.49).is_ok());
        assert!(trimmed_mean(&[pv(&[1.0]), pv(&[2.0]), pv(&[3.0])], 0.45).is_ok());
    }

    #[test]
    fn signsgd_examples() {
        let single = signsgd_aggregate(&[pv(&[0.5, -0.2, 0.0])], 1.0).unwrap();
        assert_eq!(single, pv(&[-1.0, 1.0, 0.0]));
        let votes = signsgd_aggregate(&[pv(&[1.0]), pv(&[2.0]), pv(&[-3.0])], 0.1).unwrap();
        assert_eq!(votes, pv(&[-0.1]));
        let tie = signsgd_aggregate(&[pv(&[1.0]), pv(&[-1.0])], 0.1).unwrap();
        assert_eq!(tie, pv(&[0.0]));
    }

    #[test]
    fn median_breakdown_with_five_of_eleven_adversaries() {
        let mut ups: Vec<ParamVector> = (0..6).map(|i| pv(&[i as f64 * 0.1, 1.0])).collect();
        ups.extend((0..5).map(|_| pv(&[1e6, 1.0])));
        let m = coord_median(&ups).unwrap();
        assert!((0.0..=0.5).contains(&m[0]));
    }
}
