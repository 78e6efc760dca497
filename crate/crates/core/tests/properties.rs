use proptest::prelude::*;

use fedaudit::aggregation::{coord_median, fedavg, signsgd_aggregate, trimmed_mean};
use fedaudit::defense::{
    apply_pass_reports, dsr, fpr, pass_contribution_step, pass_eliminate, AuditMatrix, ContributionLedger,
};
use fedaudit::ParamVector;

fn updates() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>, Vec<usize>)> {
    (1usize..=9, 1usize..=16).prop_flat_map(|(n, d)| {
        (
            prop::collection::vec(prop::collection::vec(-10.0f64..10.0, d), n),
            prop::collection::vec(0.1f64..5.0, n),
            Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
        )
    })
}

fn close(a: &ParamVector, b: &ParamVector) -> bool {
    a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= 1e-12 * x.abs().max(1.0))
}

proptest! {
    #[test]
    fn aggregators_ignore_client_order((raw, weights, perm) in updates()) {
        let u: Vec<ParamVector> = raw.iter().cloned().map(ParamVector::new).collect();
        let pu: Vec<ParamVector> = perm.iter().map(|&i| u[i].clone()).collect();
        let pw: Vec<f64> = perm.iter().map(|&i| weights[i]).collect();
        prop_assert!(close(&fedavg(&u, &weights).unwrap(), &fedavg(&pu, &pw).unwrap()));
        prop_assert_eq!(coord_median(&u).unwrap(), coord_median(&pu).unwrap());
        prop_assert_eq!(signsgd_aggregate(&u, 0.1).unwrap(), signsgd_aggregate(&pu, 0.1).unwrap());
        match (trimmed_mean(&u, 0.2), trimmed_mean(&pu, 0.2)) {
            (Ok(a), Ok(b)) => prop_assert!(close(&a, &b)),
            (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
        }
    }

    #[test]
    fn contributions_stay_bounded(
        c0 in -3.0f64..3.0,
        alpha in 0.0f64..=1.0,
        steps in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 0..6), 1..60),
    ) {
        let (lo, hi) = (c0.min(-1.0), c0.max(1.0));
        let mut c = c0;
        for reports in &steps {
            c = pass_contribution_step(c, reports, alpha).unwrap_or(c);
            prop_assert!(lo - 1e-12 <= c && c <= hi + 1e-12, "{} outside [{}, {}]", c, lo, hi);
        }
    }

    #[test]
    fn larger_beta_never_eliminates_more(
        contributions in prop::collection::vec(-0.2f64..0.4, 3..15),
        b1 in 1.0f64..5.0,
        extra in 0.0f64..5.0,
    ) {
        let mut low = ContributionLedger::new(contributions.len(), 0.0);
        low.contributions = contributions;
        let mut high = low.clone();
        let n = low.active_count();
        pass_eliminate(&mut low, b1, n);
        pass_eliminate(&mut high, b1 + extra, n);
        prop_assert!(high.eliminated.is_subset(&low.eliminated));
    }

    #[test]
    fn elimination_is_permanent(
        n in 3usize..10,
        rounds in prop::collection::vec(prop::collection::vec(-0.5f64..0.5, 90), 1..20),
        beta in 1.0f64..4.0,
    ) {
        let mut ledger = ContributionLedger::new(n, 1.0 / n as f64);
        for (r, draws) in rounds.iter().enumerate() {
            let before = ledger.eliminated.clone();
            let frozen: Vec<f64> = before.iter().map(|&i| ledger.contributions[i]).collect();
            let mut m = AuditMatrix::new(r, n);
            for a in 0..n {
                for t in 0..n {
                    if a != t {
                        m.record(a, t, draws[a * 9 + t % 9]).unwrap();
                    }
                }
            }
            apply_pass_reports(&mut ledger, &m, 0.9);
            let active = ledger.active_count();
            pass_eliminate(&mut ledger, beta, active);
            prop_assert!(before.is_subset(&ledger.eliminated));
            for (&i, c) in before.iter().zip(frozen) {
                prop_assert_eq!(ledger.contributions[i], c);
            }
        }
    }

    #[test]
    fn rates_partition_the_roster(
        fair in 1usize..10,
        frs in 1usize..10,
        picks in prop::collection::vec(any::<bool>(), 20),
    ) {
        let fair_ids = (0..fair).collect();
        let fr_ids = (fair..fair + frs).collect();
        let gone = (0..fair + frs).filter(|&i| picks[i]).collect();
        let hit_fr = (fair..fair + frs).filter(|&i| picks[i]).count();
        let hit_fair = (0..fair).filter(|&i| picks[i]).count();
        prop_assert_eq!(dsr(&gone, &fr_ids), Some(hit_fr as f64 / frs as f64 * 100.0));
        prop_assert_eq!(fpr(&gone, &fair_ids), Some(hit_fair as f64 / fair as f64 * 100.0));
    }
}
