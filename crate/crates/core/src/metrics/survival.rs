use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::data::SurvivalRecord;
use crate::error::{ensure, Result};

/// Fenwick tree of counts over risk ranks.
struct Fenwick(Vec<u64>);

impl Fenwick {
    fn new(n: usize) -> Self {
        Fenwick(vec![0; n + 1])
    }

    fn add(&mut self, rank: usize) {
        let mut i = rank + 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted ranks strictly below `rank`.
    fn below(&self, rank: usize) -> u64 {
        let mut i = rank;
        let mut total = 0;
        while i > 0 {
            total += self.0[i];
            i -= i & i.wrapping_neg();
        }
        total
    }
}

/// Dense ranks of `values`, equal values sharing a rank.
fn dense_ranks(values: &[f64]) -> (Vec<usize>, usize) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0; values.len()];
    let mut rank = 0;
    for w in 0..order.len() {
        if w > 0 && values[order[w]] != values[order[w - 1]] {
            rank += 1;
        }
        ranks[order[w]] = rank;
    }
    (ranks, rank + 1)
}

/// Harrell's C-index. A pair `(i, j)` is comparable when `t_i < t_j` and
/// `i` had an event; it scores 1 when `risk_i > risk_j` and 0.5 on a tie.
pub fn concordance_index(records: &[SurvivalRecord], risks: &[f64]) -> Result<f64> {
    ensure!(records.len() == risks.len(), Shape, "{} records but {} risks", records.len(), risks.len());
    ensure!(risks.iter().all(|r| !r.is_nan()), Validation, "NaN risk");
    let n = records.len();
    let (ranks, n_ranks) = dense_ranks(risks);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| records[b].time.total_cmp(&records[a].time));
    let mut tree = Fenwick::new(n_ranks);
    let (mut inserted, mut comparable, mut doubled_credit) = (0u64, 0u64, 0u64);
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && records[order[j]].time == records[order[i]].time {
            j += 1;
        }
        // The tree holds every sample with a strictly later time.
        for &k in order[i..j].iter().filter(|&&k| records[k].event) {
            let below = tree.below(ranks[k]);
            let tied = tree.below(ranks[k] + 1) - below;
            comparable += inserted;
            doubled_credit += 2 * below + tied;
        }
        for &k in &order[i..j] {
            tree.add(ranks[k]);
            inserted += 1;
        }
        i = j;
    }
    ensure!(comparable > 0, Validation, "C-index undefined: no comparable pairs");
    Ok(doubled_credit as f64 / (2 * comparable) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    /// Distinct event times, ascending.
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    /// Number at risk just before each time.
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
}

impl KmCurve {
    pub fn survival_at(&self, t: f64) -> f64 {
        let n = self.times.partition_point(|&e| e <= t);
        if n == 0 {
            1.0
        } else {
            self.survival[n - 1]
        }
    }

    /// `time,survival,at_risk` rows, starting with the origin.
    pub fn to_csv(&self, n_total: usize) -> String {
        let mut out = String::from("time,survival,at_risk\n");
        out.push_str(&format!("0,1,{n_total}\n"));
        for k in 0..self.times.len() {
            out.push_str(&format!("{},{},{}\n", self.times[k], self.survival[k], self.at_risk[k]));
        }
        out
    }
}

/// Kaplan-Meier product-limit estimator over the distinct event times.
pub fn km_curve(records: &[SurvivalRecord]) -> Result<KmCurve> {
    ensure!(!records.is_empty(), Validation, "Kaplan-Meier needs at least one record");
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| a.time.total_cmp(&b.time));
    let mut curve = KmCurve {
        times: vec![],
        survival: vec![],
        at_risk: vec![],
        events: vec![],
    };
    let mut s = 1.0;
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].time;
        let mut j = i;
        while j < sorted.len() && sorted[j].time == t {
            j += 1;
        }
        let d = sorted[i..j].iter().filter(|r| r.event).count();
        if d > 0 {
            let n = sorted.len() - i;
            s *= 1.0 - d as f64 / n as f64;
            curve.times.push(t);
            curve.survival.push(s);
            curve.at_risk.push(n);
            curve.events.push(d);
        }
        i = j;
    }
    Ok(curve)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRank {
    pub statistic: f64,
    pub p_value: f64,
    pub observed_a: f64,
    pub expected_a: f64,
    pub variance: f64,
}

/// Two-group log-rank test with hypergeometric variance and 1 degree of freedom.
pub fn logrank_test(a: &[SurvivalRecord], b: &[SurvivalRecord]) -> Result<LogRank> {
    ensure!(!a.is_empty() && !b.is_empty(), Validation, "log-rank needs two nonempty groups");
    let mut times: Vec<f64> = a.iter().chain(b).filter(|r| r.event).map(|r| r.time).collect();
    ensure!(!times.is_empty(), Validation, "log-rank needs at least one event");
    times.sort_by(f64::total_cmp);
    times.dedup();
    let count = |g: &[SurvivalRecord], t: f64| {
        let at_risk = g.iter().filter(|r| r.time >= t).count() as f64;
        let deaths = g.iter().filter(|r| r.event && r.time == t).count() as f64;
        (at_risk, deaths)
    };
    let (mut observed, mut expected, mut variance) = (0.0, 0.0, 0.0);
    for t in times {
        let (na, da) = count(a, t);
        let (nb, db) = count(b, t);
        let (n, d) = (na + nb, da + db);
        observed += da;
        expected += d * na / n;
        if n > 1.0 {
            variance += d * (na / n) * (nb / n) * (n - d) / (n - 1.0);
        }
    }
    ensure!(variance > 0.0, Validation, "log-rank undefined: zero variance");
    let statistic = (observed - expected).powi(2) / variance;
    let chi2 = ChiSquared::new(1.0).expect("valid degrees of freedom");
    Ok(LogRank {
        statistic,
        p_value: chi2.sf(statistic),
        observed_a: observed,
        expected_a: expected,
        variance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn cindex_oracle(records: &[SurvivalRecord], risks: &[f64]) -> Option<f64> {
        let (mut credit, mut pairs) = (0.0, 0.0);
        for i in 0..records.len() {
            for j in 0..records.len() {
                if records[i].event && records[i].time < records[j].time {
                    pairs += 1.0;
                    if risks[i] > risks[j] {
                        credit += 1.0;
                    } else if risks[i] == risks[j] {
                        credit += 0.5;
                    }
                }
            }
        }
        (pairs > 0.0).then(|| credit / pairs)
    }

    fn recs(times: &[f64], events: &[bool]) -> Vec<SurvivalRecord> {
        times.iter().zip(events).map(|(&t, &e)| SurvivalRecord::new(t, e)).collect()
    }

    #[test]
    fn cindex_examples() {
        let all = recs(&[1.0, 2.0, 3.0], &[true; 3]);
        assert_eq!(concordance_index(&all, &[3.0, 2.0, 1.0]).unwrap(), 1.0);
        assert_eq!(concordance_index(&all, &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        let mixed = recs(&[1.0, 2.0, 3.0], &[true, false, true]);
        let value = concordance_index(&mixed, &[3.0, 1.0, 2.0]).unwrap();
        assert_eq!(Some(value), cindex_oracle(&mixed, &[3.0, 1.0, 2.0]));
        assert_eq!(value, 1.0);
        assert!(concordance_index(&recs(&[1.0, 2.0], &[false, false]), &[1.0, 2.0]).is_err());
    }

    #[test]
    fn km_examples() {
        let flat = km_curve(&recs(&[1.0, 2.0], &[false, false])).unwrap();
        assert!(flat.times.is_empty());
        assert_eq!(flat.survival_at(5.0), 1.0);
        let two = km_curve(&recs(&[1.0, 2.0], &[true, true])).unwrap();
        assert_eq!(two.survival, vec![0.5, 0.0]);
        assert_eq!(two.survival_at(1.5), 0.5);
        assert!(two.to_csv(2).starts_with("time,survival,at_risk\n0,1,2\n1,0.5,2\n"));
    }

    #[test]
    fn logrank_hand_table() {
        // A: events at 1 and 3. B: event at 2, censored at 4.
        // t=1: n=(2,2) d=1 dA=1, E=1/2, V=1/4
        // t=2: n=(1,2) d=1 dA=0, E=1/3, V=2/9
        // t=3: n=(1,1) d=1 dA=1, E=1/2, V=1/4
        // O-E = 2/3, V = 13/18, chi2 = 8/13
        let a = recs(&[1.0, 3.0], &[true, true]);
        let b = recs(&[2.0, 4.0], &[true, false]);
        let lr = logrank_test(&a, &b).unwrap();
        assert!((lr.expected_a - 4.0 / 3.0).abs() < 1e-12);
        assert!((lr.variance - 13.0 / 18.0).abs() < 1e-12);
        assert!((lr.statistic - 8.0 / 13.0).abs() < 1e-9);
        // erfc(sqrt(chi2 / 2)) for one degree of freedom.
        assert!((lr.p_value - 0.43276758066778465).abs() < 1e-9);
        let swapped = logrank_test(&b, &a).unwrap();
        assert!((swapped.statistic - lr.statistic).abs() < 1e-12);
    }

    #[test]
    fn logrank_identical_groups() {
        let a = recs(&[1.0, 2.0, 3.0, 4.0], &[true, false, true, true]);
        let lr = logrank_test(&a, &a).unwrap();
        assert!(lr.statistic.abs() < 1e-12);
        assert!((lr.p_value - 1.0).abs() < 1e-9);
        assert!(logrank_test(&recs(&[1.0], &[false]), &recs(&[2.0], &[false])).is_err());
    }

    fn survival_data() -> impl Strategy<Value = (Vec<SurvivalRecord>, Vec<f64>)> {
        prop::collection::vec((1u8..30, any::<bool>(), 0u8..15), 2..200).prop_map(|rows| {
            let records = rows.iter().map(|r| SurvivalRecord::new(r.0 as f64, r.1)).collect();
            let risks = rows.iter().map(|r| r.2 as f64 * 0.5 - 2.0).collect();
            (records, risks)
        })
    }

    proptest! {
        #[test]
        fn cindex_matches_pair_enumeration((records, risks) in survival_data()) {
            match cindex_oracle(&records, &risks) {
                Some(expected) => prop_assert_eq!(concordance_index(&records, &risks).unwrap(), expected),
                None => prop_assert!(concordance_index(&records, &risks).is_err()),
            }
        }

        #[test]
        fn cindex_invariant_to_monotone_transform((records, risks) in survival_data()) {
            prop_assume!(cindex_oracle(&records, &risks).is_some());
            let warped: Vec<f64> = risks.iter().map(|r| (r * 0.7).exp() + r).collect();
            prop_assert_eq!(
                concordance_index(&records, &risks).unwrap(),
                concordance_index(&records, &warped).unwrap()
            );
        }

        #[test]
        fn km_is_monotone((records, _) in survival_data()) {
            let c = km_curve(&records).unwrap();
            prop_assert!(c.survival.iter().all(|s| (0.0..=1.0).contains(s)));
            prop_assert!(c.survival.windows(2).all(|w| w[0] >= w[1]));
        }

        #[test]
        fn logrank_symmetric((records, _) in survival_data(), cut in 1usize..100) {
            let cut = cut % (records.len() - 1) + 1;
            let (a, b) = records.split_at(cut);
            if let Ok(x) = logrank_test(a, b) {
                let y = logrank_test(b, a).unwrap();
                prop_assert!((x.statistic - y.statistic).abs() <= 1e-9 * (1.0 + x.statistic));
                prop_assert!((0.0..=1.0).contains(&x.p_value));
            }
        }
    }
}
