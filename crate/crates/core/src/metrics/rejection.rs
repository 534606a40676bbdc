use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Slack on `q * n` so that e.g. `0.7 * 10` rejects 7 samples, not 8.
const FRACTION_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionPoint {
    pub fraction: f64,
    pub n_retained: usize,
    /// `None` when the metric is undefined on the retained samples.
    pub value: Option<f64>,
}

pub fn n_rejected(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64 - FRACTION_SLACK).ceil().max(0.0) as usize).min(n)
}

/// For each fraction `q`, drops the `ceil(q n)` most uncertain samples and
/// evaluates `metric` on the retained indices. Equal uncertainties are
/// rejected in sample order.
pub fn rejection_curve<F>(uncertainties: &[f64], fractions: &[f64], metric: F) -> Result<Vec<RejectionPoint>>
where
    F: Fn(&[usize]) -> Result<f64>,
{
    ensure!(uncertainties.iter().all(|u| !u.is_nan()), Validation, "NaN uncertainty");
    ensure!(
        fractions.iter().all(|q| (0.0..1.0).contains(q)),
        Validation,
        "rejection fractions must lie in [0, 1)"
    );
    let n = uncertainties.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| uncertainties[b].total_cmp(&uncertainties[a]));
    Ok(fractions
        .iter()
        .map(|&q| {
            let mut kept = order[n_rejected(q, n)..].to_vec();
            kept.sort_unstable();
            RejectionPoint {
                fraction: q,
                n_retained: kept.len(),
                value: if kept.is_empty() { None } else { metric(&kept).ok() },
            }
        })
        .collect())
}

/// `fraction,value,n_retained` rows; undefined points leave `value` empty.
pub fn rejection_csv(points: &[RejectionPoint]) -> String {
    let mut out = String::from("fraction,value,n_retained\n");
    for p in points {
        let v = p.value.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{}\n", p.fraction, v, p.n_retained));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::balanced_accuracy;

    #[test]
    fn rejection_counts() {
        assert_eq!(n_rejected(0.0, 10), 0);
        assert_eq!(n_rejected(0.2, 10), 2);
        assert_eq!(n_rejected(0.7, 10), 7);
        assert_eq!(n_rejected(0.25, 10), 3);
    }

    #[test]
    fn errors_as_uncertainty_reach_perfect_accuracy() {
        let truth = [0, 1, 0, 1, 0, 1, 0, 1, 0, 1];
        let pred = [0, 1, 1, 1, 0, 0, 0, 1, 0, 1];
        let unc: Vec<f64> = truth.iter().zip(&pred).map(|(t, p)| (t != p) as u8 as f64).collect();
        let metric = |idx: &[usize]| {
            let t: Vec<usize> = idx.iter().map(|&i| truth[i]).collect();
            let p: Vec<usize> = idx.iter().map(|&i| pred[i]).collect();
            balanced_accuracy(&t, &p, 2)
        };
        let curve = rejection_curve(&unc, &[0.0, 0.1, 0.2, 0.5], metric).unwrap();
        assert_eq!(curve[0].value, Some(metric(&(0..10).collect::<Vec<_>>()).unwrap()));
        assert!(curve[1].value.unwrap() < 1.0);
        assert_eq!(curve[2].value, Some(1.0));
        assert_eq!(curve[3].value, Some(1.0));
        assert_eq!(curve[2].n_retained, 8);
    }

    #[test]
    fn ties_break_in_sample_order_and_undefined_points() {
        let seen = std::cell::RefCell::new(vec![]);
        let metric = |idx: &[usize]| {
            seen.borrow_mut().push(idx.to_vec());
            if idx.len() < 2 {
                Err(crate::Error::Validation("small".into()))
            } else {
                Ok(idx.len() as f64)
            }
        };
        let curve = rejection_curve(&[1.0, 1.0, 1.0], &[0.3, 0.6], metric).unwrap();
        assert_eq!(seen.borrow()[0], vec![1, 2]);
        assert_eq!(curve[1].value, None);
        assert!(rejection_csv(&curve).ends_with("0.6,,1\n"));
        assert!(rejection_curve(&[1.0], &[1.0], |_| Ok(0.0)).is_err());
    }
}
