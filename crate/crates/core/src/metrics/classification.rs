use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KappaWeighting {
    #[default]
    None,
    Quadratic,
}

impl std::str::FromStr for KappaWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(KappaWeighting::None),
            "quadratic" => Ok(KappaWeighting::Quadratic),
            other => Err(Error::Validation(format!("unknown kappa weighting '{other}'"))),
        }
    }
}

/// Mean per-class recall over classes `0..n_classes`.
pub fn balanced_accuracy(truth: &[usize], pred: &[usize], n_classes: usize) -> Result<f64> {
    ensure!(!truth.is_empty(), Validation, "balanced accuracy needs at least one sample");
    ensure!(truth.len() == pred.len(), Shape, "{} labels but {} predictions", truth.len(), pred.len());
    let mut support = vec![0usize; n_classes];
    let mut hits = vec![0usize; n_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        ensure!(t < n_classes, Validation, "label {t} outside {n_classes} classes");
        support[t] += 1;
        if t == p {
            hits[t] += 1;
        }
    }
    if let Some(c) = support.iter().position(|&s| s == 0) {
        return Err(Error::Validation(format!("class {c} has no true samples")));
    }
    Ok(hits.iter().zip(&support).map(|(&h, &s)| h as f64 / s as f64).sum::<f64>() / n_classes as f64)
}

/// Twice the Mann-Whitney U statistic: two per concordant pair, one per tie.
fn doubled_u(truth: &[bool], scores: &[f64]) -> u128 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut doubled = 0u128;
    let mut negatives_below = 0u128;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let pos = order[i..j].iter().filter(|&&k| truth[k]).count() as u128;
        let neg = (j - i) as u128 - pos;
        doubled += pos * (2 * negatives_below + neg);
        negatives_below += neg;
        i = j;
    }
    doubled
}

/// Area under the ROC curve in Mann-Whitney form with half credit for ties.
pub fn auc(truth: &[bool], scores: &[f64]) -> Result<f64> {
    ensure!(truth.len() == scores.len(), Shape, "{} labels but {} scores", truth.len(), scores.len());
    ensure!(scores.iter().all(|s| !s.is_nan()), Validation, "NaN score");
    let pos = truth.iter().filter(|&&t| t).count() as u128;
    let neg = truth.len() as u128 - pos;
    ensure!(pos > 0 && neg > 0, Validation, "AUC needs both classes");
    Ok(doubled_u(truth, scores) as f64 / (2 * pos * neg) as f64)
}

pub fn cohens_kappa(truth: &[usize], pred: &[usize], weighting: KappaWeighting) -> Result<f64> {
    ensure!(!truth.is_empty(), Validation, "kappa needs at least one sample");
    ensure!(truth.len() == pred.len(), Shape, "{} labels but {} predictions", truth.len(), pred.len());
    let c = truth.iter().chain(pred).copied().max().unwrap_or(0) + 1;
    let n = truth.len() as f64;
    let mut table = vec![vec![0.0; c]; c];
    let (mut rows, mut cols) = (vec![0.0; c], vec![0.0; c]);
    for (&t, &p) in truth.iter().zip(pred) {
        table[t][p] += 1.0 / n;
        rows[t] += 1.0 / n;
        cols[p] += 1.0 / n;
    }
    let weight = |i: usize, j: usize| -> f64 {
        match weighting {
            KappaWeighting::None => (i != j) as u8 as f64,
            KappaWeighting::Quadratic => {
                let d = i as f64 - j as f64;
                d * d / ((c - 1) as f64).powi(2)
            }
        }
    };
    let (mut observed, mut expected) = (0.0, 0.0);
    for i in 0..c {
        for j in 0..c {
            if i != j {
                observed += weight(i, j) * table[i][j];
                expected += weight(i, j) * rows[i] * cols[j];
            }
        }
    }
    ensure!(expected > 0.0, Validation, "kappa undefined: zero expected disagreement");
    Ok(1.0 - observed / expected)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    ensure!(x.len() == y.len(), Shape, "{} vs {} values", x.len(), y.len());
    ensure!(x.len() >= 2, Validation, "correlation needs at least two points");
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    ensure!(sxx > 0.0 && syy > 0.0, Validation, "correlation undefined: zero variance");
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn auc_oracle(truth: &[bool], scores: &[f64]) -> f64 {
        let (mut credit, mut pairs) = (0.0, 0.0);
        for i in 0..truth.len() {
            for j in 0..truth.len() {
                if truth[i] && !truth[j] {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        credit += 1.0;
                    } else if scores[i] == scores[j] {
                        credit += 0.5;
                    }
                }
            }
        }
        credit / pairs
    }

    #[test]
    fn bacc_examples() {
        assert_eq!(balanced_accuracy(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);
        assert_eq!(balanced_accuracy(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap(), 0.75);
        let truth = [0, 0, 1, 1, 2, 2, 3, 3];
        assert_eq!(balanced_accuracy(&truth, &[2; 8], 4).unwrap(), 0.25);
        assert!(balanced_accuracy(&[0, 0], &[0, 0], 2).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[false, false, true, true], &[0.1, 0.2, 0.3, 0.4]).unwrap(), 1.0);
        assert_eq!(auc(&[false, false, true, true], &[0.4, 0.3, 0.2, 0.1]).unwrap(), 0.0);
        assert_eq!(auc(&[false, true], &[0.5, 0.5]).unwrap(), 0.5);
        assert!(auc(&[true, true], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(cohens_kappa(&[0, 1, 2, 1], &[0, 1, 2, 1], KappaWeighting::None).unwrap(), 1.0);
        assert!((cohens_kappa(&[0, 1], &[1, 0], KappaWeighting::None).unwrap() + 1.0).abs() < 1e-15);
        let plain = cohens_kappa(&[0, 1, 2], &[0, 1, 1], KappaWeighting::None).unwrap();
        let quad = cohens_kappa(&[0, 1, 2], &[0, 1, 1], KappaWeighting::Quadratic).unwrap();
        // Hand tables: unweighted 1 - (1/3)/(2/3), quadratic 1 - (1/12)/(1/4).
        assert!((plain - 0.5).abs() < 1e-12);
        assert!((quad - 2.0 / 3.0).abs() < 1e-12);
        assert!(quad >= plain);
        assert!(cohens_kappa(&[1, 1], &[1, 1], KappaWeighting::None).is_err());
        assert_eq!("quadratic".parse::<KappaWeighting>().unwrap(), KappaWeighting::Quadratic);
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-15);
        let r = pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
        assert!((r - 3.0 / (2.0f64 * 14.0 / 3.0).sqrt()).abs() < 1e-12);
        assert!((r - 0.98198).abs() < 1e-5);
        assert!(pearson(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn auc_matches_pair_enumeration(
            data in prop::collection::vec((any::<bool>(), 0u8..12), 2..150),
        ) {
            let truth: Vec<bool> = data.iter().map(|d| d.0).collect();
            let scores: Vec<f64> = data.iter().map(|d| d.1 as f64 / 4.0).collect();
            prop_assume!(truth.iter().any(|&t| t) && truth.iter().any(|&t| !t));
            prop_assert_eq!(auc(&truth, &scores).unwrap(), auc_oracle(&truth, &scores));
        }

        #[test]
        fn auc_invariant_to_monotone_transform(
            data in prop::collection::vec((any::<bool>(), -3.0f64..3.0), 2..80),
        ) {
            let truth: Vec<bool> = data.iter().map(|d| d.0).collect();
            let scores: Vec<f64> = data.iter().map(|d| d.1).collect();
            prop_assume!(truth.iter().any(|&t| t) && truth.iter().any(|&t| !t));
            let warped: Vec<f64> = scores.iter().map(|s| s.exp() * 3.0 + 1.0).collect();
            prop_assert_eq!(auc(&truth, &scores).unwrap(), auc(&truth, &warped).unwrap());
        }

        #[test]
        fn bacc_invariant_to_label_permutation(
            data in prop::collection::vec((0usize..3, 0usize..3), 3..60),
            perm_idx in 0usize..6,
        ) {
            let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let p = perms[perm_idx];
            let truth: Vec<usize> = data.iter().map(|d| d.0).collect();
            let pred: Vec<usize> = data.iter().map(|d| d.1).collect();
            prop_assume!((0..3).all(|c| truth.contains(&c)));
            let t2: Vec<usize> = truth.iter().map(|&t| p[t]).collect();
            let p2: Vec<usize> = pred.iter().map(|&t| p[t]).collect();
            let a = balanced_accuracy(&truth, &pred, 3).unwrap();
            let b = balanced_accuracy(&t2, &p2, 3).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
