//! Task-specific metric batteries over a prediction set.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{
    auc, balanced_accuracy, bootstrap_ci, cohens_kappa, concordance_index, km_curve, logrank_test, pearson,
    rejection_curve, BootstrapResult, KappaWeighting, KmCurve, LogRank, RejectionPoint,
};
use crate::data::{DatasetManifest, Label, SurvivalRecord};
use crate::error::{Error, Result};
use crate::inference::{SlidePrediction, SlideRecord};
use crate::stats::{percentile, sorted_copy};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub kappa_weighting: KappaWeighting,
    pub n_replicates: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            kappa_weighting: KappaWeighting::None,
            n_replicates: super::DEFAULT_REPLICATES,
            seed: crate::config::DEFAULT_SEED,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum EvaluationReport {
    Classification {
        n: usize,
        n_classes: usize,
        balanced_accuracy: BootstrapResult,
        kappa_weighting: KappaWeighting,
        kappa: BootstrapResult,
        /// Binary tasks only, scored by the class-1 probability.
        auc: Option<BootstrapResult>,
    },
    Regression {
        n: usize,
        pearson: BootstrapResult,
        mean_absolute_error: f64,
    },
    Survival {
        n: usize,
        c_index: BootstrapResult,
        /// Median predicted risk; samples above it form the high-risk group.
        risk_threshold: f64,
        logrank: Option<LogRank>,
        km_low_risk: KmCurve,
        km_high_risk: Option<KmCurve>,
    },
}

fn pick<T: Copy>(values: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| values[i]).collect()
}

pub fn evaluate_classification(
    truth: &[usize],
    pred: &[usize],
    class1_probs: Option<&[f64]>,
    n_classes: usize,
    opts: &EvalOptions,
) -> Result<EvaluationReport> {
    let n = truth.len();
    let bacc = bootstrap_ci(
        n,
        |idx| balanced_accuracy(&pick(truth, idx), &pick(pred, idx), n_classes),
        opts.n_replicates,
        opts.seed,
    )?;
    let kappa = bootstrap_ci(
        n,
        |idx| cohens_kappa(&pick(truth, idx), &pick(pred, idx), opts.kappa_weighting),
        opts.n_replicates,
        opts.seed,
    )?;
    let auc = match (n_classes, class1_probs) {
        (2, Some(scores)) => {
            let positive: Vec<bool> = truth.iter().map(|&t| t == 1).collect();
            Some(bootstrap_ci(
                n,
                |idx| auc(&pick(&positive, idx), &pick(scores, idx)),
                opts.n_replicates,
                opts.seed,
            )?)
        }
        _ => None,
    };
    Ok(EvaluationReport::Classification {
        n,
        n_classes,
        balanced_accuracy: bacc,
        kappa_weighting: opts.kappa_weighting,
        kappa,
        auc,
    })
}

pub fn evaluate_regression(truth: &[f64], pred: &[f64], opts: &EvalOptions) -> Result<EvaluationReport> {
    let n = truth.len();
    let r = bootstrap_ci(n, |idx| pearson(&pick(truth, idx), &pick(pred, idx)), opts.n_replicates, opts.seed)?;
    let mae = truth.iter().zip(pred).map(|(t, p)| (t - p).abs()).sum::<f64>() / n as f64;
    Ok(EvaluationReport::Regression {
        n,
        pearson: r,
        mean_absolute_error: mae,
    })
}

/// Splits samples at the median risk; ties go to the low-risk group.
pub fn split_by_median_risk(records: &[SurvivalRecord], risks: &[f64]) -> (f64, Vec<SurvivalRecord>, Vec<SurvivalRecord>) {
    let threshold = percentile(&sorted_copy(risks), 0.5);
    let (mut low, mut high) = (vec![], vec![]);
    for (r, &eta) in records.iter().zip(risks) {
        if eta > threshold {
            high.push(*r);
        } else {
            low.push(*r);
        }
    }
    (threshold, low, high)
}

pub fn evaluate_survival(records: &[SurvivalRecord], risks: &[f64], opts: &EvalOptions) -> Result<EvaluationReport> {
    let n = records.len();
    let c_index = bootstrap_ci(
        n,
        |idx| concordance_index(&pick(records, idx), &pick(risks, idx)),
        opts.n_replicates,
        opts.seed,
    )?;
    let (risk_threshold, low, high) = split_by_median_risk(records, risks);
    let logrank = if high.is_empty() { None } else { logrank_test(&high, &low).ok() };
    Ok(EvaluationReport::Survival {
        n,
        c_index,
        risk_threshold,
        logrank,
        km_low_risk: km_curve(&low)?,
        km_high_risk: if high.is_empty() { None } else { Some(km_curve(&high)?) },
    })
}

/// Predictions paired with their ground-truth labels.
pub struct Matched<'a> {
    pub labels: Vec<Label>,
    pub predictions: Vec<&'a SlidePrediction>,
}

/// Pairs each prediction record with its manifest label by slide id.
pub fn match_labels<'a>(manifest: &DatasetManifest, records: &'a [SlideRecord]) -> Result<Matched<'a>> {
    if records.is_empty() {
        return Err(Error::Validation("no predictions to evaluate".into()));
    }
    let by_id: HashMap<&str, Label> = manifest.entries.iter().map(|e| (e.slide_id.as_str(), e.label)).collect();
    let mut labels = Vec::with_capacity(records.len());
    for r in records {
        let label = by_id
            .get(r.slide_id.as_str())
            .ok_or_else(|| Error::Validation(format!("slide {} not in manifest", r.slide_id)))?;
        labels.push(*label);
    }
    Ok(Matched {
        labels,
        predictions: records.iter().map(|r| &r.prediction).collect(),
    })
}

fn task_mismatch() -> Error {
    Error::Validation("prediction task does not match the manifest".into())
}

struct Columns {
    classes: Vec<usize>,
    predicted: Vec<usize>,
    class1: Vec<f64>,
    targets: Vec<f64>,
    values: Vec<f64>,
    survival: Vec<SurvivalRecord>,
    risks: Vec<f64>,
}

fn columns(m: &Matched) -> Result<Columns> {
    let mut c = Columns {
        classes: vec![],
        predicted: vec![],
        class1: vec![],
        targets: vec![],
        values: vec![],
        survival: vec![],
        risks: vec![],
    };
    for (label, pred) in m.labels.iter().zip(&m.predictions) {
        match (label, pred) {
            (Label::Class(t), SlidePrediction::Classification(p)) => {
                c.classes.push(*t);
                c.predicted.push(p.predicted_class);
                c.class1.push(p.mean_probs.get(1).copied().unwrap_or(0.0));
            }
            (Label::Target(t), SlidePrediction::Regression(p)) => {
                c.targets.push(*t);
                c.values.push(p.mean);
            }
            (Label::Survival(r), SlidePrediction::Survival(p)) => {
                c.survival.push(*r);
                c.risks.push(p.risk);
            }
            _ => return Err(task_mismatch()),
        }
    }
    Ok(c)
}

pub fn evaluate(manifest: &DatasetManifest, records: &[SlideRecord], opts: &EvalOptions) -> Result<EvaluationReport> {
    let m = match_labels(manifest, records)?;
    let c = columns(&m)?;
    match manifest.task {
        crate::data::Task::Classification => {
            evaluate_classification(&c.classes, &c.predicted, Some(&c.class1), manifest.n_classes(), opts)
        }
        crate::data::Task::Regression => evaluate_regression(&c.targets, &c.values, opts),
        crate::data::Task::Survival => evaluate_survival(&c.survival, &c.risks, opts),
    }
}

/// Rejection curve with the task's headline metric: balanced accuracy,
/// Pearson correlation, or C-index.
pub fn rejection_from_predictions(
    manifest: &DatasetManifest,
    records: &[SlideRecord],
    fractions: &[f64],
) -> Result<Vec<RejectionPoint>> {
    let m = match_labels(manifest, records)?;
    let c = columns(&m)?;
    let unc: Vec<f64> = m.predictions.iter().map(|p| p.uncertainty_score()).collect();
    let n_classes = manifest.n_classes();
    match manifest.task {
        crate::data::Task::Classification => rejection_curve(&unc, fractions, |idx| {
            balanced_accuracy(&pick(&c.classes, idx), &pick(&c.predicted, idx), n_classes)
        }),
        crate::data::Task::Regression => {
            rejection_curve(&unc, fractions, |idx| pearson(&pick(&c.targets, idx), &pick(&c.values, idx)))
        }
        crate::data::Task::Survival => rejection_curve(&unc, fractions, |idx| {
            concordance_index(&pick(&c.survival, idx), &pick(&c.risks, idx))
        }),
    }
}
