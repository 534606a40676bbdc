//! Evaluation statistics. Each is checked against a brute-force oracle in
//! its tests.

mod bootstrap;
mod classification;
mod rejection;
mod report;
mod survival;

pub use bootstrap::{bootstrap_ci, BootstrapResult, DEFAULT_REPLICATES, MAX_REDRAWS};
pub use classification::{auc, balanced_accuracy, cohens_kappa, pearson, KappaWeighting};
pub use rejection::{n_rejected, rejection_csv, rejection_curve, RejectionPoint};
pub use report::{
    evaluate, evaluate_classification, evaluate_regression, evaluate_survival, match_labels,
    rejection_from_predictions, split_by_median_risk, EvalOptions, EvaluationReport, Matched,
};
pub use survival::{concordance_index, km_curve, logrank_test, KmCurve, LogRank};
