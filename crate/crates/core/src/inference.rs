//! Sliding-window subspace-ensemble inference and uncertainty estimates.
//!
//! Each window is a contiguous block of `H` feature dimensions. Running the
//! model once per window over the whole bag gives `K` predictions that are
//! treated as an ensemble.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::aggregator::{forward, AggregatorParams};
use crate::data::{SlideBag, SurvivalRecord};
use crate::error::{ensure, Error, Result};
use crate::real::Real;
use crate::sampling::{FeatureIndexSet, FixedBag};
use crate::stats::{mean, percentile, population_variance, sorted_copy};

/// Values of the mutual information in `(-MI_TOLERANCE, 0)` are rounding
/// noise and clamp to zero.
pub const MI_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkWindows {
    /// Half-open `[start, end)` ranges over the feature dimensions.
    pub windows: Vec<(usize, usize)>,
}

impl ChunkWindows {
    pub fn k(&self) -> usize {
        self.windows.len()
    }

    pub fn full(embed_dim: usize) -> Self {
        ChunkWindows {
            windows: vec![(0, embed_dim)],
        }
    }

    pub fn feature_sets(&self) -> Vec<FeatureIndexSet> {
        self.windows
            .iter()
            .map(|&(s, e)| FeatureIndexSet::window(s, e - s))
            .collect()
    }
}

/// Windows starting at `0, S, 2S, ...`; when `S` does not divide `D - H` a
/// final window `[D - H, D)` is appended so every dimension is covered.
pub fn chunk_windows(embed_dim: usize, hidden_dim: usize, stride: usize) -> Result<ChunkWindows> {
    ensure!(
        hidden_dim >= 1 && hidden_dim <= embed_dim,
        Validation,
        "window size {hidden_dim} does not fit D={embed_dim}"
    );
    ensure!(stride >= 1, Validation, "stride must be at least 1");
    let last = embed_dim - hidden_dim;
    let mut windows: Vec<(usize, usize)> = (0..=last)
        .step_by(stride)
        .map(|s| (s, s + hidden_dim))
        .collect();
    if windows.last().map(|w| w.0) != Some(last) {
        windows.push((last, embed_dim));
    }
    Ok(ChunkWindows { windows })
}

/// Raw head outputs, one row per window, over every patch of the bag with
/// dropout off.
pub fn chunk_outputs<T: Real>(
    params: &AggregatorParams<T>,
    bag: &SlideBag,
    windows: &ChunkWindows,
) -> Result<Array2<f64>> {
    if bag.embed_dim() != params.embed_dim() {
        return Err(Error::Shape(format!(
            "slide {} has D={} but the model was trained with D={}",
            bag.slide_id,
            bag.embed_dim(),
            params.embed_dim()
        )));
    }
    let whole = [FixedBag::whole(bag)];
    let mut out = Array2::zeros((windows.k(), params.out_dim()));
    for (k, features) in windows.feature_sets().iter().enumerate() {
        let (o, _) = forward(params, &whole, features, None)?;
        out.row_mut(k).assign(&o.row(0).mapv(|v| v.as_f64()));
    }
    Ok(out)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Natural-log entropy with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn column_means(rows: &[Vec<f64>]) -> Vec<f64> {
    let k = rows.len() as f64;
    let mut m = vec![0.0; rows[0].len()];
    for r in rows {
        for (acc, v) in m.iter_mut().zip(r) {
            *acc += v;
        }
    }
    m.iter_mut().for_each(|v| *v /= k);
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClsPrediction {
    pub mean_logits: Vec<f64>,
    pub per_chunk_probs: Vec<Vec<f64>>,
    pub mean_probs: Vec<f64>,
    pub total_entropy: f64,
    pub aleatoric_entropy: f64,
    pub mutual_information: f64,
    /// Argmax of the mean logits.
    pub predicted_class: usize,
}

fn decompose(total: f64, aleatoric: f64) -> Result<f64> {
    let mi = total - aleatoric;
    if mi < -MI_TOLERANCE {
        return Err(Error::Validation(format!(
            "negative mutual information {mi:e}: entropy decomposition is inconsistent"
        )));
    }
    Ok(mi.max(0.0))
}

impl ClsPrediction {
    /// Ensemble statistics from per-chunk logits (one row per chunk).
    pub fn from_chunk_logits(logits: &[Vec<f64>]) -> Result<Self> {
        ensure!(!logits.is_empty(), Validation, "no chunk predictions");
        let c = logits[0].len();
        ensure!(c >= 1 && logits.iter().all(|l| l.len() == c), Shape, "ragged chunk logits");
        let mean_logits = column_means(logits);
        let per_chunk_probs: Vec<Vec<f64>> = logits.iter().map(|l| softmax(l)).collect();
        let mean_probs = column_means(&per_chunk_probs);
        let total_entropy = entropy(&mean_probs);
        let aleatoric_entropy =
            per_chunk_probs.iter().map(|p| entropy(p)).sum::<f64>() / per_chunk_probs.len() as f64;
        Ok(ClsPrediction {
            predicted_class: argmax(&mean_logits),
            mutual_information: decompose(total_entropy, aleatoric_entropy)?,
            mean_logits,
            per_chunk_probs,
            mean_probs,
            total_entropy,
            aleatoric_entropy,
        })
    }
}

pub fn predict_classification<T: Real>(
    params: &AggregatorParams<T>,
    bag: &SlideBag,
    windows: &ChunkWindows,
) -> Result<ClsPrediction> {
    let out = chunk_outputs(params, bag, windows)?;
    let rows: Vec<Vec<f64>> = out.outer_iter().map(|r| r.to_vec()).collect();
    ClsPrediction::from_chunk_logits(&rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegPrediction {
    pub mean: f64,
    /// Population standard deviation across chunks.
    pub std: f64,
    pub per_chunk: Vec<f64>,
}

impl RegPrediction {
    pub fn from_chunk_values(values: &[f64]) -> Result<Self> {
        ensure!(!values.is_empty(), Validation, "no chunk predictions");
        Ok(RegPrediction {
            mean: mean(values),
            std: population_variance(values).sqrt(),
            per_chunk: values.to_vec(),
        })
    }
}

pub fn predict_regression<T: Real>(
    params: &AggregatorParams<T>,
    bag: &SlideBag,
    windows: &ChunkWindows,
) -> Result<RegPrediction> {
    let out = chunk_outputs(params, bag, windows)?;
    RegPrediction::from_chunk_values(&out.column(0).to_vec())
}

/// Breslow baseline: a step function over the distinct training event times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSurvival {
    pub event_times: Vec<f64>,
    pub cumulative_hazard: Vec<f64>,
    /// Median of the training event times, the default evaluation time.
    pub median_event_time: f64,
}

impl BaselineSurvival {
    pub fn cumulative_hazard_at(&self, t: f64) -> f64 {
        let n = self.event_times.partition_point(|&e| e <= t);
        if n == 0 {
            0.0
        } else {
            self.cumulative_hazard[n - 1]
        }
    }

    pub fn survival_at(&self, t: f64) -> f64 {
        (-self.cumulative_hazard_at(t)).exp()
    }
}

pub fn estimate_baseline_survival(risks: &[f64], records: &[SurvivalRecord]) -> Result<BaselineSurvival> {
    ensure!(risks.len() == records.len(), Shape, "{} risks for {} records", risks.len(), records.len());
    ensure!(records.iter().any(|r| r.event), Validation, "baseline needs at least one event");
    let mut event_times = sorted_copy(&records.iter().filter(|r| r.event).map(|r| r.time).collect::<Vec<_>>());
    let median_event_time = percentile(&event_times, 0.5);
    event_times.dedup();
    let mut cumulative_hazard = Vec::with_capacity(event_times.len());
    let mut acc = 0.0;
    for &t in &event_times {
        let deaths = records.iter().filter(|r| r.event && r.time == t).count() as f64;
        let at_risk: f64 = records
            .iter()
            .zip(risks)
            .filter(|(r, _)| r.time >= t)
            .map(|(_, eta)| eta.exp())
            .sum();
        acc += deaths / at_risk;
        cumulative_hazard.push(acc);
    }
    Ok(BaselineSurvival {
        event_times,
        cumulative_hazard,
        median_event_time,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvPrediction {
    pub per_chunk_risk: Vec<f64>,
    /// Log-mean-exp of the chunk risks.
    pub risk: f64,
    pub mean_risk: f64,
    pub risk_variance: f64,
    pub eval_times: Vec<f64>,
    /// `per_chunk_survival[k][j]` is chunk `k` at `eval_times[j]`.
    pub per_chunk_survival: Vec<Vec<f64>>,
    pub mean_survival: Vec<f64>,
    pub survival_uncertainty: Vec<f64>,
    pub n_wsi_adjusted: bool,
}

impl SurvPrediction {
    pub fn from_chunk_risks(risks: &[f64], baseline: &BaselineSurvival, eval_times: &[f64]) -> Result<Self> {
        ensure!(!risks.is_empty(), Validation, "no chunk predictions");
        ensure!(risks.iter().all(|r| r.is_finite()), Validation, "non-finite chunk risk");
        let k = risks.len() as f64;
        let max = risks.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let risk = max + (risks.iter().map(|r| (r - max).exp()).sum::<f64>() / k).ln();
        let base: Vec<f64> = eval_times.iter().map(|&t| baseline.survival_at(t)).collect();
        let per_chunk_survival: Vec<Vec<f64>> = risks
            .iter()
            .map(|r| base.iter().map(|s0| s0.powf(r.exp())).collect())
            .collect();
        let (mean_survival, survival_uncertainty) = (0..eval_times.len())
            .map(|j| {
                let col: Vec<f64> = per_chunk_survival.iter().map(|row| row[j]).collect();
                (mean(&col), population_variance(&col).sqrt())
            })
            .unzip();
        Ok(SurvPrediction {
            per_chunk_risk: risks.to_vec(),
            risk,
            mean_risk: mean(risks),
            risk_variance: population_variance(risks),
            eval_times: eval_times.to_vec(),
            per_chunk_survival,
            mean_survival,
            survival_uncertainty,
            n_wsi_adjusted: false,
        })
    }
}

pub fn predict_survival<T: Real>(
    params: &AggregatorParams<T>,
    bag: &SlideBag,
    windows: &ChunkWindows,
    baseline: &BaselineSurvival,
    eval_times: &[f64],
) -> Result<SurvPrediction> {
    let out = chunk_outputs(params, bag, windows)?;
    SurvPrediction::from_chunk_risks(&out.column(0).to_vec(), baseline, eval_times)
}

/// Divides a slide-level uncertainty by `sqrt(n_wsi)`.
pub fn adjust_patient_uncertainty(uncertainty: f64, n_wsi: usize) -> Result<f64> {
    ensure!(n_wsi >= 1, Validation, "a patient needs at least one slide");
    Ok(uncertainty / (n_wsi as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum SlidePrediction {
    Classification(ClsPrediction),
    Regression(RegPrediction),
    Survival(SurvPrediction),
}

impl SlidePrediction {
    /// Score used for selective prediction: aleatoric entropy for
    /// classification, survival-probability spread at the first evaluation
    /// time for survival, chunk spread for regression.
    pub fn uncertainty_score(&self) -> f64 {
        match self {
            SlidePrediction::Classification(p) => p.aleatoric_entropy,
            SlidePrediction::Regression(p) => p.std,
            SlidePrediction::Survival(p) => p.survival_uncertainty.first().copied().unwrap_or(0.0),
        }
    }
}

/// One line of the predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideRecord {
    pub slide_id: String,
    pub patient_id: String,
    #[serde(flatten)]
    pub prediction: SlidePrediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum PatientSummary {
    Classification {
        mean_logits: Vec<f64>,
        mean_probs: Vec<f64>,
        total_entropy: f64,
        aleatoric_entropy: f64,
        mutual_information: f64,
        predicted_class: usize,
    },
    Regression {
        mean: f64,
    },
    Survival {
        risk: f64,
        eval_times: Vec<f64>,
        mean_survival: Vec<f64>,
        survival_uncertainty: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientPrediction {
    pub patient_id: String,
    pub n_wsi: usize,
    #[serde(flatten)]
    pub summary: PatientSummary,
    /// Mean slide uncertainty score divided by `sqrt(n_wsi)`.
    pub uncertainty_adjusted: f64,
}

/// Combines the slides of one patient.
pub fn aggregate_patient(patient_id: &str, slides: &[SlidePrediction]) -> Result<PatientPrediction> {
    ensure!(!slides.is_empty(), Validation, "patient {patient_id} has no slides");
    let n = slides.len();
    let summary = match &slides[0] {
        SlidePrediction::Classification(_) => {
            let preds: Vec<&ClsPrediction> = slides
                .iter()
                .map(|s| match s {
                    SlidePrediction::Classification(p) => Ok(p),
                    _ => Err(Error::Validation("mixed tasks for one patient".into())),
                })
                .collect::<Result<_>>()?;
            let mean_logits = column_means(&preds.iter().map(|p| p.mean_logits.clone()).collect::<Vec<_>>());
            let mean_probs = column_means(&preds.iter().map(|p| p.mean_probs.clone()).collect::<Vec<_>>());
            let total_entropy = entropy(&mean_probs);
            let aleatoric_entropy = preds.iter().map(|p| p.aleatoric_entropy).sum::<f64>() / n as f64;
            PatientSummary::Classification {
                predicted_class: argmax(&mean_logits),
                mutual_information: decompose(total_entropy, aleatoric_entropy)?,
                mean_logits,
                mean_probs,
                total_entropy,
                aleatoric_entropy,
            }
        }
        SlidePrediction::Regression(_) => {
            let values: Vec<f64> = slides
                .iter()
                .map(|s| match s {
                    SlidePrediction::Regression(p) => Ok(p.mean),
                    _ => Err(Error::Validation("mixed tasks for one patient".into())),
                })
                .collect::<Result<_>>()?;
            PatientSummary::Regression { mean: mean(&values) }
        }
        SlidePrediction::Survival(first) => {
            let preds: Vec<&SurvPrediction> = slides
                .iter()
                .map(|s| match s {
                    SlidePrediction::Survival(p) if p.eval_times == first.eval_times => Ok(p),
                    _ => Err(Error::Validation("inconsistent survival slides for one patient".into())),
                })
                .collect::<Result<_>>()?;
            let mean_survival = column_means(&preds.iter().map(|p| p.mean_survival.clone()).collect::<Vec<_>>());
            let unc = column_means(&preds.iter().map(|p| p.survival_uncertainty.clone()).collect::<Vec<_>>());
            PatientSummary::Survival {
                risk: preds.iter().map(|p| p.risk).sum::<f64>() / n as f64,
                eval_times: first.eval_times.clone(),
                mean_survival,
                survival_uncertainty: unc
                    .iter()
                    .map(|&u| adjust_patient_uncertainty(u, n))
                    .collect::<Result<_>>()?,
            }
        }
    };
    let mean_unc = slides.iter().map(SlidePrediction::uncertainty_score).sum::<f64>() / n as f64;
    Ok(PatientPrediction {
        patient_id: patient_id.to_string(),
        n_wsi: n,
        summary,
        uncertainty_adjusted: adjust_patient_uncertainty(mean_unc, n)?,
    })
}

/// Groups slide records by patient (sorted by patient id) and aggregates.
pub fn aggregate_patients(records: &[SlideRecord]) -> Result<Vec<PatientPrediction>> {
    let mut groups: BTreeMap<&str, Vec<SlidePrediction>> = BTreeMap::new();
    for r in records {
        groups.entry(&r.patient_id).or_default().push(r.prediction.clone());
    }
    groups
        .into_iter()
        .map(|(pid, slides)| aggregate_patient(pid, &slides))
        .collect()
}
