//! Planted-signal corpora for end-to-end verification.
//!
//! Background patches are standard normal. Planted patches are shifted along
//! one fixed unit direction: by `signal_strength` in positive bags
//! (classification), or by `signal_strength * z` with a per-bag latent
//! `z ~ N(0, 1)` (regression and survival, where the direction is the
//! normalized coefficient vector). Regression targets and survival
//! log-hazards are the bag-mean embedding projected on the coefficients.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use super::embedding::{write_embedding_file, SlideBag};
use super::manifest::{DatasetManifest, Label, ManifestEntry, Split, SurvivalRecord, Task};
use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_bags: usize,
    /// Inclusive range of patch counts per bag.
    pub patches_per_bag_range: (usize, usize),
    pub embed_dim: usize,
    pub task: Task,
    pub signal_fraction: f64,
    pub signal_strength: f64,
    #[serde(default)]
    pub positive_rate: Option<f64>,
    #[serde(default)]
    pub coefficients: Option<Vec<f64>>,
    #[serde(default)]
    pub censoring_rate: Option<f64>,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    pub seed: u64,
}

fn default_train_fraction() -> f64 {
    0.6
}

fn default_val_fraction() -> f64 {
    0.2
}

impl SyntheticSpec {
    pub fn classification(n_bags: usize, embed_dim: usize, positive_rate: f64, seed: u64) -> Self {
        SyntheticSpec {
            n_bags,
            patches_per_bag_range: (80, 200),
            embed_dim,
            task: Task::Classification,
            signal_fraction: 0.05,
            signal_strength: 2.0,
            positive_rate: Some(positive_rate),
            coefficients: None,
            censoring_rate: None,
            train_fraction: default_train_fraction(),
            val_fraction: default_val_fraction(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.patches_per_bag_range;
        ensure!(self.n_bags >= 1, Validation, "n_bags must be positive");
        ensure!(lo >= 1 && lo <= hi, Validation, "bad patch range {lo}..={hi}");
        ensure!(self.embed_dim >= 1, Validation, "embed_dim must be positive");
        ensure!(
            self.signal_fraction > 0.0 && self.signal_fraction < 1.0,
            Validation,
            "signal_fraction must lie in (0,1)"
        );
        ensure!(
            self.signal_strength.is_finite() && self.signal_strength >= 0.0,
            Validation,
            "signal_strength must be finite and nonnegative"
        );
        ensure!(
            self.train_fraction > 0.0
                && self.val_fraction >= 0.0
                && self.train_fraction + self.val_fraction <= 1.0,
            Validation,
            "split fractions must be positive and sum to at most 1"
        );
        match self.task {
            Task::Classification => {
                let p = self.positive_rate.ok_or_else(|| {
                    Error::Validation("classification spec needs positive_rate".into())
                })?;
                ensure!(p > 0.0 && p < 1.0, Validation, "positive_rate must lie in (0,1)");
            }
            Task::Regression | Task::Survival => {
                let beta = self.coefficients.as_ref().ok_or_else(|| {
                    Error::Validation(format!("{} spec needs coefficients", self.task))
                })?;
                ensure!(
                    beta.len() == self.embed_dim,
                    Validation,
                    "coefficient vector has {} entries, embed_dim is {}",
                    beta.len(),
                    self.embed_dim
                );
                ensure!(
                    beta.iter().all(|b| b.is_finite()) && beta.iter().any(|b| *b != 0.0),
                    Validation,
                    "coefficients must be finite and not all zero"
                );
            }
        }
        if self.task == Task::Survival {
            let c = self.censoring_rate.unwrap_or(0.0);
            ensure!((0.0..1.0).contains(&c), Validation, "censoring_rate must lie in [0,1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    pub bags: Vec<SlideBag>,
    /// Row indices of planted patches, per bag (manifest order).
    pub planted: Vec<Vec<usize>>,
    /// Unit direction the planted signal lies along.
    pub direction: Vec<f64>,
}

fn unit_direction(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Rate of an exponential censoring time that censors a fraction `target`
/// of subjects in expectation, given each subject's event rate.
fn censoring_hazard(event_rates: &[f64], target: f64) -> f64 {
    let frac = |lambda: f64| {
        event_rates.iter().map(|r| lambda / (lambda + r)).sum::<f64>() / event_rates.len() as f64
    };
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while frac(hi) < target {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if frac(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.embed_dim;
    let n = spec.n_bags;

    let direction = match &spec.coefficients {
        Some(beta) if spec.task != Task::Classification => {
            let norm = beta.iter().map(|b| b * b).sum::<f64>().sqrt();
            beta.iter().map(|b| b / norm).collect()
        }
        _ => unit_direction(&mut rng, d),
    };

    let mut positive = vec![false; n];
    if spec.task == Task::Classification {
        let n_pos = (spec.positive_rate.unwrap() * n as f64).round() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for &i in &order[..n_pos] {
            positive[i] = true;
        }
    }

    let (lo, hi) = spec.patches_per_bag_range;
    let mut bags = Vec::with_capacity(n);
    let mut planted = Vec::with_capacity(n);
    let mut projections = Vec::with_capacity(n);
    for (i, &is_pos) in positive.iter().enumerate() {
        let n_patches = rng.random_range(lo..=hi);
        let mut x = Array2::<f32>::zeros((n_patches, d));
        for v in x.iter_mut() {
            *v = rng.sample::<f64, _>(StandardNormal) as f32;
        }
        let shift = match spec.task {
            Task::Classification if is_pos => Some(spec.signal_strength),
            Task::Classification => None,
            _ => Some(spec.signal_strength * rng.sample::<f64, _>(StandardNormal)),
        };
        let mut rows = Vec::new();
        if let Some(shift) = shift {
            let k = (spec.signal_fraction * n_patches as f64).round() as usize;
            rows = index::sample(&mut rng, n_patches, k).into_vec();
            rows.sort_unstable();
            for &r in &rows {
                for (v, u) in x.row_mut(r).iter_mut().zip(&direction) {
                    *v = (*v as f64 + shift * u) as f32;
                }
            }
        }
        if let Some(beta) = &spec.coefficients {
            let mean = x.mapv(|v| v as f64).mean_axis(ndarray::Axis(0)).unwrap();
            projections.push(mean.iter().zip(beta).map(|(m, b)| m * b).sum::<f64>());
        }
        let id = format!("slide_{i:05}");
        bags.push(SlideBag::new(id, format!("patient_{i:05}"), x)?);
        planted.push(rows);
    }

    let labels: Vec<Label> = match spec.task {
        Task::Classification => positive.iter().map(|&p| Label::Class(usize::from(p))).collect(),
        Task::Regression => projections.iter().map(|&t| Label::Target(t)).collect(),
        Task::Survival => {
            let rates: Vec<f64> = projections.iter().map(|eta| eta.exp()).collect();
            let censor_rate = spec.censoring_rate.unwrap_or(0.0);
            let censor = (censor_rate > 0.0)
                .then(|| Exp::new(censoring_hazard(&rates, censor_rate)).unwrap());
            rates
                .iter()
                .map(|&r| {
                    let t_event: f64 = Exp::new(r).unwrap().sample(&mut rng);
                    let t_censor = censor.as_ref().map_or(f64::INFINITY, |c| c.sample(&mut rng));
                    let event = t_event <= t_censor;
                    let time = t_event.min(t_censor).max(f64::MIN_POSITIVE);
                    Label::Survival(SurvivalRecord::new(time, event))
                })
                .collect()
        }
    };

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = ((spec.train_fraction * n as f64).round() as usize).clamp(1, n);
    let n_val = ((spec.val_fraction * n as f64).round() as usize).min(n - n_train);
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let entries = bags
        .iter()
        .zip(labels)
        .zip(splits)
        .map(|((bag, label), split)| ManifestEntry {
            slide_id: bag.slide_id.clone(),
            patient_id: bag.patient_id.clone(),
            embedding_path: format!("bags/{}.emb", bag.slide_id).into(),
            split,
            label,
        })
        .collect();
    let n_classes = (spec.task == Task::Classification).then_some(2);
    let manifest = DatasetManifest::new(spec.task, n_classes, entries)?;
    Ok(SyntheticDataset {
        manifest,
        bags,
        planted,
        direction,
    })
}

/// Writes `manifest.json`, `planted.json` and `bags/*.emb` under `dir`.
pub fn write_synthetic_dataset(data: &SyntheticDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let bag_dir = dir.join("bags");
    fs::create_dir_all(&bag_dir).map_err(|e| Error::io(&bag_dir, e))?;
    for (entry, bag) in data.manifest.entries.iter().zip(&data.bags) {
        write_embedding_file(bag, dir.join(&entry.embedding_path))?;
    }
    data.manifest.save(dir.join("manifest.json"))?;
    let planted: serde_json::Map<String, serde_json::Value> = data
        .bags
        .iter()
        .zip(&data.planted)
        .map(|(b, rows)| (b.slide_id.clone(), serde_json::json!(rows)))
        .collect();
    let path = dir.join("planted.json");
    let text = serde_json::to_string_pretty(&planted)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
