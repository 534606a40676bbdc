//! Dataset fingerprint and the rule-based run configuration derived from it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, SlideBag, Split, Task};
use crate::error::{ensure, Error, Result};
use crate::stats::{percentile, sorted_copy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataFingerprint {
    pub task: Task,
    pub patch_count_median: f64,
    pub patch_count_iqr: f64,
    pub patch_count_p5: f64,
    pub patch_count_p95: f64,
    pub embed_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_prevalence: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_horizon_max: Option<f64>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Carried through untouched; no rule reads it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub magnification: Option<f64>,
}

impl DataFingerprint {
    pub fn n_classes(&self) -> usize {
        self.class_prevalence.as_ref().map_or(1, Vec::len)
    }

    pub fn out_dim(&self) -> usize {
        match self.task {
            Task::Classification => self.n_classes(),
            _ => 1,
        }
    }
}

/// Statistics over the train split. `bags` are in manifest order.
pub fn compute_fingerprint(manifest: &DatasetManifest, bags: &[SlideBag]) -> Result<DataFingerprint> {
    ensure!(
        bags.len() == manifest.entries.len(),
        Validation,
        "{} bags for {} manifest entries",
        bags.len(),
        manifest.entries.len()
    );
    let train = manifest.split_indices(Split::Train);
    ensure!(!train.is_empty(), Validation, "train split is empty");

    let embed_dim = bags[train[0]].embed_dim();
    if let Some(b) = bags.iter().find(|b| b.embed_dim() != embed_dim) {
        return Err(Error::Shape(format!(
            "bag {} has D={} but the dataset uses D={embed_dim}",
            b.slide_id,
            b.embed_dim()
        )));
    }

    let counts = sorted_copy(
        &train
            .iter()
            .map(|&i| bags[i].n_patches() as f64)
            .collect::<Vec<_>>(),
    );
    let mut fp = DataFingerprint {
        task: manifest.task,
        patch_count_median: percentile(&counts, 0.5),
        patch_count_iqr: percentile(&counts, 0.75) - percentile(&counts, 0.25),
        patch_count_p5: percentile(&counts, 0.05),
        patch_count_p95: percentile(&counts, 0.95),
        embed_dim,
        class_prevalence: None,
        target_min: None,
        target_max: None,
        event_rate: None,
        time_horizon_max: None,
        n_train: train.len(),
        n_val: manifest.split_indices(Split::Val).len(),
        n_test: manifest.split_indices(Split::Test).len(),
        magnification: None,
    };
    let labels = train.iter().map(|&i| manifest.entries[i].label);
    match manifest.task {
        Task::Classification => {
            let mut counts = vec![0usize; manifest.n_classes()];
            for l in labels {
                counts[l.class().unwrap()] += 1;
            }
            let n = train.len() as f64;
            fp.class_prevalence = Some(counts.iter().map(|&c| c as f64 / n).collect());
        }
        Task::Regression => {
            let targets: Vec<f64> = labels.filter_map(|l| l.target()).collect();
            fp.target_min = targets.iter().copied().reduce(f64::min);
            fp.target_max = targets.iter().copied().reduce(f64::max);
        }
        Task::Survival => {
            let recs: Vec<_> = labels.filter_map(|l| l.survival()).collect();
            let events = recs.iter().filter(|r| r.event).count();
            fp.event_rate = Some(events as f64 / recs.len() as f64);
            fp.time_horizon_max = recs.iter().map(|r| r.time).reduce(f64::max);
        }
    }
    Ok(fp)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    /// Fixed-size bags, per-batch feature subsets, task-aware batches.
    Nnmil,
    /// Whole bags, all features, one slide per step.
    FullBagBatch1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: Task,
    pub embed_dim: usize,
    pub out_dim: usize,
    pub bag_size: usize,
    pub hidden_dim: usize,
    pub stride: usize,
    pub dropout: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub ensemble_chunks: usize,
    pub training_mode: TrainingMode,
    /// Explicit deviations from the derived values, by field name.
    #[serde(default)]
    pub overrides: BTreeMap<String, serde_json::Value>,
}

/// Values that replace the rule outputs when set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfigOverrides {
    pub bag_size: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub stride: Option<usize>,
    pub dropout: Option<f64>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub weight_decay: Option<f64>,
    pub warmup_epochs: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub seed: Option<u64>,
    pub training_mode: Option<TrainingMode>,
}

pub const DEFAULT_HIDDEN_DIM: usize = 256;
pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_DROPOUT: f64 = 0.25;
pub const DEFAULT_SEED: u64 = 42;

/// Number of sliding windows when `(D - H)` is a multiple of the stride.
pub fn chunk_count(embed_dim: usize, hidden_dim: usize, stride: usize) -> usize {
    (embed_dim - hidden_dim) / stride + 1
}

pub fn derive_config(
    fp: &DataFingerprint,
    task: Task,
    overrides: &ConfigOverrides,
) -> Result<RunConfig> {
    let d = fp.embed_dim;
    ensure!(d >= 1, Validation, "embedding dimension must be at least 1");

    let mut recorded = BTreeMap::new();
    macro_rules! pick {
        ($field:ident, $rule:expr) => {
            match overrides.$field {
                Some(v) => {
                    recorded.insert(stringify!($field).to_string(), serde_json::json!(v));
                    v
                }
                None => $rule,
            }
        };
    }

    let bag_size = pick!(bag_size, ((fp.patch_count_median / 2.0).round() as usize).max(1));
    let hidden_dim = pick!(hidden_dim, DEFAULT_HIDDEN_DIM.min(d));
    let stride = pick!(stride, (hidden_dim / 4).max(1));
    let learning_rate = pick!(
        learning_rate,
        if task == Task::Survival { 1e-4 } else { 3e-4 }
    );
    let cfg = RunConfig {
        task,
        embed_dim: d,
        out_dim: if task == Task::Classification { fp.n_classes() } else { 1 },
        bag_size,
        hidden_dim,
        stride,
        dropout: pick!(dropout, DEFAULT_DROPOUT),
        batch_size: pick!(batch_size, DEFAULT_BATCH_SIZE),
        learning_rate,
        weight_decay: pick!(weight_decay, 1e-4),
        warmup_epochs: pick!(warmup_epochs, 5),
        max_epochs: pick!(max_epochs, 100),
        patience: pick!(patience, 10),
        seed: pick!(seed, DEFAULT_SEED),
        ensemble_chunks: 0,
        training_mode: pick!(training_mode, TrainingMode::Nnmil),
        overrides: recorded,
    };
    let cfg = RunConfig {
        ensemble_chunks: if cfg.hidden_dim <= d && cfg.stride >= 1 {
            chunk_count(d, cfg.hidden_dim, cfg.stride)
        } else {
            0
        },
        ..cfg
    };
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.bag_size >= 1, Validation, "bag_size must be at least 1");
        ensure!(
            self.hidden_dim >= 1 && self.hidden_dim <= self.embed_dim,
            Validation,
            "hidden_dim {} must lie in [1, {}]",
            self.hidden_dim,
            self.embed_dim
        );
        ensure!(self.stride >= 1, Validation, "stride must be at least 1");
        ensure!(self.batch_size >= 1, Validation, "batch_size must be at least 1");
        ensure!(self.out_dim >= 1, Validation, "out_dim must be at least 1");
        ensure!(
            (0.0..1.0).contains(&self.dropout),
            Validation,
            "dropout must lie in [0,1)"
        );
        ensure!(
            self.learning_rate.is_finite() && self.learning_rate > 0.0,
            Validation,
            "learning_rate must be positive"
        );
        ensure!(self.max_epochs >= 1, Validation, "max_epochs must be at least 1");
        ensure!(
            self.ensemble_chunks == chunk_count(self.embed_dim, self.hidden_dim, self.stride),
            Validation,
            "ensemble_chunks {} disagrees with (D-H)/S+1",
            self.ensemble_chunks
        );
        Ok(())
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Label, ManifestEntry};
    use ndarray::Array2;

    pub(crate) fn fingerprint(median: f64, d: usize, task: Task) -> DataFingerprint {
        DataFingerprint {
            task,
            patch_count_median: median,
            patch_count_iqr: 0.0,
            patch_count_p5: median,
            patch_count_p95: median,
            embed_dim: d,
            class_prevalence: (task == Task::Classification).then(|| vec![0.5, 0.5]),
            target_min: None,
            target_max: None,
            event_rate: None,
            time_horizon_max: None,
            n_train: 10,
            n_val: 2,
            n_test: 2,
            magnification: None,
        }
    }

    fn corpus(counts: &[usize], labels: &[usize]) -> (DatasetManifest, Vec<SlideBag>) {
        let entries = counts
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (_, &l))| ManifestEntry {
                slide_id: format!("s{i}"),
                patient_id: format!("p{i}"),
                embedding_path: format!("s{i}.emb").into(),
                split: Split::Train,
                label: Label::Class(l),
            })
            .collect();
        let bags = counts
            .iter()
            .enumerate()
            .map(|(i, &n)| SlideBag::new(format!("s{i}"), "p", Array2::zeros((n, 4))).unwrap())
            .collect();
        (DatasetManifest::new(Task::Classification, None, entries).unwrap(), bags)
    }

    #[test]
    fn percentiles_over_train_counts() {
        let (m, bags) = corpus(&[10, 20, 30], &[0, 1, 0]);
        let fp = compute_fingerprint(&m, &bags).unwrap();
        assert_eq!(fp.patch_count_median, 20.0);
        assert!((fp.patch_count_p5 - 11.0).abs() < 1e-12);
        assert!((fp.patch_count_p95 - 29.0).abs() < 1e-12);
        assert_eq!(fp.patch_count_iqr, 10.0);
    }

    #[test]
    fn single_slide_degenerates() {
        let (m, bags) = corpus(&[17], &[0]);
        let fp = compute_fingerprint(&m, &bags).unwrap();
        assert_eq!(fp.patch_count_p5, 17.0);
        assert_eq!(fp.patch_count_median, 17.0);
        assert_eq!(fp.patch_count_p95, 17.0);
    }

    #[test]
    fn class_prevalence() {
        let (m, bags) = corpus(&[5, 5, 5, 5], &[0, 0, 1, 1]);
        let fp = compute_fingerprint(&m, &bags).unwrap();
        assert_eq!(fp.class_prevalence, Some(vec![0.5, 0.5]));
    }

    #[test]
    fn empty_train_split_is_an_error() {
        let (mut m, bags) = corpus(&[5], &[0]);
        m.entries[0].split = Split::Test;
        assert!(compute_fingerprint(&m, &bags).is_err());
    }

    #[test]
    fn rules_for_a_1024_dim_dataset() {
        let cfg = derive_config(
            &fingerprint(1000.0, 1024, Task::Classification),
            Task::Classification,
            &ConfigOverrides::default(),
        )
        .unwrap();
        assert_eq!(
            (cfg.bag_size, cfg.hidden_dim, cfg.stride, cfg.ensemble_chunks),
            (500, 256, 64, 13)
        );
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.learning_rate, 3e-4);
        assert_eq!(cfg.dropout, 0.25);
        assert_eq!(cfg.seed, 42);
        assert!(cfg.overrides.is_empty());
    }

    #[test]
    fn virchow_sized_embeddings_give_37_chunks() {
        let cfg = derive_config(
            &fingerprint(400.0, 2560, Task::Survival),
            Task::Survival,
            &ConfigOverrides::default(),
        )
        .unwrap();
        assert_eq!(cfg.ensemble_chunks, 37);
        assert_eq!(cfg.learning_rate, 1e-4);
    }

    #[test]
    fn small_embeddings_clamp_hidden_dim() {
        let cfg = derive_config(
            &fingerprint(100.0, 128, Task::Regression),
            Task::Regression,
            &ConfigOverrides::default(),
        )
        .unwrap();
        assert_eq!((cfg.hidden_dim, cfg.stride, cfg.ensemble_chunks), (128, 32, 1));
        assert_eq!(cfg.out_dim, 1);
    }

    #[test]
    fn overrides_win_and_are_recorded() {
        let over = ConfigOverrides {
            hidden_dim: Some(128),
            max_epochs: Some(30),
            ..Default::default()
        };
        let cfg = derive_config(&fingerprint(1000.0, 1024, Task::Classification), Task::Classification, &over)
            .unwrap();
        assert_eq!((cfg.hidden_dim, cfg.stride, cfg.ensemble_chunks), (128, 32, 29));
        assert_eq!(cfg.max_epochs, 30);
        assert_eq!(cfg.overrides.len(), 2);
        assert_eq!(cfg.overrides["hidden_dim"], serde_json::json!(128));

        let too_big = ConfigOverrides {
            hidden_dim: Some(2048),
            ..Default::default()
        };
        assert!(derive_config(&fingerprint(10.0, 1024, Task::Classification), Task::Classification, &too_big).is_err());
    }

    #[test]
    fn tiny_median_keeps_bag_size_positive() {
        let cfg = derive_config(&fingerprint(1.0, 4, Task::Classification), Task::Classification, &ConfigOverrides::default()).unwrap();
        assert_eq!(cfg.bag_size, 1);
    }

    #[test]
    fn config_json_roundtrip_is_stable() {
        let fp = fingerprint(333.0, 1536, Task::Classification);
        let cfg = derive_config(&fp, Task::Classification, &ConfigOverrides::default()).unwrap();
        let back = RunConfig::from_json_str(&cfg.to_json_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.ensemble_chunks, 21);
        let fp_back: DataFingerprint = serde_json::from_str(&serde_json::to_string(&fp).unwrap()).unwrap();
        assert_eq!(derive_config(&fp_back, Task::Classification, &ConfigOverrides::default()).unwrap(), cfg);
    }
}
