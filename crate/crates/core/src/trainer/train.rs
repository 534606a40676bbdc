use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, windows_for, Checkpoint};
use super::optim::{adamw_step, AdamWConfig, OptimizerState};
use super::schedule::lr_schedule;
use crate::aggregator::{dropout_masks, init_params, loss, loss_and_gradients, AggregatorParams, Targets};
use crate::config::{RunConfig, TrainingMode};
use crate::data::{DatasetManifest, Label, SlideBag, Split, Task};
use crate::error::{ensure, Error, Result};
use crate::inference::{chunk_outputs, estimate_baseline_survival, ChunkWindows};
use crate::sampling::{
    balanced_batches, regression_batches, sample_feature_indices, sample_patches, survival_batches, FeatureIndexSet,
    FixedBag,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    /// `None` when the validation loss is undefined (no validation events).
    pub val_loss: Option<f64>,
    pub n_batches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub training_mode: TrainingMode,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    /// Last epoch run; the saved weights are from this epoch.
    pub stopped_epoch: usize,
    pub stopped_early: bool,
    pub skipped_batches: usize,
    pub checkpoint_path: Option<String>,
    pub notes: Vec<String>,
}

impl TrainReport {
    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Stops once the loss has failed to improve on its best value for
/// `patience` consecutive epochs.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            since_best: 0,
        }
    }

    /// Records one epoch; returns `true` when training should stop.
    pub fn update(&mut self, epoch: usize, loss: f64) -> bool {
        match self.best {
            Some((_, best)) if !(loss < best) => self.since_best += 1,
            _ => {
                self.best = Some((epoch, loss));
                self.since_best = 0;
            }
        }
        self.patience > 0 && self.since_best >= self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// Ground-truth targets for manifest entries at `indices`.
pub fn targets_for(manifest: &DatasetManifest, indices: &[usize]) -> Result<Targets> {
    let labels: Vec<Label> = indices.iter().map(|&i| manifest.entries[i].label).collect();
    let mismatch = || Error::Validation(format!("labels do not match the {} task", manifest.task));
    Ok(match manifest.task {
        Task::Classification => Targets::Classes(labels.iter().map(|l| l.class().ok_or_else(mismatch)).collect::<Result<_>>()?),
        Task::Regression => Targets::Values(labels.iter().map(|l| l.target().ok_or_else(mismatch)).collect::<Result<_>>()?),
        Task::Survival => Targets::Survival(labels.iter().map(|l| l.survival().ok_or_else(mismatch)).collect::<Result<_>>()?),
    })
}

/// Combines per-window outputs into one model output: mean logits, mean
/// value, or log-mean-exp risk.
pub fn ensemble_output(task: Task, chunks: &Array2<f64>) -> Vec<f64> {
    let k = chunks.nrows() as f64;
    match task {
        Task::Classification | Task::Regression => chunks.mean_axis(ndarray::Axis(0)).expect("nonempty").to_vec(),
        Task::Survival => {
            let col = chunks.column(0);
            let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            vec![max + (col.iter().map(|r| (r - max).exp()).sum::<f64>() / k).ln()]
        }
    }
}

/// Ensemble outputs for many bags, one row each.
pub fn ensemble_outputs(
    params: &AggregatorParams<f32>,
    task: Task,
    bags: &[&SlideBag],
    windows: &ChunkWindows,
) -> Result<Array2<f64>> {
    let rows: Vec<Vec<f64>> = bags
        .par_iter()
        .map(|b| chunk_outputs(params, b, windows).map(|c| ensemble_output(task, &c)))
        .collect::<Result<_>>()?;
    let cols = rows.first().map_or(0, Vec::len);
    Ok(Array2::from_shape_vec((rows.len(), cols), rows.concat()).expect("rectangular"))
}

fn check_inputs(config: &RunConfig, manifest: &DatasetManifest, bags: &[SlideBag]) -> Result<()> {
    config.validate()?;
    ensure!(config.task == manifest.task, Validation, "config task {} but manifest task {}", config.task, manifest.task);
    ensure!(
        bags.len() == manifest.entries.len(),
        Validation,
        "{} bags for {} manifest entries",
        bags.len(),
        manifest.entries.len()
    );
    if config.task == Task::Classification {
        ensure!(
            config.out_dim == manifest.n_classes(),
            Validation,
            "config has {} outputs but the manifest has {} classes",
            config.out_dim,
            manifest.n_classes()
        );
    }
    for b in bags {
        if b.embed_dim() != config.embed_dim {
            return Err(Error::Shape(format!(
                "slide {} has D={} but the config expects {}",
                b.slide_id,
                b.embed_dim(),
                config.embed_dim
            )));
        }
    }
    ensure!(!manifest.split_indices(Split::Train).is_empty(), Validation, "train split is empty");
    ensure!(!manifest.split_indices(Split::Val).is_empty(), Validation, "val split is empty");
    Ok(())
}

fn epoch_plan(config: &RunConfig, targets: &Targets, n_classes: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    if config.training_mode == TrainingMode::FullBagBatch1 {
        let mut order: Vec<usize> = (0..targets.len()).collect();
        order.shuffle(rng);
        return Ok(order.into_iter().map(|i| vec![i]).collect());
    }
    let b = config.batch_size;
    let plan = match targets {
        Targets::Classes(c) => balanced_batches(c, n_classes, b, rng)?,
        Targets::Values(v) => regression_batches(v, b, None, rng)?,
        Targets::Survival(s) => survival_batches(s, b, rng)?,
    };
    Ok(plan.batches)
}

/// Trains from a fresh initialization drawn from `config.seed`. The returned
/// checkpoint holds the weights of the last epoch run.
pub fn train(config: &RunConfig, manifest: &DatasetManifest, bags: &[SlideBag]) -> Result<(Checkpoint, TrainReport)> {
    check_inputs(config, manifest, bags)?;
    let train_idx = manifest.split_indices(Split::Train);
    let val_idx = manifest.split_indices(Split::Val);
    let train_targets = targets_for(manifest, &train_idx)?;
    let val_targets = targets_for(manifest, &val_idx)?;
    let val_bags: Vec<&SlideBag> = val_idx.iter().map(|&i| &bags[i]).collect();
    let windows = windows_for(config)?;
    let full_bags = config.training_mode == TrainingMode::FullBagBatch1;
    let (d, h) = (config.embed_dim, config.hidden_dim);
    let n_classes = manifest.n_classes();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params: AggregatorParams<f32> = init_params(d, h, config.out_dim, &mut rng)?;
    let mut optimizer = OptimizerState::new(&params);
    let adamw = AdamWConfig::with_weight_decay(config.weight_decay);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut report = TrainReport {
        training_mode: config.training_mode,
        epochs: Vec::new(),
        best_epoch: None,
        best_val_loss: None,
        stopped_epoch: 0,
        stopped_early: false,
        skipped_batches: 0,
        checkpoint_path: None,
        notes: Vec::new(),
    };
    let val_defined = match &val_targets {
        Targets::Survival(r) => r.iter().any(|r| r.event),
        _ => true,
    };
    if !val_defined {
        report
            .notes
            .push("validation split has no events: val loss undefined, early stopping disabled".into());
    }

    for epoch in 0..config.max_epochs {
        let lr = lr_schedule(epoch, config);
        let plan = epoch_plan(config, &train_targets, n_classes, &mut rng)?;
        let (mut total, mut used, mut skipped) = (0.0, 0usize, 0usize);
        for positions in &plan {
            let targets = train_targets.subset(positions);
            if let Targets::Survival(r) = &targets {
                if !r.iter().any(|r| r.event) {
                    skipped += 1;
                    continue;
                }
            }
            let batch: Vec<FixedBag> = positions
                .iter()
                .map(|&p| {
                    let bag = &bags[train_idx[p]];
                    if full_bags {
                        FixedBag::whole(bag)
                    } else {
                        sample_patches(bag, config.bag_size, &mut rng)
                    }
                })
                .collect();
            let features = if full_bags {
                FeatureIndexSet::full(d)
            } else {
                sample_feature_indices(d, h, &mut rng)?
            };
            let masks = (config.dropout > 0.0).then(|| dropout_masks::<f32, _>(&batch, h, config.dropout, &mut rng));
            let (l, grads) = loss_and_gradients(&params, &batch, &features, masks.as_deref(), &targets)?;
            adamw_step(&mut params, &grads, &mut optimizer, lr, &adamw)?;
            total += l;
            used += 1;
        }
        if skipped > 0 && report.skipped_batches == 0 {
            report
                .notes
                .push("single-slide survival batches without an event are skipped".into());
        }
        report.skipped_batches += skipped;
        let val_loss = if val_defined {
            let out = ensemble_outputs(&params, config.task, &val_bags, &windows)?;
            Some(loss(out.view(), &val_targets)?)
        } else {
            None
        };
        report.epochs.push(EpochRecord {
            epoch,
            learning_rate: lr,
            train_loss: if used > 0 { total / used as f64 } else { f64::NAN },
            val_loss,
            n_batches: used,
        });
        report.stopped_epoch = epoch;
        if let Some(v) = val_loss {
            if stopper.update(epoch, v) {
                report.stopped_early = epoch + 1 < config.max_epochs;
                break;
            }
        }
    }
    if let Some((e, v)) = stopper.best() {
        report.best_epoch = Some(e);
        report.best_val_loss = Some(v);
    }

    let baseline = if config.task == Task::Survival {
        let train_bags: Vec<&SlideBag> = train_idx.iter().map(|&i| &bags[i]).collect();
        let risks = ensemble_outputs(&params, config.task, &train_bags, &windows)?.column(0).to_vec();
        let Targets::Survival(records) = &train_targets else { unreachable!() };
        Some(estimate_baseline_survival(&risks, records)?)
    } else {
        None
    };
    let checkpoint = Checkpoint {
        config: config.clone(),
        params,
        optimizer,
        epoch: report.stopped_epoch,
        baseline,
    };
    Ok((checkpoint, report))
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const REPORT_FILE: &str = "train_report.json";

/// Trains and writes `checkpoint.bin` and `train_report.json` into `out_dir`.
pub fn train_to_dir(
    config: &RunConfig,
    manifest: &DatasetManifest,
    bags: &[SlideBag],
    out_dir: impl AsRef<Path>,
) -> Result<(Checkpoint, TrainReport)> {
    let out_dir = out_dir.as_ref();
    let (checkpoint, mut report) = train(config, manifest, bags)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ck_path = out_dir.join(CHECKPOINT_FILE);
    save_checkpoint(&checkpoint, &ck_path)?;
    report.checkpoint_path = Some(ck_path.display().to_string());
    let report_path = out_dir.join(REPORT_FILE);
    fs::write(&report_path, report.to_json_string()?).map_err(|e| Error::io(&report_path, e))?;
    Ok((checkpoint, report))
}
