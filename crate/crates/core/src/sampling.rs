//! Patch-level bag normalization, feature-subspace sampling and the
//! task-aware batch samplers.

use ndarray::{s, Array2};
use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::data::{SlideBag, SurvivalRecord};
use crate::error::{ensure, Result};
use crate::stats::{percentile, sorted_copy};

/// A bag normalized to exactly `M` rows. Real rows come first, in their
/// original order; padding rows are zero with `valid_mask == false`.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedBag {
    pub embeddings: Array2<f32>,
    pub valid_mask: Vec<bool>,
    pub source_slide: String,
}

impl FixedBag {
    /// The whole bag with no sampling and no padding.
    pub fn whole(bag: &SlideBag) -> Self {
        FixedBag {
            embeddings: bag.embeddings.clone(),
            valid_mask: vec![true; bag.n_patches()],
            source_slide: bag.slide_id.clone(),
        }
    }

    pub fn n_valid(&self) -> usize {
        self.valid_mask.iter().filter(|&&v| v).count()
    }
}

pub fn sample_patches<R: Rng + ?Sized>(bag: &SlideBag, bag_size: usize, rng: &mut R) -> FixedBag {
    let n = bag.n_patches();
    let d = bag.embed_dim();
    if n > bag_size {
        let mut rows = index::sample(rng, n, bag_size).into_vec();
        rows.sort_unstable();
        FixedBag {
            embeddings: bag.embeddings.select(ndarray::Axis(0), &rows),
            valid_mask: vec![true; bag_size],
            source_slide: bag.slide_id.clone(),
        }
    } else {
        let mut embeddings = Array2::zeros((bag_size, d));
        embeddings.slice_mut(s![..n, ..]).assign(&bag.embeddings);
        let mut valid_mask = vec![false; bag_size];
        valid_mask[..n].fill(true);
        FixedBag {
            embeddings,
            valid_mask,
            source_slide: bag.slide_id.clone(),
        }
    }
}

/// Sorted, distinct feature indices into `[0, D)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FeatureIndexSet(Vec<usize>);

impl FeatureIndexSet {
    pub fn new(mut indices: Vec<usize>, embed_dim: usize) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        ensure!(!indices.is_empty(), Validation, "empty feature index set");
        ensure!(
            *indices.last().unwrap() < embed_dim,
            Validation,
            "feature index {} out of range for D={embed_dim}",
            indices.last().unwrap()
        );
        Ok(FeatureIndexSet(indices))
    }

    pub fn full(embed_dim: usize) -> Self {
        FeatureIndexSet((0..embed_dim).collect())
    }

    pub fn window(start: usize, len: usize) -> Self {
        FeatureIndexSet((start..start + len).collect())
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn sample_feature_indices<R: Rng + ?Sized>(
    embed_dim: usize,
    hidden_dim: usize,
    rng: &mut R,
) -> Result<FeatureIndexSet> {
    ensure!(
        hidden_dim >= 1 && hidden_dim <= embed_dim,
        Validation,
        "cannot sample {hidden_dim} of {embed_dim} feature dimensions"
    );
    if hidden_dim == embed_dim {
        return Ok(FeatureIndexSet::full(embed_dim));
    }
    let mut idx = index::sample(rng, embed_dim, hidden_dim).into_vec();
    idx.sort_unstable();
    Ok(FeatureIndexSet(idx))
}

/// One epoch of batches; entries index into the sample list the plan was
/// built from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub batches: Vec<Vec<usize>>,
    pub epoch_length: usize,
}

/// Draws from a fixed ordering first, then uniformly with replacement.
struct Pool {
    order: Vec<usize>,
    next: usize,
}

impl Pool {
    fn draw<R: Rng + ?Sized>(&mut self, rng: &mut R) -> usize {
        if self.next < self.order.len() {
            self.next += 1;
            self.order[self.next - 1]
        } else {
            self.order[rng.random_range(0..self.order.len())]
        }
    }
}

fn shuffled_pool<R: Rng + ?Sized>(mut members: Vec<usize>, rng: &mut R) -> Pool {
    members.shuffle(rng);
    Pool { order: members, next: 0 }
}

fn plain_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> BatchPlan {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    BatchPlan {
        epoch_length: batches.len(),
        batches,
    }
}

/// Equal per-stratum quotas with the remainder handed out round-robin from a
/// random starting stratum.
fn quota_batches<R: Rng + ?Sized>(
    mut pools: Vec<Pool>,
    n_samples: usize,
    batch_size: usize,
    rng: &mut R,
) -> BatchPlan {
    let n_strata = pools.len();
    let epoch_length = n_samples.div_ceil(batch_size);
    let base = batch_size / n_strata;
    let remainder = batch_size % n_strata;
    let mut cursor = rng.random_range(0..n_strata);
    let mut batches = Vec::with_capacity(epoch_length);
    for _ in 0..epoch_length {
        let mut quota = vec![base; n_strata];
        for _ in 0..remainder {
            quota[cursor] += 1;
            cursor = (cursor + 1) % n_strata;
        }
        let mut batch = Vec::with_capacity(batch_size);
        for (pool, &q) in pools.iter_mut().zip(&quota) {
            for _ in 0..q {
                batch.push(pool.draw(rng));
            }
        }
        batch.shuffle(rng);
        batches.push(batch);
    }
    BatchPlan {
        batches,
        epoch_length,
    }
}

/// Class-balanced batches for classification.
pub fn balanced_batches<R: Rng + ?Sized>(
    labels: &[usize],
    n_classes: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<BatchPlan> {
    ensure!(n_classes >= 1, Validation, "need at least one class");
    ensure!(
        batch_size >= n_classes,
        Validation,
        "batch size {batch_size} is smaller than the class count {n_classes}"
    );
    let mut members = vec![Vec::new(); n_classes];
    for (i, &c) in labels.iter().enumerate() {
        ensure!(c < n_classes, Validation, "label {c} out of range");
        members[c].push(i);
    }
    if let Some(c) = members.iter().position(Vec::is_empty) {
        return Err(crate::error::Error::Validation(format!(
            "class {c} has no training samples"
        )));
    }
    if n_classes == 1 {
        return Ok(plain_batches(labels.len(), batch_size, rng));
    }
    let pools = members.into_iter().map(|m| shuffled_pool(m, rng)).collect();
    Ok(quota_batches(pools, labels.len(), batch_size, rng))
}

/// Batches with equal quotas over quantile bins of the target.
pub fn regression_batches<R: Rng + ?Sized>(
    targets: &[f64],
    batch_size: usize,
    n_bins: Option<usize>,
    rng: &mut R,
) -> Result<BatchPlan> {
    ensure!(!targets.is_empty(), Validation, "no regression targets");
    ensure!(
        targets.iter().all(|t| t.is_finite()),
        Validation,
        "non-finite regression target"
    );
    ensure!(batch_size >= 1, Validation, "batch size must be positive");
    let n_bins = n_bins.unwrap_or(10).clamp(1, targets.len());
    let sorted = sorted_copy(targets);
    let edges: Vec<f64> = (1..n_bins)
        .map(|k| percentile(&sorted, k as f64 / n_bins as f64))
        .collect();
    let mut members = vec![Vec::new(); n_bins];
    for (i, &t) in targets.iter().enumerate() {
        members[edges.iter().filter(|&&e| t > e).count()].push(i);
    }
    members.retain(|m| !m.is_empty());
    if members.len() == 1 {
        return Ok(plain_batches(targets.len(), batch_size, rng));
    }
    // Quotas need at least one slot per bin.
    if batch_size < members.len() {
        return Ok(plain_batches(targets.len(), batch_size, rng));
    }
    let pools = members.into_iter().map(|m| shuffled_pool(m, rng)).collect();
    Ok(quota_batches(pools, targets.len(), batch_size, rng))
}

/// Tercile-interleaved ordering: shuffle within early/middle/late follow-up
/// terciles, then alternate between them.
fn temporal_pool<R: Rng + ?Sized>(members: Vec<usize>, records: &[SurvivalRecord], rng: &mut R) -> Pool {
    let mut by_time = members;
    by_time.sort_by(|&a, &b| records[a].time.total_cmp(&records[b].time).then(a.cmp(&b)));
    let n = by_time.len();
    let mut terciles: Vec<Vec<usize>> = (0..3)
        .map(|k| by_time[k * n / 3..(k + 1) * n / 3].to_vec())
        .collect();
    for t in &mut terciles {
        t.shuffle(rng);
    }
    let mut order = Vec::with_capacity(n);
    let longest = terciles.iter().map(Vec::len).max().unwrap_or(0);
    for i in 0..longest {
        for t in &terciles {
            if let Some(&x) = t.get(i) {
                order.push(x);
            }
        }
    }
    Pool { order, next: 0 }
}

/// Batches with a fixed event quota, so every batch has at least one event.
pub fn survival_batches<R: Rng + ?Sized>(
    records: &[SurvivalRecord],
    batch_size: usize,
    rng: &mut R,
) -> Result<BatchPlan> {
    ensure!(batch_size >= 1, Validation, "batch size must be positive");
    let (events, censored): (Vec<usize>, Vec<usize>) =
        (0..records.len()).partition(|&i| records[i].event);
    ensure!(!events.is_empty(), Validation, "survival split has no events");

    let rate = events.len() as f64 / records.len() as f64;
    let event_quota = if censored.is_empty() || batch_size == 1 {
        batch_size
    } else {
        ((batch_size as f64 * rate).round() as usize).clamp(1, batch_size - 1)
    };

    let mut event_pool = temporal_pool(events, records, rng);
    let mut censored_pool = temporal_pool(censored, records, rng);
    let epoch_length = records.len().div_ceil(batch_size);
    let mut batches = Vec::with_capacity(epoch_length);
    for _ in 0..epoch_length {
        let mut batch: Vec<usize> = (0..event_quota).map(|_| event_pool.draw(rng)).collect();
        batch.extend((event_quota..batch_size).map(|_| censored_pool.draw(rng)));
        batch.shuffle(rng);
        batches.push(batch);
    }
    Ok(BatchPlan {
        batches,
        epoch_length,
    })
}
