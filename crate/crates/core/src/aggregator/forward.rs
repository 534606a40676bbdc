use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::AggregatorParams;
use crate::error::{ensure, Result};
use crate::real::Real;
use crate::sampling::{FeatureIndexSet, FixedBag};

/// Intermediates for one bag, over its valid rows only.
#[derive(Debug, Clone)]
pub struct BagCache<T> {
    /// Positions of the valid rows within the bag.
    pub rows: Vec<usize>,
    pub bag_len: usize,
    /// Valid rows, all `D` columns.
    pub x: Array2<T>,
    /// Valid rows restricted to the active features.
    pub x_sub: Array2<T>,
    pub tanh_act: Array2<T>,
    pub gate_act: Array2<T>,
    /// Gated hidden vectors after dropout.
    pub hidden: Array2<T>,
    pub dropout: Option<Array2<T>>,
    pub logits: Array1<T>,
    pub alpha: Array1<T>,
    pub pooled: Array1<T>,
}

impl<T: Real> BagCache<T> {
    /// Attention over every slot of the bag, zero at padding.
    pub fn attention(&self) -> Vec<T> {
        let mut full = vec![T::zero(); self.bag_len];
        for (&r, &a) in self.rows.iter().zip(&self.alpha) {
            full[r] = a;
        }
        full
    }
}

#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub bags: Vec<BagCache<T>>,
    pub features: FeatureIndexSet,
}

fn sigmoid<T: Real>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

/// Inverted-dropout scale masks for the gated hidden vectors, one
/// `n_valid x H` matrix per bag.
pub fn dropout_masks<T: Real, R: Rng + ?Sized>(
    batch: &[FixedBag],
    hidden_dim: usize,
    rate: f64,
    rng: &mut R,
) -> Vec<Array2<T>> {
    let keep = T::of(1.0 / (1.0 - rate));
    batch
        .iter()
        .map(|b| {
            Array2::from_shape_simple_fn((b.n_valid(), hidden_dim), || {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
        })
        .collect()
}

/// Runs the aggregator over a batch. `dropout` carries per-bag masks from
/// [`dropout_masks`] in training; `None` disables dropout.
pub fn forward<T: Real>(
    params: &AggregatorParams<T>,
    batch: &[FixedBag],
    features: &FeatureIndexSet,
    dropout: Option<&[Array2<T>]>,
) -> Result<(Array2<T>, ForwardCache<T>)> {
    let d = params.embed_dim();
    let h = params.hidden_dim();
    ensure!(
        features.indices().last().is_some_and(|&i| i < d),
        Shape,
        "feature indices exceed D={d}"
    );
    if let Some(masks) = dropout {
        ensure!(masks.len() == batch.len(), Shape, "{} dropout masks for {} bags", masks.len(), batch.len());
    }
    let tanh_sub = params.tanh_proj.select(Axis(1), features.indices());
    let gate_sub = params.gate_proj.select(Axis(1), features.indices());

    let mut outputs = Array2::zeros((batch.len(), params.out_dim()));
    let mut caches = Vec::with_capacity(batch.len());
    for (b, bag) in batch.iter().enumerate() {
        ensure!(
            bag.embeddings.ncols() == d,
            Shape,
            "bag {} has D={} but the model expects {d}",
            bag.source_slide,
            bag.embeddings.ncols()
        );
        ensure!(
            bag.valid_mask.len() == bag.embeddings.nrows(),
            Shape,
            "bag {} mask length differs from its row count",
            bag.source_slide
        );
        let rows: Vec<usize> = (0..bag.valid_mask.len()).filter(|&i| bag.valid_mask[i]).collect();
        ensure!(!rows.is_empty(), Validation, "bag {} has no valid patches", bag.source_slide);

        let x: Array2<T> = bag.embeddings.select(Axis(0), &rows).mapv(T::from_embedding);
        ensure!(
            x.iter().all(|v| v.is_finite()),
            Validation,
            "bag {} has non-finite embeddings",
            bag.source_slide
        );
        let x_sub = x.select(Axis(1), features.indices());
        let tanh_act = x_sub.dot(&tanh_sub.t()).mapv(T::tanh);
        let gate_act = x_sub.dot(&gate_sub.t()).mapv(sigmoid);
        let mut hidden = &tanh_act * &gate_act;
        let mask = dropout.map(|m| m[b].clone());
        if let Some(m) = &mask {
            ensure!(m.dim() == (rows.len(), h), Shape, "dropout mask shape {:?}", m.dim());
            hidden *= m;
        }
        let logits = hidden.dot(&params.score);
        let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let exp = logits.mapv(|l| (l - max).exp());
        let alpha = &exp / exp.sum();
        let pooled = x.t().dot(&alpha);
        let out: Array1<T> = params.head_weight.dot(&pooled) + &params.head_bias;
        outputs.row_mut(b).assign(&out);
        caches.push(BagCache {
            rows,
            bag_len: bag.valid_mask.len(),
            x,
            x_sub,
            tanh_act,
            gate_act,
            hidden,
            dropout: mask,
            logits,
            alpha,
            pooled,
        });
    }
    Ok((
        outputs,
        ForwardCache {
            bags: caches,
            features: features.clone(),
        },
    ))
}
