use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::forward::{forward, ForwardCache};
use super::loss::{loss_and_output_grad, Targets};
use super::{AggregatorParams, Gradients};
use crate::error::{ensure, Result};
use crate::real::Real;
use crate::sampling::{FeatureIndexSet, FixedBag};

/// Gradients of the loss given `d_outputs`, its derivative with respect to
/// the batch outputs.
pub fn backward<T: Real>(
    params: &AggregatorParams<T>,
    cache: &ForwardCache<T>,
    d_outputs: ArrayView2<T>,
) -> Result<Gradients<T>> {
    ensure!(
        d_outputs.nrows() == cache.bags.len() && d_outputs.ncols() == params.out_dim(),
        Shape,
        "output gradient is {:?}, cache holds {} bags with {} outputs",
        d_outputs.dim(),
        cache.bags.len(),
        params.out_dim()
    );
    let feats = cache.features.indices();
    let mut grads = params.zeros_like();
    let mut d_tanh_sub = Array2::<T>::zeros((params.hidden_dim(), feats.len()));
    let mut d_gate_sub = Array2::<T>::zeros((params.hidden_dim(), feats.len()));

    for (b, bag) in cache.bags.iter().enumerate() {
        ensure!(
            bag.x.ncols() == params.embed_dim() && bag.hidden.ncols() == params.hidden_dim(),
            Shape,
            "cache does not match parameter shapes"
        );
        let d_out = d_outputs.row(b);
        grads
            .head_weight
            .zip_mut_with(&outer(d_out.to_owned(), &bag.pooled), |g, &v| *g = *g + v);
        grads.head_bias += &d_out;

        let d_pooled = params.head_weight.t().dot(&d_out);
        let d_alpha = bag.x.dot(&d_pooled);
        let weighted = bag.alpha.dot(&d_alpha);
        let d_logits: Array1<T> = bag
            .alpha
            .iter()
            .zip(&d_alpha)
            .map(|(&a, &da)| a * (da - weighted))
            .collect();

        grads.score += &bag.hidden.t().dot(&d_logits);
        let mut d_gated = outer(d_logits, &params.score);
        if let Some(mask) = &bag.dropout {
            d_gated *= mask;
        }
        let d_pre_tanh = ndarray::Zip::from(&d_gated)
            .and(&bag.tanh_act)
            .and(&bag.gate_act)
            .map_collect(|&dg, &t, &g| dg * g * (T::one() - t * t));
        let d_pre_gate = ndarray::Zip::from(&d_gated)
            .and(&bag.tanh_act)
            .and(&bag.gate_act)
            .map_collect(|&dg, &t, &g| dg * t * g * (T::one() - g));
        d_tanh_sub += &d_pre_tanh.t().dot(&bag.x_sub);
        d_gate_sub += &d_pre_gate.t().dot(&bag.x_sub);
    }

    for (k, &col) in feats.iter().enumerate() {
        grads.tanh_proj.column_mut(col).assign(&d_tanh_sub.column(k));
        grads.gate_proj.column_mut(col).assign(&d_gate_sub.column(k));
    }
    Ok(grads)
}

fn outer<T: Real>(a: Array1<T>, b: &Array1<T>) -> Array2<T> {
    let col = a.insert_axis(Axis(1));
    let row = b.view().insert_axis(Axis(0));
    col.dot(&row)
}

/// Forward, loss and backward in one call. Returns the loss value.
pub fn loss_and_gradients<T: Real>(
    params: &AggregatorParams<T>,
    batch: &[FixedBag],
    features: &FeatureIndexSet,
    dropout: Option<&[Array2<T>]>,
    targets: &Targets,
) -> Result<(f64, Gradients<T>)> {
    let (outputs, cache) = forward(params, batch, features, dropout)?;
    let (loss, d_out) = loss_and_output_grad(outputs.view(), targets)?;
    let grads = backward(params, &cache, d_out.view())?;
    Ok((loss, grads))
}
