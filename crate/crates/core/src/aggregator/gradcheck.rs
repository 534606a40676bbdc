//! Central finite-difference check of the analytic gradients, in `f64`.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use super::backward::loss_and_gradients;
use super::forward::{dropout_masks, forward};
use super::init_params;
use super::loss::{loss, Targets};
use crate::data::{SurvivalRecord, Task};
use crate::error::{ensure, Result};
use crate::sampling::{sample_feature_indices, FixedBag};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradCheckDims {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
}

const BATCH: usize = 4;
const BAG_ROWS: usize = 6;

/// Gradients this small are compared on an absolute scale.
const RELATIVE_FLOOR: f64 = 1e-6;

fn random_batch<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<FixedBag> {
    (0..BATCH)
        .map(|b| {
            let valid = rng.random_range(1..=BAG_ROWS);
            let mut x = Array2::<f32>::zeros((BAG_ROWS, d));
            for v in x.slice_mut(ndarray::s![..valid, ..]).iter_mut() {
                *v = rng.sample::<f32, _>(StandardNormal);
            }
            FixedBag {
                embeddings: x,
                valid_mask: (0..BAG_ROWS).map(|i| i < valid).collect(),
                source_slide: format!("gc{b}"),
            }
        })
        .collect()
}

fn random_targets<R: Rng + ?Sized>(rng: &mut R, task: Task, out_dim: usize) -> Targets {
    match task {
        Task::Classification => Targets::Classes((0..BATCH).map(|_| rng.random_range(0..out_dim)).collect()),
        Task::Regression => Targets::Values((0..BATCH).map(|_| rng.sample(StandardNormal)).collect()),
        Task::Survival => {
            let first_event = rng.random_range(0..BATCH);
            Targets::Survival(
                (0..BATCH)
                    .map(|i| {
                        let time = rng.random_range(1..4) as f64;
                        SurvivalRecord::new(time, i == first_event || rng.random_bool(0.5))
                    })
                    .collect(),
            )
        }
    }
}

/// Worst relative error between backward and central differences with step
/// `eps`, over `n_trials` random parameter sets, batches and targets. The
/// dropout mask (rate `dropout`) is drawn once per trial and held fixed.
pub fn grad_check<R: Rng + ?Sized>(
    dims: GradCheckDims,
    task: Task,
    n_trials: usize,
    eps: f64,
    dropout: f64,
    rng: &mut R,
) -> Result<f64> {
    let GradCheckDims {
        embed_dim: d,
        hidden_dim: h,
        out_dim,
    } = dims;
    ensure!(h >= 1 && h <= d, Validation, "need 1 <= H <= D, got H={h}, D={d}");
    ensure!(
        task == Task::Classification || out_dim == 1,
        Validation,
        "{task} heads have a single output"
    );
    ensure!((0.0..1.0).contains(&dropout), Validation, "dropout must lie in [0,1)");

    let mut worst = 0.0f64;
    for _ in 0..n_trials {
        let mut params = init_params::<f64, _>(d, h, out_dim, rng)?;
        // Spread the attention so the softmax Jacobian is exercised.
        params.score.mapv_inplace(|w| 3.0 * w);
        params
            .head_bias
            .mapv_inplace(|_| 0.1 * rng.sample::<f64, _>(StandardNormal));
        let batch = random_batch(rng, d);
        let features = sample_feature_indices(d, h, rng)?;
        let targets = random_targets(rng, task, out_dim);
        let masks = (dropout > 0.0).then(|| dropout_masks::<f64, _>(&batch, h, dropout, rng));

        let (_, grads) = loss_and_gradients(&params, &batch, &features, masks.as_deref(), &targets)?;
        let eval = |p: &super::AggregatorParams<f64>| -> Result<f64> {
            let (out, _) = forward(p, &batch, &features, masks.as_deref())?;
            loss(out.view(), &targets)
        };

        let mut probe = params.clone();
        for t in 0..5 {
            for i in 0..params.tensors()[t].len() {
                let orig = params.tensors()[t][i];
                probe.tensors_mut()[t][i] = orig + eps;
                let up = eval(&probe)?;
                probe.tensors_mut()[t][i] = orig - eps;
                let down = eval(&probe)?;
                probe.tensors_mut()[t][i] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let analytic = grads.tensors()[t][i];
                let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
                let err = (analytic - numeric).abs() / scale;
                ensure!(err.is_finite(), Validation, "non-finite gradient comparison");
                worst = worst.max(err);
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims(d: usize, h: usize, o: usize) -> GradCheckDims {
        GradCheckDims {
            embed_dim: d,
            hidden_dim: h,
            out_dim: o,
        }
    }

    #[test]
    fn classification_8x4_three_classes() {
        let err = grad_check(dims(8, 4, 3), Task::Classification, 3, 1e-5, 0.25, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn regression_and_survival() {
        for task in [Task::Regression, Task::Survival] {
            let err = grad_check(dims(10, 5, 1), task, 3, 1e-5, 0.25, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
            assert!(err < 1e-4, "{task}: max relative error {err}");
        }
    }

    #[test]
    fn no_dropout_is_repeatable() {
        let run = || grad_check(dims(6, 3, 2), Task::Classification, 2, 1e-5, 0.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(run(), run());
    }

    #[test]
    fn survival_with_a_single_event_is_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let err = grad_check(dims(5, 5, 1), Task::Survival, 4, 1e-5, 0.0, &mut rng).unwrap();
        assert!(err.is_finite());
    }

    #[test]
    fn rejects_bad_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(grad_check(dims(4, 5, 1), Task::Regression, 1, 1e-5, 0.0, &mut rng).is_err());
        assert!(grad_check(dims(4, 2, 3), Task::Survival, 1, 1e-5, 0.0, &mut rng).is_err());
    }
}
