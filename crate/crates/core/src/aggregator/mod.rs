//! Gated-attention MIL aggregator.
//!
//! Attention is scored in a feature subspace: the tanh and gate projections
//! are stored as `H x D` and each pass uses only the columns at the active
//! feature indices. Pooling runs over the full `D`-dimensional embeddings.

mod backward;
mod forward;
mod gradcheck;
mod loss;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::Uniform;

use crate::error::{ensure, Result};
use crate::real::Real;

pub use backward::{backward, loss_and_gradients};
pub use forward::{dropout_masks, forward, BagCache, ForwardCache};
pub use gradcheck::{grad_check, GradCheckDims};
pub use loss::{cox_loss, loss, loss_and_output_grad, Targets};

/// Names used for the tensors in checkpoints and error messages.
pub const TENSOR_NAMES: [&str; 5] = ["tanh_proj", "gate_proj", "score", "head_weight", "head_bias"];

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorParams<T> {
    /// `H x D`, tanh branch.
    pub tanh_proj: Array2<T>,
    /// `H x D`, sigmoid gate branch.
    pub gate_proj: Array2<T>,
    /// Length `H` scoring vector.
    pub score: Array1<T>,
    /// `out_dim x D`.
    pub head_weight: Array2<T>,
    pub head_bias: Array1<T>,
}

/// Same layout as the parameters.
pub type Gradients<T> = AggregatorParams<T>;

impl<T: Real> AggregatorParams<T> {
    pub fn zeros(embed_dim: usize, hidden_dim: usize, out_dim: usize) -> Self {
        AggregatorParams {
            tanh_proj: Array2::zeros((hidden_dim, embed_dim)),
            gate_proj: Array2::zeros((hidden_dim, embed_dim)),
            score: Array1::zeros(hidden_dim),
            head_weight: Array2::zeros((out_dim, embed_dim)),
            head_bias: Array1::zeros(out_dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.embed_dim(), self.hidden_dim(), self.out_dim())
    }

    pub fn embed_dim(&self) -> usize {
        self.tanh_proj.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.tanh_proj.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.head_bias.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, d, o) = (self.hidden_dim(), self.embed_dim(), self.out_dim());
        ensure!(h >= 1 && d >= 1 && o >= 1, Shape, "empty parameter tensor");
        ensure!(self.gate_proj.dim() == (h, d), Shape, "gate_proj is {:?}, expected {:?}", self.gate_proj.dim(), (h, d));
        ensure!(self.score.len() == h, Shape, "score has {} entries, expected {h}", self.score.len());
        ensure!(self.head_weight.dim() == (o, d), Shape, "head_weight is {:?}, expected {:?}", self.head_weight.dim(), (o, d));
        for (name, t) in TENSOR_NAMES.iter().zip(self.tensors()) {
            ensure!(t.iter().all(|v| v.is_finite()), Validation, "{name} has non-finite entries");
        }
        Ok(())
    }

    /// Flat views in `TENSOR_NAMES` order.
    pub fn tensors(&self) -> [&[T]; 5] {
        [
            self.tanh_proj.as_slice().expect("standard layout"),
            self.gate_proj.as_slice().expect("standard layout"),
            self.score.as_slice().expect("standard layout"),
            self.head_weight.as_slice().expect("standard layout"),
            self.head_bias.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [T]; 5] {
        [
            self.tanh_proj.as_slice_mut().expect("standard layout"),
            self.gate_proj.as_slice_mut().expect("standard layout"),
            self.score.as_slice_mut().expect("standard layout"),
            self.head_weight.as_slice_mut().expect("standard layout"),
            self.head_bias.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn shapes(&self) -> [Vec<usize>; 5] {
        [
            self.tanh_proj.shape().to_vec(),
            self.gate_proj.shape().to_vec(),
            self.score.shape().to_vec(),
            self.head_weight.shape().to_vec(),
            self.head_bias.shape().to_vec(),
        ]
    }

    pub fn cast<U: Real>(&self) -> AggregatorParams<U> {
        let c = |v: &T| U::of(v.as_f64());
        AggregatorParams {
            tanh_proj: self.tanh_proj.map(c),
            gate_proj: self.gate_proj.map(c),
            score: self.score.map(c),
            head_weight: self.head_weight.map(c),
            head_bias: self.head_bias.map(c),
        }
    }
}

fn uniform_matrix<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Array2<T> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array2::from_shape_simple_fn((rows, cols), || T::of(rng.sample(dist)))
}

/// Glorot-uniform projections and head, `score ~ U(-1/sqrt(H), 1/sqrt(H))`,
/// zero bias.
pub fn init_params<T: Real, R: Rng + ?Sized>(
    embed_dim: usize,
    hidden_dim: usize,
    out_dim: usize,
    rng: &mut R,
) -> Result<AggregatorParams<T>> {
    ensure!(
        embed_dim >= 1 && hidden_dim >= 1 && out_dim >= 1,
        Validation,
        "dimensions must be positive"
    );
    let proj_bound = (6.0 / (hidden_dim + embed_dim) as f64).sqrt();
    let head_bound = (6.0 / (out_dim + embed_dim) as f64).sqrt();
    let score_bound = 1.0 / (hidden_dim as f64).sqrt();
    let tanh_proj = uniform_matrix(hidden_dim, embed_dim, proj_bound, rng);
    let gate_proj = uniform_matrix(hidden_dim, embed_dim, proj_bound, rng);
    let score = uniform_matrix(1, hidden_dim, score_bound, rng).remove_axis(ndarray::Axis(0));
    let head_weight = uniform_matrix(out_dim, embed_dim, head_bound, rng);
    Ok(AggregatorParams {
        tanh_proj,
        gate_proj,
        score,
        head_weight,
        head_bias: Array1::zeros(out_dim),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_bounds_and_zero_bias() {
        let p: AggregatorParams<f64> = init_params(40, 16, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(p.head_bias.iter().all(|&b| b == 0.0));
        let a = (6.0f64 / 56.0).sqrt();
        assert!(p.tanh_proj.iter().chain(p.gate_proj.iter()).all(|v| v.abs() <= a));
        assert!(p.head_weight.iter().all(|v| v.abs() <= (6.0f64 / 43.0).sqrt()));
        assert!(p.score.iter().all(|v| v.abs() <= 0.25));
        p.validate().unwrap();
    }

    #[test]
    fn init_is_seeded() {
        let a: AggregatorParams<f32> = init_params(8, 4, 2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b: AggregatorParams<f32> = init_params(8, 4, 2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }
}
