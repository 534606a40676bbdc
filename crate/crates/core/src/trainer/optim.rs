use crate::aggregator::{AggregatorParams, Gradients, TENSOR_NAMES};
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn with_weight_decay(weight_decay: f64) -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// First and second moment estimates, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: AggregatorParams<T>,
    pub v: AggregatorParams<T>,
    pub step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &AggregatorParams<T>) -> Self {
        OptimizerState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One AdamW update in place: decoupled decay `θ *= 1 - lr·wd`, then the
/// bias-corrected Adam step.
pub fn adamw_step<T: Real>(
    params: &mut AggregatorParams<T>,
    grads: &Gradients<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if params.shapes() != grads.shapes() || params.shapes() != state.m.shapes() {
        return Err(Error::Shape("parameter, gradient and moment shapes differ".into()));
    }
    for (name, g) in TENSOR_NAMES.iter().zip(grads.tensors()) {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite gradient in {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let decay = T::of(1.0 - lr * cfg.weight_decay);
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
    let step_size = T::of(lr / c1);
    let (inv_sqrt_c2, eps) = (T::of(1.0 / c2.sqrt()), T::of(cfg.eps));
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut())
    {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + one_b1 * g[i];
            v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
            p[i] *= decay;
            p[i] -= step_size * m[i] / (v[i].sqrt() * inv_sqrt_c2 + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregator::init_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> AggregatorParams<f64> {
        init_params(6, 4, 2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut p = params();
        let before = p.clone();
        let mut s = OptimizerState::new(&p);
        adamw_step(&mut p, &before.zeros_like(), &mut s, 0.01, &AdamWConfig::with_weight_decay(0.1)).unwrap();
        for (a, b) in p.tensors().iter().zip(before.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x, y * (1.0 - 0.01 * 0.1));
            }
        }
        let mut q = before.clone();
        adamw_step(&mut q, &before.zeros_like(), &mut s, 0.01, &AdamWConfig::with_weight_decay(0.0)).unwrap();
        assert_eq!(q, before);
    }

    #[test]
    fn first_step_moves_by_lr_sign() {
        let mut p = params();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.tanh_proj.iter_mut().enumerate().for_each(|(i, v)| *v = if i % 2 == 0 { 0.3 } else { -2.0 });
        let mut s = OptimizerState::new(&p);
        adamw_step(&mut p, &g, &mut s, 1e-3, &AdamWConfig::with_weight_decay(0.0)).unwrap();
        for ((a, b), gv) in p.tanh_proj.iter().zip(before.tanh_proj.iter()).zip(g.tanh_proj.iter()) {
            assert!((a - b + 1e-3 * gv.signum()).abs() < 1e-10);
        }
        assert_eq!(s.step, 1);
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut p = params();
        let mut g = p.zeros_like();
        g.head_bias[1] = f64::NAN;
        let mut s = OptimizerState::new(&p);
        let err = adamw_step(&mut p, &g, &mut s, 1e-3, &AdamWConfig::with_weight_decay(0.0)).unwrap_err();
        assert!(err.to_string().contains("head_bias"));
    }
}
