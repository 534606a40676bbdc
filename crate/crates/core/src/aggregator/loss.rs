//! Cross-entropy, mean squared error and the Cox partial likelihood.
//! Computed in `f64` whatever the model precision.

use ndarray::{Array2, ArrayView2};

use crate::data::{SurvivalRecord, Task};
use crate::error::{ensure, Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
    Survival(Vec<SurvivalRecord>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(v) => v.len(),
            Targets::Values(v) => v.len(),
            Targets::Survival(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task(&self) -> Task {
        match self {
            Targets::Classes(_) => Task::Classification,
            Targets::Values(_) => Task::Regression,
            Targets::Survival(_) => Task::Survival,
        }
    }

    /// The targets at the given positions.
    pub fn subset(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes(v) => Targets::Classes(idx.iter().map(|&i| v[i]).collect()),
            Targets::Values(v) => Targets::Values(idx.iter().map(|&i| v[i]).collect()),
            Targets::Survival(v) => Targets::Survival(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Breslow negative partial log-likelihood, averaged over events, and its
/// gradient with respect to each risk score. Risk set of an event at `t` is
/// every sample with time `>= t`.
pub fn cox_loss(risks: &[f64], records: &[SurvivalRecord]) -> Result<(f64, Vec<f64>)> {
    ensure!(risks.len() == records.len(), Shape, "{} risks for {} records", risks.len(), records.len());
    let n_events = records.iter().filter(|r| r.event).count();
    ensure!(n_events > 0, Validation, "Cox loss needs at least one event in the batch");
    let shift = risks.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    // Descending time; ties are grouped so a whole group enters the risk set
    // before any of its events is scored.
    let mut order: Vec<usize> = (0..risks.len()).collect();
    order.sort_by(|&a, &b| records[b].time.total_cmp(&records[a].time));
    let mut risk_sum = vec![0.0; risks.len()];
    let mut running = 0.0;
    let mut start = 0;
    while start < order.len() {
        let t = records[order[start]].time;
        let end = start + order[start..].iter().take_while(|&&i| records[i].time == t).count();
        running += order[start..end].iter().map(|&i| (risks[i] - shift).exp()).sum::<f64>();
        for &i in &order[start..end] {
            risk_sum[i] = running;
        }
        start = end;
    }

    let mut loss = 0.0;
    for (i, r) in records.iter().enumerate() {
        if r.event {
            loss -= risks[i] - (shift + risk_sum[i].ln());
        }
    }

    // d/d eta_k = -(delta_k - exp(eta_k) * sum_{events i: t_i <= t_k} 1 / S_i)
    let mut grad = vec![0.0; risks.len()];
    let mut inverse_sums = 0.0;
    let mut start = order.len();
    while start > 0 {
        let t = records[order[start - 1]].time;
        let len = order[..start].iter().rev().take_while(|&&i| records[i].time == t).count();
        let group = &order[start - len..start];
        inverse_sums += group
            .iter()
            .filter(|&&i| records[i].event)
            .map(|&i| 1.0 / risk_sum[i])
            .sum::<f64>();
        for &k in group {
            let delta = if records[k].event { 1.0 } else { 0.0 };
            grad[k] = -(delta - (risks[k] - shift).exp() * inverse_sums);
        }
        start -= len;
    }
    let scale = 1.0 / n_events as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((loss * scale, grad))
}

/// Loss value and its gradient with respect to the model outputs.
pub fn loss_and_output_grad<T: Real>(outputs: ArrayView2<T>, targets: &Targets) -> Result<(f64, Array2<T>)> {
    let n = outputs.nrows();
    ensure!(n == targets.len(), Shape, "{n} outputs for {} targets", targets.len());
    ensure!(n > 0, Validation, "empty batch");
    let out = outputs.mapv(|v| v.as_f64());
    let mut grad = Array2::<f64>::zeros(out.dim());
    let loss = match targets {
        Targets::Classes(classes) => {
            let c = out.ncols();
            let mut total = 0.0;
            for (i, &y) in classes.iter().enumerate() {
                ensure!(y < c, Validation, "class {y} out of range for {c} outputs");
                let row = out.row(i);
                let lse = log_sum_exp(row.iter().copied());
                total += lse - row[y];
                for k in 0..c {
                    grad[[i, k]] = ((row[k] - lse).exp() - if k == y { 1.0 } else { 0.0 }) / n as f64;
                }
            }
            total / n as f64
        }
        Targets::Values(values) => {
            ensure!(out.ncols() == 1, Shape, "regression head must have one output");
            let mut total = 0.0;
            for (i, &y) in values.iter().enumerate() {
                let r = out[[i, 0]] - y;
                total += r * r;
                grad[[i, 0]] = 2.0 * r / n as f64;
            }
            total / n as f64
        }
        Targets::Survival(records) => {
            ensure!(out.ncols() == 1, Shape, "survival head must have one output");
            let risks: Vec<f64> = out.column(0).to_vec();
            let (loss, g) = cox_loss(&risks, records)?;
            grad.column_mut(0).assign(&ndarray::Array1::from(g));
            loss
        }
    };
    if !loss.is_finite() {
        return Err(Error::Validation(format!("non-finite {} loss", targets.task())));
    }
    Ok((loss, grad.mapv(T::of)))
}

pub fn loss<T: Real>(outputs: ArrayView2<T>, targets: &Targets) -> Result<f64> {
    loss_and_output_grad(outputs, targets).map(|(l, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct evaluation over explicit risk sets.
    fn cox_bruteforce(risks: &[f64], recs: &[SurvivalRecord]) -> f64 {
        let events: Vec<usize> = (0..recs.len()).filter(|&i| recs[i].event).collect();
        let mut total = 0.0;
        for &i in &events {
            let denom: f64 = (0..recs.len())
                .filter(|&j| recs[j].time >= recs[i].time)
                .map(|j| risks[j].exp())
                .sum();
            total += risks[i] - denom.ln();
        }
        -total / events.len() as f64
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let l = loss(array![[0.3f64, 0.3, 0.3, 0.3], [0.0, 0.0, 0.0, 0.0]].view(), &Targets::Classes(vec![1, 3])).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_is_shift_invariant() {
        let a = array![[1.0f64, -2.0, 0.5]];
        let b = a.mapv(|v| v + 7.25);
        let t = Targets::Classes(vec![2]);
        let (la, ga) = loss_and_output_grad(a.view(), &t).unwrap();
        let (lb, gb) = loss_and_output_grad(b.view(), &t).unwrap();
        assert!((la - lb).abs() < 1e-12);
        assert!((&ga - &gb).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn perfect_regression_has_zero_loss_and_gradient() {
        let (l, g) = loss_and_output_grad(array![[1.5f64], [-2.0]].view(), &Targets::Values(vec![1.5, -2.0])).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cox_single_event_with_zero_risks_is_log_risk_set() {
        let recs = vec![
            SurvivalRecord::new(1.0, false),
            SurvivalRecord::new(2.0, true),
            SurvivalRecord::new(3.0, false),
            SurvivalRecord::new(4.0, false),
        ];
        let (l, _) = cox_loss(&[0.0; 4], &recs).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cox_needs_an_event() {
        let recs = vec![SurvivalRecord::new(1.0, false)];
        assert!(matches!(cox_loss(&[0.0], &recs), Err(Error::Validation(_))));
    }

    #[test]
    fn cox_matches_bruteforce_and_finite_differences_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let n = rng.random_range(2..12);
            let recs: Vec<_> = (0..n)
                .map(|i| SurvivalRecord::new(rng.random_range(1..5) as f64, i == 0 || rng.random_bool(0.5)))
                .collect();
            let risks: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (l, g) = cox_loss(&risks, &recs).unwrap();
            assert!((l - cox_bruteforce(&risks, &recs)).abs() < 1e-12);
            for k in 0..n {
                let mut up = risks.clone();
                let mut dn = risks.clone();
                up[k] += 1e-6;
                dn[k] -= 1e-6;
                let fd = (cox_bruteforce(&up, &recs) - cox_bruteforce(&dn, &recs)) / 2e-6;
                assert!((fd - g[k]).abs() < 1e-7, "k={k} fd={fd} analytic={}", g[k]);
            }
        }
    }

    #[test]
    fn cox_is_shift_invariant() {
        let recs: Vec<_> = (0..6).map(|i| SurvivalRecord::new(i as f64 + 1.0, i % 2 == 0)).collect();
        let risks = [0.3, -1.2, 2.0, 0.1, -0.4, 0.9];
        let (l0, g0) = cox_loss(&risks, &recs).unwrap();
        let shifted: Vec<f64> = risks.iter().map(|r| r + 3.5).collect();
        let (l1, g1) = cox_loss(&shifted, &recs).unwrap();
        assert!((l0 - l1).abs() < 1e-12);
        assert!(g0.iter().zip(&g1).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}
