use crate::config::RunConfig;

/// Linear warmup to the peak rate, then cosine decay to zero at the last
/// epoch boundary.
pub fn lr_schedule(epoch: usize, config: &RunConfig) -> f64 {
    let peak = config.learning_rate;
    let warmup = config.warmup_epochs;
    if epoch < warmup {
        return peak * (epoch + 1) as f64 / warmup as f64;
    }
    let span = config.max_epochs.saturating_sub(warmup);
    if span == 0 {
        return peak;
    }
    let progress = (epoch - warmup) as f64 / span as f64;
    (peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())).max(0.0)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::config::{derive_config, ConfigOverrides, DataFingerprint};
    use crate::data::Task;

    pub(crate) fn config() -> RunConfig {
        let fp = DataFingerprint {
            task: Task::Classification,
            patch_count_median: 100.0,
            patch_count_iqr: 0.0,
            patch_count_p5: 100.0,
            patch_count_p95: 100.0,
            embed_dim: 64,
            class_prevalence: Some(vec![0.5, 0.5]),
            target_min: None,
            target_max: None,
            event_rate: None,
            time_horizon_max: None,
            n_train: 1,
            n_val: 1,
            n_test: 0,
            magnification: None,
        };
        derive_config(&fp, Task::Classification, &ConfigOverrides::default()).unwrap()
    }

    #[test]
    fn warmup_and_cosine() {
        let c = config();
        let peak = c.learning_rate;
        assert!((lr_schedule(0, &c) - peak / 5.0).abs() < 1e-18);
        assert_eq!(lr_schedule(4, &c), peak);
        assert_eq!(lr_schedule(5, &c), peak);
        let last = lr_schedule(99, &c);
        let expected = peak * 0.5 * (1.0 + (94.0 * std::f64::consts::PI / 95.0).cos());
        assert_eq!(last, expected);
        assert!((last / peak - 2.7e-4).abs() < 0.05e-4);
        let all: Vec<f64> = (5..100).map(|e| lr_schedule(e, &c)).collect();
        assert!(all.windows(2).all(|w| w[0] >= w[1]));
    }
}
