//! Cosine learning-rate schedule with warm restarts.

use super::TrainConfig;

/// Position inside the restart cycle: `(t_cur, t_i)` for a (possibly
/// fractional) epoch.
pub fn restart_position(epoch: f64, t_0: usize, t_mul: usize) -> (f64, f64) {
    let mut t = epoch.max(0.0);
    let mut period = t_0 as f64;
    while t >= period {
        t -= period;
        period *= t_mul as f64;
    }
    (t, period)
}

/// Rate at `t_cur` within a period of length `t_i`: `lr_max` at 0, `lr_min`
/// at `t_i`.
pub fn lr_in_period(t_cur: f64, t_i: f64, lr_max: f64, lr_min: f64) -> f64 {
    let w = 0.5 * (1.0 + (std::f64::consts::PI * t_cur / t_i).cos());
    lr_max * w + lr_min * (1.0 - w)
}

pub fn cosine_lr(epoch: f64, cfg: &TrainConfig) -> f64 {
    let (t_cur, t_i) = restart_position(epoch, cfg.t_0, cfg.t_mul);
    lr_in_period(t_cur, t_i, cfg.lr_max, cfg.lr_min)
}

/// Epochs at which a new period starts, below `horizon`.
pub fn restart_epochs(t_0: usize, t_mul: usize, horizon: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut start = t_0;
    let mut period = t_0;
    while start < horizon {
        out.push(start);
        period *= t_mul;
        start += period;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_are_exact() {
        let cfg = TrainConfig::full();
        assert_eq!(cosine_lr(0.0, &cfg), cfg.lr_max);
        assert_eq!(lr_in_period(10.0, 10.0, cfg.lr_max, cfg.lr_min), cfg.lr_min);
        assert_eq!(cosine_lr(10.0, &cfg), cfg.lr_max);
        assert_eq!(cosine_lr(30.0, &cfg), cfg.lr_max);
        assert!(cosine_lr(9.999, &cfg) < cfg.lr_min * 1.01);
    }

    #[test]
    fn restarts_at_ten_and_thirty() {
        assert_eq!(restart_epochs(10, 2, 40), vec![10, 30]);
        assert_eq!(restart_position(29.0, 10, 2), (19.0, 20.0));
        assert_eq!(restart_position(30.0, 10, 2), (0.0, 40.0));
    }

    #[test]
    fn monotone_within_period() {
        let cfg = TrainConfig::full();
        let lrs: Vec<f64> = (0..10).map(|e| cosine_lr(e as f64, &cfg)).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
        assert!((cosine_lr(5.0, &cfg) - 0.5 * (cfg.lr_max + cfg.lr_min)).abs() < 1e-15);
    }
}
