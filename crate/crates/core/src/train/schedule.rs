//! Linear warm-up followed by linear decay.

/// Learning rate for optimizer update `step`.
///
/// Rises linearly from 0 at step 0 to `base_lr` at `warmup`, then falls
/// linearly to 0 at `total`. Steps past `total` get 0.
///
/// ```
/// use xlprompt_core::train::lr_at;
///
/// assert_eq!(lr_at(0, 100, 2000, 3e-5), 0.0);
/// assert_eq!(lr_at(100, 100, 2000, 3e-5), 3e-5);
/// assert_eq!(lr_at(2000, 100, 2000, 3e-5), 0.0);
/// ```
pub fn lr_at(step: usize, warmup: usize, total: usize, base_lr: f64) -> f64 {
    if step >= total {
        return 0.0;
    }
    let warmup = warmup.min(total);
    if step < warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    base_lr * (total - step) as f64 / (total - warmup) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn endpoints_and_peak() {
        assert_eq!(lr_at(0, 100, 2000, 3e-5), 0.0);
        assert_eq!(lr_at(100, 100, 2000, 3e-5), 3e-5);
        assert_eq!(lr_at(2000, 100, 2000, 3e-5), 0.0);
        assert_eq!(lr_at(5000, 100, 2000, 3e-5), 0.0);
    }

    #[test]
    fn decay_midpoint() {
        // Two-point interpolation between (100, 3e-5) and (2000, 0).
        let (x0, y0, x1, y1) = (100.0, 3e-5, 2000.0, 0.0);
        let expected = y0 + (1050.0 - x0) * (y1 - y0) / (x1 - x0);
        assert!((lr_at(1050, 100, 2000, 3e-5) - expected).abs() < 1e-12);
        assert!((expected - 1.5e-5).abs() < 1e-12);
    }

    #[test]
    fn zero_warmup_starts_at_peak() {
        assert_eq!(lr_at(0, 0, 10, 1.0), 1.0);
        assert_eq!(lr_at(5, 0, 10, 1.0), 0.5);
    }

    proptest! {
        #[test]
        fn bounded_and_continuous(warmup in 1usize..200, extra in 1usize..2000, step in 0usize..2500) {
            let total = warmup + extra;
            let base = 3e-5;
            let lr = lr_at(step, warmup, total, base);
            prop_assert!((0.0..=base).contains(&lr));
            let next = lr_at(step + 1, warmup, total, base);
            let max_slope = base / (warmup.min(extra) as f64);
            prop_assert!((next - lr).abs() <= max_slope + 1e-18);
        }
    }
}
