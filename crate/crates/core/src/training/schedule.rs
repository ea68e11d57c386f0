//! Linear warmup followed by cosine decay.

/// Number of warmup steps: `ceil(warmup_fraction * total_steps)`.
pub fn warmup_steps(total_steps: usize, warmup_fraction: f64) -> usize {
    ((warmup_fraction * total_steps as f64).ceil() as usize).min(total_steps)
}

/// Learning rate at `step` of `total_steps`: linear from 0 to `base_lr` over
/// the warmup steps, then `base_lr * (1 + cos(pi * t)) / 2` where `t` is the
/// post-warmup progress in `[0, 1]`.
pub fn lr_at(step: usize, total_steps: usize, base_lr: f64, warmup_fraction: f64) -> f64 {
    let total = total_steps.max(1);
    let step = step.min(total);
    let warm = warmup_steps(total, warmup_fraction);
    if step < warm {
        return base_lr * step as f64 / warm as f64;
    }
    if warm == total {
        return base_lr;
    }
    let t = (step - warm) as f64 / (total - warm) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn endpoints() {
        assert_eq!(lr_at(0, 100, 1e-5, 0.1), 0.0);
        assert_eq!(lr_at(10, 100, 1e-5, 0.1), 1e-5);
        assert_eq!(lr_at(5, 100, 1e-5, 0.1), 5e-6);
        assert!(lr_at(100, 100, 1e-5, 0.1).abs() < 1e-12);
        assert!((lr_at(55, 100, 2.0, 0.1) - 1.0).abs() < 1e-12);
        assert_eq!(warmup_steps(1260, 0.1), 126);
        assert_eq!(warmup_steps(7, 0.1), 1);
    }

    proptest! {
        #[test]
        fn bounded_and_continuous(total in 2usize..5000, frac in 0.01f64..0.99, base in 1e-6f64..1.0) {
            let warm = warmup_steps(total, frac);
            for s in [0, warm.saturating_sub(1), warm, warm + 1, total] {
                let lr = lr_at(s.min(total), total, base, frac);
                prop_assert!((0.0..=base * (1.0 + 1e-12)).contains(&lr));
            }
            prop_assert!((lr_at(warm, total, base, frac) - base).abs() <= base * 1e-12);
            if warm + 1 <= total {
                let right = lr_at(warm + 1, total, base, frac);
                let step = base * std::f64::consts::PI * std::f64::consts::PI
                    / (2.0 * ((total - warm) as f64).powi(2));
                prop_assert!(base - right <= step * 1.000001 + 1e-15);
            }
        }
    }
}
