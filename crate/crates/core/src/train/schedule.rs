//! Polynomial learning-rate decay.

/// `lr0 · (1 − t/total)^power`; `0` at and beyond `total`.
pub fn poly_lr(t: usize, total: usize, lr0: f64, power: f64) -> f64 {
    if total == 0 || t >= total {
        return 0.0;
    }
    lr0 * (1.0 - t as f64 / total as f64).powf(power)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_are_exact() {
        assert_eq!(poly_lr(0, 300, 1e-4, 0.9), 1e-4);
        assert_eq!(poly_lr(300, 300, 1e-4, 0.9), 0.0);
        assert_eq!(poly_lr(301, 300, 1e-4, 0.9), 0.0);
    }

    #[test]
    fn midpoint() {
        // 0.5^0.9, evaluated separately with exp/ln.
        let half = (0.9f64 * 0.5f64.ln()).exp();
        assert!((poly_lr(150, 300, 1e-4, 0.9) - 1e-4 * half).abs() < 1e-18);
        assert!((half - 0.535_886_731_268_146_4).abs() < 1e-12);
    }

    #[test]
    fn nonincreasing() {
        let lrs: Vec<f64> = (0..=40).map(|t| poly_lr(t, 37, 2e-3, 0.9)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
