use std::f64::consts::PI;

/// Cosine annealing without restarts:
/// `eta_min + ½(lr0 − eta_min)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64, eta_min: f64) -> f64 {
    assert!(total_steps > 0, "cosine schedule needs a positive horizon");
    let t = step.min(total_steps) as f64 / total_steps as f64;
    eta_min + 0.5 * (lr0 - eta_min) * (1.0 + (PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 300, 1e-4, 0.0), 1e-4);
        assert!((cosine_lr(300, 300, 1e-4, 1e-6) - 1e-6).abs() < 1e-18);
        assert!((cosine_lr(150, 300, 1e-4, 0.0) - 5e-5).abs() < 1e-18);
    }

    #[test]
    fn monotone_decreasing() {
        let lrs: Vec<f64> = (0..=50).map(|s| cosine_lr(s, 50, 1.0, 0.1)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
