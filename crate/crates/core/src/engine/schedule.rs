//! Learning-rate schedule: linear warmup then polynomial decay.

/// `lr * iter / warmup` during warmup, then
/// `lr * (1 - (iter - warmup) / (total - warmup))^power`, floored at 0.
pub fn lr_schedule(iter: u64, lr: f64, warmup: u64, total: u64, power: f64) -> f64 {
    if iter < warmup {
        return lr * (iter as f64 / warmup as f64);
    }
    if total <= warmup {
        return if iter == warmup { lr } else { 0.0 };
    }
    let frac = (iter - warmup) as f64 / (total - warmup) as f64;
    lr * (1.0 - frac).max(0.0).powf(power)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        assert_eq!(lr_schedule(0, 6e-5, 150, 2000, 1.0), 0.0);
        assert_eq!(lr_schedule(150, 6e-5, 150, 2000, 1.0), 6e-5);
        assert_eq!(lr_schedule(2000, 6e-5, 150, 2000, 1.0), 0.0);
        assert_eq!(lr_schedule(5000, 6e-5, 150, 2000, 1.0), 0.0);
        assert_eq!(lr_schedule(75, 6e-5, 150, 2000, 1.0), 3e-5);
    }

    #[test]
    fn midpoint_of_decay() {
        // (150 + 2000) / 2 = 1075; 1 - 925/1850 = 0.5.
        assert_eq!(lr_schedule(1075, 6e-5, 150, 2000, 1.0), 3e-5);
        let v = lr_schedule(1075, 1.0, 150, 2000, 0.9);
        assert!((v - 0.5f64.powf(0.9)).abs() < 1e-15);
    }

    #[test]
    fn without_warmup_starts_at_peak() {
        assert_eq!(lr_schedule(0, 1.0, 0, 10, 1.0), 1.0);
        assert_eq!(lr_schedule(5, 1.0, 0, 10, 1.0), 0.5);
    }
}
