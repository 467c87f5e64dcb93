//! Small statistics helpers: binomial interval estimates for success rates
//! and stable seed derivation for experiment cells.

use sha2::{Digest, Sha256};

/// Wilson score interval for a binomial proportion at z = 1.96 (95%).
/// Returns (low, point, high); the point estimate is the plain proportion.
pub fn wilson_interval(successes: u32, trials: u32) -> (f64, f64, f64) {
    if trials == 0 {
        return (0.0, 0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z = 1.96f64;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = (z / denom) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((center - half).max(0.0), p, (center + half).min(1.0))
}

/// Standard error of a binomial proportion estimate.
pub fn binomial_se(p: f64, trials: u32) -> f64 {
    if trials == 0 {
        return 0.5;
    }
    (p * (1.0 - p) / trials as f64).sqrt()
}

/// Derives a child seed from a master seed and a textual key, so experiment
/// cells get stable independent randomness keyed by what they are rather
/// than where they sit in an iteration order.
pub fn derive_seed(master: u64, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update([0x1f]);
    h.update(key.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilson_known_value() {
        // 8 successes in 10 trials at z = 1.96: interval approximately
        // (0.490, 0.943), computed from the closed form by hand.
        let (low, p, high) = wilson_interval(8, 10);
        assert_eq!(p, 0.8);
        assert!((low - 0.4901568).abs() < 1e-6, "low {low}");
        assert!((high - 0.9433191).abs() < 1e-6, "high {high}");
    }

    #[test]
    fn wilson_edges_stay_in_unit_interval() {
        for (s, n) in [(0, 50), (50, 50), (1, 1), (0, 1)] {
            let (low, p, high) = wilson_interval(s, n);
            assert!(0.0 <= low && low <= p && p <= high && high <= 1.0);
        }
        assert_eq!(wilson_interval(0, 0), (0.0, 0.0, 1.0));
    }

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        let a = derive_seed(7, "finetune/left/right");
        assert_eq!(a, derive_seed(7, "finetune/left/right"));
        assert_ne!(a, derive_seed(7, "finetune/left/left2"));
        assert_ne!(a, derive_seed(8, "finetune/left/right"));
    }
}
