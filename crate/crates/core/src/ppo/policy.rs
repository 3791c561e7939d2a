//! Diagonal Gaussian policy over the two normalized action components.

use rand::Rng;
use rand_distr::StandardNormal;

/// `0.5 * ln(2π)`.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

pub fn log_prob(action: [f64; 2], mean: [f64; 2], log_std: [f64; 2]) -> f64 {
    (0..2)
        .map(|j| {
            let z = (action[j] - mean[j]) * (-log_std[j]).exp();
            -0.5 * z * z - log_std[j] - HALF_LN_2PI
        })
        .sum()
}

/// Differential entropy of the diagonal Gaussian.
pub fn entropy(log_std: [f64; 2]) -> f64 {
    log_std.iter().map(|s| s + 0.5 + HALF_LN_2PI).sum()
}

/// Draws an unclipped action and its log-probability. The caller clips to
/// `[-1, 1]` for execution; the log-probability refers to the raw sample.
pub fn sample_action<R: Rng + ?Sized>(mean: [f64; 2], log_std: [f64; 2], rng: &mut R) -> ([f64; 2], f64) {
    let mut a = [0.0; 2];
    for j in 0..2 {
        let z: f64 = rng.sample(StandardNormal);
        a[j] = mean[j] + log_std[j].exp() * z;
    }
    (a, log_prob(a, mean, log_std))
}

pub fn clip_action(a: [f64; 2]) -> [f64; 2] {
    [a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)]
}

/// Action used for execution: the mean in deterministic mode, otherwise a
/// sample. Returns `(raw, log_prob)`.
pub fn select_action<R: Rng + ?Sized>(mean: [f64; 2], log_std: [f64; 2], deterministic: bool, rng: &mut R) -> ([f64; 2], f64) {
    if deterministic {
        (mean, log_prob(mean, mean, log_std))
    } else {
        sample_action(mean, log_std, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn log_prob_at_mean_unit_sigma() {
        let lp = log_prob([0.3, -0.2], [0.3, -0.2], [0.0, 0.0]);
        assert!((lp - (-(2.0 * std::f64::consts::PI).ln())).abs() < 1e-15);
        assert!((lp + 1.8379).abs() < 1e-4);
    }

    #[test]
    fn minimal_std_samples_hug_the_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mean = [0.4, -0.7];
        let n = 10_000;
        let close = (0..n)
            .filter(|_| {
                let (a, _) = sample_action(mean, [-5.0, -5.0], &mut rng);
                (a[0] - mean[0]).abs() < 0.03 && (a[1] - mean[1]).abs() < 0.03
            })
            .count();
        assert!(close as f64 / n as f64 > 0.99);
    }

    #[test]
    fn deterministic_mode_returns_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, _) = select_action([0.25, 2.0], [0.0, 1.0], true, &mut rng);
        assert_eq!(a, [0.25, 2.0]);
        assert_eq!(clip_action(a), [0.25, 1.0]);
    }

    #[test]
    fn sample_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 20_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let (a, lp) = sample_action([1.0, 0.0], [(0.5f64).ln(), 0.0], &mut rng);
            assert!((lp - log_prob(a, [1.0, 0.0], [(0.5f64).ln(), 0.0])).abs() < 1e-15);
            s += a[0];
            s2 += a[0] * a[0];
        }
        let m = s / n as f64;
        let var = s2 / n as f64 - m * m;
        assert!((m - 1.0).abs() < 0.02);
        assert!((var - 0.25).abs() < 0.02);
    }

    #[test]
    fn entropy_closed_form() {
        let h = entropy([0.0, 0.0]);
        assert!((h - (1.0 + (2.0 * std::f64::consts::PI).ln())).abs() < 1e-14);
    }
}
