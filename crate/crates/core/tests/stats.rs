use patchlab_core::stats::{bootstrap_ci, exact_binomial_ci, mean};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn all_successes_lower_bound() {
    let s = exact_binomial_ci(1000, 1000, 0.95).unwrap();
    assert!((s.lower - 0.99632).abs() <= 1e-5, "{}", s.lower);
    assert_eq!(s.upper, 1.0);
    assert_eq!(s.estimate, 1.0);
}

#[test]
fn interval_covers_true_rate() {
    // Clopper-Pearson is conservative, so coverage should be at least nominal.
    let p = 0.9;
    let n = 50;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut cache = vec![None; n + 1];
    let mut covered = 0;
    let draws = 10_000;
    for _ in 0..draws {
        let k = (0..n).filter(|_| rng.random_bool(p)).count();
        let ci =
            *cache[k].get_or_insert_with(|| exact_binomial_ci(k as u64, n as u64, 0.95).unwrap());
        if ci.lower <= p && p <= ci.upper {
            covered += 1;
        }
    }
    let rate = covered as f64 / draws as f64;
    assert!(rate >= 0.95, "coverage {rate}");
}

proptest! {
    #[test]
    fn interval_brackets_estimate(n in 1u64..400, frac in 0.0..=1.0f64, level in 0.5..0.999f64) {
        let k = ((n as f64) * frac).round() as u64;
        let s = exact_binomial_ci(k, n, level).unwrap();
        prop_assert!(0.0 <= s.lower && s.lower <= s.estimate);
        prop_assert!(s.estimate <= s.upper && s.upper <= 1.0);
    }

    #[test]
    fn interval_is_symmetric_under_relabelling(n in 1u64..300, k in 0u64..300) {
        let k = k.min(n);
        let a = exact_binomial_ci(k, n, 0.95).unwrap();
        let b = exact_binomial_ci(n - k, n, 0.95).unwrap();
        prop_assert!((a.lower - (1.0 - b.upper)).abs() < 1e-9);
        prop_assert!((a.upper - (1.0 - b.lower)).abs() < 1e-9);
    }

    #[test]
    fn wider_level_gives_wider_interval(n in 1u64..200, k in 0u64..200) {
        let k = k.min(n);
        let a = exact_binomial_ci(k, n, 0.9).unwrap();
        let b = exact_binomial_ci(k, n, 0.99).unwrap();
        prop_assert!(b.lower <= a.lower + 1e-12 && a.upper <= b.upper + 1e-12);
    }

    #[test]
    fn bootstrap_interval_contains_sample_mean_for_binary_data(
        bits in proptest::collection::vec(any::<bool>(), 20..80),
        seed in any::<u64>(),
    ) {
        let v: Vec<f64> = bits.iter().map(|&b| b as u8 as f64).collect();
        let (lo, hi) = bootstrap_ci(&v, mean, 500, 0.95, seed).unwrap();
        let m = mean(&v);
        prop_assert!(lo <= m + 1e-12 && m <= hi + 1e-12);
        prop_assert!((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi));
    }
}
