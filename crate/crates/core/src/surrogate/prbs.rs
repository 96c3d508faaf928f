//! Pseudo-random binary excitation signals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Piecewise-constant signal alternating between `lo` and `hi`. Hold
/// durations are drawn uniformly from `hold.0..=hold.1` samples; the
/// starting level is drawn too.
pub fn generate_prbs(lo: f64, hi: f64, length: usize, hold: (usize, usize), seed: u64) -> Result<Vec<f64>> {
    if !(lo < hi) {
        return Err(Error::Config(format!("PRBS needs lo < hi, got {lo} and {hi}")));
    }
    if hold.0 == 0 || hold.0 > hold.1 {
        return Err(Error::Config(format!("invalid PRBS hold range {hold:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut high = rng.random::<bool>();
    let mut out = Vec::with_capacity(length);
    while out.len() < length {
        let d = rng.random_range(hold.0..=hold.1);
        let v = if high { hi } else { lo };
        out.extend(std::iter::repeat_n(v, d.min(length - out.len())));
        high = !high;
    }
    Ok(out)
}

/// Derives an independent stream seed (splitmix64 finalizer).
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_and_seeded() {
        let a = generate_prbs(-1.0, 2.0, 500, (3, 9), 7).unwrap();
        assert_eq!(a.len(), 500);
        assert!(a.iter().all(|v| *v == -1.0 || *v == 2.0));
        assert_eq!(a, generate_prbs(-1.0, 2.0, 500, (3, 9), 7).unwrap());
        assert_ne!(a, generate_prbs(-1.0, 2.0, 500, (3, 9), 8).unwrap());
    }

    #[test]
    fn mean_hold_matches_range_midpoint() {
        let (lo, hi) = (4, 20);
        let sig = generate_prbs(0.0, 1.0, 200_000, (lo, hi), 3).unwrap();
        let mut runs = Vec::new();
        let mut len = 1;
        for k in 1..sig.len() {
            if sig[k] == sig[k - 1] {
                len += 1;
            } else {
                runs.push(len);
                len = 1;
            }
        }
        assert!(runs.len() >= 10_000);
        let mean = runs.iter().sum::<usize>() as f64 / runs.len() as f64;
        let mid = (lo + hi) as f64 / 2.0;
        assert!((mean - mid).abs() < 0.1 * mid, "mean hold {mean}");
        assert!(runs.iter().all(|r| (lo..=hi).contains(r)));
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(generate_prbs(1.0, 1.0, 5, (1, 2), 0).is_err());
        assert!(generate_prbs(0.0, 1.0, 5, (3, 2), 0).is_err());
        assert!(generate_prbs(0.0, 1.0, 5, (0, 2), 0).is_err());
    }
}
