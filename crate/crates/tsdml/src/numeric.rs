//! Small numeric helpers shared across modules: compensated summation for
//! long score series and deterministic seed derivation for nested RNG streams.

/// Neumaier-compensated sum. Keeps the mean of a series stable for lengths up
/// to ~1e6 even when entries have wildly different magnitudes (inverse
/// propensity weights can be large).
pub(crate) fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Compensated arithmetic mean.
pub(crate) fn compensated_mean(values: &[f64]) -> f64 {
    debug_assert!(!values.is_empty());
    compensated_sum(values.iter().copied()) / values.len() as f64
}

/// splitmix64 finalizer: bijective avalanche mix of a 64-bit word.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent child seed from a base seed and a stream index.
/// Used to key per-fold, per-role, per-tree and per-replication RNGs so that
/// results do not depend on execution order or thread count.
pub(crate) fn derive_seed(base: u64, stream: u64) -> u64 {
    splitmix64(base ^ splitmix64(stream))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_matches_naive_on_small_input() {
        let xs = [1.0, 2.0, 3.5, -0.5];
        assert_eq!(compensated_sum(xs), 6.0);
    }

    #[test]
    fn compensated_sum_recovers_cancellation() {
        // 1 + 1e16 - 1e16 loses the 1 in naive left-to-right addition.
        let xs = [1.0, 1e16, -1e16];
        assert_eq!(compensated_sum(xs), 1.0);
    }

    #[test]
    fn compensated_mean_of_constant_is_exact() {
        let xs = vec![0.3; 1_000];
        assert_eq!(compensated_mean(&xs), 0.3);
    }

    #[test]
    fn derive_seed_is_deterministic_and_spreads_streams() {
        assert_eq!(derive_seed(42, 7), derive_seed(42, 7));
        assert_ne!(derive_seed(42, 0), derive_seed(42, 1));
        assert_ne!(derive_seed(0, 0), derive_seed(1, 0));
    }
}
