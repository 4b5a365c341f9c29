//! Deterministic seed derivation shared by tie-breaking, data splitting and
//! the synthetic generator.

/// SplitMix64 finalizer; full-period mixing of a 64-bit state.
pub(crate) fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over the bit patterns of a float slice. Used to make seeded
/// tie-breaking a pure function of (seed, input).
pub(crate) fn hash_floats(values: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Derive an independent stream seed from a master seed and a stream index.
pub(crate) fn derive_seed(master: u64, stream: u64) -> u64 {
    splitmix64(master ^ stream.wrapping_mul(0xd6e8_feb8_6659_fd93))
}

/// Map a uniform 64-bit word onto `0..n` (multiply-shift; bias is below
/// 2^-64 per bucket, irrelevant for tie counts).
pub(crate) fn bounded(word: u64, n: usize) -> usize {
    ((u128::from(word) * n as u128) >> 64) as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_is_deterministic_and_mixes() {
        assert_eq!(splitmix64(1), splitmix64(1));
        assert_ne!(splitmix64(1), splitmix64(2));
    }

    #[test]
    fn hash_distinguishes_bit_patterns() {
        assert_ne!(hash_floats(&[0.1, 0.9]), hash_floats(&[0.9, 0.1]));
        assert_eq!(hash_floats(&[0.5]), hash_floats(&[0.5]));
    }

    #[test]
    fn bounded_stays_in_range() {
        for n in 1..10 {
            for w in [0, 1, u64::MAX / 2, u64::MAX] {
                assert!(bounded(w, n) < n);
            }
        }
    }
}
