//! Counter-based random streams for reproducible mask sampling.
//!
//! A draw is addressed by (seed, tensor name, entry index), never by call
//! order: the name is folded into the seed with FNV-1a, the combination is
//! mixed once into a substream key, and entry `i` draws
//! `mix64(key + (i+1)*GOLDEN)`. Every tensor therefore owns an independent
//! substream, and a mask never shifts because unrelated tensors were added,
//! removed, or visited in a different order.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
/// 2^64 divided by the golden ratio; the splitmix64 increment.
const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// FNV-1a over raw bytes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// splitmix64 finalizer; a bijection on u64.
pub fn mix64(mut x: u64) -> u64 {
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// One tensor's substream, identified by (seed, name).
#[derive(Debug, Clone, Copy)]
pub struct MaskStream {
    key: u64,
}

impl MaskStream {
    pub fn new(seed: u64, name: &str) -> Self {
        MaskStream {
            key: mix64(seed ^ fnv1a64(name.as_bytes())),
        }
    }

    /// Uniform draw in [0, 1) for entry `i`.
    pub fn uniform(&self, i: u64) -> f64 {
        let bits = mix64(self.key.wrapping_add(i.wrapping_add(1).wrapping_mul(GOLDEN)));
        (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Whether entry `i` survives a drop rate of `p`.
    pub fn keep(&self, i: u64, p: f64) -> bool {
        self.uniform(i) >= p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_are_pure() {
        let s = MaskStream::new(42, "temporal.wq");
        assert_eq!(s.uniform(7).to_bits(), s.uniform(7).to_bits());
        let again = MaskStream::new(42, "temporal.wq");
        assert_eq!(s.uniform(0).to_bits(), again.uniform(0).to_bits());
    }

    #[test]
    fn names_get_distinct_substreams() {
        let a = MaskStream::new(42, "spatial.w1");
        let b = MaskStream::new(42, "spatial.w2");
        let same = (0..64).filter(|&i| a.uniform(i) == b.uniform(i)).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn uniform_range_and_mean() {
        let s = MaskStream::new(9, "x");
        let n = 20_000;
        let mut sum = 0.0;
        for i in 0..n {
            let u = s.uniform(i);
            assert!((0.0..1.0).contains(&u));
            sum += u;
        }
        let mean = sum / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn keep_rate_tracks_drop_rate() {
        let s = MaskStream::new(1234, "adapter.wproj");
        let n = 50_000u64;
        let kept = (0..n).filter(|&i| s.keep(i, 0.7)).count() as f64;
        let frac = kept / n as f64;
        // 3 sigma of a Bernoulli(0.3) mean over 50k draws is ~0.006
        assert!((frac - 0.3).abs() < 0.007, "kept fraction {frac}");
    }
}
