//! Counter-based deterministic random number generation.
//!
//! Streams are keyed by `(master_seed, label)` and indexed by a counter, so
//! any draw can be replayed bit-exactly from a captured [`RngState`]. Labels
//! are structured strings such as `"purify/fwd/step=7/draw=2"`; deriving a
//! child stream re-keys with the child label and resets the counter. Gaussian
//! draws use Box-Muller with no cached second value, so the state is fully
//! described by `(key, counter)`.

/// Captured stream position; restoring it replays the stream bit-exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub key: u64,
    pub counter: u64,
}

/// A deterministic counter-based random stream.
///
/// Not cryptographically secure; output quality is that of a SplitMix64-style
/// mixer, which is ample for simulation noise.
#[derive(Debug, Clone)]
pub struct StreamRng {
    key: u64,
    counter: u64,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hash_label(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label bytes, folded with the seed, then finalized.
    let mut h = 0xCBF2_9CE4_8422_2325u64 ^ seed;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    mix64(h.wrapping_add(seed.wrapping_mul(GOLDEN)))
}

impl StreamRng {
    /// Stream keyed by a master seed and a label.
    pub fn new(master_seed: u64, label: &str) -> Self {
        StreamRng {
            key: hash_label(master_seed, label),
            counter: 0,
        }
    }

    /// Child stream keyed by this stream's key and a sub-label. The child
    /// starts at counter 0 and is independent of this stream's position.
    pub fn derive(&self, label: &str) -> StreamRng {
        StreamRng {
            key: hash_label(self.key, label),
            counter: 0,
        }
    }

    pub fn state(&self) -> RngState {
        RngState {
            key: self.key,
            counter: self.counter,
        }
    }

    pub fn from_state(state: RngState) -> Self {
        StreamRng {
            key: state.key,
            counter: state.counter,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key ^ self.counter.wrapping_mul(GOLDEN))
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Standard normal draw via Box-Muller. Consumes exactly two counter
    /// increments; nothing is cached.
    pub fn normal(&mut self) -> f64 {
        // u1 in (0, 1] avoids ln(0).
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / 9_007_199_254_740_992.0);
        let u2 = (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn fill_normal(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Uniform integer in `[0, bound)`. Panics on `bound == 0`.
    pub fn below(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "below requires a positive bound");
        (self.next_u64() % bound as u64) as usize
    }

    /// Uniform integer in `[lo, hi]` inclusive.
    pub fn int_range(&mut self, lo: usize, hi: usize) -> usize {
        assert!(lo <= hi);
        lo + self.below(hi - lo + 1)
    }

    /// `count` distinct values drawn without replacement from `[lo, hi]`,
    /// returned sorted ascending. Panics if the range is too small.
    pub fn sample_distinct(&mut self, lo: usize, hi: usize, count: usize) -> Vec<usize> {
        let size = hi - lo + 1;
        assert!(count <= size, "range smaller than sample count");
        // Partial Fisher-Yates over the candidate range.
        let mut pool: Vec<usize> = (lo..=hi).collect();
        for i in 0..count {
            let j = i + self.below(size - i);
            pool.swap(i, j);
        }
        let mut out = pool[..count].to_vec();
        out.sort_unstable();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replay_from_state_is_bitwise() {
        let mut a = StreamRng::new(7, "test/stream");
        let _ = a.normal();
        let st = a.state();
        let rest: Vec<u64> = (0..16).map(|_| a.next_u64()).collect();
        let mut b = StreamRng::from_state(st);
        let replay: Vec<u64> = (0..16).map(|_| b.next_u64()).collect();
        assert_eq!(rest, replay);
    }

    #[test]
    fn distinct_labels_give_distinct_streams() {
        let mut a = StreamRng::new(1, "x");
        let mut b = StreamRng::new(1, "y");
        let va: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let vb: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_ne!(va, vb);
    }

    #[test]
    fn derive_is_independent_of_parent_position() {
        let parent = StreamRng::new(3, "root");
        let mut advanced = parent.clone();
        for _ in 0..100 {
            advanced.next_u64();
        }
        let mut c1 = parent.derive("child");
        let mut c2 = advanced.derive("child");
        assert_eq!(c1.next_u64(), c2.next_u64());
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut rng = StreamRng::new(42, "moments");
        let n = 200_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let z = rng.normal();
            s += z;
            s2 += z * z;
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn sample_distinct_respects_range_and_count() {
        let mut rng = StreamRng::new(5, "pick");
        let picks = rng.sample_distinct(6, 9, 3);
        assert_eq!(picks.len(), 3);
        assert!(picks.windows(2).all(|w| w[0] < w[1]));
        assert!(picks.iter().all(|&p| (6..=9).contains(&p)));
    }
}
