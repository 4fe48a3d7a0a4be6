//! Counter-based random number generation.
//!
//! Every random decision in this crate flows from a [`CounterRng`], a tiny
//! splittable generator whose entire state is a `(key, counter)` pair of
//! `u64`s. The 16-byte state serializes directly into checkpoints, and
//! `fork` derives independent streams without consuming parent state, which
//! keeps parallel per-scene work deterministic regardless of scheduling.
//!
//! Stream discipline: a master seed fans out to named streams (`"sim"`,
//! `"init"`, `"train"`, `"sample"`) via [`CounterRng::for_stream`]; per-item
//! sub-streams (scene index, training step) fork from those by integer tag.

/// SplitMix64 finalizer; the core mixing function for the generator.
#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over a byte string, used to hash stream names into keys.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Counter-mode RNG with 16 bytes of state: output i is `mix(key, i)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(key: u64) -> Self {
        Self { key, counter: 0 }
    }

    /// Named stream derived from a master seed.
    pub fn for_stream(master_seed: u64, stream: &str) -> Self {
        Self::new(splitmix64(master_seed ^ fnv1a64(stream.as_bytes())))
    }

    /// Child stream for an integer tag (scene index, step number, ...).
    /// Does not consume parent state; the same tag always yields the same
    /// child.
    pub fn fork(&self, tag: u64) -> Self {
        Self::new(splitmix64(self.key ^ splitmix64(tag ^ 0xA076_1D64_78BD_642F)))
    }

    pub fn state(&self) -> (u64, u64) {
        (self.key, self.counter)
    }

    pub fn from_state(key: u64, counter: u64) -> Self {
        Self { key, counter }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let out = splitmix64(self.key.wrapping_add(self.counter.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        self.counter = self.counter.wrapping_add(1);
        out
    }

    /// Uniform in [0, 1).
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). Rejection-free modulo is fine here; the
    /// modulo bias at n << 2^64 is far below anything these sims resolve.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller. One draw consumes two uniforms and
    /// discards the paired variate so the stream position stays a pure
    /// function of the draw count.
    pub fn normal(&mut self) -> f64 {
        // u1 in (0, 1] so ln(u1) is finite.
        let u1 = ((self.next_u64() >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_stateful() {
        let mut a = CounterRng::for_stream(7, "sim");
        let mut b = CounterRng::for_stream(7, "sim");
        let xs: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
        assert_ne!(xs[0], xs[1]);
    }

    #[test]
    fn streams_and_forks_differ() {
        let mut a = CounterRng::for_stream(7, "sim");
        let mut b = CounterRng::for_stream(7, "train");
        assert_ne!(a.next_u64(), b.next_u64());
        let root = CounterRng::for_stream(7, "sim");
        let mut f0 = root.fork(0);
        let mut f1 = root.fork(1);
        assert_ne!(f0.next_u64(), f1.next_u64());
        // Forks do not consume parent state.
        assert_eq!(root.state().1, 0);
    }

    #[test]
    fn state_round_trip() {
        let mut a = CounterRng::for_stream(3, "sample");
        for _ in 0..5 {
            a.next_u64();
        }
        let (k, c) = a.state();
        let mut b = CounterRng::from_state(k, c);
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn uniform_bounds_and_moments() {
        let mut r = CounterRng::new(42);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
            sum += u;
        }
        let mean = sum / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn normal_moments() {
        let mut r = CounterRng::new(9);
        let n = 100_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let x = r.normal();
            s1 += x;
            s2 += x * x;
        }
        let mean = s1 / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }
}
