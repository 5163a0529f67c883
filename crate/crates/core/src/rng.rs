//! The pinned PRNG pipeline behind every seeded transform.
//!
//! Changing anything here changes which transforms a stored manifest refers
//! to, so the pipeline is versioned by [`PRNG_VERSION`]:
//!
//! 1. `effective_seed = global_seed + model_index` (wrapping).
//! 2. A stream seed per (purpose, key) pair:
//!    `mix64(effective_seed ^ fnv1a64(purpose ‖ 0x00 ‖ key))`, where the key
//!    is a layer type (permutations) or a layer name (sign/diagonal vectors).
//! 3. A [`SplitMix64`] generator seeded with the stream seed.
//! 4. Permutations: Fisher–Yates (Durstenfeld, descending `i`) with Lemire's
//!    unbiased bounded sampling. Sign vectors: one bit per column, LSB first,
//!    64 columns per draw, bit set means `−1`. Normals: Box–Muller cosine branch,
//!    one normal per two draws.

/// Version of the pipeline described in the module docs.
pub const PRNG_VERSION: u32 = 1;

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 output finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Seed of the independent stream used for one (purpose, key) pair.
pub fn stream_seed(effective_seed: u64, purpose: &str, key: &str) -> u64 {
    let mut bytes = Vec::with_capacity(purpose.len() + key.len() + 1);
    bytes.extend_from_slice(purpose.as_bytes());
    bytes.push(0);
    bytes.extend_from_slice(key.as_bytes());
    mix64(effective_seed ^ fnv1a64(&bytes))
}

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn for_stream(effective_seed: u64, purpose: &str, key: &str) -> Self {
        Self::new(stream_seed(effective_seed, purpose, key))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`, unbiased (Lemire).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0) is empty");
        let mut m = u128::from(self.next_u64()) * u128::from(n);
        if (m as u64) < n {
            let threshold = n.wrapping_neg() % n;
            while (m as u64) < threshold {
                m = u128::from(self.next_u64()) * u128::from(n);
            }
        }
        (m >> 64) as u64
    }

    /// Standard normal via the cosine branch of Box–Muller.
    pub fn standard_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniformly random permutation of `0..n` (Fisher–Yates).
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i as u64 + 1) as usize;
            perm.swap(i, j);
        }
        perm
    }

    /// `n` signs in `{+1, −1}`, one random bit each.
    pub fn signs(&mut self, n: usize) -> Vec<i8> {
        let mut out = Vec::with_capacity(n);
        let mut word = 0u64;
        for c in 0..n {
            if c % 64 == 0 {
                word = self.next_u64();
            }
            out.push(if (word >> (c % 64)) & 1 == 1 { -1 } else { 1 });
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference outputs of the canonical splitmix64.c for seed 1234567.
    #[test]
    fn splitmix_reference_stream() {
        let mut rng = SplitMix64::new(1_234_567);
        let got: Vec<u64> = (0..5).map(|_| rng.next_u64()).collect();
        assert_eq!(
            got,
            [
                6457827717110365317,
                3203168211198807973,
                9817491932198370423,
                4593380528125082431,
                16408922859458223821
            ]
        );
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn permutation_is_bijection() {
        let mut rng = SplitMix64::new(7);
        for n in [0, 1, 2, 5, 33] {
            let mut p = rng.permutation(n);
            p.sort_unstable();
            assert_eq!(p, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn below_stays_in_range_and_covers() {
        let mut rng = SplitMix64::new(99);
        let mut seen = [false; 6];
        for _ in 0..600 {
            let v = rng.below(6) as usize;
            seen[v] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn normals_have_unit_moments() {
        let mut rng = SplitMix64::new(3);
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn streams_are_keyed() {
        assert_ne!(stream_seed(42, "perm", "mlp.fc1"), stream_seed(42, "perm", "mlp.fc2"));
        assert_ne!(stream_seed(42, "perm", "x"), stream_seed(42, "sign", "x"));
        assert_ne!(stream_seed(42, "sign", "x"), stream_seed(43, "sign", "x"));
    }
}
