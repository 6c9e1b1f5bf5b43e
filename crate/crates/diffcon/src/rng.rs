//! Counter-based splittable random streams.
//!
//! Every stochastic operation in the crate takes an explicit [`Stream`].
//! A stream is identified by a 256-bit key; `derive(tag)` produces an
//! independent child stream from the key alone (not from the consumed
//! position), so derivation order never depends on how much randomness a
//! sibling consumed. This is what makes parallel rollouts and re-runs
//! byte-reproducible.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// SplitMix64 finalizer; used only for key derivation.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A deterministic random stream with cheap, collision-resistant splitting.
#[derive(Debug, Clone)]
pub struct Stream {
    key: [u64; 4],
    rng: ChaCha8Rng,
}

impl Stream {
    /// Root stream for a run seed.
    pub fn from_seed(seed: u64) -> Self {
        let k0 = mix(seed);
        let k1 = mix(k0);
        let k2 = mix(k1);
        let k3 = mix(k2);
        Self::from_key([k0, k1, k2, k3])
    }

    fn from_key(key: [u64; 4]) -> Self {
        let mut bytes = [0u8; 32];
        for (i, k) in key.iter().enumerate() {
            bytes[i * 8..(i + 1) * 8].copy_from_slice(&k.to_le_bytes());
        }
        Self {
            key,
            rng: ChaCha8Rng::from_seed(bytes),
        }
    }

    /// Independent child stream; depends only on the parent key and `tag`.
    pub fn derive(&self, tag: u64) -> Stream {
        let t = mix(tag ^ 0x5851_f42d_4c95_7f2d);
        let k0 = mix(self.key[0] ^ t);
        let k1 = mix(self.key[1] ^ mix(t));
        let k2 = mix(self.key[2] ^ mix(mix(t)));
        let k3 = mix(self.key[3] ^ mix(mix(mix(t))));
        Stream::from_key([k0, k1, k2, k3])
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Vector of independent standard normal draws.
    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    /// Categorical draw from an (unnormalized is fine) weight vector.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.uniform() * total;
        for (i, w) in weights.iter().enumerate() {
            u -= w;
            if u < 0.0 {
                return i;
            }
        }
        weights.len() - 1
    }
}

impl RngCore for Stream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}
