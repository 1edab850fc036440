//! Deterministic random numbers from named streams.
//!
//! Every source of randomness in the engine (parameter init, clip sampling,
//! masking, dropout, shuffling) draws from its own stream, identified by a
//! purpose string hashed together with the run seed. Streams are independent
//! counters, so adding or removing draws in one place never shifts the values
//! another place sees. That is what makes MP/MMP pre-training runs paired:
//! both consume the identical clip-window streams and differ only in how they
//! use the language stream.
//!
//! The core generator is SplitMix64, which passes through its whole period
//! from any starting state and is reproducible across platforms (pure u64
//! arithmetic, no floating point in the state transition).

/// Deterministic generator: a SplitMix64 counter.
///
/// Identical seed + identical call sequence yields the identical value
/// sequence on every platform.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a_extend(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

impl Rng {
    /// Generator seeded directly; the first output is SplitMix64(seed).
    pub fn from_seed(seed: u64) -> Rng {
        Rng { state: seed }
    }

    /// Named stream: the starting state hashes the seed and the purpose
    /// string together, so distinct purposes give unrelated sequences and the
    /// same (seed, purpose) pair always gives the same sequence.
    pub fn stream(seed: u64, purpose: &str) -> Rng {
        let h = fnv1a_extend(FNV_OFFSET, &seed.to_le_bytes());
        let h = fnv1a_extend(h, purpose.as_bytes());
        Rng { state: h }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    /// Uniform double in [0, 1) with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0)
    }

    /// Uniform double in [lo, hi). Consumes exactly one draw.
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). Rejection sampling keeps it exactly
    /// uniform; n = 0 is a caller bug.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0) has no valid output");
        let n = n as u64;
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Standard normal via Box-Muller. Consumes exactly two draws per call;
    /// the second branch of the pair is discarded so call counts stay easy to
    /// reason about.
    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1], keeps ln finite
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        mean + std * r * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// k distinct indices drawn uniformly from 0..n, returned in ascending
    /// order (callers use them as positions to mask).
    pub fn choose_k(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot choose {k} of {n}");
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        let mut picked = idx[..k].to_vec();
        picked.sort_unstable();
        picked
    }
}
