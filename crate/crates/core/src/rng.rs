//! Counter-based random streams.
//!
//! Every random consumer (weight init, dropout masks, shuffling, analysis
//! replicates) draws from its own named substream derived from the experiment
//! seed. A stream is fully described by `(key, counter)`, so it can be
//! checkpointed and resumed exactly, and adding a new consumer never shifts
//! the values another consumer sees.

use rand::RngCore;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer; a bijection on `u64`.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// A stateless-per-draw generator: output `i` is a pure function of
/// `(key, i)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(key: u64) -> Self {
        Self {
            key: mix64(key ^ GOLDEN),
            counter: 0,
        }
    }

    /// The substream called `name` of the experiment seeded with `seed`.
    pub fn substream(seed: u64, name: &str) -> Self {
        Self::new(mix64(seed) ^ fnv1a(name.as_bytes()))
    }

    /// An independent child stream, e.g. one per replicate or per layer.
    pub fn child(&self, index: u64) -> Self {
        Self::new(mix64(self.key ^ mix64(index.wrapping_add(GOLDEN))))
    }

    pub fn from_state(key: u64, counter: u64) -> Self {
        Self { key, counter }
    }

    pub fn state(&self) -> (u64, u64) {
        (self.key, self.counter)
    }

    /// Uniform float in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Fill `out` with the next `out.len()` outputs of the stream.
    pub fn fill_u64(&mut self, out: &mut [u64]) {
        let (key, start) = (self.key, self.counter);
        for (i, o) in out.iter_mut().enumerate() {
            *o = mix64(mix64(start.wrapping_add(i as u64).wrapping_mul(GOLDEN)) ^ key);
        }
        self.counter = start.wrapping_add(out.len() as u64);
    }

    /// Uniform integer in `[0, n)`; `n` must be nonzero.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        // Lemire's multiply-shift with rejection.
        let mut m = u128::from(self.next_u64()) * u128::from(n);
        let mut low = m as u64;
        if low < n {
            let threshold = n.wrapping_neg() % n;
            while low < threshold {
                m = u128::from(self.next_u64()) * u128::from(n);
                low = m as u64;
            }
        }
        (m >> 64) as u64
    }
}

impl RngCore for CounterRng {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        let out = mix64(mix64(self.counter.wrapping_mul(GOLDEN)) ^ self.key);
        self.counter = self.counter.wrapping_add(1);
        out
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle<T>(items: &mut [T], rng: &mut CounterRng) {
    for i in (1..items.len()).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        items.swap(i, j);
    }
}
