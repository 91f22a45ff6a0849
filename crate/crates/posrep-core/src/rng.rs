//! PCG32 generator with named streams.
//!
//! One top-level seed drives every random decision in a run. Each purpose
//! (data generation, weight init, dropout, offset sampling, batch
//! shuffling) derives its own stream id by hashing a label, so the draw
//! order of one consumer never perturbs another.

/// PCG-XSH-RR 32-bit generator, 64-bit state and stream.
/// Matches the pcg32 reference (pcg-c-basic) output exactly.
#[derive(Clone, Debug)]
pub struct Pcg32 {
    state: u64,
    inc: u64,
}

const PCG_MULT: u64 = 6364136223846793005;

impl Pcg32 {
    /// Seed exactly like `pcg32_srandom_r(initstate, initseq)`.
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = Pcg32 {
            state: 0,
            inc: (stream << 1) | 1,
        };
        rng.next_u32();
        rng.state = rng.state.wrapping_add(seed);
        rng.next_u32();
        rng
    }

    /// Seed a stream derived from a purpose label.
    pub fn for_purpose(seed: u64, label: &str) -> Self {
        Pcg32::new(seed, fnv1a64(label.as_bytes()))
    }

    pub fn next_u32(&mut self) -> u32 {
        let old = self.state;
        self.state = old.wrapping_mul(PCG_MULT).wrapping_add(self.inc);
        let xorshifted = (((old >> 18) ^ old) >> 27) as u32;
        let rot = (old >> 59) as u32;
        xorshifted.rotate_right(rot)
    }

    pub fn next_u64(&mut self) -> u64 {
        let hi = self.next_u32() as u64;
        let lo = self.next_u32() as u64;
        (hi << 32) | lo
    }

    /// Uniform over `[0, bound)` by rejection sampling (no modulo bias).
    pub fn uniform_below(&mut self, bound: u32) -> u32 {
        assert!(bound > 0, "uniform_below(0)");
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let r = self.next_u32();
            if r >= threshold {
                return r % bound;
            }
        }
    }

    /// Exactly uniform over the inclusive range `{0, ..., n}`.
    pub fn uniform_int_inclusive(&mut self, n: u32) -> u32 {
        if n == u32::MAX {
            return self.next_u32();
        }
        self.uniform_below(n + 1)
    }

    /// Uniform in `[0, 1)` with 24 bits of mantissa, exact on f32 and f64.
    pub fn uniform_f64(&mut self) -> f64 {
        (self.next_u32() >> 8) as f64 * (1.0 / (1 << 24) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform_f64()
    }

    /// Standard normal via Box-Muller; draws two uniforms per pair of
    /// outputs and caches the second.
    pub fn next_gaussian(&mut self, cache: &mut Option<f64>) -> f64 {
        if let Some(v) = cache.take() {
            return v;
        }
        loop {
            let u1 = self.uniform_f64();
            if u1 <= 0.0 {
                continue;
            }
            let u2 = self.uniform_f64();
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            *cache = Some(r * theta.sin());
            return r * theta.cos();
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<V>(&mut self, items: &mut [V]) {
        for i in (1..items.len()).rev() {
            let j = self.uniform_below(i as u32 + 1) as usize;
            items.swap(i, j);
        }
    }
}

/// FNV-1a 64-bit hash, used to turn purpose labels into stream ids.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
