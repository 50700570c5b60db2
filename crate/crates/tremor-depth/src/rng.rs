//! Counter-based deterministic RNG.
//!
//! Every random draw in this crate (weight init, ray batches, tremor control
//! points, sensor noise) comes from a splitmix64 counter stream keyed by
//! `(seed, stream tag, counter)`. Draws are a pure function of the key, so
//! runs are reproducible bit-for-bit regardless of call order elsewhere and
//! independent streams never interact.

/// Stream tags. Keeping them in one place makes seed derivations auditable.
pub mod stream {
    pub const SCENE_INIT: u64 = 0x01;
    pub const TREMOR: u64 = 0x02;
    pub const TEXTURE: u64 = 0x03;
    pub const SENSOR_NOISE: u64 = 0x04;
    pub const RAY_BATCH: u64 = 0x05;
    pub const GRAD_PROBE: u64 = 0x06;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent child seed from `(seed, index)`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

/// A stateless-keyed counter RNG: `next_*` advances only a local counter.
#[derive(Clone, Debug)]
pub struct CounterRng {
    base: u64,
    counter: u64,
    /// One cached normal draw from Box-Muller.
    spare_normal: Option<f64>,
}

impl CounterRng {
    /// Stream keyed by `(seed, stream tag)`; see [`stream`] for tags.
    pub fn new(seed: u64, stream: u64) -> Self {
        let base = splitmix64(splitmix64(seed) ^ splitmix64(stream.wrapping_mul(0xA24B_AED4_963E_E407)));
        CounterRng { base, counter: 0, spare_normal: None }
    }

    /// Substream for a member index (frame number, layer index, ...).
    pub fn substream(&self, index: u64) -> Self {
        CounterRng {
            base: splitmix64(self.base ^ splitmix64(index.wrapping_add(0x9E02_41u64))),
            counter: 0,
            spare_normal: None,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let x = splitmix64(self.base.wrapping_add(self.counter.wrapping_mul(0xD134_2543_DE82_EF95)));
        self.counter += 1;
        x
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    #[inline]
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). Rejection-sampled, so unbiased.
    pub fn uniform_usize(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    /// Standard normal via Box-Muller.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0,1] so the log is finite.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal(&mut self, mean: f64, sigma: f64) -> f64 {
        mean + sigma * self.next_normal()
    }
}
