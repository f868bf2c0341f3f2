//! Counter-based pseudo-random number generation.
//!
//! Every source of randomness in this crate flows through [`Rng`]; nothing
//! reads ambient entropy. The generator is counter-based (SplitMix64
//! finalizer over `key + counter`), which makes streams cheap to split:
//! each worker or hypothesis derives its own independent stream with
//! [`Rng::split`] and the parent stream is left untouched.

/// Deterministic, splittable random number generator.
#[derive(Debug, Clone)]
pub struct Rng {
    key: u64,
    counter: u64,
    /// Box-Muller produces pairs; the second draw is cached here.
    spare_normal: Option<f64>,
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            key: mix(seed ^ GOLDEN),
            counter: 0,
            spare_normal: None,
        }
    }

    /// Derive an independent stream. The child's output is decorrelated
    /// from the parent's for any `stream` index; identical `(seed, stream)`
    /// pairs always yield identical children.
    pub fn split(&self, stream: u64) -> Rng {
        Rng {
            key: mix(self.key ^ mix(stream.wrapping_mul(GOLDEN) ^ 0x5851_f42d_4c95_7f2d)),
            counter: 0,
            spare_normal: None,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let out = mix(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)));
        self.counter = self.counter.wrapping_add(1);
        out
    }

    /// Uniform draw in the open interval (0, 1].
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        // 53 mantissa bits; +1 keeps the value strictly positive so that
        // ln(u) in Box-Muller is always finite.
        (((self.next_u64() >> 11) + 1) as f64) * (1.0 / 9007199254740992.0)
    }

    /// Uniform draw in [lo, hi).
    #[inline]
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * ((self.next_u64() >> 11) as f64) * (1.0 / 9007199254740992.0)
    }

    /// Standard normal draw via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let phi = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * phi.sin());
        r * phi.cos()
    }

    /// `n` i.i.d. standard normal draws. Panics if `n == 0`: callers are
    /// expected to ask for at least one sample.
    pub fn gaussian_sample(&mut self, n: usize) -> Vec<f64> {
        assert!(n >= 1, "gaussian_sample requires n >= 1");
        (0..n).map(|_| self.normal()).collect()
    }

    /// Categorical draw from unnormalized nonnegative weights.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.uniform_in(0.0, total);
        for (i, w) in weights.iter().enumerate() {
            u -= w;
            if u <= 0.0 {
                return i;
            }
        }
        weights.len() - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_seed_identical_stream() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        assert_eq!(a.gaussian_sample(3), b.gaussian_sample(3));
    }

    #[test]
    fn gaussian_moments() {
        let mut rng = Rng::new(42);
        let n = 1_000_000;
        let xs = rng.gaussian_sample(n);
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    #[should_panic(expected = "n >= 1")]
    fn gaussian_sample_rejects_zero() {
        Rng::new(1).gaussian_sample(0);
    }

    #[test]
    fn split_streams_differ_and_are_stable() {
        let root = Rng::new(5);
        let mut a = root.split(0);
        let mut b = root.split(1);
        let mut a2 = root.split(0);
        assert_ne!(a.next_u64(), b.next_u64());
        assert_eq!(a2.next_u64(), Rng::new(5).split(0).next_u64());
    }

    #[test]
    fn uniform_in_respects_bounds() {
        let mut rng = Rng::new(9);
        for _ in 0..1000 {
            let x = rng.uniform_in(0.05, 0.15);
            assert!((0.05..0.15).contains(&x));
        }
    }

    #[test]
    fn categorical_frequencies() {
        let mut rng = Rng::new(11);
        let w = [0.2, 0.5, 0.3];
        let mut counts = [0usize; 3];
        let n = 100_000;
        for _ in 0..n {
            counts[rng.categorical(&w)] += 1;
        }
        for i in 0..3 {
            let f = counts[i] as f64 / n as f64;
            assert!((f - w[i]).abs() < 0.01, "component {i}: {f}");
        }
    }
}
