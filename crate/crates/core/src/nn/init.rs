//! Platform-independent seeded weight initialization.
//!
//! Values come from SplitMix64 (Steele, Lea & Flood; the generator behind
//! `java.util.SplittableRandom`):
//!
//! ```text
//! state += 0x9E3779B97F4A7C15
//! z = state
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! return z ^ (z >> 31)
//! ```
//!
//! with wrapping arithmetic and the state initialized to the seed. Each
//! output becomes `u = (z >> 11) * 2^-53` in `[0, 1)`, and the weight is
//! `((2u - 1) * s) as f32` with `s = 1 / sqrt(fan_in)`. One stream is drawn
//! for the whole manifest, tensor by tensor in manifest order, row-major
//! within a tensor.

use super::{Tensor, WeightBundle};

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// One entry of an initialization manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

impl ParamSpec {
    /// Fan-in defaults to the product of all axes but the first, or the
    /// single axis length for vectors.
    pub fn new(name: impl Into<String>, shape: &[usize]) -> Self {
        let fan_in = if shape.len() > 1 {
            shape[1..].iter().product()
        } else {
            shape.first().copied().unwrap_or(1)
        };
        Self::with_fan_in(name, shape, fan_in)
    }

    pub fn with_fan_in(name: impl Into<String>, shape: &[usize], fan_in: usize) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            fan_in: fan_in.max(1),
        }
    }
}

pub fn seeded_init(seed: u64, manifest: &[ParamSpec]) -> WeightBundle {
    let mut rng = SplitMix64::new(seed);
    let mut bundle = WeightBundle::new();
    for spec in manifest {
        let scale = 1.0 / (spec.fan_in as f64).sqrt();
        let t = Tensor::from_fn(&spec.shape, |_| ((2.0 * rng.next_f64() - 1.0) * scale) as f32 as f64);
        bundle.insert(spec.name.clone(), t);
    }
    bundle
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_outputs() {
        // Reference values from an independent Python implementation of the
        // recurrence above (arbitrary-precision ints masked to 64 bits).
        let mut g = SplitMix64::new(0);
        assert_eq!(g.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(g.next_u64(), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(g.next_u64(), 0x06C4_5D18_8009_454F);
        let mut g = SplitMix64::new(42);
        assert_eq!(g.next_u64(), 0xBDD7_3226_2FEB_6E95);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let m = [ParamSpec::new("w", &[3, 4]), ParamSpec::new("b", &[3])];
        let a = seeded_init(7, &m);
        assert_eq!(a.encode(), seeded_init(7, &m).encode());
        assert_ne!(a.encode(), seeded_init(8, &m).encode());
        let s = 1.0 / 2.0;
        assert!(a.get("w").unwrap().data().iter().all(|v| v.abs() <= s));
    }

    #[test]
    fn golden_seed_42() {
        let b = seeded_init(42, &[ParamSpec::new("w", &[2, 2])]);
        let bits: Vec<u32> = b.get("w").unwrap().data().iter().map(|v| (*v as f32).to_bits()).collect();
        assert_eq!(bits, GOLDEN_42);
    }

    // Recorded at first generation; cross-checked with the Python reference.
    const GOLDEN_42: [u32; 4] = [0x3EAE_E962, 0xBEF6_404D, 0xBEA0_4F56, 0xBE61_A2CD];
}
