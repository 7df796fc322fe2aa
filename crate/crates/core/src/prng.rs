//! Replayable perturbation streams.
//!
//! Client and server must regenerate the same perturbation for a given
//! `(round, step)`, so every random quantity on the protocol path is a pure
//! function of its arguments. The construction is fixed and small enough to
//! port to another language:
//!
//! * **Seed derivation.** `derive_seed(r, t) = mix64(mix64(master ^ SCHEDULE_KEY) ^ (r << 32 | t))`
//!   where `mix64` is the SplitMix64 finalizer. `mix64` is a bijection on
//!   `u64`, so distinct `(round, step)` pairs with both components below
//!   `2^32` always produce distinct seeds.
//! * **Uniform stream.** The `i`-th uniform (0-based) of a stream seeded with
//!   `s` is `mix64(s + (i + 1) * GOLDEN_GAMMA)` (the SplitMix64 sequence),
//!   mapped to the open interval `(0, 1)` as `((x >> 11) + 0.5) * 2^-53`.
//! * **Gaussian transform.** Inverse CDF of the standard normal: Acklam's
//!   rational approximation followed by one Halley correction against
//!   `erfc`. Values above the median are produced as `-inv(1 - p)` so the
//!   correction always runs in the lower tail.
//! * **Masked draws.** A masked perturbation consumes exactly one uniform per
//!   support index, assigned in ascending index order.

use crate::masking::{SparseMask, SparseVector};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const SCHEDULE_KEY: u64 = 0x6D65_6572_6B61_7421;
const CALIBRATION_KEY: u64 = 0x6361_6C69_6272_6174;

/// SplitMix64 output finalizer (Stafford variant 13). Bijective.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic map from `(round, local step)` to a 64-bit perturbation seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedSchedule {
    master_seed: u64,
    key: u64,
}

impl SeedSchedule {
    pub fn new(master_seed: u64) -> Self {
        Self {
            master_seed,
            key: mix64(master_seed ^ SCHEDULE_KEY),
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    /// A schedule for the GradIP calibration pass, disjoint in construction
    /// from the training schedule of the same master seed.
    pub fn calibration(&self) -> Self {
        Self::new(mix64(self.master_seed ^ CALIBRATION_KEY))
    }

    /// Seed for local step `step` of round `round`; both are 1-based.
    pub fn derive_seed(&self, round: u32, step: u32) -> u64 {
        debug_assert!(round >= 1 && step >= 1, "round and step are 1-based");
        mix64(self.key ^ ((u64::from(round) << 32) | u64::from(step)))
    }
}

/// Maps 64 random bits to a uniform in the open interval (0, 1).
#[inline]
pub fn open_unit(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Counter-based standard normal stream.
#[derive(Debug, Clone)]
pub struct GaussianStream {
    seed: u64,
    counter: u64,
}

impl GaussianStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    fn next_uniform(&mut self) -> f64 {
        self.counter = self.counter.wrapping_add(1);
        open_unit(mix64(
            self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA)),
        ))
    }
}

impl Iterator for GaussianStream {
    type Item = f64;

    #[inline]
    fn next(&mut self) -> Option<f64> {
        Some(inverse_normal_cdf(self.next_uniform()))
    }
}

/// `z ⊙ m` for the given seed: one standard normal per support index.
/// Off-support coordinates are implicitly zero.
pub fn masked_gaussian(seed: u64, mask: &SparseMask) -> SparseVector {
    let values = GaussianStream::new(seed).take(mask.support_len()).collect();
    SparseVector::on_mask(mask, values)
}

// Acklam's coefficients.
const A: [f64; 6] = [
    -3.969_683_028_665_376e1,
    2.209_460_984_245_205e2,
    -2.759_285_104_469_687e2,
    1.383_577_518_672_69e2,
    -3.066_479_806_614_716e1,
    2.506_628_277_459_239,
];
const B: [f64; 5] = [
    -5.447_609_879_822_406e1,
    1.615_858_368_580_409e2,
    -1.556_989_798_598_866e2,
    6.680_131_188_771_972e1,
    -1.328_068_155_288_572e1,
];
const C: [f64; 6] = [
    -7.784_894_002_430_293e-3,
    -3.223_964_580_411_365e-1,
    -2.400_758_277_161_838,
    -2.549_732_539_343_734,
    4.374_664_141_464_968,
    2.938_163_982_698_783,
];
const D: [f64; 4] = [
    7.784_695_709_041_462e-3,
    3.224_671_290_700_398e-1,
    2.445_134_137_142_996,
    3.754_408_661_907_416,
];
const P_LOW: f64 = 0.02425;

/// Inverse of the standard normal CDF for `p` in (0, 1).
pub fn inverse_normal_cdf(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    if p > 0.5 {
        -lower_half_quantile(1.0 - p)
    } else {
        lower_half_quantile(p)
    }
}

fn lower_half_quantile(p: f64) -> f64 {
    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };
    // One Halley step brings the ~1e-9 relative error down to rounding level.
    let e = 0.5 * libm::erfc(-x / std::f64::consts::SQRT_2) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}
