//! Fixed-point values embedded in the ring of integers modulo 2^64.
//!
//! Every masked quantity in the protocol lives here. Only addition and
//! negation are ever needed, so the ring is `u64` with wrapping arithmetic and
//! the cancellation identities hold bit-exactly.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bit length of the ring modulus.
pub const MODULUS_LOG2: u32 = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RingError {
    #[error("value {value} does not fit in {int_bits} integer bits")]
    Overflow { value: f64, int_bits: u32 },

    #[error("cannot encode non-finite value {0}")]
    NonFinite(f64),

    #[error("centered lift {lift} exceeds the fixed-point range 2^{bits}")]
    Range { lift: i64, bits: u32 },

    #[error("invalid fixed-point parameters: {0}")]
    InvalidParams(String),
}

/// Layout of a fixed-point number: `int_bits` integer bits and `frac_bits`
/// fractional bits inside a 64-bit residue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawFixedPoint", into = "RawFixedPoint")]
pub struct FixedPointParams {
    frac_bits: u32,
    int_bits: u32,
}

#[derive(Serialize, Deserialize)]
struct RawFixedPoint {
    frac_bits: u32,
    int_bits: u32,
}

impl TryFrom<RawFixedPoint> for FixedPointParams {
    type Error = RingError;

    fn try_from(raw: RawFixedPoint) -> Result<Self, Self::Error> {
        FixedPointParams::new(raw.frac_bits, raw.int_bits)
    }
}

impl From<FixedPointParams> for RawFixedPoint {
    fn from(p: FixedPointParams) -> Self {
        RawFixedPoint {
            frac_bits: p.frac_bits,
            int_bits: p.int_bits,
        }
    }
}

impl FixedPointParams {
    /// Sums of up to 2^16 in-range terms must stay below half the ring.
    pub const MAX_TOTAL_BITS: u32 = 62;

    pub fn new(frac_bits: u32, int_bits: u32) -> Result<Self, RingError> {
        if frac_bits < 1 || int_bits < 1 {
            return Err(RingError::InvalidParams(format!(
                "frac_bits ({frac_bits}) and int_bits ({int_bits}) must both be at least 1"
            )));
        }
        if frac_bits + int_bits > Self::MAX_TOTAL_BITS {
            return Err(RingError::InvalidParams(format!(
                "frac_bits + int_bits = {} exceeds {}",
                frac_bits + int_bits,
                Self::MAX_TOTAL_BITS
            )));
        }
        Ok(Self {
            frac_bits,
            int_bits,
        })
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    pub fn int_bits(&self) -> u32 {
        self.int_bits
    }

    pub fn modulus_log2(&self) -> u32 {
        MODULUS_LOG2
    }

    /// 2^f as a float.
    pub fn scale(&self) -> f64 {
        (self.frac_bits as f64).exp2()
    }

    /// Smallest positive increment, 2^-f.
    pub fn resolution(&self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }
}

impl Default for FixedPointParams {
    fn default() -> Self {
        Self {
            frac_bits: 24,
            int_bits: 20,
        }
    }
}

/// A residue modulo 2^64.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct RingElem(pub u64);

impl RingElem {
    pub const ZERO: RingElem = RingElem(0);

    pub fn value(self) -> u64 {
        self.0
    }

    /// Signed representative in `[-2^63, 2^63)`.
    pub fn centered(self) -> i64 {
        self.0 as i64
    }

    pub fn to_le_bytes(self) -> [u8; 8] {
        self.0.to_le_bytes()
    }

    pub fn from_le_bytes(bytes: [u8; 8]) -> Self {
        RingElem(u64::from_le_bytes(bytes))
    }
}

impl fmt::Debug for RingElem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RingElem({:#018x})", self.0)
    }
}

impl Add for RingElem {
    type Output = RingElem;

    fn add(self, rhs: RingElem) -> RingElem {
        RingElem(self.0.wrapping_add(rhs.0))
    }
}

impl AddAssign for RingElem {
    fn add_assign(&mut self, rhs: RingElem) {
        self.0 = self.0.wrapping_add(rhs.0);
    }
}

impl Sub for RingElem {
    type Output = RingElem;

    fn sub(self, rhs: RingElem) -> RingElem {
        RingElem(self.0.wrapping_sub(rhs.0))
    }
}

impl SubAssign for RingElem {
    fn sub_assign(&mut self, rhs: RingElem) {
        self.0 = self.0.wrapping_sub(rhs.0);
    }
}

impl Neg for RingElem {
    type Output = RingElem;

    fn neg(self) -> RingElem {
        RingElem(self.0.wrapping_neg())
    }
}

impl Sum for RingElem {
    fn sum<I: Iterator<Item = RingElem>>(iter: I) -> RingElem {
        iter.fold(RingElem::ZERO, Add::add)
    }
}

impl<'a> Sum<&'a RingElem> for RingElem {
    fn sum<I: Iterator<Item = &'a RingElem>>(iter: I) -> RingElem {
        iter.copied().sum()
    }
}

/// Embeds `x` as `round(x * 2^f) mod 2^64`. Rounds half away from zero.
pub fn encode(x: f64, params: &FixedPointParams) -> Result<RingElem, RingError> {
    if !x.is_finite() {
        return Err(RingError::NonFinite(x));
    }
    if x.abs() >= (params.int_bits as f64).exp2() {
        return Err(RingError::Overflow {
            value: x,
            int_bits: params.int_bits,
        });
    }
    // |x * 2^f| < 2^(k+f) <= 2^62, so the cast is exact after rounding.
    let scaled = (x * params.scale()).round() as i64;
    Ok(RingElem(scaled as u64))
}

/// Inverse of [`encode`] through the centered lift.
pub fn decode(e: RingElem, params: &FixedPointParams) -> Result<f64, RingError> {
    decode_with_bits(e, params, params.int_bits + params.frac_bits)
}

/// Decodes a sum of up to `terms` encoded values, widening the accepted range
/// by `ceil(log2(terms))` bits.
pub fn decode_sum(e: RingElem, params: &FixedPointParams, terms: usize) -> Result<f64, RingError> {
    let extra = usize::BITS - terms.max(1).saturating_sub(1).leading_zeros();
    let bits = (params.int_bits + params.frac_bits + extra).min(63);
    decode_with_bits(e, params, bits)
}

fn decode_with_bits(e: RingElem, params: &FixedPointParams, bits: u32) -> Result<f64, RingError> {
    let lift = e.centered();
    if bits < 63 && lift.unsigned_abs() >= 1u64 << bits {
        return Err(RingError::Range { lift, bits });
    }
    Ok(lift as f64 / params.scale())
}

/// Wrapping sum of ring elements; the empty sum is zero.
pub fn ring_sum<'a, I>(elems: I) -> RingElem
where
    I: IntoIterator<Item = &'a RingElem>,
{
    elems.into_iter().sum()
}

pub fn ring_neg(e: RingElem) -> RingElem {
    -e
}
