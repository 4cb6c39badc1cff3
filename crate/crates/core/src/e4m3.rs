//! FP8 E4M3 scale rounding and byte encoding.
//!
//! Layout is 1 sign bit, 4 exponent bits (bias 7) and 3 mantissa bits. There
//! are no infinities; `S.1111.111` is NaN, so the largest finite magnitude is
//! `1.75 · 2⁸ = 448`. Exponent field 0 holds subnormals `m · 2⁻⁹`.

use crate::error::{FaarError, Result};

pub const E4M3_MAX: f64 = 448.0;
/// Smallest positive subnormal, `2⁻⁹`.
pub const E4M3_MIN_POSITIVE: f64 = 1.0 / 512.0;

const MIN_NORMAL_EXP: i32 = -6;
const MANTISSA_BITS: i32 = 3;

/// Rounds a positive finite value to the nearest E4M3 value, ties to even,
/// saturating at 448.
///
/// Values below half the smallest subnormal round to zero, as any nearest
/// rounding must; callers that need a strictly positive scale floor the
/// result themselves.
pub fn e4m3_round(x: f64) -> Result<f64> {
    if !(x.is_finite() && x > 0.0) {
        return Err(FaarError::InvalidE4m3Input(x));
    }
    Ok(round_positive(x))
}

pub(crate) fn round_positive(x: f64) -> f64 {
    if x >= E4M3_MAX {
        return E4M3_MAX;
    }
    let exp = binary_exponent(x).max(MIN_NORMAL_EXP);
    let quantum = (2.0f64).powi(exp - MANTISSA_BITS);
    // x / quantum is exact: quantum is a power of two well inside f64 range.
    let rounded = (x / quantum).round_ties_even() * quantum;
    rounded.min(E4M3_MAX)
}

/// `floor(log2(x))` for positive normal `x`, read from the bit pattern.
fn binary_exponent(x: f64) -> i32 {
    ((x.to_bits() >> 52) & 0x7ff) as i32 - 1023
}

/// Decodes an E4M3 byte. Returns NaN for the two NaN patterns.
pub fn e4m3_from_bits(bits: u8) -> f64 {
    let sign = if bits & 0x80 != 0 { -1.0 } else { 1.0 };
    let exp = ((bits >> 3) & 0x0f) as i32;
    let mant = (bits & 0x07) as f64;
    if exp == 0x0f && bits & 0x07 == 0x07 {
        return f64::NAN;
    }
    let mag = if exp == 0 {
        mant * E4M3_MIN_POSITIVE
    } else {
        (1.0 + mant / 8.0) * (2.0f64).powi(exp - 7)
    };
    sign * mag
}

/// Encodes an exactly representable non-negative E4M3 value. Returns `None`
/// when `value` is not on the E4M3 grid.
pub fn e4m3_to_bits(value: f64) -> Option<u8> {
    if !(value.is_finite() && value >= 0.0) || value > E4M3_MAX {
        return None;
    }
    if value == 0.0 {
        return Some(0);
    }
    let exp = binary_exponent(value);
    let bits = if exp < MIN_NORMAL_EXP {
        let m = value / E4M3_MIN_POSITIVE;
        if m.fract() != 0.0 || !(1.0..8.0).contains(&m) {
            return None;
        }
        m as u8
    } else {
        let m = (value / (2.0f64).powi(exp) - 1.0) * 8.0;
        if m.fract() != 0.0 {
            return None;
        }
        (((exp + 7) as u8) << 3) | m as u8
    };
    (e4m3_from_bits(bits) == value).then_some(bits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_and_saturation() {
        assert_eq!(e4m3_round(448.0).unwrap(), 448.0);
        assert_eq!(e4m3_round(500.0).unwrap(), 448.0);
        assert_eq!(e4m3_round(1e30).unwrap(), 448.0);
    }

    #[test]
    fn rejects_nonpositive() {
        assert!(e4m3_round(0.0).is_err());
        assert!(e4m3_round(-1.0).is_err());
        assert!(e4m3_round(f64::NAN).is_err());
        assert!(e4m3_round(f64::INFINITY).is_err());
    }

    #[test]
    fn point_one_rounds_to_nearest_neighbour() {
        // 0.1 lies in [2^-4, 2^-3) where the step is 2^-7; neighbours are
        // 12/128 = 0.09375 and 13/128 = 0.1015625.
        assert_eq!(e4m3_round(0.1).unwrap(), 0.1015625);
    }

    #[test]
    fn ties_go_to_even_mantissa() {
        // 1.0625 sits halfway between 1.0 (m=0) and 1.125 (m=1).
        assert_eq!(e4m3_round(1.0625).unwrap(), 1.0);
        // 1.1875 sits halfway between 1.125 (m=1) and 1.25 (m=2).
        assert_eq!(e4m3_round(1.1875).unwrap(), 1.25);
        // halfway between the two smallest subnormals
        assert_eq!(
            e4m3_round(1.5 * E4M3_MIN_POSITIVE).unwrap(),
            2.0 * E4M3_MIN_POSITIVE
        );
        // below half the smallest subnormal
        assert_eq!(e4m3_round(0.25 * E4M3_MIN_POSITIVE).unwrap(), 0.0);
    }

    #[test]
    fn bit_roundtrip_over_all_finite_patterns() {
        for bits in 0u8..=0x7e {
            let v = e4m3_from_bits(bits);
            assert!(v.is_finite());
            assert_eq!(e4m3_to_bits(v), Some(bits), "bits {bits:#04x} value {v}");
            if v > 0.0 {
                assert_eq!(e4m3_round(v).unwrap(), v);
            }
        }
        assert!(e4m3_from_bits(0x7f).is_nan());
        assert_eq!(e4m3_from_bits(0x7e), 448.0);
        assert_eq!(e4m3_to_bits(0.3), None);
    }

    #[test]
    fn idempotent_on_samples() {
        let mut x = 1e-4;
        while x < 1e3 {
            let r = e4m3_round(x).unwrap();
            if r > 0.0 {
                assert_eq!(e4m3_round(r).unwrap(), r);
            }
            x *= 1.013;
        }
    }
}
