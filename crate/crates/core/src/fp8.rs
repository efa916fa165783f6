//! Software FP8 E4M3 (OCP "FN" flavour) for per-group scale factors.
//!
//! Layout: 1 sign bit, 4 exponent bits with bias 7, 3 mantissa bits.
//! There are no infinities; `S.1111.111` is NaN, so the largest finite
//! magnitude is `1.75 * 2^8 = 448`. Exponent field zero encodes subnormals
//! `m * 2^-9`.

use crate::error::{Error, Result};

/// Largest finite E4M3 value.
pub const E4M3_MAX: f64 = 448.0;
/// Encoding of [`E4M3_MAX`].
pub const E4M3_MAX_CODE: u8 = 0x7E;
/// Smallest positive normal value, `2^-6`.
pub const E4M3_MIN_NORMAL: f64 = 0.015625;
/// Smallest positive subnormal value, `2^-9`.
pub const E4M3_MIN_SUBNORMAL: f64 = 0.001953125;

const EXP_BIAS: i32 = 7;

/// Encodes a non-negative real with round-to-nearest-even.
///
/// Values at or above 448 saturate to 448; the sign bit is always clear.
pub fn encode(x: f64) -> Result<u8> {
    if !x.is_finite() || x < 0.0 {
        return Err(Error::NonFiniteScale(x));
    }
    if x >= E4M3_MAX {
        return Ok(E4M3_MAX_CODE);
    }
    if x < E4M3_MIN_NORMAL {
        // subnormal grid m * 2^-9; m == 8 lands exactly on the smallest normal
        let m = (x * 512.0).round_ties_even();
        return Ok(m as u8);
    }
    // x is a normal f64 here, so the biased exponent field is exact
    let exp = ((x.to_bits() >> 52) & 0x7ff) as i32 - 1023;
    let frac = x / f64::powi(2.0, exp);
    let mut m = ((frac - 1.0) * 8.0).round_ties_even() as i32;
    let mut e = exp;
    if m == 8 {
        m = 0;
        e += 1;
    }
    let code = ((e + EXP_BIAS) << 3) | m;
    Ok(code.min(E4M3_MAX_CODE as i32) as u8)
}

/// Decodes one byte to its exact value.
pub fn decode(byte: u8) -> Result<f64> {
    if byte & 0x7F == 0x7F {
        return Err(Error::NaNPattern(byte));
    }
    let sign = if byte & 0x80 != 0 { -1.0 } else { 1.0 };
    let e = ((byte >> 3) & 0x0F) as i32;
    let m = (byte & 0x07) as f64;
    let mag = if e == 0 {
        m * E4M3_MIN_SUBNORMAL
    } else {
        (1.0 + m / 8.0) * f64::powi(2.0, e - EXP_BIAS)
    };
    Ok(sign * mag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Value of a code computed straight from the bit fields, independently of `decode`.
    fn field_value(code: u8) -> f64 {
        let e = (code >> 3) as i32 & 0xF;
        let m = (code & 7) as f64;
        if e == 0 {
            m / 8.0 * 2f64.powi(-6)
        } else {
            (1.0 + m / 8.0) * 2f64.powi(e - 7)
        }
    }

    /// Nearest non-negative code by exhaustive search, ties to the even code.
    fn brute_encode(x: f64) -> u8 {
        if x >= 448.0 {
            return 0x7E;
        }
        let mut best = 0u8;
        let mut best_err = f64::INFINITY;
        for code in 0u8..=0x7E {
            let err = (field_value(code) - x).abs();
            if err < best_err || (err == best_err && code % 2 == 0) {
                best = code;
                best_err = err;
            }
        }
        best
    }

    #[test]
    fn known_codes() {
        assert_eq!(encode(0.0).unwrap(), 0x00);
        assert_eq!(encode(1.0).unwrap(), 0x38);
        assert_eq!(encode(448.0).unwrap(), 0x7E);
        assert_eq!(decode(0x00).unwrap(), 0.0);
        assert_eq!(decode(0x38).unwrap(), 1.0);
        assert_eq!(decode(0x08).unwrap(), 0.015625);
        assert_eq!(decode(0x01).unwrap(), E4M3_MIN_SUBNORMAL);
    }

    #[test]
    fn saturates_above_max() {
        assert_eq!(encode(1e6).unwrap(), 0x7E);
        assert_eq!(encode(470.0).unwrap(), 0x7E);
    }

    #[test]
    fn rejects_non_finite_and_nan_pattern() {
        assert!(encode(f64::NAN).is_err());
        assert!(encode(f64::INFINITY).is_err());
        assert!(matches!(decode(0x7F), Err(Error::NaNPattern(0x7F))));
        assert!(matches!(decode(0xFF), Err(Error::NaNPattern(0xFF))));
    }

    #[test]
    fn decode_matches_field_formula_for_all_codes() {
        for code in 0u8..=255 {
            if code & 0x7F == 0x7F {
                continue;
            }
            let sign = if code & 0x80 != 0 { -1.0 } else { 1.0 };
            assert_eq!(decode(code).unwrap() as f64, sign * field_value(code & 0x7F));
        }
    }

    #[test]
    fn encode_inverts_decode_on_every_non_negative_code() {
        for code in 0u8..=0x7E {
            assert_eq!(encode(decode(code).unwrap() as f64).unwrap(), code);
        }
    }

    #[test]
    fn ties_round_to_even() {
        // halfway between 1.0 (0x38) and 1.125 (0x39)
        assert_eq!(encode(1.0625).unwrap(), 0x38);
        // halfway between 1.125 (0x39) and 1.25 (0x3A)
        assert_eq!(encode(1.1875).unwrap(), 0x3A);
        // halfway between the two smallest subnormals
        assert_eq!(encode(1.5 * E4M3_MIN_SUBNORMAL).unwrap(), 0x02);
    }

    proptest! {
        #[test]
        fn encode_matches_exhaustive_search(x in 0.0f64..500.0) {
            prop_assert_eq!(encode(x).unwrap(), brute_encode(x));
        }

        #[test]
        fn encode_matches_exhaustive_search_small(x in 0.0f64..0.05) {
            prop_assert_eq!(encode(x).unwrap(), brute_encode(x));
        }
    }
}
