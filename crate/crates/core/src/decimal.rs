//! Decimal rendering of float32 values that parses back to the same bits.
//!
//! Values are written as `d.ddddddddde±XX`: the shortest digit string that
//! recovers the exact float32 (never more than nine significant digits),
//! zero-padded to a fixed nine fractional places, and a signed exponent of at
//! least two digits. So 0.1 renders as `1.000000000e-01`.

/// Renders `v` in the canonical scientific form, e.g. `2.500000000e-01`.
pub fn format_f32(v: f32) -> String {
    let s = format!("{v:e}");
    let (mantissa, exp) = s.split_once('e').expect("exponent form");
    let (int, frac) = mantissa.split_once('.').unwrap_or((mantissa, ""));
    let (sign, digits) = match exp.strip_prefix('-') {
        Some(d) => ('-', d),
        None => ('+', exp),
    };
    format!("{int}.{frac:0<9}e{sign}{digits:0>2}")
}

/// Parses a decimal float, rounding to the nearest float32.
pub fn parse_f32(s: &str) -> Option<f32> {
    s.trim().parse::<f32>().ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn known_literals() {
        assert_eq!(format_f32(0.1), "1.000000000e-01");
        assert_eq!(format_f32(1.0), "1.000000000e+00");
        assert_eq!(format_f32(-0.0), "-0.000000000e+00");
        assert_eq!(format_f32(-2.5e12), "-2.500000000e+12");
        assert_eq!(format_f32(f32::from_bits(1)), "1.000000000e-45");
        assert_eq!(format_f32(f32::MAX), "3.402823500e+38");
        assert_eq!(format_f32(1.0e-5), "1.000000000e-05");
        assert_eq!(parse_f32("1.000000000e-01").unwrap().to_bits(), 0.1f32.to_bits());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(4096))]
        #[test]
        fn round_trips_every_finite_pattern(bits in any::<u32>()) {
            let v = f32::from_bits(bits);
            prop_assume!(v.is_finite());
            prop_assert_eq!(parse_f32(&format_f32(v)).unwrap().to_bits(), bits);
        }
    }
}
