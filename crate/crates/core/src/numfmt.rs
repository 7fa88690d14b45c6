//! Shortest round-trip decimal text for reals in plain-text files.

/// Plain notation for moderate magnitudes, exponent notation otherwise.
/// `s.parse::<f64>()` recovers the exact value.
pub fn real(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || !v.is_finite() || (1e-4..1e15).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(real(0.5), "0.5");
        assert_eq!(real(-2e-300), "-2e-300");
        assert_eq!(real(1e20), "1e20");
        assert_eq!(real(7.0), "7");
        assert_eq!(real(-0.0), "-0");
        assert_eq!(real(f64::NAN), "NaN");
    }

    proptest! {
        #[test]
        fn round_trips(bits in any::<u64>()) {
            let v = f64::from_bits(bits);
            prop_assume!(v.is_finite());
            prop_assert_eq!(real(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }
}
