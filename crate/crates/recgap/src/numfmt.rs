//! Fixed-precision float formatting for result files.
//!
//! Everything written to result CSVs and reports goes through twelve
//! significant digits, so re-runs diff cleanly and cross-platform
//! comparisons are stable.

/// Formats `x` with 12 significant digits. Values with decimal exponent in
/// `[-4, 15)` come out as plain decimals, everything else in e-notation.
pub fn fmt_sig12(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{:.11e}", x);
    let (mantissa, exp) = sci
        .split_once('e')
        .expect("{:e} always contains an exponent");
    let exp: i32 = exp.parse().expect("exponent is an integer");
    if !(-4..15).contains(&exp) {
        return trim_trailing_zeros(mantissa) + "e" + &exp.to_string();
    }

    let negative = mantissa.starts_with('-');
    let digits: String = mantissa.chars().filter(|c| c.is_ascii_digit()).collect();
    debug_assert_eq!(digits.len(), 12);
    let mut out = String::new();
    if negative {
        out.push('-');
    }
    if exp < 0 {
        out.push_str("0.");
        for _ in 0..(-exp - 1) {
            out.push('0');
        }
        out.push_str(&digits);
    } else {
        let point = exp as usize + 1;
        if point >= digits.len() {
            out.push_str(&digits);
            for _ in 0..(point - digits.len()) {
                out.push('0');
            }
        } else {
            out.push_str(&digits[..point]);
            out.push('.');
            out.push_str(&digits[point..]);
        }
    }
    if out.contains('.') {
        trim_trailing_zeros(&out)
    } else {
        out
    }
}

/// Rounds `x` to 12 significant digits; used before values enter JSON
/// reports so serialized numbers match the CSV representation.
pub fn round_sig12(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{:.11e}", x).parse().expect("round-trip parse")
}

fn trim_trailing_zeros(s: &str) -> String {
    if !s.contains('.') {
        return s.to_string();
    }
    let trimmed = s.trim_end_matches('0').trim_end_matches('.');
    trimmed.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_decimals_in_mid_range() {
        assert_eq!(fmt_sig12(0.342857142857143), "0.342857142857");
        assert_eq!(fmt_sig12(1.0), "1");
        assert_eq!(fmt_sig12(0.25), "0.25");
        assert_eq!(fmt_sig12(-0.125), "-0.125");
        assert_eq!(fmt_sig12(123456.789012345), "123456.789012");
        assert_eq!(fmt_sig12(0.0), "0");
    }

    #[test]
    fn extreme_magnitudes_use_e_notation() {
        assert_eq!(fmt_sig12(1.0e-7), "1e-7");
        assert_eq!(fmt_sig12(1.23e20), "1.23e20");
    }

    #[test]
    fn round_sig12_is_idempotent() {
        for &x in &[0.1234567890123456, 1.0 / 3.0, 2.0_f64.sqrt(), 1e-12] {
            let once = round_sig12(x);
            assert_eq!(once, round_sig12(once));
            assert!((once - x).abs() <= x.abs() * 1e-11);
        }
    }
}
