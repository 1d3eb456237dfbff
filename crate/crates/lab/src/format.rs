//! C-style `%g` number formatting.

/// Formats `x` like C's `printf("%.6g", x)`.
pub fn g6(x: f64) -> String {
    g(x, 6)
}

/// Formats `x` like C's `printf("%.{precision}g", x)`.
pub fn g(x: f64, precision: usize) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let p = precision.max(1);
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    // round to p significant digits first; the exponent is taken after rounding
    let sci = format!("{:.*e}", p - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= p as i32 {
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (p as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{:.*}", decimals, x)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_printf() {
        let cases = [
            (0.0, "0"),
            (1.0, "1"),
            (8.2, "8.2"),
            (50.0, "50"),
            (0.001, "0.001"),
            (0.0001, "0.0001"),
            (1e-9, "1e-09"),
            (1e-4, "0.0001"),
            (0.00001234, "1.234e-05"),
            (123456.0, "123456"),
            (1234567.0, "1.23457e+06"),
            (999999.5, "1e+06"),
            (0.1 + 0.2, "0.3"),
            (-2.5, "-2.5"),
            (3.14159265, "3.14159"),
            (1.0 / 3.0, "0.333333"),
            (2.0 / 3.0, "0.666667"),
            (1e100, "1e+100"),
            (9.9999996, "10"),
        ];
        for (x, want) in cases {
            assert_eq!(g6(x), want, "{x}");
        }
        assert_eq!(g6(f64::NAN), "nan");
        assert_eq!(g(1234.5, 3), "1.23e+03");
    }
}
