//! Number formatting shared by the CSV writers.

/// `%g`-style rendering with six significant digits.
pub fn sig6(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent digits");
    if !(-4..6).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{m}e{sign}{:02}", exp.abs());
    }
    let decimals = (5 - exp).max(0) as usize;
    trim_zeros(&format!("{v:.decimals$}")).to_string()
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
    use super::sig6;

    #[test]
    fn matches_printf_g() {
        for (v, s) in [
            (0.0, "0"),
            (1.0, "1"),
            (0.6, "0.6"),
            (42.857142857, "42.8571"),
            (-1.3333333, "-1.33333"),
            (123456.7, "123457"),
            (1234567.0, "1.23457e+06"),
            (0.00012345678, "0.000123457"),
            (0.000012345678, "1.23457e-05"),
            (99.99999999, "100"),
            (58.333333, "58.3333"),
        ] {
            assert_eq!(sig6(v), s, "{v}");
        }
    }
}
