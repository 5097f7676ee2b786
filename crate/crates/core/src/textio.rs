//! Shared helpers for the plain-text formats (LF lines, `,` separators).

use crate::error::{Error, Result};

/// 17 significant digits; parses back to the identical `f64`.
pub(crate) fn fmt_exact(v: f64) -> String {
    format!("{v:.16e}")
}

pub(crate) fn parse_f64(field: &str, line: usize) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| Error::parse(line, format!("invalid number `{}`", field.trim())))?;
    if !v.is_finite() {
        return Err(Error::parse(
            line,
            format!("non-finite number `{}`", field.trim()),
        ));
    }
    Ok(v)
}

pub(crate) fn parse_usize(field: &str, line: usize) -> Result<usize> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::parse(line, format!("invalid count `{}`", field.trim())))
}

/// Non-empty lines with their 1-based line numbers. A trailing `\r` is
/// tolerated so files edited on other platforms still load.
pub(crate) fn numbered_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.split('\n')
        .enumerate()
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
        .filter(|(_, l)| !l.trim().is_empty())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_format_round_trips() {
        for v in [
            0.1,
            -0.0,
            1e-300,
            123456.789,
            std::f64::consts::PI,
            f64::MAX,
        ] {
            let s = fmt_exact(v);
            assert_eq!(parse_f64(&s, 1).unwrap().to_bits(), v.to_bits(), "{s}");
        }
    }

    #[test]
    fn rejects_garbage_and_non_finite() {
        assert!(matches!(
            parse_f64("abc", 7),
            Err(Error::Parse { line: 7, .. })
        ));
        assert!(parse_f64("inf", 1).is_err());
        assert!(parse_f64("NaN", 1).is_err());
    }
}
