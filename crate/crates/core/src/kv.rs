//! Plain `key=value` text, the one config syntax used by files, checkpoints
//! and command-line flags.

use crate::error::{config_err, Result};

/// Parses `key=value` lines in order. Blank lines and `#` comments are
/// skipped; keys and values are trimmed.
pub fn parse_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return config_err(format!("line {}: expected key=value, got {line:?}", lineno + 1));
        };
        let key = k.trim();
        if key.is_empty() {
            return config_err(format!("line {}: empty key", lineno + 1));
        }
        out.push((key.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn render(pairs: &[(String, String)]) -> String {
    let mut s = String::new();
    for (k, v) in pairs {
        s.push_str(k);
        s.push('=');
        s.push_str(v);
        s.push('\n');
    }
    s
}

pub fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .or_else(|_| config_err(format!("{key}: expected a nonnegative integer, got {v:?}")))
}

pub fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse()
        .or_else(|_| config_err(format!("{key}: expected a nonnegative integer, got {v:?}")))
}

pub fn parse_f64(key: &str, v: &str) -> Result<f64> {
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => config_err(format!("{key}: expected a finite number, got {v:?}")),
    }
}

pub fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => config_err(format!("{key}: expected true/false, got {v:?}")),
    }
}

pub fn parse_usize_list(key: &str, v: &str) -> Result<Vec<usize>> {
    let v = v.trim().trim_start_matches('[').trim_end_matches(']');
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse_usize(key, p.trim())).collect()
}

pub fn render_list(xs: &[usize]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_skips_comments() {
        let pairs = parse_lines("# header\n\na = 1\nb=x=y\n").unwrap();
        assert_eq!(pairs, vec![("a".into(), "1".into()), ("b".into(), "x=y".into())]);
    }

    #[test]
    fn rejects_missing_equals() {
        assert!(parse_lines("lonely").is_err());
    }

    #[test]
    fn lists() {
        assert_eq!(parse_usize_list("d", "[5, 4,4]").unwrap(), vec![5, 4, 4]);
        assert_eq!(render_list(&[1, 2]), "1,2");
        assert!(parse_usize_list("d", "1,x").is_err());
    }
}
