//! Flat `key = value` configuration files.
//!
//! Every config struct exposes its fields under their own names. Lines are
//! `key = value`; blank lines and `#` comments are ignored. Unknown keys are
//! rejected with the key named.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// A struct whose fields can be set from and dumped to `key = value` pairs.
pub trait KvConfig {
    /// Sets `key`; returns `Ok(false)` when the key is not one of ours.
    fn set(&mut self, key: &str, value: &str) -> Result<bool>;

    /// All fields in a stable order.
    fn entries(&self) -> Vec<(&'static str, String)>;
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("`{key}`: expected a boolean, got `{other}`"))),
    }
}

/// Splits config text into `(line number, key, value)` triples.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)));
        };
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Applies `pairs` to the first target that knows each key.
pub fn apply_pairs(targets: &mut [&mut dyn KvConfig], pairs: &[(usize, String, String)]) -> Result<()> {
    'pairs: for (_, k, v) in pairs {
        for t in targets.iter_mut() {
            if t.set(k, v)? {
                continue 'pairs;
            }
        }
        return Err(Error::Config(format!("unknown key `{k}`")));
    }
    Ok(())
}

pub fn apply_file(targets: &mut [&mut dyn KvConfig], path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    apply_pairs(targets, &parse_pairs(&text)?)
}

pub fn render(sections: &[&dyn KvConfig]) -> String {
    let mut s = String::new();
    for sec in sections {
        for (k, v) in sec.entries() {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Default, Debug, PartialEq)]
    struct Demo {
        rate: f64,
        on: bool,
    }

    impl KvConfig for Demo {
        fn set(&mut self, key: &str, value: &str) -> Result<bool> {
            match key {
                "rate" => self.rate = parse_value(key, value)?,
                "on" => self.on = parse_bool(key, value)?,
                _ => return Ok(false),
            }
            Ok(true)
        }

        fn entries(&self) -> Vec<(&'static str, String)> {
            vec![("rate", self.rate.to_string()), ("on", self.on.to_string())]
        }
    }

    #[test]
    fn parses_and_round_trips() {
        let mut d = Demo::default();
        let pairs = parse_pairs("# comment\nrate = 0.5\n\non=true # trailing\n").unwrap();
        apply_pairs(&mut [&mut d], &pairs).unwrap();
        assert_eq!(d, Demo { rate: 0.5, on: true });

        let mut e = Demo::default();
        apply_pairs(&mut [&mut e], &parse_pairs(&render(&[&d])).unwrap()).unwrap();
        assert_eq!(d, e);
    }

    #[test]
    fn unknown_key_is_named() {
        let mut d = Demo::default();
        let err = apply_pairs(&mut [&mut d], &parse_pairs("ratee = 1").unwrap()).unwrap_err();
        assert!(err.to_string().contains("ratee"), "{err}");
    }

    #[test]
    fn malformed_lines_rejected() {
        assert!(parse_pairs("just words").is_err());
        let mut d = Demo::default();
        assert!(apply_pairs(&mut [&mut d], &parse_pairs("rate = fast").unwrap()).is_err());
        assert!(apply_pairs(&mut [&mut d], &parse_pairs("on = maybe").unwrap()).is_err());
    }
}
