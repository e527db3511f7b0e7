//! `key = value` configuration text shared by model, trainer, corpus and
//! run configs.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

/// A flat set of named fields that round-trips through `key = value` text.
pub trait KvConfig {
    /// Sets `key`. Returns `Ok(false)` if the key does not belong here.
    fn set(&mut self, key: &str, value: &str) -> std::result::Result<bool, String>;

    /// Every field in a fixed order, formatted so that `set` reads it back.
    fn entries(&self) -> Vec<(&'static str, String)>;

    fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// One parsed line: `(line number, key, value)`.
pub type KvLine = (usize, String, String);

/// Splits text into `key = value` lines; `#` starts a comment.
pub fn parse_lines(text: &str, file: &str) -> Result<Vec<KvLine>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config {
                file: file.to_string(),
                line: i + 1,
                msg: format!("expected `key = value`, got {line:?}"),
            });
        };
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Applies parsed lines to `cfg`, rejecting unknown keys.
pub fn apply_lines(cfg: &mut impl KvConfig, lines: &[KvLine], file: &str) -> Result<()> {
    for (line, k, v) in lines {
        match cfg.set(k, v) {
            Ok(true) => {}
            Ok(false) => {
                return Err(Error::Config {
                    file: file.to_string(),
                    line: *line,
                    msg: format!("unknown key {k:?}"),
                })
            }
            Err(msg) => {
                return Err(Error::Config {
                    file: file.to_string(),
                    line: *line,
                    msg,
                })
            }
        }
    }
    Ok(())
}

pub fn from_text<C: KvConfig + Default>(text: &str, file: &str) -> Result<C> {
    let mut cfg = C::default();
    apply_lines(&mut cfg, &parse_lines(text, file)?, file)?;
    Ok(cfg)
}

pub fn parse_value<V: FromStr>(key: &str, value: &str) -> std::result::Result<V, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value {value:?} for {key}"))
}

pub fn parse_bool(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(format!("invalid boolean {value:?} for {key}")),
    }
}

/// Formats a float so that parsing it back yields the same bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Generates `KvConfig` for a struct whose fields all parse with `FromStr`
/// (bools accept `true/false/on/off/1/0`).
#[macro_export]
macro_rules! kv_config {
    ($ty:ty { $($field:ident : $kind:tt),* $(,)? }) => {
        impl $crate::config::KvConfig for $ty {
            fn set(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
                match key {
                    $(stringify!($field) => {
                        self.$field = $crate::kv_config!(@parse $kind, key, value)?;
                        Ok(true)
                    })*
                    _ => Ok(false),
                }
            }

            fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($field), $crate::kv_config!(@fmt $kind, self.$field))),*]
            }
        }
    };
    (@parse bool, $k:expr, $v:expr) => { $crate::config::parse_bool($k, $v) };
    (@parse float, $k:expr, $v:expr) => { $crate::config::parse_value($k, $v) };
    (@parse value, $k:expr, $v:expr) => { $crate::config::parse_value($k, $v) };
    (@fmt float, $e:expr) => { $crate::config::fmt_f64($e as f64) };
    (@fmt $other:tt, $e:expr) => { $e.to_string() };
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Default, Debug, PartialEq)]
    struct Demo {
        steps: usize,
        lr: f64,
        on: bool,
    }

    kv_config!(Demo { steps: value, lr: float, on: bool });

    #[test]
    fn round_trip() {
        let d = Demo {
            steps: 3,
            lr: 1e-4,
            on: true,
        };
        let back: Demo = from_text(&d.to_text(), "x").unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn unknown_key_names_file_and_line() {
        let err = from_text::<Demo>("steps = 1\n\n  bogus = 2\n", "run.cfg").unwrap_err();
        assert_eq!(err.to_string(), "run.cfg:3: unknown key \"bogus\"");
    }

    #[test]
    fn bad_value_and_missing_equals() {
        let err = from_text::<Demo>("lr = fast\n", "a").unwrap_err();
        assert!(err.to_string().starts_with("a:1: invalid value"));
        assert!(from_text::<Demo>("# c\nsteps 3\n", "a").unwrap_err().to_string().starts_with("a:2:"));
    }
}
