//! `key=value` overrides applied to a parsed TOML document.
//!
//! Keys are dotted paths; numeric segments index arrays
//! (`domains.0.source.seed=3`). Values are parsed as TOML values and fall
//! back to plain strings, so `trainer.rounds=10`, `strategies=["random"]`
//! and `name=quick` all work. Missing tables along the path are created.

use std::fmt;

use toml::Value;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OverrideError(pub String);

impl fmt::Display for OverrideError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for OverrideError {}

pub fn parse_value(raw: &str) -> Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

pub fn apply(doc: &mut Value, assignment: &str) -> Result<(), OverrideError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| OverrideError(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(OverrideError(format!("override `{assignment}` has an empty key segment")));
    }
    let segments: Vec<&str> = key.split('.').collect();
    let mut cur = doc;
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        cur = match cur {
            Value::Table(t) => {
                if last {
                    t.insert(seg.to_string(), parse_value(raw.trim()));
                    return Ok(());
                }
                t.entry(seg.to_string()).or_insert_with(|| Value::Table(toml::Table::new()))
            }
            Value::Array(a) => {
                let idx: usize = seg
                    .parse()
                    .map_err(|_| OverrideError(format!("override `{key}`: `{seg}` is not an array index")))?;
                let len = a.len();
                let slot = a
                    .get_mut(idx)
                    .ok_or_else(|| OverrideError(format!("override `{key}`: index {idx} out of range ({len} entries)")))?;
                if last {
                    *slot = parse_value(raw.trim());
                    return Ok(());
                }
                slot
            }
            _ => {
                return Err(OverrideError(format!(
                    "override `{key}`: `{}` is not a table or array",
                    segments[..i].join(".")
                )))
            }
        };
    }
    unreachable!("loop returns on the last segment")
}
