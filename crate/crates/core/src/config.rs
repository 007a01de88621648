//! Strict JSON loading for configuration files.
//!
//! Configuration structs accept missing keys where a default exists, but any
//! key that no struct field consumes is an error. All offending paths are
//! reported together rather than stopping at the first.

use serde::de::DeserializeOwned;

use crate::error::{Error, Result};

/// Parses `text` into `T`, rejecting unknown keys.
///
/// Malformed JSON yields an [`Error::Config`] carrying the line and column.
pub fn from_json_str<T: DeserializeOwned>(text: &str) -> Result<T> {
    let mut de = serde_json::Deserializer::from_str(text);
    let value = parse_strict(&mut de)?;
    de.end().map_err(syntax_error)?;
    Ok(value)
}

/// Same as [`from_json_str`] for an already-parsed JSON value.
pub fn from_json_value<T: DeserializeOwned>(value: serde_json::Value) -> Result<T> {
    parse_strict(value)
}

fn parse_strict<'de, D, T>(de: D) -> Result<T>
where
    D: serde::Deserializer<'de, Error = serde_json::Error>,
    T: DeserializeOwned,
{
    let mut unknown = Vec::new();
    let parsed = serde_ignored::deserialize(de, |path| unknown.push(path.to_string()))
        .map_err(syntax_error)?;
    if !unknown.is_empty() {
        return Err(Error::Config(format!(
            "unknown key(s): {}",
            unknown.join(", ")
        )));
    }
    Ok(parsed)
}

fn syntax_error(err: serde_json::Error) -> Error {
    if err.line() > 0 {
        Error::Config(format!(
            "{} (line {}, column {})",
            strip_position(&err),
            err.line(),
            err.column()
        ))
    } else {
        Error::Config(err.to_string())
    }
}

// serde_json appends " at line L column C" to its messages.
fn strip_position(err: &serde_json::Error) -> String {
    let msg = err.to_string();
    match msg.rfind(" at line ") {
        Some(pos) => msg[..pos].to_string(),
        None => msg,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::MonteCarlo;

    #[test]
    fn all_unknown_keys_are_listed() {
        let err = from_json_str::<MonteCarlo>(r#"{"m": 10, "seed": 1, "mm": 2, "sed": 3}"#)
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("mm") && msg.contains("sed"), "{msg}");
    }

    #[test]
    fn syntax_errors_carry_position() {
        let err = from_json_str::<MonteCarlo>("{\n  \"m\": 10,\n  \"seed\": }").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3"), "{msg}");
        assert!(msg.contains("column"), "{msg}");
    }

    #[test]
    fn valid_input_parses() {
        let mc: MonteCarlo = from_json_str(r#"{"m": 10, "seed": 4}"#).unwrap();
        assert_eq!((mc.m, mc.seed), (10, 4));
    }
}
