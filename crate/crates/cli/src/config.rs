//! JSON config files mirroring the command-line flags.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::CliError;

/// Overlays the flags given on the command line onto the config file; a
/// flag wins over the file, the file over built-in defaults. Keys are the
/// long flag names.
pub fn resolve<T: Serialize + DeserializeOwned>(flags: &T, config: Option<&Path>) -> Result<T, CliError> {
    let mut merged = match config {
        Some(path) => read_object(path)?,
        None => Map::new(),
    };
    let Value::Object(given) = serde_json::to_value(flags).map_err(CliError::internal)? else {
        return Err(CliError::internal("flags are not an object"));
    };
    for (k, v) in given {
        if !v.is_null() {
            merged.insert(k, v);
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::new("config", e.to_string()))
}

fn read_object(path: &Path) -> Result<Map<String, Value>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(CliError::new("config", format!("{}: expected a JSON object", path.display()))),
        Err(e) => Err(CliError::new("config", format!("{}: {e}", path.display()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    #[serde(deny_unknown_fields, rename_all = "kebab-case")]
    struct Flags {
        seed: Option<u64>,
        out_dir: Option<String>,
    }

    #[test]
    fn flags_override_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"seed": 3, "out-dir": "a"}"#).unwrap();
        let got = resolve(&Flags { seed: Some(9), out_dir: None }, Some(&p)).unwrap();
        assert_eq!(got, Flags { seed: Some(9), out_dir: Some("a".into()) });
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"sed": 3}"#).unwrap();
        let e = resolve(&Flags { seed: None, out_dir: None }, Some(&p)).unwrap_err();
        assert_eq!(e.kind, "config");
    }
}
