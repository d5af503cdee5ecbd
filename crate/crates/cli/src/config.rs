//! Flag and config-file merging.
//!
//! The config file is TOML with one table per subcommand, keyed by the
//! subcommand name and using the long flag names:
//!
//! ```toml
//! [sample]
//! ckpt = "runs/desk.ckpt"
//! s-realism = 0.4
//! ```
//!
//! Flags given on the command line win over the file.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::CliError;

/// Loads the table for `section` from a config file, if there is one.
pub fn load_section(path: Option<&Path>, section: &str) -> Result<Map<String, Value>, CliError> {
    let Some(path) = path else {
        return Ok(Map::new());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read config file {}: {e}", path.display())))?;
    let doc: toml::Table =
        toml::from_str(&text).map_err(|e| CliError::Validation(format!("config file {}: {e}", path.display())))?;
    match doc.get(section) {
        None => Ok(Map::new()),
        Some(toml::Value::Table(t)) => match serde_json::to_value(t)? {
            Value::Object(m) => Ok(m),
            _ => unreachable!("a table serializes to an object"),
        },
        Some(_) => Err(CliError::Validation(format!("config section [{section}] must be a table"))),
    }
}

/// Overlays the flags that were given onto the file section.
///
/// `A` must reject unknown fields so that typos in the file are caught.
pub fn merge<A: Serialize + DeserializeOwned>(flags: &A, file: Map<String, Value>, section: &str) -> Result<A, CliError> {
    let mut merged = file;
    if let Value::Object(given) = serde_json::to_value(flags)? {
        for (k, v) in given {
            if !v.is_null() {
                merged.insert(k, v);
            }
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Validation(format!("config section [{section}]: {e}")))
}

/// Renders the effective settings of one subcommand as TOML.
pub fn render<A: Serialize>(section: &str, args: &A) -> Result<String, CliError> {
    let mut root = toml::Table::new();
    let value = toml::Value::try_from(args).map_err(|e| CliError::Runtime(e.into()))?;
    root.insert(section.to_string(), value);
    toml::to_string(&root).map_err(|e| CliError::Runtime(e.into()))
}
