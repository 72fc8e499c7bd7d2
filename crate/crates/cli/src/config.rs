//! TOML configuration files with dotted `key=value` overrides.
//!
//! Overrides are applied to the parsed document before it is decoded into
//! its typed schema, so they are type-checked and unknown keys are rejected
//! exactly like keys in the file. A path segment that parses as an integer
//! indexes an array (`row.0.T=512`).

use std::path::Path;

use serde::de::DeserializeOwned;
use switchhead_core::Error;
use toml::{Table, Value};

use crate::{CliError, CliResult, Common};

/// Parsed configuration text plus the overrides still to apply.
#[derive(Clone, Debug)]
pub struct RawConfig {
    text: String,
    origin: String,
    overrides: Vec<String>,
}

impl RawConfig {
    pub fn new(text: impl Into<String>, origin: impl Into<String>, overrides: &[String]) -> Self {
        Self { text: text.into(), origin: origin.into(), overrides: overrides.to_vec() }
    }

    /// Reads `--config` (empty when absent) and keeps `--set` for later.
    pub fn load(common: &Common) -> CliResult<Self> {
        let (text, origin) = match &common.config {
            Some(path) => (read_config(path)?, path.display().to_string()),
            None => (String::new(), "<no config>".to_string()),
        };
        Ok(Self::new(text, origin, &common.overrides))
    }

    /// The document with every override applied.
    pub fn table(&self) -> CliResult<Table> {
        let mut table: Table = toml::from_str(&self.text).map_err(|e| parse_error(&self.origin, e))?;
        for o in &self.overrides {
            apply_override(&mut table, o)?;
        }
        Ok(table)
    }

    /// Decodes into `T`. Without overrides the file text is decoded directly
    /// so that diagnostics carry line and column.
    pub fn decode<T: DeserializeOwned>(&self) -> CliResult<T> {
        if self.overrides.is_empty() {
            return toml::from_str(&self.text).map_err(|e| parse_error(&self.origin, e));
        }
        Value::Table(self.table()?)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Core(Error::config(format!("{} with overrides: {}", self.origin, e.message()))))
    }
}

fn read_config(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))
}

fn parse_error(origin: &str, e: toml::de::Error) -> CliError {
    CliError::Core(Error::Parse(format!("{origin}: {e}")))
}

/// Applies one `dotted.key=value` override. The value is read as a TOML
/// scalar or inline table/array, falling back to a bare string.
pub fn apply_override(table: &mut Table, spec: &str) -> CliResult<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{spec}` is not of the form key=value")))?;
    let key = key.trim();
    let segments: Vec<&str> = key.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(CliError::Usage(format!("override key `{key}` has an empty segment")));
    }
    let mut root = Value::Table(std::mem::take(table));
    let result = set_path(&mut root, &segments, parse_value(raw.trim()), key);
    if let Value::Table(t) = root {
        *table = t;
    }
    result
}

fn set_path(node: &mut Value, segments: &[&str], value: Value, key: &str) -> CliResult<()> {
    let (seg, rest) = segments.split_first().expect("at least one segment");
    let slot = match node {
        Value::Table(t) => {
            if rest.is_empty() {
                t.insert(seg.to_string(), value);
                return Ok(());
            }
            t.entry(seg.to_string()).or_insert_with(|| Value::Table(Table::new()))
        }
        Value::Array(items) => {
            let idx: usize = seg
                .parse()
                .map_err(|_| CliError::Usage(format!("override `{key}`: `{seg}` must index an array")))?;
            let len = items.len();
            let item = items
                .get_mut(idx)
                .ok_or_else(|| CliError::Usage(format!("override `{key}`: index {idx} out of range for {len} entries")))?;
            if rest.is_empty() {
                *item = value;
                return Ok(());
            }
            item
        }
        _ => return Err(CliError::Usage(format!("override `{key}`: `{seg}` is below a scalar value"))),
    };
    set_path(slot, rest, value, key)
}

fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Output directory of a run, created on demand.
pub fn ensure_out(common: &Common) -> CliResult<()> {
    std::fs::create_dir_all(&common.out)
        .map_err(|e| CliError::Usage(format!("cannot create output directory {}: {e}", common.out.display())))
}
