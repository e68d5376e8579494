//! Experiment configuration: one file with sections mirroring the pipeline
//! stages, accepted as JSON or as dotted `key = value` lines.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use assign_surrogate::model::ModelConfig;
use assign_surrogate::simulator::SimConfig;
use assign_surrogate::table;
use assign_surrogate::training::TrainConfig;
use assign_surrogate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetSection {
    pub rows: usize,
    pub cols: usize,
    pub edge_length: f64,
    pub speed: f64,
    pub capacity: f64,
}

impl Default for NetSection {
    fn default() -> Self {
        NetSection { rows: 5, cols: 5, edge_length: 100.0, speed: 10.0, capacity: 0.5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HexSection {
    pub size: f64,
}

impl Default for HexSection {
    fn default() -> Self {
        HexSection { size: 120.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemandSection {
    pub agents: usize,
    /// departure window, seconds
    pub window: f64,
}

impl Default for DemandSection {
    fn default() -> Self {
        DemandSection { agents: 200, window: 300.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub k: usize,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection { k: 4 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    /// simplex grid granularity
    pub g: u32,
    /// number of simulations planned over the grid
    pub sims: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection { g: 4, sims: 150 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub net: NetSection,
    pub hex: HexSection,
    pub demand: DemandSection,
    pub paths: PathsSection,
    pub sampler: SamplerSection,
    pub sim: SimConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            net: NetSection::default(),
            hex: HexSection::default(),
            demand: DemandSection::default(),
            paths: PathsSection::default(),
            sampler: SamplerSection::default(),
            sim: SimConfig::default(),
            model: empty_section("model"),
            train: empty_section("train"),
        }
    }
}

/// Core config types carry their own serde defaults; an empty object is the
/// canonical default value.
fn empty_section<T: for<'de> Deserialize<'de>>(what: &str) -> T {
    serde_json::from_str("{}").unwrap_or_else(|e| panic!("{what} defaults: {e}"))
}

impl AppConfig {
    /// A problem in the user's config file is a validation error (exit 1),
    /// unlike corrupt pipeline artifacts, which are runtime failures.
    pub fn load(path: Option<&Path>) -> Result<AppConfig> {
        let Some(path) = path else {
            return Ok(AppConfig::default());
        };
        if !path.exists() {
            return Err(Error::validation(format!("config file {} not found", path.display())));
        }
        let text = table::read_to_string(path)?;
        let value = if text.trim_start().starts_with('{') {
            serde_json::from_str::<Value>(&text).map_err(|e| {
                Error::validation(format!("{}: bad JSON at line {}: {e}", path.display(), e.line()))
            })?
        } else {
            parse_key_values(&text, path)?
        };
        serde_json::from_value(value)
            .map_err(|e| Error::validation(format!("{}: bad config: {e}", path.display())))
    }

    pub fn snapshot(&self) -> Result<Value> {
        serde_json::to_value(self)
            .map_err(|e| Error::runtime(format!("config serialization: {e}")))
    }
}

/// Dotted `key = value` lines; `#` starts a comment. Values parse as JSON
/// when they can (numbers, booleans, arrays, quoted strings) and fall back
/// to bare strings, so `model.fusion = attention` works unquoted.
fn parse_key_values(text: &str, path: &Path) -> Result<Value> {
    let mut root = Map::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::validation(format!(
                "{}: line {line_no}: expected `key = value`, got `{line}`",
                path.display()
            )));
        };
        let key = key.trim();
        if key.is_empty() || key.split('.').any(|part| part.is_empty()) {
            return Err(Error::validation(format!(
                "{}: line {line_no}: bad key `{key}`",
                path.display()
            )));
        }
        let value = value.trim();
        let parsed: Value = serde_json::from_str(value)
            .unwrap_or_else(|_| Value::String(value.to_string()));
        insert_dotted(&mut root, key, parsed).map_err(|msg| {
            Error::validation(format!("{}: line {line_no}: {msg}", path.display()))
        })?;
    }
    Ok(Value::Object(root))
}

fn insert_dotted(
    root: &mut Map<String, Value>,
    key: &str,
    value: Value,
) -> std::result::Result<(), String> {
    let mut map = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let slot = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
        map = match slot {
            Value::Object(m) => m,
            _ => return Err(format!("key `{key}` descends into non-section `{part}`")),
        };
    }
    let leaf = parts[parts.len() - 1];
    if matches!(map.get(leaf), Some(Value::Object(_))) {
        return Err(format!("key `{key}` overwrites section `{leaf}`"));
    }
    map.insert(leaf.to_string(), value);
    Ok(())
}
