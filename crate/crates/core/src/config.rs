//! Experiment configuration: a TOML file, `section.key=value` overrides on
//! top, and `VICL_ENDPOINT` replacing every client endpoint.
//!
//! ```toml
//! [dataset]
//! manifest = "data/manifest.jsonl"
//! kind = "emotion"
//!
//! [run]
//! mode = "vicl"
//! demo_count = 4
//!
//! [clients.embedder]
//! endpoint = "mock:clustered"
//! [clients.scorer]
//! endpoint = "mock:clustered"
//! [clients.generator]
//! endpoint = "http://127.0.0.1:8400"
//! model_id = "llava-13b"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::client::ClientConfig;
use crate::error::{Error, Result};
use crate::evaluator::RunSettings;
use crate::types::DatasetKind;

pub const ENDPOINT_ENV: &str = "VICL_ENDPOINT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub manifest: PathBuf,
    pub kind: DatasetKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Clients {
    pub embedder: ClientConfig,
    pub scorer: ClientConfig,
    pub generator: ClientConfig,
}

fn default_work_dir() -> PathBuf {
    PathBuf::from("work")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Index, summaries and the generation cache live here.
    #[serde(default = "default_work_dir")]
    pub work_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            work_dir: default_work_dir(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub run: RunSettings,
    pub clients: Clients,
    #[serde(default)]
    pub paths: Paths,
}

impl Config {
    pub fn index_path(&self) -> PathBuf {
        self.paths.work_dir.join("index.bin")
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.paths.work_dir.join("cache")
    }

    pub fn summaries_path(&self) -> PathBuf {
        self.paths
            .work_dir
            .join(format!("summaries-{}.jsonl", self.run.strategy))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.run.validate()?;
        for c in [
            &self.clients.embedder,
            &self.clients.scorer,
            &self.clients.generator,
        ] {
            c.validate()?;
        }
        Ok(())
    }
}

/// Parses an override value as a TOML value, or as a bare string when it is
/// not one (`run.mode=vicl`).
fn override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `a.b.c=value` to a parsed TOML table.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, value) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} is malformed")));
    }
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key {key:?}: {p} is not a section")))?;
    }
    cur.insert(last.to_string(), override_value(value.trim()));
    Ok(())
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

/// Parses configuration text. Relative paths resolve against `base`.
pub fn parse_config(
    text: &str,
    base: &Path,
    overrides: &[String],
    endpoint_env: Option<&str>,
) -> Result<Config> {
    let mut table: toml::Table =
        toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let mut config: Config = toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::Config(format!("config: {e}")))?;
    if let Some(endpoint) = endpoint_env.filter(|e| !e.is_empty()) {
        for c in [
            &mut config.clients.embedder,
            &mut config.clients.scorer,
            &mut config.clients.generator,
        ] {
            c.endpoint = endpoint.to_string();
        }
    }
    resolve(base, &mut config.dataset.manifest);
    resolve(base, &mut config.paths.work_dir);
    for c in [
        &mut config.clients.embedder,
        &mut config.clients.scorer,
        &mut config.clients.generator,
    ] {
        if let Some(s) = c.script.as_mut() {
            resolve(base, s);
        }
    }
    config.validate()?;
    Ok(config)
}

/// Loads a config file, applying overrides and the endpoint variable.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<Config> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let env = std::env::var(ENDPOINT_ENV).ok();
    parse_config(&text, &base, overrides, env.as_deref())
}
