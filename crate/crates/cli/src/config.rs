//! Run configuration files and their command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use dapa_core::{DapaError, ModelConfig, Result, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Corpus manifest; relative paths resolve against the config file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub precision: Precision,
}

/// Everything `train` needs; every field falls back to the recipe default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSection,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadedConfig {
    pub config: RunConfigFile,
    /// Whether the file fixed `model.d_in`; otherwise it follows the corpus.
    pub d_in_given: bool,
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p.as_mut() {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

pub fn parse_run_config(text: &str, origin: &Path) -> Result<LoadedConfig> {
    let format_err = |message: String| DapaError::Config(format!("{}: {message}", origin.display()));
    let mut config: RunConfigFile = toml::from_str(text).map_err(|e| format_err(e.to_string()))?;
    let table: toml::Table = toml::from_str(text).map_err(|e| format_err(e.to_string()))?;
    let d_in_given = table
        .get("model")
        .and_then(toml::Value::as_table)
        .is_some_and(|m| m.contains_key("d_in"));
    let base = origin.parent().unwrap_or(Path::new(""));
    resolve(base, &mut config.data.manifest);
    resolve(base, &mut config.data.out);
    Ok(LoadedConfig { config, d_in_given })
}

pub fn load_run_config(path: &Path) -> Result<LoadedConfig> {
    let text = fs::read_to_string(path).map_err(|source| DapaError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_run_config(&text, path)
}

pub fn to_toml<S: Serialize>(value: &S) -> Result<String> {
    toml::to_string(value).map_err(|e| DapaError::Config(format!("cannot render configuration: {e}")))
}
