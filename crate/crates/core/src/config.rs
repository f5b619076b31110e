//! Run configuration: one TOML document binding every module's settings,
//! dotted `key=value` overrides, and a content hash for provenance.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::catalog::SynthConfig;
use crate::dsp::FrontendConfig;
use crate::embedder::EmbedConfig;
use crate::error::{Error, Result};
use crate::model::{EncoderConfig, ProjectorConfig};
use crate::prober::{ProbeConfig, TaskConfig};
use crate::trainer::PretrainConfig;

/// Input and output locations; relative paths resolve against the working
/// directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// JSONL track manifest.
    pub manifest: Option<PathBuf>,
    /// Explicit label vocabulary, one label per line.
    pub vocab: Option<PathBuf>,
    /// Model checkpoint to start from or embed with.
    pub checkpoint: Option<PathBuf>,
    /// Embedding file for probing.
    pub embeddings: Option<PathBuf>,
    /// Trained probe for `eval`.
    pub probe: Option<PathBuf>,
    /// Report JSON files aggregated by `report`.
    pub reports: Vec<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub encoder: EncoderConfig,
    pub projector: ProjectorConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    /// Model name written in the `model_tag` column.
    pub model_tag: String,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            model_tag: "synth-ularge".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub frontend: FrontendConfig,
    pub model: ModelSection,
    pub pretrain: PretrainConfig,
    pub embed: EmbedConfig,
    pub probe: ProbeConfig,
    pub task: Option<TaskConfig>,
    pub report: ReportConfig,
}

fn parse_value(raw: &str) -> toml::Value {
    // Values are read as TOML where possible, so `3`, `true` and `[1, 2]`
    // keep their types; anything else is a plain string.
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Set dotted `key` in `table`, creating intermediate tables.
fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parse TOML text, apply `key=value` overrides in order, and validate.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.frontend.validate()?;
        self.model.encoder.validate()?;
        self.model.projector.validate()?;
        self.pretrain.validate()?;
        self.embed.validate()?;
        self.probe.validate()?;
        Ok(())
    }

    /// Canonical serialization: JSON with fields in declaration order.
    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of [`canonical`](Self::canonical).
    pub fn config_hash(&self) -> String {
        hex(&Sha256::digest(self.canonical().as_bytes()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            RunConfig::from_toml("bogus = 1", &[]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml("[pretrain]\nbatchsize = 3", &[]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn overrides_apply_and_change_hash() {
        let base = RunConfig::from_toml("", &[]).unwrap();
        let o = RunConfig::from_toml(
            "[pretrain]\nbatch_size = 8",
            &[
                "pretrain.batch_size=16".into(),
                "report.model_tag=synth-sup".into(),
            ],
        )
        .unwrap();
        assert_eq!(o.pretrain.batch_size, 16);
        assert_eq!(o.report.model_tag, "synth-sup");
        assert_ne!(base.config_hash(), o.config_hash());
        assert_eq!(base.config_hash(), RunConfig::default().config_hash());
        assert_eq!(base.config_hash().len(), 64);
    }

    #[test]
    fn bad_override_rejected() {
        assert!(RunConfig::from_toml("", &["novalue".into()]).is_err());
        assert!(RunConfig::from_toml("", &["pretrain.batch_size=-1".into()]).is_err());
    }
}
