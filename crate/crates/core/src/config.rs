//! Experiment configuration: a TOML file, then `PROTOABSTAIN_*` environment
//! overrides, then command-line overrides.
//!
//! Nested keys use `.` on the command line (`cal.lr=0.05`) and `__` in
//! environment names (`PROTOABSTAIN_CAL__LR=0.05`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cal::{BandMode, CalConfig};
use crate::data::{Modality, SynthConfig};
use crate::error::{Error, Result};
use crate::protopnet::ProtoPNetConfig;
use crate::tree::{AlpConfig, TreeTrainConfig};

pub const ENV_PREFIX: &str = "PROTOABSTAIN_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Dataset manifest; a synthetic dataset is generated when absent.
    pub dataset: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub modality: Modality,
    /// Conformal confidence for bands and decisions.
    pub alpha: f64,
    pub alphas: Vec<f64>,
    pub band_mode: BandMode,
    pub bonferroni: bool,
    /// Train/validation/test ratios used when splitting.
    pub split_ratios: [f64; 3],
    pub min_per_class: usize,
    /// Seeds for ablations.
    pub seeds: Vec<u64>,
    pub synth: SynthConfig,
    pub protopnet: ProtoPNetConfig,
    pub prototree: TreeTrainConfig,
    pub cal: CalConfig,
    pub alp: AlpConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            output_dir: PathBuf::from("run"),
            seed: 0,
            modality: Modality::Image,
            alpha: 0.05,
            alphas: vec![0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9],
            band_mode: BandMode::PerLogit,
            bonferroni: false,
            split_ratios: [0.4, 0.2, 0.4],
            min_per_class: 1,
            seeds: vec![1, 2, 3],
            synth: SynthConfig::default(),
            protopnet: ProtoPNetConfig::default(),
            prototree: TreeTrainConfig::default(),
            cal: CalConfig::default(),
            alp: AlpConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1), got {}", self.alpha)));
        }
        if let Some(a) = self.alphas.iter().find(|a| !(0.0..1.0).contains(*a)) {
            return Err(Error::Config(format!("alphas must lie in [0, 1), got {a}")));
        }
        let sum: f64 = self.split_ratios.iter().sum();
        if self.split_ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("split_ratios {:?} must sum to 1", self.split_ratios)));
        }
        if self.min_per_class == 0 {
            return Err(Error::Config("min_per_class must be at least 1".into()));
        }
        self.synth.validate().map_err(|e| Error::Config(format!("synth: {e}")))?;
        self.protopnet.validate()?;
        self.prototree.validate()?;
        self.cal.validate()?;
        self.alp.validate()?;
        Ok(())
    }

    /// Reads `path` (if any), applies environment then explicit overrides,
    /// and validates the result.
    pub fn resolve(path: Option<&Path>, env: &[(String, String)], overrides: &[(String, String)]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let table: toml::Table =
                    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                toml::Value::Table(table)
            }
            None => toml::Value::Table(toml::Table::new()),
        };
        for (name, raw) in env {
            if let Some(key) = name.strip_prefix(ENV_PREFIX) {
                let path: Vec<String> = key.split("__").map(|s| s.to_ascii_lowercase()).collect();
                set_path(&mut value, &path, raw)?;
            }
        }
        for (key, raw) in overrides {
            let path: Vec<String> = key.split('.').map(str::to_string).collect();
            set_path(&mut value, &path, raw)?;
        }
        let cfg: ExperimentConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string().trim_end().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Parses an override as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut toml::Value, path: &[String], raw: &str) -> Result<()> {
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key {:?}", path.join("."))));
    }
    let mut node = root;
    for part in &path[..path.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {:?} descends into a non-table", path.join("."))))?;
        node = table
            .entry(part.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("override {:?} descends into a non-table", path.join("."))))?;
    table.insert(path[path.len() - 1].clone(), parse_value(raw));
    Ok(())
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}
