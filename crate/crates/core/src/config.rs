//! Run configuration: `key = value` lines grouped under `[section]` headers.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::decoder::DecoderConfig;
use crate::encoder::VitConfig;
use crate::error::{Error, Result};
use crate::latent_generator::MixerConfig;
use crate::optim::OptimConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Ssl,
    StageA,
    StageB,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Ssl => "ssl",
            Phase::StageA => "stage_a",
            Phase::StageB => "stage_b",
        })
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ssl" => Ok(Phase::Ssl),
            "stage_a" => Ok(Phase::StageA),
            "stage_b" => Ok(Phase::StageB),
            _ => Err(Error::Config(format!("unknown phase `{}`", s))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    MnistIdx,
    Cifar10Bin,
    ImageDir,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub format: DatasetFormat,
    /// Image file (IDX), record file (CIFAR) or directory.
    pub path: String,
    /// IDX label file; unused by the other formats.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels_path: Option<String>,
    /// Train / held-out fractions, summing to 1.
    pub split: Vec<f64>,
    pub num_classes: usize,
    /// Keep only the first `limit` images.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            format: DatasetFormat::MnistIdx,
            path: String::new(),
            labels_path: None,
            split: vec![0.9, 0.1],
            num_classes: 10,
            limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub nfe_decode: usize,
    pub nfe_latent: usize,
    pub cfg_scale: f64,
    pub count: usize,
    pub frames: usize,
    pub grid_cols: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            nfe_decode: 20,
            nfe_latent: 50,
            cfg_scale: 3.5,
            count: 16,
            frames: 8,
            grid_cols: 8,
        }
    }
}

/// Every setting of a training or inference run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub phase: Phase,
    pub seed: u64,
    pub batch_size: usize,
    pub steps: u64,
    pub lambda: f64,
    /// Encoder partition during Stage A: `cls_only`, `all` or `none`.
    pub partition: String,
    pub token_index: usize,
    pub temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ema_decay: Option<f64>,
    pub eval_every: u64,
    pub eval_images: usize,
    pub eval_nfe: usize,
    pub dataset: DatasetSpec,
    pub optim: OptimConfig,
    pub encoder: VitConfig,
    pub decoder: DecoderConfig,
    pub mixer: MixerConfig,
    pub sample: SampleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            phase: Phase::StageA,
            seed: 0,
            batch_size: 128,
            steps: 100_000,
            lambda: 0.1,
            partition: "cls_only".into(),
            token_index: 0,
            temperature: 0.2,
            ema_decay: None,
            eval_every: 1000,
            eval_images: 256,
            eval_nfe: 20,
            dataset: DatasetSpec::default(),
            optim: OptimConfig::default(),
            encoder: VitConfig::default(),
            decoder: DecoderConfig::default(),
            mixer: MixerConfig::default(),
            sample: SampleConfig::default(),
        }
    }
}

/// Keys that must be present whenever their section appears in the file.
const REQUIRED_IN_SECTION: &[(&str, &str)] = &[("dataset", "path")];

fn known_keys() -> Vec<String> {
    let mut full = RunConfig::default();
    full.ema_decay = Some(0.999);
    full.dataset.labels_path = Some(String::new());
    full.dataset.limit = Some(0);
    let v = Value::try_from(&full).expect("config serializes");
    let mut out = Vec::new();
    flatten_keys("", &v, &mut out);
    out
}

fn flatten_keys(prefix: &str, v: &Value, out: &mut Vec<String>) {
    if let Value::Table(t) = v {
        for (k, child) in t {
            let key = if prefix.is_empty() {
                k.clone()
            } else {
                format!("{prefix}.{k}")
            };
            if child.is_table() {
                flatten_keys(&key, child, out);
            } else {
                out.push(key);
            }
        }
    }
}

fn nearest<'a>(key: &str, candidates: &'a [String]) -> Option<&'a str> {
    candidates
        .iter()
        .map(|c| (strsim::levenshtein(key, c), c))
        .min_by_key(|(d, _)| *d)
        .map(|(_, c)| c.as_str())
}

fn check_keys(table: &Table) -> Result<()> {
    let known = known_keys();
    let mut present = Vec::new();
    flatten_keys("", &Value::Table(table.clone()), &mut present);
    for key in &present {
        if !known.contains(key) {
            let hint = nearest(key, &known)
                .map(|n| format!(" (did you mean `{}`?)", n))
                .unwrap_or_default();
            return Err(Error::Config(format!("unknown key `{}`{}", key, hint)));
        }
    }
    // sections given as scalars would be caught by serde; check required keys
    for (section, key) in REQUIRED_IN_SECTION {
        if let Some(Value::Table(t)) = table.get(*section) {
            if !t.contains_key(*key) {
                return Err(Error::Config(format!(
                    "missing required key `{}.{}`",
                    section, key
                )));
            }
        }
    }
    Ok(())
}

fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::Config(format!("empty override key `{}`", key)))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{}` is not a section", p)))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Parse a `key=value` override; the value is read as a TOML literal and
/// falls back to a bare string.
pub fn parse_override(kv: &str) -> Result<(String, Value)> {
    let (k, v) = kv
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{}` is not key=value", kv)))?;
    let k = k.trim().to_string();
    let v = v.trim();
    let value = match toml::from_str::<Table>(&format!("v = {v}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(v.to_string()),
    };
    Ok((k, value))
}

/// Parse configuration text, applying `key=value` overrides on top.
pub fn parse_config_str(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut table: Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    for o in overrides {
        let (k, v) = parse_override(o)?;
        set_dotted(&mut table, &k, v)?;
    }
    check_keys(&table)?;
    let cfg: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text, &[])
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let s: f64 = self.dataset.split.iter().sum();
        if self.dataset.split.len() != 2 || (s - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "dataset.split must be two fractions summing to 1, got {:?}",
                self.dataset.split
            )));
        }
        if self.dataset.split.iter().any(|f| *f < 0.0) {
            return Err(Error::Config("dataset.split fractions must be >= 0".into()));
        }
        if let Some(d) = self.ema_decay {
            if !(d > 0.0 && d < 1.0) {
                return Err(Error::Config(format!("ema_decay {} outside (0, 1)", d)));
            }
        }
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        // TOML integers are signed 64-bit, so larger seeds could not be written back.
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seed {} exceeds {}", self.seed, i64::MAX)));
        }
        self.partition
            .parse::<crate::params::PartitionMode>()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.encoder.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.decoder.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.mixer.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.decoder.image_size != self.encoder.image_size
            || self.decoder.channels != self.encoder.channels
        {
            return Err(Error::Config(
                "encoder and decoder image size/channels must match".into(),
            ));
        }
        if self.mixer.token_dim != self.encoder.embed_dim {
            return Err(Error::Config(format!(
                "mixer.token_dim {} must equal encoder.embed_dim {}",
                self.mixer.token_dim, self.encoder.embed_dim
            )));
        }
        if self.token_index >= self.encoder.extra_tokens {
            return Err(Error::Config("token_index must be < encoder.extra_tokens".into()));
        }
        Ok(())
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn partition_mode(&self) -> crate::params::PartitionMode {
        self.partition.parse().expect("validated partition")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        let c = parse_config_str("", &[]).unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn lambda_is_read() {
        let c = parse_config_str("lambda = 0.5", &[]).unwrap();
        assert_eq!(c.lambda, 0.5);
    }

    #[test]
    fn misspelled_key_names_nearest() {
        let e = parse_config_str("lamda = 0.5", &[]).unwrap_err().to_string();
        assert!(e.contains("`lamda`") && e.contains("`lambda`"), "{}", e);
        let e = parse_config_str("[encoder]\nembed_dimm = 3", &[]).unwrap_err().to_string();
        assert!(e.contains("encoder.embed_dim"), "{}", e);
    }

    #[test]
    fn dataset_section_requires_path() {
        let e = parse_config_str("[dataset]\nnum_classes = 10", &[]).unwrap_err();
        assert!(e.to_string().contains("dataset.path"));
    }

    #[test]
    fn overrides_apply() {
        let c = parse_config_str("", &["encoder.depth=2".into(), "partition=none".into()]).unwrap();
        assert_eq!(c.encoder.depth, 2);
        assert_eq!(c.partition, "none");
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::default();
        c.ema_decay = Some(0.99);
        c.lambda = 0.123456789;
        c.dataset.labels_path = Some("x".into());
        let back = parse_config_str(&c.to_toml(), &[]).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn bad_split_rejected() {
        assert!(parse_config_str("[dataset]\npath='x'\nsplit=[0.5, 0.4]", &[]).is_err());
    }
}
