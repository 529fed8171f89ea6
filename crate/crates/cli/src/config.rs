//! Run configuration and its layering: defaults, then a `key = value`
//! file, then command-line flags, then `MEASPIPE_*` environment variables.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use measpipe::modcls::{ModifierHyperparams, ThresholdMode};
use measpipe::tagheads::{EmissionMode, TaggerHyperparams};
use measpipe::unitdet::UnitHyperparams;
use measpipe::workflow::{EncoderSpec, TokenizerKind, TrainSettings};

/// Bad arguments or configuration. Reported with exit code 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Frozen hashed features; needs no training data.
    Hash,
    /// Trainable token and position embeddings.
    Embedding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub text_dir: Option<PathBuf>,
    pub tsv_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub split_ratio: f64,
    /// Seeds the split and every model.
    pub seed: u64,
    pub device: String,
    pub tokenizer: TokenizerKind,
    pub vocab_file: Option<PathBuf>,
    pub encoder: EncoderKind,
    pub hidden_size: usize,
    pub emissions: EmissionMode,
    pub threshold_mode: ThresholdMode,
    pub tagger: TaggerHyperparams,
    pub unit: UnitHyperparams,
    pub modifier: ModifierHyperparams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            text_dir: None,
            tsv_dir: None,
            out_dir: PathBuf::from("runs"),
            split_ratio: 0.9,
            seed: 42,
            device: "cpu".into(),
            tokenizer: TokenizerKind::Wordpiece,
            vocab_file: None,
            encoder: EncoderKind::Hash,
            hidden_size: measpipe::encoder::DEFAULT_HIDDEN,
            emissions: EmissionMode::Softmax,
            threshold_mode: ThresholdMode::Fixed,
            tagger: TaggerHyperparams::default(),
            unit: UnitHyperparams::default(),
            modifier: ModifierHyperparams::default(),
        }
    }
}

/// Keys filled in from top-level settings rather than set directly.
const DERIVED: &[&str] = &[
    "tagger.seed",
    "unit.seed",
    "modifier.seed",
    "tagger.emissions",
    "modifier.threshold_mode",
];

/// Where an override came from, for error messages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Source {
    File(PathBuf, usize),
    Flag,
    Env(String),
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::File(p, line) => write!(f, "{}:{line}", p.display()),
            Source::Flag => f.write_str("command line"),
            Source::Env(name) => write!(f, "environment variable {name}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Override {
    pub source: Source,
    pub key: String,
    pub value: String,
}

impl RunConfig {
    /// Every settable dotted key, in serialization order.
    pub fn keys() -> Vec<String> {
        let mut out = Vec::new();
        flatten("", &serde_json::to_value(RunConfig::default()).expect("serializable"), &mut out);
        out.retain(|k| !DERIVED.contains(&k.as_str()));
        out
    }

    /// Apply overrides in order; later ones win.
    pub fn layered(&self, overrides: &[Override]) -> Result<RunConfig> {
        let mut value = serde_json::to_value(self).expect("serializable");
        for o in overrides {
            if DERIVED.contains(&o.key.as_str()) {
                return Err(usage(format!("{}: {} is derived from the top-level setting", o.source, o.key)));
            }
            set_key(&mut value, &o.key, &o.value).map_err(|e| usage(format!("{}: {e}", o.source)))?;
        }
        let mut cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| usage(format!("invalid configuration: {e}")))?;
        cfg.propagate();
        cfg.validate()?;
        Ok(cfg)
    }

    fn propagate(&mut self) {
        self.tagger.seed = self.seed;
        self.unit.seed = self.seed;
        self.modifier.seed = self.seed;
        self.tagger.emissions = self.emissions;
        self.modifier.threshold_mode = self.threshold_mode;
    }

    pub fn validate(&self) -> Result<()> {
        if self.device != "cpu" {
            return Err(usage(format!("device {:?} is not available; only \"cpu\" is supported", self.device)));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(usage(format!("split_ratio {} must lie strictly between 0 and 1", self.split_ratio)));
        }
        if self.hidden_size == 0 {
            return Err(usage("hidden_size must be positive"));
        }
        self.tagger.validate().map_err(|e| usage(format!("tagger: {e}")))?;
        self.unit.validate().map_err(|e| usage(format!("unit: {e}")))?;
        self.modifier.validate().map_err(|e| usage(format!("modifier: {e}")))?;
        Ok(())
    }

    pub fn train_settings(&self) -> TrainSettings {
        let (seed, hidden_size) = (self.seed, self.hidden_size);
        TrainSettings {
            encoder: match self.encoder {
                EncoderKind::Hash => EncoderSpec::Hash { seed, hidden_size },
                EncoderKind::Embedding => EncoderSpec::Embedding { seed, hidden_size },
            },
            tagger: self.tagger.clone(),
            unit: self.unit.clone(),
            modifier: self.modifier.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

/// Set a dotted key, reading `raw` according to the current value's type.
/// Strings and unset paths take `raw` verbatim.
fn set_key(root: &mut Value, key: &str, raw: &str) -> Result<(), String> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map: &mut Map<String, Value> = node.as_object_mut().ok_or_else(|| format!("unknown key {key:?}"))?;
        let child = map.get_mut(*part).ok_or_else(|| format!("unknown key {key:?}"))?;
        if i + 1 == parts.len() {
            *child = match child {
                Value::Null | Value::String(_) => Value::String(raw.to_string()),
                Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| format!("{key}: expected true or false, got {raw:?}"))?),
                Value::Number(_) => {
                    let n: serde_json::Number =
                        raw.parse().map_err(|_| format!("{key}: expected a number, got {raw:?}"))?;
                    Value::Number(n)
                }
                _ => return Err(format!("{key} is a section, not a value")),
            };
            return Ok(());
        }
        node = child;
    }
    Err(format!("unknown key {key:?}"))
}

/// Parse `key = value` lines. `#` starts a comment; blank lines are skipped.
pub fn read_config_file(path: &Path) -> Result<Vec<Override>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config file {}: {e}", path.display())))?;
    parse_config(path, &text)
}

pub fn parse_config(path: &Path, text: &str) -> Result<Vec<Override>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let source = Source::File(path.to_path_buf(), i + 1);
        let Some((key, value)) = line.split_once('=') else {
            return Err(usage(format!("{source}: expected `key = value`")));
        };
        let value = value.trim();
        let value = value
            .strip_prefix('"')
            .and_then(|v| v.strip_suffix('"'))
            .unwrap_or(value);
        out.push(Override {
            source,
            key: key.trim().to_string(),
            value: value.to_string(),
        });
    }
    Ok(out)
}

/// `MEASPIPE_<KEY>` with dots written as double underscores, e.g.
/// `MEASPIPE_TAGGER__EPOCHS`.
pub fn env_name(key: &str) -> String {
    format!("MEASPIPE_{}", key.to_uppercase().replace('.', "__"))
}

pub fn env_overrides() -> Vec<Override> {
    RunConfig::keys()
        .into_iter()
        .filter_map(|key| {
            let name = env_name(&key);
            std::env::var(&name).ok().map(|value| Override {
                source: Source::Env(name),
                key,
                value,
            })
        })
        .collect()
}

/// `KEY=VALUE` from `--set`.
pub fn parse_set(arg: &str) -> Result<Override> {
    let (key, value) = arg
        .split_once('=')
        .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {arg:?}")))?;
    Ok(Override {
        source: Source::Flag,
        key: key.trim().to_string(),
        value: value.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flag(key: &str, value: &str) -> Override {
        Override {
            source: Source::Flag,
            key: key.into(),
            value: value.into(),
        }
    }

    #[test]
    fn later_layers_win() {
        let file = parse_config(Path::new("c.conf"), "seed = 7 # comment\n\n# whole line\ntagger.epochs = 3\n").unwrap();
        let mut all = file;
        all.push(flag("seed", "9"));
        let cfg = RunConfig::default().layered(&all).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.tagger.seed, 9);
        assert_eq!(cfg.tagger.epochs, 3);
    }

    #[test]
    fn typed_values_are_checked() {
        let d = RunConfig::default();
        assert!(d.layered(&[flag("tagger.epochs", "many")]).unwrap_err().downcast_ref::<Usage>().is_some());
        assert!(d.layered(&[flag("nope", "1")]).is_err());
        assert!(d.layered(&[flag("tagger.seed", "1")]).is_err());
        assert!(d.layered(&[flag("emissions", "sideways")]).is_err());
        assert!(d.layered(&[flag("device", "gpu")]).is_err());
        let cfg = d
            .layered(&[flag("text_dir", "a/b"), flag("emissions", "logits"), flag("tagger.learning_rate", "0.01")])
            .unwrap();
        assert_eq!(cfg.text_dir, Some(PathBuf::from("a/b")));
        assert_eq!(cfg.tagger.emissions, EmissionMode::Logits);
        assert_eq!(cfg.tagger.learning_rate, 0.01);
    }

    #[test]
    fn keys_and_env_names() {
        let keys = RunConfig::keys();
        assert!(keys.contains(&"tagger.epochs".to_string()));
        assert!(!keys.contains(&"unit.seed".to_string()));
        assert_eq!(env_name("tagger.epochs"), "MEASPIPE_TAGGER__EPOCHS");
    }

    #[test]
    fn malformed_lines_are_usage_errors() {
        let err = parse_config(Path::new("c.conf"), "seed 7\n").unwrap_err();
        assert!(err.to_string().contains("c.conf:1"));
    }
}
