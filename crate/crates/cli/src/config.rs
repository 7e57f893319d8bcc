//! Run configuration: model, training and data settings merged from a TOML
//! file and command-line overrides into one flat `section.key` namespace.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use evtf::backbone::ModelConfig;
use evtf::training::TrainConfig;
use evtf::{Error, Result};

/// Environment variable consulted when `data.root` is unset.
pub const NMNIST_ROOT_VAR: &str = "NMNIST_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Synth,
    /// Class directories of 5-byte ATIS records under `Train/` and `Test/`.
    Nmnist,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub dataset: DatasetKind,
    pub root: Option<PathBuf>,
    /// Synthetic only.
    pub classes: usize,
    /// Synthetic sample count, or a per-class cap for recorded data.
    pub train_per_class: Option<usize>,
    pub test_per_class: Option<usize>,
    /// Events per synthetic recording.
    pub events: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dataset: DatasetKind::Synth,
            root: None,
            classes: 4,
            train_per_class: Some(200),
            test_per_class: Some(100),
            events: 512,
        }
    }
}

fn parse_count(key: &str, value: &str) -> Result<Option<usize>> {
    match value.trim() {
        "all" | "none" => Ok(None),
        v => v.parse().map(Some).map_err(|_| Error::Config(format!("`{key}` expects an integer or `all`, got `{value}`"))),
    }
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value.trim().parse().map_err(|_| Error::Config(format!("`{key}` expects an integer, got `{value}`")))
}

impl DataConfig {
    pub const KEYS: [&'static str; 6] =
        ["data.classes", "data.dataset", "data.events", "data.root", "data.test_per_class", "data.train_per_class"];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data.classes" => self.classes = parse_usize(key, value)?,
            "data.dataset" => {
                self.dataset = match value.trim() {
                    "synth" => DatasetKind::Synth,
                    "nmnist" => DatasetKind::Nmnist,
                    other => return Err(Error::Config(format!("unknown dataset `{other}` (synth, nmnist)"))),
                }
            }
            "data.events" => self.events = parse_usize(key, value)?,
            "data.root" => self.root = Some(value.trim()).filter(|v| !v.is_empty()).map(PathBuf::from),
            "data.test_per_class" => self.test_per_class = parse_count(key, value)?,
            "data.train_per_class" => self.train_per_class = parse_count(key, value)?,
            other => return Err(Error::Config(format!("unknown data key `{other}`"))),
        }
        Ok(())
    }

    pub fn entries(&self) -> BTreeMap<&'static str, String> {
        let count = |c: Option<usize>| c.map_or("all".to_string(), |n| n.to_string());
        let values = [
            self.classes.to_string(),
            match self.dataset {
                DatasetKind::Synth => "synth".into(),
                DatasetKind::Nmnist => "nmnist".into(),
            },
            self.events.to_string(),
            self.root.as_ref().map_or(String::new(), |p| p.display().to_string()),
            count(self.test_per_class),
            count(self.train_per_class),
        ];
        Self::KEYS.into_iter().zip(values).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset == DatasetKind::Synth {
            if self.classes == 0 || self.events == 0 {
                return Err(Error::Config("synthetic data needs positive classes and events".into()));
            }
            if self.train_per_class.is_none() || self.test_per_class.is_none() {
                return Err(Error::Config("synthetic data needs explicit per-class counts".into()));
            }
        }
        Ok(())
    }

    /// `data.root`, falling back to `$NMNIST_ROOT`.
    pub fn resolved_root(&self) -> Option<PathBuf> {
        self.root.clone().or_else(|| std::env::var_os(NMNIST_ROOT_VAR).map(PathBuf::from))
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    explicit: BTreeSet<String>,
}

const SECTIONS: [&str; 4] = ["attention", "data", "model", "train"];

/// Renders a TOML value as the string form the `set` parsers accept.
/// Arrays become comma lists; nested arrays become `a:b` pairs.
fn scalar(key: &str, v: &toml::Value) -> Result<String> {
    Ok(match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(f) => f.to_string(),
        toml::Value::Boolean(b) => b.to_string(),
        toml::Value::Array(items) => {
            let parts: Result<Vec<String>> = items
                .iter()
                .map(|it| match it {
                    toml::Value::Array(pair) => {
                        Ok(pair.iter().map(|p| scalar(key, p)).collect::<Result<Vec<_>>>()?.join(":"))
                    }
                    other => scalar(key, other),
                })
                .collect();
            parts?.join(",")
        }
        _ => return Err(Error::Config(format!("`{key}` has an unsupported value type"))),
    })
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key.split_once('.').map(|(s, _)| s) {
            Some("model" | "attention") => self.model.set(key, value)?,
            Some("train") => self.train.set(key, value)?,
            Some("data") => self.data.set(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair.split_once('=').ok_or_else(|| Error::Config(format!("override `{pair}` is not key=value")))?;
        self.set(k.trim(), v)
    }

    /// Whether `key` was given by a file or flag rather than defaulted.
    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    pub fn merge_toml(&mut self, text: &str) -> Result<()> {
        let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for (section, body) in &table {
            if !SECTIONS.contains(&section.as_str()) {
                return Err(Error::Config(format!("unknown section `[{section}]`")));
            }
            let toml::Value::Table(body) = body else {
                return Err(Error::Config(format!("`{section}` must be a section")));
            };
            for (k, v) in body {
                let key = format!("{section}.{k}");
                self.set(&key, &scalar(&key, v)?)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        cfg.merge_toml(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()
    }

    pub fn entries(&self) -> BTreeMap<&'static str, String> {
        let mut all = self.model.entries();
        all.extend(self.train.entries());
        all.extend(self.data.entries());
        all
    }

    /// Sectioned TOML with every key, values as strings; sorted and
    /// therefore byte-stable.
    pub fn to_toml(&self) -> String {
        let mut root = toml::Table::new();
        for (key, value) in self.entries() {
            let (section, k) = key.split_once('.').expect("keys are sectioned");
            root.entry(section)
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .expect("sections are tables")
                .insert(k.to_string(), toml::Value::String(value));
        }
        root.to_string()
    }
}
