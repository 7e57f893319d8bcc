use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::attention::AttentionConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Local,
    Sparse,
    Global,
}

impl BlockKind {
    pub fn letter(self) -> char {
        match self {
            BlockKind::Local => 'L',
            BlockKind::Sparse => 'S',
            BlockKind::Global => 'G',
        }
    }

    pub fn from_letter(c: char) -> Result<Self> {
        match c {
            'L' => Ok(BlockKind::Local),
            'S' => Ok(BlockKind::Sparse),
            'G' => Ok(BlockKind::Global),
            other => Err(Error::Config(format!("unknown block letter `{other}` (expected L, S or G)"))),
        }
    }
}

/// How an `L` immediately followed by `S` in a stage is combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Fusion {
    /// `X + S(X + L(X))`: the blocks applied one after the other.
    #[default]
    Serial,
    /// `X + L(X) + S(X)`.
    Parallel,
    /// `X + MLP(concat(L(X), S(X)))`.
    Concat,
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::Serial => "serial",
            Fusion::Parallel => "parallel",
            Fusion::Concat => "concat",
        })
    }
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "serial" => Ok(Fusion::Serial),
            "parallel" => Ok(Fusion::Parallel),
            "concat" => Ok(Fusion::Concat),
            other => Err(Error::Config(format!("unknown fusion `{other}` (serial, parallel or concat)"))),
        }
    }
}

/// Bound of the uniform weight initialization. Biases always use
/// `1/sqrt(fan_in)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Init {
    /// `1/sqrt(fan_in)`.
    FanIn,
    /// `sqrt(6/fan_in)`, variance preserving through ReLU layers.
    #[default]
    He,
}

impl Init {
    pub fn weight_gain(self) -> f64 {
        match self {
            Init::FanIn => 1.0,
            Init::He => 6f64.sqrt(),
        }
    }
}

impl fmt::Display for Init {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Init::FanIn => "fan_in",
            Init::He => "he",
        })
    }
}

impl FromStr for Init {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fan_in" => Ok(Init::FanIn),
            "he" => Ok(Init::He),
            other => Err(Error::Config(format!("unknown init `{other}` (fan_in or he)"))),
        }
    }
}

/// Block sequence of every stage, written like `LS,LSG,LSG,L`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Structure(pub Vec<Vec<BlockKind>>);

impl Default for Structure {
    fn default() -> Self {
        "LS,LSG,LSG,L".parse().unwrap()
    }
}

impl FromStr for Structure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let cleaned: String = s.chars().filter(|c| !c.is_whitespace() && !"[]\"'".contains(*c)).collect();
        let stages = cleaned
            .split(',')
            .map(|stage| {
                if stage.is_empty() {
                    return Err(Error::Config(format!("empty stage in structure `{s}`")));
                }
                stage.chars().map(BlockKind::from_letter).collect()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Structure(stages))
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|s| s.iter().map(|b| b.letter()).collect()).collect();
        f.write_str(&parts.join(","))
    }
}

pub const NUM_STAGES: usize = 4;
/// Smallest stream the backbone accepts; shorter streams are padded.
pub const MIN_EVENTS: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Stage-1 feature channels.
    pub channels: usize,
    pub structure: Structure,
    /// Channel multiplier of each sampling layer.
    pub expansions: Vec<usize>,
    /// Event reduction factor of each sampling layer; also its group size.
    pub downsample: usize,
    pub attention: AttentionConfig,
    pub num_classes: usize,
    pub head_widths: Vec<usize>,
    pub fusion: Fusion,
    pub init: Init,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 32,
            structure: Structure::default(),
            expansions: vec![4, 2, 2],
            downsample: 4,
            attention: AttentionConfig::default(),
            num_classes: 10,
            head_widths: vec![256],
            fusion: Fusion::Serial,
            init: Init::default(),
        }
    }
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value.trim().parse().map_err(|_| Error::Config(format!("`{key}` expects an integer, got `{value}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    let v = value.trim().trim_start_matches('[').trim_end_matches(']');
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse_usize(key, p)).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ModelConfig {
    /// Keys accepted by [`ModelConfig::set`].
    pub const KEYS: [&'static str; 13] = [
        "attention.neighbors",
        "attention.rate",
        "attention.spconv_channels",
        "attention.spconv_kernel",
        "attention.window",
        "model.channels",
        "model.downsample",
        "model.expansions",
        "model.fusion",
        "model.head_widths",
        "model.init",
        "model.num_classes",
        "model.structure",
    ];

    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        if self.channels == 0 || self.num_classes == 0 {
            return Err(Error::Config("channels and num_classes must be positive".into()));
        }
        if self.structure.0.len() != NUM_STAGES {
            return Err(Error::Config(format!(
                "structure `{}` has {} stages, expected {NUM_STAGES}",
                self.structure,
                self.structure.0.len()
            )));
        }
        if self.expansions.len() != NUM_STAGES - 1 || self.expansions.contains(&0) {
            return Err(Error::Config(format!(
                "expansions must be {} positive integers, got {:?}",
                NUM_STAGES - 1,
                self.expansions
            )));
        }
        if self.downsample < 2 {
            return Err(Error::Config("downsample must be at least 2".into()));
        }
        if self.head_widths.contains(&0) {
            return Err(Error::Config("head widths must be positive".into()));
        }
        let needs_spconv = self.structure.0.iter().any(|s| s.contains(&BlockKind::Sparse));
        if needs_spconv && self.attention.spconv_channels.is_empty() {
            return Err(Error::Config("spconv_channels is empty but the structure uses S".into()));
        }
        Ok(())
    }

    /// Feature channels of each stage.
    pub fn stage_channels(&self) -> Vec<usize> {
        let mut c = vec![self.channels];
        for &e in &self.expansions {
            c.push(c.last().unwrap() * e);
        }
        c
    }

    pub fn final_channels(&self) -> usize {
        *self.stage_channels().last().unwrap()
    }

    /// Sparse-convolution width used by stage `s`; stages past the end of
    /// the list reuse its last entry.
    pub fn spconv_width(&self, stage: usize) -> usize {
        let c = &self.attention.spconv_channels;
        c[stage.min(c.len() - 1)]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let a = &mut self.attention;
        match key {
            "attention.neighbors" => a.neighbors = parse_usize(key, value)?,
            "attention.rate" => a.rate = parse_usize(key, value)?,
            "attention.spconv_channels" => a.spconv_channels = parse_list(key, value)?,
            "attention.spconv_kernel" => a.spconv_kernel = parse_usize(key, value)?,
            "attention.window" => a.window = parse_usize(key, value)?,
            "model.channels" => self.channels = parse_usize(key, value)?,
            "model.downsample" => self.downsample = parse_usize(key, value)?,
            "model.expansions" => self.expansions = parse_list(key, value)?,
            "model.fusion" => self.fusion = value.trim().parse()?,
            "model.head_widths" => self.head_widths = parse_list(key, value)?,
            "model.init" => self.init = value.trim().parse()?,
            "model.num_classes" => self.num_classes = parse_usize(key, value)?,
            "model.structure" => self.structure = value.parse()?,
            other => return Err(Error::Config(format!("unknown model key `{other}`"))),
        }
        Ok(())
    }

    pub fn entries(&self) -> BTreeMap<&'static str, String> {
        let a = &self.attention;
        let values = [
            a.neighbors.to_string(),
            a.rate.to_string(),
            join(&a.spconv_channels),
            a.spconv_kernel.to_string(),
            a.window.to_string(),
            self.channels.to_string(),
            self.downsample.to_string(),
            join(&self.expansions),
            self.fusion.to_string(),
            join(&self.head_widths),
            self.init.to_string(),
            self.num_classes.to_string(),
            self.structure.to_string(),
        ];
        Self::KEYS.into_iter().zip(values).collect()
    }

    /// `key=value` lines sorted by key.
    pub fn to_canonical(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Parses [`ModelConfig::to_canonical`] output. Every key must be present.
    pub fn from_canonical(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let mut seen = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed config line `{line}`")))?;
            cfg.set(k.trim(), v)?;
            seen.insert(k.trim().to_string(), ());
        }
        if let Some(missing) = Self::KEYS.iter().find(|k| !seen.contains_key(**k)) {
            return Err(Error::Config(format!("config is missing `{missing}`")));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
