//! The `evtf` command line: data inspection, synthetic data generation,
//! training, evaluation, gradient verification and benchmarking.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or configuration
//! error, 3 training divergence, 4 incompatible checkpoint.

pub mod commands;
pub mod config;
pub mod data;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use evtf::Error;

pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "evtf", version, about = "Event transformer for event-camera classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes config.toml, metrics.tsv and model.ckpt under --out.
    Train(Common),
    /// Report top-1 accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
    },
    /// Finite-difference check of every differentiable op, block and the full network.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt the backward rule of this op (harness self-test).
        #[arg(long)]
        fault: Option<String>,
    },
    /// Parameter and FLOP counts plus median forward latency.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Attention window of the sparse blocks.
        #[arg(long)]
        ablate_window: Option<usize>,
        #[arg(long, default_value_t = evtf::backbone::REFERENCE_EVENTS)]
        events: usize,
        #[arg(long, default_value_t = 100)]
        runs: usize,
    },
    /// Summarise an N-MNIST style .bin recording.
    Inspect {
        file: PathBuf,
        /// Print the first n events.
        #[arg(long)]
        dump: Option<usize>,
    },
    /// Write the synthetic dataset as Train/<class>/*.bin and Test/<class>/*.bin.
    MakeSynth(Common),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FusionArg {
    Concat,
    Parallel,
    Serial,
}

/// Flags shared by the data and model commands. Precedence, lowest first:
/// defaults, `--config`, dedicated flags, `--set`.
#[derive(Debug, Default, Args)]
pub struct Common {
    /// TOML file with [model], [attention], [train] and [data] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `synth`, `nmnist`, or a directory holding Train/ and Test/.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Blocks per stage, e.g. `LS,LSG,LSG,L`.
    #[arg(long)]
    pub structure: Option<String>,
    #[arg(long, value_enum)]
    pub fusion: Option<FusionArg>,
    /// Temporal neighbours of the local blocks.
    #[arg(long = "M")]
    pub neighbors: Option<usize>,
    /// Attention window of the sparse blocks.
    #[arg(long)]
    pub window: Option<usize>,
    /// Sampling rate of the global blocks.
    #[arg(long)]
    pub rate: Option<usize>,
    /// Override any config key, e.g. `--set train.epochs=20`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl Common {
    pub fn resolve(&self) -> evtf::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.set("train.seed", &seed.to_string())?;
        }
        match self.dataset.as_deref() {
            None => {}
            Some(kind @ ("synth" | "nmnist")) => cfg.set("data.dataset", kind)?,
            Some(path) => {
                cfg.set("data.dataset", "nmnist")?;
                cfg.set("data.root", path)?;
            }
        }
        if let Some(s) = &self.structure {
            cfg.set("model.structure", s)?;
        }
        if let Some(f) = self.fusion {
            let name = f.to_possible_value().expect("no skipped variants");
            cfg.set("model.fusion", name.get_name())?;
        }
        for (key, v) in [("attention.neighbors", self.neighbors), ("attention.window", self.window), ("attention.rate", self.rate)] {
            if let Some(v) = v {
                cfg.set(key, &v.to_string())?;
            }
        }
        for pair in &self.overrides {
            cfg.set_pair(pair)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A command failure with its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure { code: 2, message: message.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Checkpoint(_) | Error::CheckpointVersion { .. } => 4,
        Error::Divergence { .. } | Error::NonFinite(_) => 3,
        Error::Shape(_) => 1,
        Error::InvalidArgument(_) | Error::Format(_) | Error::EmptyStream | Error::Config(_) | Error::Io(_) => 2,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure { code: exit_code(&e), message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train(common) => commands::train(&common),
        Command::Eval { common, checkpoint, split } => commands::eval(&common, &checkpoint, split),
        Command::Gradcheck { instances, seed, fault } => commands::gradcheck(instances, seed, fault.as_deref()),
        Command::Bench { common, ablate_window, events, runs } => commands::bench(&common, ablate_window, events, runs),
        Command::Inspect { file, dump } => commands::inspect(&file, dump),
        Command::MakeSynth(common) => commands::make_synth(&common),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_from<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {f}");
            f.code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_structure_flag_is_a_no_op() {
        let flagged = Common { structure: Some("LS,LSG,LSG,L".into()), ..Default::default() };
        assert_eq!(flagged.resolve().unwrap().entries(), RunConfig::default().entries());
    }

    #[test]
    fn flags_override_the_file_and_set_overrides_flags() {
        let dir = std::env::temp_dir().join(format!("evtf-cli-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("c.toml");
        std::fs::write(&path, "[attention]\nwindow = 5\nrate = 8\n").unwrap();
        let c = Common {
            config: Some(path),
            window: Some(7),
            rate: Some(2),
            overrides: vec!["attention.rate=4".into()],
            fusion: Some(FusionArg::Concat),
            ..Default::default()
        };
        let cfg = c.resolve().unwrap();
        assert_eq!((cfg.model.attention.window, cfg.model.attention.rate), (7, 4));
        assert_eq!(cfg.model.fusion.to_string(), "concat");
        std::fs::remove_dir_all(dir).unwrap();
    }
}
