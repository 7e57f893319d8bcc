use std::path::{Path, PathBuf};

use evtf::events::{load_class_dirs, synth_split, LabeledSample};
use evtf::{Error, Result};

use crate::config::{DataConfig, DatasetKind, NMNIST_ROOT_VAR};

pub struct Dataset {
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.train.iter().chain(&self.test).map(|s| s.label + 1).max().unwrap_or(0)
    }
}

/// `root/Train` (or `root/train`), likewise for the test side.
fn split_dir(root: &Path, name: &str) -> Result<PathBuf> {
    [name.to_string(), name.to_lowercase()]
        .iter()
        .map(|n| root.join(n))
        .find(|p| p.is_dir())
        .ok_or_else(|| Error::Config(format!("{} has no {name}/ directory", root.display())))
}

pub fn load(cfg: &DataConfig, seed: u64) -> Result<Dataset> {
    match cfg.dataset {
        DatasetKind::Synth => {
            let per = |c: Option<usize>| c.expect("validated");
            let (train, test) =
                synth_split(cfg.classes, per(cfg.train_per_class), per(cfg.test_per_class), cfg.events, seed);
            Ok(Dataset { train, test })
        }
        DatasetKind::Nmnist => {
            let root = cfg.resolved_root().ok_or_else(|| {
                Error::Config(format!("no dataset root: set data.root or {NMNIST_ROOT_VAR}"))
            })?;
            if !root.is_dir() {
                return Err(Error::Config(format!("dataset root {} does not exist", root.display())));
            }
            let train = load_class_dirs(&split_dir(&root, "Train")?, cfg.train_per_class)?;
            let test = load_class_dirs(&split_dir(&root, "Test")?, cfg.test_per_class)?;
            if train.is_empty() || test.is_empty() {
                return Err(Error::Config(format!("no .bin recordings under {}", root.display())));
            }
            Ok(Dataset { train, test })
        }
    }
}
