use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::{LabeledSample, ManifestEntry};
use crate::error::{Error, Result};
use crate::seed::{rng_for, streams};

pub trait Labeled {
    fn label(&self) -> usize;
}

impl Labeled for ManifestEntry {
    fn label(&self) -> usize {
        self.label
    }
}

impl Labeled for LabeledSample {
    fn label(&self) -> usize {
        self.label
    }
}

/// Per-class stratified split. Each class contributes `round(fraction * n)`
/// items to the training side, clamped so both sides are nonempty. Both
/// outputs keep the input order.
pub fn train_test_split<T: Labeled + Clone>(
    items: &[T],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!("split fraction {fraction} not in (0, 1)")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, it) in items.iter().enumerate() {
        by_class.entry(it.label()).or_default().push(i);
    }
    let mut is_train = vec![false; items.len()];
    for (&class, idx) in &by_class {
        if idx.len() < 2 {
            return Err(Error::invalid(format!("class {class} has fewer than 2 samples")));
        }
        let mut rng = rng_for(seed, streams::SPLIT << 32 | class as u64);
        let mut shuffled = idx.clone();
        shuffled.shuffle(&mut rng);
        let n_train = ((fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        for &i in &shuffled[..n_train] {
            is_train[i] = true;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (it, t) in items.iter().zip(is_train) {
        if t {
            train.push(it.clone());
        } else {
            test.push(it.clone());
        }
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use std::path::PathBuf;

    use super::*;

    fn manifest(per_class: &[usize]) -> Vec<ManifestEntry> {
        per_class
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| {
                (0..n).map(move |i| ManifestEntry { path: PathBuf::from(format!("{c}/{i}")), label: c })
            })
            .collect()
    }

    #[test]
    fn eighty_twenty_per_class() {
        let m = manifest(&[10, 10, 10]);
        let (train, test) = train_test_split(&m, 0.8, 1).unwrap();
        for c in 0..3 {
            assert_eq!(train.iter().filter(|e| e.label == c).count(), 8);
            assert_eq!(test.iter().filter(|e| e.label == c).count(), 2);
        }
    }

    #[test]
    fn partition_and_determinism() {
        let m = manifest(&[7, 13, 4]);
        let (train, test) = train_test_split(&m, 0.8, 5).unwrap();
        let mut all: Vec<_> = train.iter().chain(&test).cloned().collect();
        all.sort_by(|a, b| a.path.cmp(&b.path));
        let mut orig = m.clone();
        orig.sort_by(|a, b| a.path.cmp(&b.path));
        assert_eq!(all, orig);
        assert!(train.iter().all(|t| !test.contains(t)));
        assert_eq!(train_test_split(&m, 0.8, 5).unwrap(), (train.clone(), test));
        for (c, &n) in [7usize, 13, 4].iter().enumerate() {
            let k = train.iter().filter(|e| e.label == c).count() as f64;
            assert!((k - 0.8 * n as f64).abs() < 1.0);
        }
    }

    #[test]
    fn rejects_singleton_class_and_bad_fraction() {
        assert!(train_test_split(&manifest(&[5, 1]), 0.8, 0).is_err());
        assert!(train_test_split(&manifest(&[5]), 1.0, 0).is_err());
        assert!(train_test_split(&manifest(&[5]), 0.0, 0).is_err());
    }
}
