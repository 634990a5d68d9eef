use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::GenConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Format(format!("unknown split `{other}`"))),
        }
    }
}

/// One clip reference; pixels are regenerated from `(class, seed)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Record {
    pub class: usize,
    pub seed: u64,
    pub split: Split,
}

/// Line-oriented dataset listing: `class_id<TAB>seed<TAB>split`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<Record>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> Vec<Record> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .copied()
            .collect()
    }

    pub fn class_counts(&self, num_classes: usize, split: Split) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for r in self.records.iter().filter(|r| r.split == split) {
            if let Some(c) = counts.get_mut(r.class) {
                *c += 1;
            }
        }
        counts
    }

    pub fn to_text(&self) -> String {
        self.records
            .iter()
            .map(|r| format!("{}\t{}\t{}\n", r.class, r.seed, r.split))
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Format(format!("manifest line {}: {what}", i + 1));
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(bad("expected 3 tab-separated fields"));
            }
            records.push(Record {
                class: fields[0].parse().map_err(|_| bad("bad class id"))?,
                seed: fields[1].parse().map_err(|_| bad("bad seed"))?,
                split: fields[2].parse().map_err(|_| bad("bad split"))?,
            });
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Draws `n_per_class` clip seeds per class and splits each class by a
/// seeded shuffle, so both splits stay class-balanced.
pub fn build_dataset(
    cfg: &GenConfig,
    n_per_class: usize,
    split_ratio: f64,
    seed: u64,
) -> Result<Manifest> {
    cfg.validate()?;
    if n_per_class < 2 {
        return Err(Error::contract(format!(
            "n_per_class must be at least 2 to form both splits, got {n_per_class}"
        )));
    }
    if !(split_ratio > 0.0 && split_ratio < 1.0) {
        return Err(Error::contract(format!(
            "split_ratio must lie in (0, 1), got {split_ratio}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_train = ((n_per_class as f64 * split_ratio).round() as usize).clamp(1, n_per_class - 1);
    let mut records = Vec::with_capacity(cfg.num_classes * n_per_class);
    for class in 0..cfg.num_classes {
        let seeds: Vec<u64> = (0..n_per_class).map(|_| rng.random()).collect();
        let mut order: Vec<usize> = (0..n_per_class).collect();
        order.shuffle(&mut rng);
        let mut is_train = vec![false; n_per_class];
        for &i in &order[..n_train] {
            is_train[i] = true;
        }
        for (i, seed) in seeds.into_iter().enumerate() {
            records.push(Record {
                class,
                seed,
                split: if is_train[i] {
                    Split::Train
                } else {
                    Split::Val
                },
            });
        }
    }
    Ok(Manifest { records })
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    #[test]
    fn default_sizes_and_balance() {
        let m = build_dataset(&GenConfig::default(), 100, 0.8, 1).unwrap();
        assert_eq!(m.split(Split::Train).len(), 480);
        assert_eq!(m.split(Split::Val).len(), 120);
        assert_eq!(m.class_counts(6, Split::Train), vec![80; 6]);
        assert_eq!(m.class_counts(6, Split::Val), vec![20; 6]);
    }

    #[test]
    fn deterministic_and_disjoint() {
        let a = build_dataset(&GenConfig::default(), 20, 0.75, 9).unwrap();
        let b = build_dataset(&GenConfig::default(), 20, 0.75, 9).unwrap();
        assert_eq!(a, b);
        let train: HashSet<_> = a
            .split(Split::Train)
            .iter()
            .map(|r| (r.class, r.seed))
            .collect();
        let val: HashSet<_> = a
            .split(Split::Val)
            .iter()
            .map(|r| (r.class, r.seed))
            .collect();
        assert!(train.is_disjoint(&val));
        let c = build_dataset(&GenConfig::default(), 20, 0.75, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_arguments() {
        let cfg = GenConfig::default();
        assert!(matches!(
            build_dataset(&cfg, 1, 0.8, 0),
            Err(Error::Contract(_))
        ));
        assert!(build_dataset(&cfg, 10, 1.0, 0).is_err());
        assert!(build_dataset(&cfg, 10, 0.0, 0).is_err());
    }

    #[test]
    fn manifest_text_roundtrip() {
        let m = build_dataset(&GenConfig::default(), 4, 0.5, 3).unwrap();
        let text = m.to_text();
        assert!(text.lines().all(|l| l.split('\t').count() == 3));
        let back = Manifest::parse(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_text(), text);
        assert!(Manifest::parse("0\t1\n").is_err());
        assert!(Manifest::parse("0\tx\ttrain\n").is_err());
    }
}
