use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::data::index::DatasetIndex;
use crate::error::{Error, Result};
use crate::seed;

/// Class-disjoint train / validation / test partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: BTreeSet<String>,
    pub val: BTreeSet<String>,
    pub test: BTreeSet<String>,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitPart {
    Train,
    Val,
    Test,
}

impl SplitSpec {
    pub fn part(&self, part: SplitPart) -> &BTreeSet<String> {
        match part {
            SplitPart::Train => &self.train,
            SplitPart::Val => &self.val,
            SplitPart::Test => &self.test,
        }
    }

    /// Checks pairwise disjointness and that every class exists in `index`.
    pub fn validate(&self, index: &DatasetIndex) -> Result<()> {
        let pairs = [
            ("train", &self.train, "val", &self.val),
            ("train", &self.train, "test", &self.test),
            ("val", &self.val, "test", &self.test),
        ];
        for (an, a, bn, b) in pairs {
            if let Some(c) = a.intersection(b).next() {
                return Err(Error::InvalidSplit(format!("class '{c}' is in both {an} and {bn}")));
            }
        }
        for c in self.train.iter().chain(&self.val).chain(&self.test) {
            if index.class_position(c).is_none() {
                return Err(Error::InvalidSplit(format!("class '{c}' is not in the dataset")));
            }
        }
        Ok(())
    }

    /// Text form: `[train]`, `[val]`, `[test]` sections with one class per line.
    pub fn to_text(&self) -> String {
        let mut out = format!("# seed = {}\n", self.seed);
        for (name, set) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            let _ = writeln!(out, "[{name}]");
            for c in set {
                let _ = writeln!(out, "{c}");
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut split = SplitSpec { train: BTreeSet::new(), val: BTreeSet::new(), test: BTreeSet::new(), seed: 0 };
        let mut current: Option<SplitPart> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("seed").and_then(|r| r.trim().strip_prefix('=')) {
                    split.seed = v
                        .trim()
                        .parse()
                        .map_err(|_| Error::InvalidSplit(format!("line {}: bad seed '{}'", lineno + 1, v.trim())))?;
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            current = match line {
                "[train]" => Some(SplitPart::Train),
                "[val]" => Some(SplitPart::Val),
                "[test]" => Some(SplitPart::Test),
                _ => {
                    let part = current.ok_or_else(|| {
                        Error::InvalidSplit(format!("line {}: class before any section header", lineno + 1))
                    })?;
                    let set = match part {
                        SplitPart::Train => &mut split.train,
                        SplitPart::Val => &mut split.val,
                        SplitPart::Test => &mut split.test,
                    };
                    if !set.insert(line.to_string()) {
                        return Err(Error::InvalidSplit(format!("line {}: duplicate class '{line}'", lineno + 1)));
                    }
                    Some(part)
                }
            };
        }
        Ok(split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text)
    }
}

/// Randomly partitions the index's classes into disjoint sets of the given sizes.
pub fn make_splits(index: &DatasetIndex, counts: (usize, usize, usize), seed: u64) -> Result<SplitSpec> {
    let (n_train, n_val, n_test) = counts;
    let requested = n_train + n_val + n_test;
    if requested > index.num_classes() {
        return Err(Error::SplitTooLarge { requested, available: index.num_classes() });
    }
    let mut names: Vec<&str> = index.class_names().collect();
    names.shuffle(&mut seed::rng(seed));
    let take = |range: std::ops::Range<usize>| names[range].iter().map(|s| s.to_string()).collect();
    Ok(SplitSpec {
        train: take(0..n_train),
        val: take(n_train..n_train + n_val),
        test: take(n_train + n_val..requested),
        seed,
    })
}
