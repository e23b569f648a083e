//! Dataset index files and the subject-level train/validation/test split.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed index {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("dataset index is empty")]
    Empty,
    #[error("invalid split fractions: {0}")]
    Fractions(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    ED,
    ES,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::ED => "ED",
            Phase::ES => "ES",
        })
    }
}

impl FromStr for Phase {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "ED" => Ok(Phase::ED),
            "ES" => Ok(Phase::ES),
            _ => Err(format!("unknown phase {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// One image/mask pair. Paths are relative to the index file's directory
/// unless absolute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub subject: String,
    pub phase: Phase,
    pub image: PathBuf,
    pub mask: PathBuf,
    #[serde(default)]
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetIndex {
    pub entries: Vec<DatasetEntry>,
}

impl DatasetIndex {
    pub fn new(entries: Vec<DatasetEntry>) -> Self {
        Self { entries }
    }

    /// Loads the JSON array written by [`DatasetIndex::save`].
    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let entries = serde_json::from_str(&text).map_err(|source| DatasetError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(&self.entries).expect("index serializes");
        text.push('\n');
        fs::write(path, text).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Subjects in order of first appearance.
    pub fn subjects(&self) -> Vec<&str> {
        let mut seen = std::collections::HashSet::new();
        self.entries
            .iter()
            .filter(|e| seen.insert(e.subject.as_str()))
            .map(|e| e.subject.as_str())
            .collect()
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &DatasetEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.in_split(split).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.70,
            val: 0.10,
            test: 0.20,
        }
    }
}

/// Assigns every subject (all of its phases together) to one split.
///
/// Subjects are shuffled with a generator seeded from `seed`; validation and
/// test receive `floor(n·fraction)` subjects and the remainder goes to
/// training.
pub fn split_dataset(
    index: &DatasetIndex,
    fractions: SplitFractions,
    seed: u64,
) -> Result<DatasetIndex, DatasetError> {
    if index.entries.is_empty() {
        return Err(DatasetError::Empty);
    }
    let SplitFractions { train, val, test } = fractions;
    if [train, val, test].iter().any(|f| !(0.0..=1.0).contains(f))
        || ((train + val + test) - 1.0).abs() > 1e-9
    {
        return Err(DatasetError::Fractions(format!(
            "{train} + {val} + {test} must be fractions summing to 1"
        )));
    }
    let mut subjects: Vec<String> = index.subjects().into_iter().map(str::to_owned).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subjects.shuffle(&mut rng);
    let n = subjects.len() as f64;
    // tolerate representation error such as 0.1·10 = 1.0000000000000002
    let n_val = (n * val + 1e-9).floor() as usize;
    let n_test = (n * test + 1e-9).floor() as usize;
    let assignment: HashMap<&str, Split> = subjects
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let split = if i < n_val {
                Split::Val
            } else if i < n_val + n_test {
                Split::Test
            } else {
                Split::Train
            };
            (s.as_str(), split)
        })
        .collect();
    let entries = index
        .entries
        .iter()
        .map(|e| DatasetEntry {
            split: assignment[e.subject.as_str()],
            ..e.clone()
        })
        .collect();
    Ok(DatasetIndex { entries })
}
