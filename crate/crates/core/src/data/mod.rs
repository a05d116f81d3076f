//! Instances, cold-start splits, and the corpora they come from.

mod io;
mod movielens;
mod splits;
mod synth;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{read_splits, write_splits, Vocabulary};
pub use movielens::{featurize_movielens, parse_movielens, Movie, MovieLens, Rating, User};
pub use splits::{build_frequency_tables, build_splits, SplitRules, SplitStats};
pub use synth::{synth_coldstart, SynthConfig, SynthCorpus};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{file}:{line}: {reason}")]
    Malformed { file: String, line: usize, reason: String },
    #[error("rating {0} outside 1..=5")]
    RatingOutOfRange(u32),
    #[error("rating references unknown {kind} {id}")]
    UnknownEntity { kind: &'static str, id: u32 },
    #[error("invalid split rules: {0}")]
    BadRules(String),
}

/// One categorical field; code 0 is the out-of-vocabulary bucket, so
/// `cardinality` counts it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub cardinality: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub user_attrs: Vec<FieldSpec>,
    pub item_attrs: Vec<FieldSpec>,
    pub context: Vec<FieldSpec>,
}

impl Schema {
    pub fn cards(fields: &[FieldSpec]) -> Vec<usize> {
        fields.iter().map(|f| f.cardinality).collect()
    }
}

/// One labeled impression.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Instance {
    pub user_id: u32,
    pub item_id: u32,
    pub user_attrs: Vec<u32>,
    pub item_attrs: Vec<u32>,
    pub context: Vec<u32>,
    pub label: u8,
    pub timestamp: i64,
}

/// Names of the held-out splits, in report column order.
pub const SPLIT_NAMES: [&str; 5] = ["new_user", "new_item", "infreq_user", "infreq_item", "all"];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplitSet {
    pub schema: Schema,
    pub train: Vec<Instance>,
    pub test_all: Vec<Instance>,
    pub test_new_user: Vec<Instance>,
    pub test_new_item: Vec<Instance>,
    pub test_infreq_user: Vec<Instance>,
    pub test_infreq_item: Vec<Instance>,
}

impl SplitSet {
    /// Held-out splits paired with their names, in [`SPLIT_NAMES`] order.
    pub fn test_splits(&self) -> [(&'static str, &[Instance]); 5] {
        [
            (SPLIT_NAMES[0], &self.test_new_user),
            (SPLIT_NAMES[1], &self.test_new_item),
            (SPLIT_NAMES[2], &self.test_infreq_user),
            (SPLIT_NAMES[3], &self.test_infreq_item),
            (SPLIT_NAMES[4], &self.test_all),
        ]
    }
}

/// Parse, featurize and split a MovieLens-1M directory.
pub fn ingest_movielens(dir: &std::path::Path, rules: &SplitRules) -> Result<(SplitSet, SplitStats, Vocabulary), DataError> {
    let ml = parse_movielens(dir)?;
    let (instances, schema, vocab) = featurize_movielens(&ml)?;
    let user_ids: Vec<u32> = ml.users.iter().map(|u| u.id).collect();
    let years: std::collections::HashMap<u32, u32> = ml.movies.iter().map(|m| (m.id, m.year)).collect();
    let (splits, stats) = build_splits(instances, schema, &user_ids, &years, rules)?;
    Ok((splits, stats, vocab))
}

/// Ratings of at least 4 are positives.
pub fn binarize_labels(rating: u32) -> Result<u8, DataError> {
    match rating {
        1..=3 => Ok(0),
        4..=5 => Ok(1),
        r => Err(DataError::RatingOutOfRange(r)),
    }
}

/// Shuffled mini-batches over `0..len`, reshuffled every epoch from one seed.
/// The last batch of an epoch may be short.
pub struct BatchIterator {
    order: Vec<usize>,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BatchIterator {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Self {
        assert!(batch_size >= 1, "batch size must be positive");
        BatchIterator { order: (0..len).collect(), batch_size, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    pub fn next_epoch(&mut self) -> Vec<Vec<usize>> {
        self.order.sort_unstable();
        self.order.shuffle(&mut self.rng);
        self.order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binarize() {
        assert_eq!(binarize_labels(4).unwrap(), 1);
        assert_eq!(binarize_labels(5).unwrap(), 1);
        assert_eq!(binarize_labels(3).unwrap(), 0);
        assert_eq!(binarize_labels(1).unwrap(), 0);
        assert!(binarize_labels(0).is_err());
        assert!(binarize_labels(6).is_err());
    }

    #[test]
    fn batches() {
        let mut it = BatchIterator::new(10, 4, 1);
        let epoch = it.next_epoch();
        assert_eq!(epoch.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = epoch.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());

        let mut again = BatchIterator::new(10, 4, 1);
        assert_eq!(again.next_epoch(), epoch);
        assert_eq!(again.next_epoch(), it.next_epoch());
    }
}
