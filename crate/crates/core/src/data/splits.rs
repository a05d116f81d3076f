use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::varembed::FrequencyTable;

use super::{DataError, Instance, Schema, SplitSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRules {
    /// Users with fewer ratings go entirely to test.
    pub min_user_history: usize,
    /// Leading fraction of each remaining user's history used for training.
    pub train_frac: f64,
    /// Items released strictly after this year form the new-item split.
    pub new_item_after_year: u32,
    /// Bottom fraction of users by training frequency.
    pub infreq_user_frac: f64,
    /// Bottom fraction of items by training frequency.
    pub infreq_item_frac: f64,
}

impl Default for SplitRules {
    fn default() -> Self {
        SplitRules {
            min_user_history: 30,
            train_frac: 0.8,
            new_item_after_year: 1997,
            infreq_user_frac: 0.2,
            infreq_item_frac: 0.2,
        }
    }
}

impl SplitRules {
    fn validate(&self) -> Result<(), DataError> {
        let frac_ok = |x: f64| (0.0..=1.0).contains(&x);
        if !frac_ok(self.train_frac) || !frac_ok(self.infreq_user_frac) || !frac_ok(self.infreq_item_frac) {
            return Err(DataError::BadRules(format!("fractions must lie in [0, 1]: {self:?}")));
        }
        Ok(())
    }
}

/// Realized sizes, for comparison with published dataset statistics.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitStats {
    pub users: usize,
    pub items: usize,
    pub train: usize,
    pub test_all: usize,
    pub test_new_user: usize,
    pub test_new_item: usize,
    pub test_infreq_user: usize,
    pub test_infreq_item: usize,
    /// Listed users with no ratings at all.
    pub skipped_empty_users: usize,
}

impl SplitStats {
    pub fn of(splits: &SplitSet, skipped_empty_users: usize) -> Self {
        let users: BTreeSet<u32> = splits.train.iter().chain(&splits.test_all).map(|i| i.user_id).collect();
        let items: BTreeSet<u32> = splits.train.iter().chain(&splits.test_all).map(|i| i.item_id).collect();
        SplitStats {
            users: users.len(),
            items: items.len(),
            train: splits.train.len(),
            test_all: splits.test_all.len(),
            test_new_user: splits.test_new_user.len(),
            test_new_item: splits.test_new_item.len(),
            test_infreq_user: splits.test_infreq_user.len(),
            test_infreq_item: splits.test_infreq_item.len(),
            skipped_empty_users,
        }
    }
}

/// IDs ranked by ascending training count (ties by ascending ID); the first
/// `floor(frac * n)` are the infrequent set.
pub(crate) fn bottom_by_frequency(ids: &BTreeSet<u32>, freq: &FrequencyTable, frac: f64) -> BTreeSet<u32> {
    let mut ranked: Vec<(u64, u32)> = ids.iter().map(|&id| (freq.get(id).unwrap_or(0), id)).collect();
    ranked.sort_unstable();
    let k = (frac * ranked.len() as f64).floor() as usize;
    ranked.into_iter().take(k).map(|(_, id)| id).collect()
}

/// Derive the five held-out subsets from `train` and `test_all`.
pub(crate) fn derive_subsets(
    schema: Schema,
    train: Vec<Instance>,
    test_all: Vec<Instance>,
    is_new_item: impl Fn(u32) -> bool,
    rules: &SplitRules,
) -> SplitSet {
    let (user_freq, item_freq) = build_frequency_tables(&train);
    let users: BTreeSet<u32> = train.iter().chain(&test_all).map(|i| i.user_id).collect();
    let items: BTreeSet<u32> = train.iter().chain(&test_all).map(|i| i.item_id).collect();
    let infreq_users = bottom_by_frequency(&users, &user_freq, rules.infreq_user_frac);
    let infreq_items = bottom_by_frequency(&items, &item_freq, rules.infreq_item_frac);
    let pick = |f: &dyn Fn(&Instance) -> bool| test_all.iter().filter(|i| f(i)).cloned().collect::<Vec<_>>();
    SplitSet {
        schema,
        test_new_user: pick(&|i| !user_freq.contains(i.user_id)),
        test_new_item: pick(&|i| is_new_item(i.item_id)),
        test_infreq_user: pick(&|i| infreq_users.contains(&i.user_id)),
        test_infreq_item: pick(&|i| infreq_items.contains(&i.item_id)),
        train,
        test_all,
    }
}

/// Temporal per-user split with cold-start test subsets.
///
/// Users with fewer than `min_user_history` ratings are held out entirely.
/// Everyone else contributes the first `floor(train_frac * n)` ratings by
/// `(timestamp, item_id)` to training and the rest to test. `user_ids` lists
/// every known user so that users without ratings can be counted.
pub fn build_splits(
    instances: Vec<Instance>,
    schema: Schema,
    user_ids: &[u32],
    item_years: &HashMap<u32, u32>,
    rules: &SplitRules,
) -> Result<(SplitSet, SplitStats), DataError> {
    rules.validate()?;
    let mut by_user: BTreeMap<u32, Vec<Instance>> = BTreeMap::new();
    for inst in instances {
        by_user.entry(inst.user_id).or_default().push(inst);
    }
    let skipped = user_ids.iter().filter(|u| !by_user.contains_key(u)).count();
    if skipped > 0 {
        log::warn!("{skipped} users have no ratings and were skipped");
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (_, mut hist) in by_user {
        hist.sort_by_key(|i| (i.timestamp, i.item_id));
        if hist.len() < rules.min_user_history {
            test.extend(hist);
            continue;
        }
        let k = (rules.train_frac * hist.len() as f64).floor() as usize;
        let tail = hist.split_off(k);
        train.extend(hist);
        test.extend(tail);
    }
    let cutoff = rules.new_item_after_year;
    let splits = derive_subsets(schema, train, test, |id| item_years.get(&id).is_some_and(|&y| y > cutoff), rules);
    let stats = SplitStats::of(&splits, skipped);
    Ok((splits, stats))
}

/// Training-set counts for users and items.
pub fn build_frequency_tables(train: &[Instance]) -> (FrequencyTable, FrequencyTable) {
    (
        FrequencyTable::from_ids(train.iter().map(|i| i.user_id)),
        FrequencyTable::from_ids(train.iter().map(|i| i.item_id)),
    )
}
