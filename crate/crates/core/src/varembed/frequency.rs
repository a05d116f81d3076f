use std::collections::BTreeMap;

/// Training-set occurrence counts per ID.
#[derive(Clone, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FrequencyTable {
    counts: BTreeMap<u32, u64>,
}

impl FrequencyTable {
    pub fn from_ids(ids: impl IntoIterator<Item = u32>) -> Self {
        let mut counts = BTreeMap::new();
        for id in ids {
            *counts.entry(id).or_insert(0) += 1;
        }
        FrequencyTable { counts }
    }

    /// `None` for IDs never seen in training.
    pub fn get(&self, id: u32) -> Option<u64> {
        self.counts.get(&id).copied()
    }

    pub fn contains(&self, id: u32) -> bool {
        self.counts.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    /// IDs in ascending order with their counts.
    pub fn iter(&self) -> impl Iterator<Item = (u32, u64)> + '_ {
        self.counts.iter().map(|(&k, &v)| (k, v))
    }
}
