//! Flat JSON run configuration. Keys are either run-level settings, split
//! rules, or training hyperparameters; command-line flags override them.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::{Map, Value};
use velf::data::SplitRules;
use velf::training::TrainConfig;

const RUN_KEYS: [&str; 4] = ["data_dir", "splits", "out", "seeds"];
const RULE_KEYS: [&str; 5] = ["min_user_history", "train_frac", "new_item_after_year", "infreq_user_frac", "infreq_item_frac"];

#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    pub data_dir: Option<PathBuf>,
    pub splits: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
    pub rules: SplitRules,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("in config {}", p.display()))
            }
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let Value::Object(mut map) = serde_json::from_str(text)? else {
            bail!("config must be a JSON object");
        };
        let mut take = |k: &str| map.remove(k);
        let path = |v: Option<Value>| -> Result<Option<PathBuf>> {
            v.map(|v| serde_json::from_value::<PathBuf>(v).map_err(Into::into)).transpose()
        };
        let data_dir = path(take("data_dir"))?;
        let splits = path(take("splits"))?;
        let out = path(take("out"))?;
        let seeds: Option<Vec<u64>> = take("seeds").map(serde_json::from_value).transpose()?;
        if seeds.as_ref().is_some_and(|s| s.is_empty()) {
            bail!("seed list must not be empty");
        }
        debug_assert!(RUN_KEYS.iter().all(|k| !map.contains_key(*k)));

        let Value::Object(mut rules) = serde_json::to_value(SplitRules::default())? else { unreachable!() };
        for k in RULE_KEYS {
            if let Some(v) = map.remove(k) {
                rules.insert(k.to_string(), v);
            }
        }
        let rules: SplitRules = serde_json::from_value(Value::Object(rules)).context("split rules")?;
        let train: TrainConfig = serde_json::from_value(Value::Object(map)).context("training settings")?;
        Ok(RunConfig { data_dir, splits, out, seeds, rules, train })
    }

    /// The resolved configuration as flat JSON, for reproducibility records.
    pub fn to_json(&self) -> String {
        let mut m = Map::new();
        let mut put = |k: &str, v: Value| {
            m.insert(k.to_string(), v);
        };
        if let Some(p) = &self.data_dir {
            put("data_dir", p.display().to_string().into());
        }
        if let Some(p) = &self.splits {
            put("splits", p.display().to_string().into());
        }
        if let Some(s) = &self.seeds {
            put("seeds", serde_json::to_value(s).expect("seeds"));
        }
        for src in [serde_json::to_value(&self.rules), serde_json::to_value(&self.train)] {
            if let Value::Object(o) = src.expect("serializable") {
                m.extend(o);
            }
        }
        serde_json::to_string_pretty(&Value::Object(m)).expect("serializable") + "\n"
    }

    pub fn require_splits(&self) -> Result<&Path> {
        self.splits.as_deref().context("no splits directory: pass --splits or set \"splits\" in the config")
    }

    pub fn require_out(&self) -> Result<&Path> {
        self.out.as_deref().context("no output location: pass --out or set \"out\" in the config")
    }
}
