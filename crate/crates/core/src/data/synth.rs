//! Synthetic cold-start corpora whose labels depend only on attributes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::splits::{derive_subsets, SplitRules};
use super::{FieldSpec, Instance, Schema, SplitSet};
use crate::diffgraph::sigmoid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    /// Users that appear in training; a further tenth are held out as new users.
    pub n_users: usize,
    /// Items that appear in training; a further tenth are held out as new items.
    pub n_items: usize,
    /// Distinct values per attribute field.
    pub n_attrs: usize,
    pub n_train: usize,
    /// Test instances on new items (also the size of the seen and new-user test blocks).
    pub n_test_new_items: usize,
    /// Attribute fields per user and per item.
    pub attr_fields: usize,
    /// Standard deviation of each interaction coefficient.
    pub coef_scale: f64,
    /// Values of the single context field (carries no signal).
    pub context_values: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_users: 2000,
            n_items: 2000,
            n_attrs: 5,
            n_train: 100_000,
            n_test_new_items: 10_000,
            attr_fields: 2,
            coef_scale: 1.0,
            context_values: 4,
        }
    }
}

/// A generated corpus together with its generative coefficients.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    pub splits: SplitSet,
    /// `coef[fu][fi][a][b]`, double-centered per `(fu, fi)` block: contribution of user field `fu` taking value `a`
    /// with item field `fi` taking value `b`, flattened.
    coef: Vec<f64>,
}

impl SynthCorpus {
    fn stride(&self) -> usize {
        self.config.n_attrs + 1
    }

    fn coef_index(&self, fu: usize, fi: usize, a: u32, b: u32) -> usize {
        let s = self.stride();
        ((fu * self.config.attr_fields + fi) * s + a as usize) * s + b as usize
    }

    /// True logit of the generating model.
    pub fn oracle_logit(&self, inst: &Instance) -> f64 {
        let mut z = 0.0;
        for (fu, &a) in inst.user_attrs.iter().enumerate() {
            for (fi, &b) in inst.item_attrs.iter().enumerate() {
                z += self.coef[self.coef_index(fu, fi, a, b)];
            }
        }
        z
    }

    pub fn oracle_scores(&self, insts: &[Instance]) -> Vec<f64> {
        insts.iter().map(|i| self.oracle_logit(i)).collect()
    }

    pub fn is_new_item(&self, id: u32) -> bool {
        id as usize > self.config.n_items
    }
}

fn held_out(n: usize) -> usize {
    (n / 10).max(1)
}

/// Generate a corpus where `P(y = 1) = sigmoid(sum of user-attribute x
/// item-attribute coefficients)`. IDs carry no signal beyond their attributes,
/// and new items never occur in training.
pub fn synth_coldstart(cfg: &SynthConfig) -> SynthCorpus {
    assert!(cfg.n_users >= 1 && cfg.n_items >= 1 && cfg.n_attrs >= 1 && cfg.n_train >= 1 && cfg.n_test_new_items >= 1);
    assert!(cfg.attr_fields >= 1 && cfg.context_values >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total_users = cfg.n_users + held_out(cfg.n_users);
    let total_items = cfg.n_items + held_out(cfg.n_items);
    let draw_attrs = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<u32>> {
        (0..n).map(|_| (0..cfg.attr_fields).map(|_| rng.random_range(1..=cfg.n_attrs as u32)).collect()).collect()
    };
    // Index 0 unused so that ids are 1-based.
    let user_attrs = draw_attrs(total_users + 1, &mut rng);
    let item_attrs = draw_attrs(total_items + 1, &mut rng);

    let s = cfg.n_attrs + 1;
    let normal = Normal::new(0.0, cfg.coef_scale).expect("finite scale");
    let mut coef = vec![0.0; cfg.attr_fields * cfg.attr_fields * s * s];
    for fu in 0..cfg.attr_fields {
        for fi in 0..cfg.attr_fields {
            for a in 1..s {
                for b in 1..s {
                    coef[((fu * cfg.attr_fields + fi) * s + a) * s + b] = normal.sample(&mut rng);
                }
            }
        }
    }
    // Double-center every block so neither side has a main effect: knowing
    // only the user (or only the item) says nothing about the label.
    for blk in coef.chunks_mut(s * s) {
        let n = cfg.n_attrs as f64;
        let row: Vec<f64> = (1..s).map(|a| (1..s).map(|b| blk[a * s + b]).sum::<f64>() / n).collect();
        let col: Vec<f64> = (1..s).map(|b| (1..s).map(|a| blk[a * s + b]).sum::<f64>() / n).collect();
        let all = row.iter().sum::<f64>() / n;
        for a in 1..s {
            for b in 1..s {
                blk[a * s + b] += all - row[a - 1] - col[b - 1];
            }
        }
    }
    let mut corpus = SynthCorpus { config: cfg.clone(), splits: SplitSet::default(), coef };

    let mut ts = 0i64;
    let mut make = |rng: &mut ChaCha8Rng, users: std::ops::RangeInclusive<usize>, items: std::ops::RangeInclusive<usize>, corpus: &SynthCorpus| {
        let u = rng.random_range(users);
        let i = rng.random_range(items);
        let mut inst = Instance {
            user_id: u as u32,
            item_id: i as u32,
            user_attrs: user_attrs[u].clone(),
            item_attrs: item_attrs[i].clone(),
            context: vec![rng.random_range(1..=cfg.context_values as u32)],
            label: 0,
            timestamp: ts,
        };
        ts += 1;
        let p = sigmoid(corpus.oracle_logit(&inst));
        inst.label = u8::from(rng.random::<f64>() < p);
        inst
    };
    let seen_users = 1..=cfg.n_users;
    let seen_items = 1..=cfg.n_items;
    let train: Vec<Instance> = (0..cfg.n_train).map(|_| make(&mut rng, seen_users.clone(), seen_items.clone(), &corpus)).collect();
    let mut test = Vec::with_capacity(3 * cfg.n_test_new_items);
    for _ in 0..cfg.n_test_new_items {
        test.push(make(&mut rng, seen_users.clone(), seen_items.clone(), &corpus));
    }
    for _ in 0..cfg.n_test_new_items {
        test.push(make(&mut rng, seen_users.clone(), cfg.n_items + 1..=total_items, &corpus));
    }
    for _ in 0..cfg.n_test_new_items {
        test.push(make(&mut rng, cfg.n_users + 1..=total_users, seen_items.clone(), &corpus));
    }

    let field = |prefix: &str, k: usize, card: usize| FieldSpec { name: format!("{prefix}.a{k}"), cardinality: card };
    let schema = Schema {
        user_attrs: (0..cfg.attr_fields).map(|k| field("user", k, s)).collect(),
        item_attrs: (0..cfg.attr_fields).map(|k| field("item", k, s)).collect(),
        context: vec![FieldSpec { name: "ctx.c0".into(), cardinality: cfg.context_values + 1 }],
    };
    let n_items = cfg.n_items;
    corpus.splits = derive_subsets(schema, train, test, |id| id as usize > n_items, &SplitRules::default());
    corpus
}
