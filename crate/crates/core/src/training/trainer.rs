use std::collections::HashMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{build_frequency_tables, BatchIterator, Instance, Schema};
use crate::diffgraph::{Graph, NodeId, Tensor};
use crate::params::{BindMode, Binder, ParamMut};
use crate::real::Real;

use super::{adam_step, anneal_alpha, AdamState, ElboBreakdown, Noise, TrainConfig, TrainError, Variant, VelfModel};

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

/// Independent sub-seed for one consumer of randomness.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

/// Anything trainable by [`train_steps`].
pub trait Objective<T: Real> {
    fn forward(
        &self,
        g: &mut Graph<T>,
        binder: &mut Binder,
        batch: &[&Instance],
        alpha: f64,
        noise_rng: &mut ChaCha8Rng,
    ) -> Result<(NodeId, ElboBreakdown), TrainError>;

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>>;
}

impl<T: Real> Objective<T> for VelfModel<T> {
    fn forward(
        &self,
        g: &mut Graph<T>,
        binder: &mut Binder,
        batch: &[&Instance],
        alpha: f64,
        noise_rng: &mut ChaCha8Rng,
    ) -> Result<(NodeId, ElboBreakdown), TrainError> {
        let noise = if self.variant() == Variant::Point {
            Noise { user: vec![], item: vec![] }
        } else {
            Noise::draw(noise_rng, batch.len(), self.config.dim, self.config.monte_carlo)
        };
        self.elbo_graph(g, binder, batch, alpha, &noise)
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        VelfModel::params_mut(self)
    }
}

/// One line of the epoch log: batch-size-weighted means over the epoch, and
/// the KL weight at the epoch's last step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub log_loss: f64,
    pub kl_user_post: f64,
    pub kl_item_post: f64,
    pub kl_user_prior_reg: f64,
    pub kl_item_prior_reg: f64,
    pub alpha: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub train_auc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochRecord>,
    /// Value of the minimized objective at every optimizer step.
    pub step_losses: Vec<f64>,
}

#[derive(Default)]
struct Accum {
    n: f64,
    sums: [f64; 5],
    alpha: f64,
}

impl Accum {
    fn add(&mut self, b: &ElboBreakdown, w: usize) {
        let w = w as f64;
        self.n += w;
        for (s, v) in self.sums.iter_mut().zip([b.log_loss, b.kl_user_post, b.kl_item_post, b.kl_user_prior_reg, b.kl_item_prior_reg]) {
            *s += w * v;
        }
        self.alpha = b.alpha;
    }

    fn breakdown(&self) -> ElboBreakdown {
        let m = |k: usize| if self.n > 0.0 { self.sums[k] / self.n } else { 0.0 };
        ElboBreakdown {
            log_loss: m(0),
            kl_user_post: m(1),
            kl_item_post: m(2),
            kl_user_prior_reg: m(3),
            kl_item_prior_reg: m(4),
            alpha: self.alpha,
            total: 0.0,
        }
        .with_total()
    }
}

/// Mini-batch Adam on `obj`. Batch order, noise and (via the caller's init)
/// parameters all derive from `config.seed`.
pub fn train_steps<T: Real, O: Objective<T>>(
    obj: &mut O,
    config: &TrainConfig,
    data: &[Instance],
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut batches = BatchIterator::new(data.len(), config.batch_size, derive_seed(config.seed, SHUFFLE_STREAM));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, NOISE_STREAM));
    let anneal = config.anneal_steps.unwrap_or_else(|| batches.batches_per_epoch());
    let mut adam = AdamState::default();
    let mut out = TrainOutcome::default();
    let mut step = 0usize;
    'epochs: for epoch in 1..=config.epochs {
        let mut acc = Accum::default();
        for idx in batches.next_epoch() {
            if config.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let batch: Vec<&Instance> = idx.iter().map(|&i| &data[i]).collect();
            let alpha = anneal_alpha(step, anneal);
            let mut g = Graph::new();
            let mut binder = Binder::new(BindMode::Train);
            let (loss, b) = obj.forward(&mut g, &mut binder, &batch, alpha, &mut noise_rng)?;
            if let Some(component) = b.first_non_finite() {
                return Err(TrainError::NonFinite { step, component: component.into() });
            }
            let mut grads = g.backward(loss)?;
            let mut by_name: HashMap<String, Tensor<T>> = HashMap::new();
            for name in binder.names() {
                let node = binder.node(name).expect("bound");
                if let Some(t) = grads.take(node) {
                    if !t.is_finite() {
                        return Err(TrainError::NonFinite { step, component: format!("gradient of {name}") });
                    }
                    by_name.insert(name.clone(), t);
                }
            }
            let mut params = obj.params_mut();
            adam_step(&mut params, &by_name, &mut adam, config.lr)?;
            out.step_losses.push(g.value(loss).data()[0].as_f64());
            acc.add(&b, batch.len());
            step += 1;
        }
        let b = acc.breakdown();
        log::info!("epoch {epoch}: log_loss {:.5} kl {:.5} alpha {:.3}", b.log_loss, b.kl_sum(), b.alpha);
        out.epochs.push(EpochRecord {
            epoch,
            log_loss: b.log_loss,
            kl_user_post: b.kl_user_post,
            kl_item_post: b.kl_item_post,
            kl_user_prior_reg: b.kl_user_prior_reg,
            kl_item_prior_reg: b.kl_item_prior_reg,
            alpha: b.alpha,
            train_auc: None,
        });
    }
    Ok(out)
}

/// Initialize a model from the training split and train it.
pub fn train(config: &TrainConfig, schema: &Schema, data: &[Instance]) -> Result<(VelfModel<f32>, TrainOutcome), TrainError> {
    let (uf, itf) = build_frequency_tables(data);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, INIT_STREAM));
    let mut model = VelfModel::init(&mut rng, config, schema, uf, itf)?;
    let outcome = train_steps(&mut model, config, data)?;
    Ok((model, outcome))
}

/// Objective averaged over `data` in order, without updating anything.
pub fn evaluate_objective<T: Real, O: Objective<T>>(
    obj: &O,
    data: &[Instance],
    alpha: f64,
    batch_size: usize,
    seed: u64,
) -> Result<ElboBreakdown, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = Accum::default();
    for chunk in data.chunks(batch_size.max(1)) {
        let batch: Vec<&Instance> = chunk.iter().collect();
        let (_, b) = obj.forward(&mut Graph::new(), &mut Binder::new(BindMode::Frozen), &batch, alpha, &mut rng)?;
        acc.add(&b, batch.len());
    }
    Ok(acc.breakdown())
}
