use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use crate::backbone::{log_loss_graph, Backbone};
use crate::data::Instance;
use crate::diffgraph::{Graph, NodeId, Tensor};
use crate::params::{BindMode, Binder, ParamGroup, ParamMut};
use crate::real::Real;
use crate::varembed::VarEmbedError;

use super::{ElboBreakdown, Objective, TrainError, VelfModel};

/// Plain deterministic-embedding CTR model: one embedding row per training
/// ID, the same backbone, and log-loss only. Unseen IDs embed as zero.
#[derive(Clone, Debug, PartialEq)]
pub struct DeepFmBaseline<T> {
    user_index: HashMap<u32, usize>,
    item_index: HashMap<u32, usize>,
    pub user_emb: Tensor<T>,
    pub item_emb: Tensor<T>,
    pub backbone: Backbone<T>,
}

fn index(ids: &[u32]) -> HashMap<u32, usize> {
    ids.iter().enumerate().map(|(r, &id)| (id, r)).collect()
}

impl<T: Real> DeepFmBaseline<T> {
    /// Share the posterior means and backbone of `model` as the initial state.
    pub fn from_model(model: &VelfModel<T>) -> Self {
        DeepFmBaseline {
            user_index: index(model.user_post.ids()),
            item_index: index(model.item_post.ids()),
            user_emb: model.user_post.mu.clone(),
            item_emb: model.item_post.mu.clone(),
            backbone: model.backbone.clone(),
        }
    }

    fn rows(map: &HashMap<u32, usize>, ids: impl Iterator<Item = u32>) -> Result<Vec<usize>, VarEmbedError> {
        ids.map(|id| map.get(&id).copied().ok_or(VarEmbedError::UnseenId(id))).collect()
    }

    fn lookup(table: &Tensor<T>, map: &HashMap<u32, usize>, ids: impl Iterator<Item = u32>) -> Result<Tensor<T>, TrainError> {
        let d = table.cols();
        let mut out = Vec::new();
        let mut n = 0;
        for id in ids {
            match map.get(&id) {
                Some(&r) => out.extend_from_slice(table.row(r)),
                None => out.extend(std::iter::repeat_n(T::zero(), d)),
            }
            n += 1;
        }
        Ok(Tensor::new(vec![n, d], out)?)
    }

    pub fn logits(&self, batch: &[&Instance]) -> Result<Vec<f64>, TrainError> {
        let mut out = Vec::with_capacity(batch.len());
        for chunk in batch.chunks(4096) {
            let mut g = Graph::new();
            let mut binder = Binder::new(BindMode::Frozen);
            let u = Self::lookup(&self.user_emb, &self.user_index, chunk.iter().map(|i| i.user_id))?;
            let i = Self::lookup(&self.item_emb, &self.item_index, chunk.iter().map(|i| i.item_id))?;
            let zu = g.constant(u);
            let zi = g.constant(i);
            let side = self.backbone.layout.side_rows(chunk);
            let logits = self.backbone.forward(&mut g, &mut binder, zu, zi, &side)?;
            out.extend(g.value(logits).data().iter().map(|v| v.as_f64()));
        }
        Ok(out)
    }
}

impl<T: Real> Objective<T> for DeepFmBaseline<T> {
    fn forward(
        &self,
        g: &mut Graph<T>,
        binder: &mut Binder,
        batch: &[&Instance],
        alpha: f64,
        _noise_rng: &mut ChaCha8Rng,
    ) -> Result<(NodeId, ElboBreakdown), TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let urows = Self::rows(&self.user_index, batch.iter().map(|i| i.user_id))?;
        let irows = Self::rows(&self.item_index, batch.iter().map(|i| i.item_id))?;
        let ut = binder.bind(g, "user.emb", &self.user_emb);
        let it = binder.bind(g, "item.emb", &self.item_emb);
        let zu = g.gather_rows(ut, urows)?;
        let zi = g.gather_rows(it, irows)?;
        let side = self.backbone.layout.side_rows(batch);
        let logits = self.backbone.forward(g, binder, zu, zi, &side)?;
        let labels: Vec<u8> = batch.iter().map(|i| i.label).collect();
        let loss = log_loss_graph(g, logits, &labels)?;
        let b = ElboBreakdown { log_loss: g.value(loss).data()[0].as_f64(), alpha, ..Default::default() };
        Ok((loss, b.with_total()))
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut out = vec![
            ParamMut { name: "user.emb".into(), group: ParamGroup::PosteriorMean, value: &mut self.user_emb },
            ParamMut { name: "item.emb".into(), group: ParamGroup::PosteriorMean, value: &mut self.item_emb },
        ];
        self.backbone.push_params_mut(&mut out);
        out
    }
}
