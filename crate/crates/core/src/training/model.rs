use rand::Rng;
use rand_distr::StandardNormal;

use crate::backbone::{Backbone, FieldLayout};
use crate::data::{Instance, Schema};
use crate::diffgraph::{grad_check_many, GradCheckOptions, GradCheckReport, Graph, GraphError, NodeId, Tensor};
use crate::params::{BindMode, Binder, ParamGroup, ParamMut, ParamRef};
use crate::real::Real;
use crate::varembed::{
    blend, gate, kl_gaussian_graph, kl_standard_graph, sample_graph, FrequencyTable, PosteriorTable, PriorNetwork,
};

use super::{ElboBreakdown, TrainConfig, TrainError, Variant};

const USER_POST: &str = "user.post";
const ITEM_POST: &str = "item.post";
const USER_PRIOR: &str = "user.prior";
const ITEM_PRIOR: &str = "item.prior";

/// Standard-normal draws for the reparameterized samples, one `[n, dim]`
/// tensor per Monte Carlo sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Noise<T> {
    pub user: Vec<Tensor<T>>,
    pub item: Vec<Tensor<T>>,
}

impl<T: Real> Noise<T> {
    /// User noise for every sample first, then item noise.
    pub fn draw<R: Rng>(rng: &mut R, n: usize, dim: usize, samples: usize) -> Self {
        let one = |rng: &mut R| {
            let d = (0..n * dim).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect();
            Tensor::new(vec![n, dim], d).expect("shape")
        };
        let user = (0..samples).map(|_| one(rng)).collect();
        let item = (0..samples).map(|_| one(rng)).collect();
        Noise { user, item }
    }

    pub fn zeros(n: usize, dim: usize) -> Self {
        Noise { user: vec![Tensor::zeros(vec![n, dim])], item: vec![Tensor::zeros(vec![n, dim])] }
    }
}

/// Posterior tables, prior networks, backbone and frequency tables for one
/// trained (or freshly initialized) model.
#[derive(Clone, Debug, PartialEq)]
pub struct VelfModel<T> {
    pub config: TrainConfig,
    pub schema: Schema,
    pub user_post: PosteriorTable<T>,
    pub item_post: PosteriorTable<T>,
    pub user_prior: PriorNetwork<T>,
    pub item_prior: PriorNetwork<T>,
    pub backbone: Backbone<T>,
    pub user_freq: FrequencyTable,
    pub item_freq: FrequencyTable,
}

impl<T: Real> VelfModel<T> {
    /// Draws posteriors, priors and backbone from `rng` in that order.
    /// Posterior rows exist exactly for the IDs in the frequency tables.
    pub fn init<R: Rng>(
        rng: &mut R,
        config: &TrainConfig,
        schema: &Schema,
        user_freq: FrequencyTable,
        item_freq: FrequencyTable,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        if schema.user_attrs.is_empty() || schema.item_attrs.is_empty() {
            return Err(TrainError::BadConfig("users and items need at least one attribute field".into()));
        }
        let d = config.dim;
        let user_post = PosteriorTable::init(rng, user_freq.iter().map(|(id, _)| id).collect(), d);
        let item_post = PosteriorTable::init(rng, item_freq.iter().map(|(id, _)| id).collect(), d);
        let user_prior = PriorNetwork::init(rng, &Schema::cards(&schema.user_attrs), d, &config.prior_hidden);
        let item_prior = PriorNetwork::init(rng, &Schema::cards(&schema.item_attrs), d, &config.prior_hidden);
        let layout = FieldLayout::from_schema(schema, d, config.attrs_in_backbone);
        let backbone = Backbone::init(rng, layout, config.head, &config.hidden);
        Ok(VelfModel {
            config: config.clone(),
            schema: schema.clone(),
            user_post,
            item_post,
            user_prior,
            item_prior,
            backbone,
            user_freq,
            item_freq,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn params(&self) -> Vec<ParamRef<'_, T>> {
        let mut out = Vec::new();
        self.user_post.push_params(USER_POST, &mut out);
        self.item_post.push_params(ITEM_POST, &mut out);
        self.user_prior.push_params(USER_PRIOR, &mut out);
        self.item_prior.push_params(ITEM_PRIOR, &mut out);
        self.backbone.push_params(&mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut out = Vec::new();
        self.user_post.push_params_mut(USER_POST, &mut out);
        self.item_post.push_params_mut(ITEM_POST, &mut out);
        self.user_prior.push_params_mut(USER_PRIOR, &mut out);
        self.item_prior.push_params_mut(ITEM_PRIOR, &mut out);
        self.backbone.push_params_mut(&mut out);
        out
    }

    /// Build the objective for `batch`. Returns the node to minimize and its
    /// components. `noise` must hold at least one sample unless the variant
    /// is `Point`, which never samples.
    pub fn elbo_graph(
        &self,
        g: &mut Graph<T>,
        binder: &mut Binder,
        batch: &[&Instance],
        alpha: f64,
        noise: &Noise<T>,
    ) -> Result<(NodeId, ElboBreakdown), TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let n = batch.len();
        let variant = self.variant();
        let urows = self.user_post.rows(batch.iter().map(|i| i.user_id))?;
        let irows = self.item_post.rows(batch.iter().map(|i| i.item_id))?;
        let side = self.backbone.layout.side_rows(batch);
        let labels: Vec<u8> = batch.iter().map(|i| i.label).collect();

        if variant == Variant::Point {
            let mu_u = binder.bind(g, &format!("{USER_POST}.mu"), &self.user_post.mu);
            let mu_i = binder.bind(g, &format!("{ITEM_POST}.mu"), &self.item_post.mu);
            let z_u = g.gather_rows(mu_u, urows)?;
            let z_i = g.gather_rows(mu_i, irows)?;
            let logits = self.backbone.forward(g, binder, z_u, z_i, &side)?;
            let ll = crate::backbone::log_loss_graph(g, logits, &labels)?;
            let b = ElboBreakdown { log_loss: g.value(ll).data()[0].as_f64(), alpha, ..Default::default() };
            return Ok((ll, b.with_total()));
        }

        let samples = noise.user.len().min(noise.item.len());
        if samples == 0 {
            return Err(TrainError::BadConfig("sampling variants need noise".into()));
        }
        let (mu_u, sig_u) = self.user_post.forward(g, binder, USER_POST, &urows)?;
        let (mu_i, sig_i) = self.item_post.forward(g, binder, ITEM_POST, &irows)?;
        let mut lls = Vec::with_capacity(samples);
        for l in 0..samples {
            let z_u = sample_graph(g, mu_u, sig_u, noise.user[l].clone())?;
            let z_i = sample_graph(g, mu_i, sig_i, noise.item[l].clone())?;
            let logits = self.backbone.forward(g, binder, z_u, z_i, &side)?;
            lls.push(crate::backbone::log_loss_graph(g, logits, &labels)?);
        }
        let mut ll = g.sum_all(&lls)?;
        if samples > 1 {
            ll = g.scale(ll, 1.0 / samples as f64)?;
        }

        let batch_mean = |g: &mut Graph<T>, elem: NodeId| -> Result<NodeId, GraphError> {
            let s = g.reduce_sum(elem)?;
            g.scale(s, 1.0 / n as f64)
        };
        let mut b = ElboBreakdown { alpha, ..Default::default() };
        let mut kls: Vec<NodeId> = Vec::with_capacity(4);
        let mut record = |g: &Graph<T>, node: NodeId, slot: &mut f64| {
            *slot = g.value(node).data()[0].as_f64();
            kls.push(node);
        };
        match variant {
            Variant::Full | Variant::NoR => {
                let ua: Vec<&[u32]> = batch.iter().map(|i| i.user_attrs.as_slice()).collect();
                let ia: Vec<&[u32]> = batch.iter().map(|i| i.item_attrs.as_slice()).collect();
                let urows_p = self.user_prior.field_rows(ua)?;
                let irows_p = self.item_prior.field_rows(ia)?;
                let (mu_pu, sig_pu) = self.user_prior.forward(g, binder, USER_PRIOR, &urows_p)?;
                let (mu_pi, sig_pi) = self.item_prior.forward(g, binder, ITEM_PRIOR, &irows_p)?;
                let e = kl_gaussian_graph(g, mu_u, sig_u, mu_pu, sig_pu)?;
                let k = batch_mean(g, e)?;
                record(g, k, &mut b.kl_user_post);
                let e = kl_gaussian_graph(g, mu_i, sig_i, mu_pi, sig_pi)?;
                let k = batch_mean(g, e)?;
                record(g, k, &mut b.kl_item_post);
                if variant == Variant::Full {
                    let e = kl_standard_graph(g, mu_pu, sig_pu)?;
                    let k = batch_mean(g, e)?;
                    record(g, k, &mut b.kl_user_prior_reg);
                    let e = kl_standard_graph(g, mu_pi, sig_pi)?;
                    let k = batch_mean(g, e)?;
                    record(g, k, &mut b.kl_item_prior_reg);
                }
            }
            Variant::Fixed => {
                let e = kl_standard_graph(g, mu_u, sig_u)?;
                let k = batch_mean(g, e)?;
                record(g, k, &mut b.kl_user_post);
                let e = kl_standard_graph(g, mu_i, sig_i)?;
                let k = batch_mean(g, e)?;
                record(g, k, &mut b.kl_item_post);
            }
            Variant::Point => unreachable!("handled above"),
        }
        b.log_loss = g.value(ll).data()[0].as_f64();
        let kl = g.sum_all(&kls)?;
        let weighted = g.scale(kl, alpha)?;
        let total = g.add(ll, weighted)?;
        Ok((total, b.with_total()))
    }

    /// Prior means for a batch of attribute tuples; the zero vector when the
    /// variant does not learn a prior network.
    fn prior_centers(&self, net: &PriorNetwork<T>, tuples: Vec<&[u32]>) -> Result<Tensor<T>, TrainError> {
        if self.variant().uses_prior_net() {
            Ok(net.prior_batch(tuples)?.0)
        } else {
            for t in &tuples {
                if t.len() != net.arity() {
                    return Err(crate::varembed::VarEmbedError::AttrArity { expected: net.arity(), got: t.len() }.into());
                }
            }
            Ok(Tensor::zeros(vec![tuples.len(), net.dim()]))
        }
    }

    fn side_embeddings(
        &self,
        post: &PosteriorTable<T>,
        net: &PriorNetwork<T>,
        freq: &FrequencyTable,
        ids: Vec<u32>,
        tuples: Vec<&[u32]>,
    ) -> Result<Tensor<T>, TrainError> {
        let centers = self.prior_centers(net, tuples)?;
        let gate_cfg = self.config.gate();
        let mut out = Vec::with_capacity(centers.len());
        for (r, id) in ids.into_iter().enumerate() {
            let mu_p = centers.row(r);
            match post.row(id) {
                None => out.extend_from_slice(mu_p),
                Some(row) if self.variant() == Variant::Point => out.extend_from_slice(post.mu.row(row)),
                Some(row) => {
                    let f = freq.get(id).ok_or(crate::varembed::VarEmbedError::MissingFrequency(id))?;
                    out.extend(blend(post.mu.row(row), mu_p, gate(f, &gate_cfg)));
                }
            }
        }
        Ok(Tensor::new(centers.shape().to_vec(), out)?)
    }

    /// Deterministic user and item embeddings used for prediction, each
    /// `[n, dim]`. Never samples.
    pub fn inference_embeddings(&self, batch: &[&Instance]) -> Result<(Tensor<T>, Tensor<T>), TrainError> {
        let u = self.side_embeddings(
            &self.user_post,
            &self.user_prior,
            &self.user_freq,
            batch.iter().map(|i| i.user_id).collect(),
            batch.iter().map(|i| i.user_attrs.as_slice()).collect(),
        )?;
        let i = self.side_embeddings(
            &self.item_post,
            &self.item_prior,
            &self.item_freq,
            batch.iter().map(|i| i.item_id).collect(),
            batch.iter().map(|i| i.item_attrs.as_slice()).collect(),
        )?;
        Ok((u, i))
    }

    /// Prediction logits through the inference path.
    pub fn logits(&self, batch: &[&Instance]) -> Result<Vec<f64>, TrainError> {
        let mut out = Vec::with_capacity(batch.len());
        for chunk in batch.chunks(4096) {
            let (u, i) = self.inference_embeddings(chunk)?;
            let mut g = Graph::new();
            let mut binder = Binder::new(BindMode::Frozen);
            let zu = g.constant(u);
            let zi = g.constant(i);
            let side = self.backbone.layout.side_rows(chunk);
            let logits = self.backbone.forward(&mut g, &mut binder, zu, zi, &side)?;
            out.extend(g.value(logits).data().iter().map(|v| v.as_f64()));
        }
        Ok(out)
    }
}

/// Finite-difference check of the objective's gradient with respect to every
/// parameter in `group`, with the noise held fixed.
pub fn elbo_grad_check(
    model: &VelfModel<f64>,
    batch: &[&Instance],
    alpha: f64,
    noise: &Noise<f64>,
    group: ParamGroup,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, TrainError> {
    let chosen: Vec<ParamRef<'_, f64>> = model.params().into_iter().filter(|p| p.group == group).collect();
    let names: Vec<String> = chosen.iter().map(|p| p.name.clone()).collect();
    let points: Vec<Tensor<f64>> = chosen.iter().map(|p| p.value.clone()).collect();
    // Surface data errors before handing the closure to the checker.
    model.elbo_graph(&mut Graph::new(), &mut Binder::new(BindMode::Frozen), batch, alpha, noise)?;
    let rep = grad_check_many(
        |g, ids| {
            let mut binder = Binder::new(BindMode::Frozen);
            for (name, &id) in names.iter().zip(ids) {
                binder = binder.with_override(name.clone(), id);
            }
            match model.elbo_graph(g, &mut binder, batch, alpha, noise) {
                Ok((loss, _)) => Ok(loss),
                Err(TrainError::Graph(e)) => Err(e),
                Err(_) => Err(GraphError::NonFinite),
            }
        },
        &points,
        opts,
    )?;
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_frequency_tables, FieldSpec};
    use crate::diffgraph::KinkPolicy;
    use crate::params::Linear;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_schema() -> Schema {
        let f = |n: &str, c| FieldSpec { name: n.into(), cardinality: c };
        Schema {
            user_attrs: vec![f("user.a", 3), f("user.b", 2)],
            item_attrs: vec![f("item.a", 4)],
            context: vec![f("ctx.h", 3)],
        }
    }

    pub(crate) fn tiny_batch() -> Vec<Instance> {
        let mk = |u, i, ua: [u32; 2], ia, c, y| Instance {
            user_id: u,
            item_id: i,
            user_attrs: ua.to_vec(),
            item_attrs: vec![ia],
            context: vec![c],
            label: y,
            timestamp: 0,
        };
        vec![mk(1, 10, [1, 1], 2, 1, 1), mk(2, 11, [2, 0], 3, 2, 0), mk(1, 11, [1, 1], 3, 0, 1), mk(3, 12, [2, 1], 1, 1, 0)]
    }

    fn tiny_model(variant: Variant, hidden: usize) -> VelfModel<f64> {
        let data = tiny_batch();
        let (uf, itf) = build_frequency_tables(&data);
        let config = TrainConfig {
            variant,
            dim: 3,
            hidden: vec![hidden, hidden],
            prior_hidden: vec![hidden],
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut m = VelfModel::init(&mut rng, &config, &tiny_schema(), uf, itf).unwrap();
        // Move away from the symmetric init so every term has a gradient.
        for p in m.params_mut() {
            for (k, v) in p.value.data_mut().iter_mut().enumerate() {
                *v += 0.3 * ((k as f64 * 1.7 + p.name.len() as f64).sin());
            }
        }
        m
    }

    #[test]
    fn alpha_zero_total_is_log_loss() {
        let m = tiny_model(Variant::Full, 5);
        let data = tiny_batch();
        let batch: Vec<&Instance> = data.iter().collect();
        let noise = Noise::draw(&mut ChaCha8Rng::seed_from_u64(1), 4, 3, 1);
        let mut g = Graph::new();
        let (loss, b) = m.elbo_graph(&mut g, &mut Binder::new(BindMode::Train), &batch, 0.0, &noise).unwrap();
        assert_eq!(b.total, b.log_loss);
        assert_eq!(g.value(loss).data()[0], b.log_loss);
        assert!(b.kl_user_post > 0.0 && b.kl_item_prior_reg > 0.0);
    }

    #[test]
    fn standard_normal_everywhere_gives_zero_kl() {
        let mut m = tiny_model(Variant::Full, 5);
        let inv = (1.0f64.exp() - 1.0).ln();
        m.user_post.mu = Tensor::zeros(m.user_post.mu.shape().to_vec());
        m.item_post.mu = Tensor::zeros(m.item_post.mu.shape().to_vec());
        m.user_post.rho = Tensor::full(m.user_post.rho.shape().to_vec(), inv);
        m.item_post.rho = Tensor::full(m.item_post.rho.shape().to_vec(), inv);
        for net in [&mut m.user_prior, &mut m.item_prior] {
            let h = net.mu_head.fan_in();
            net.mu_head = Linear::zeros(h, 3);
            net.rho_head = Linear::zeros(h, 3);
            net.rho_head.b = Tensor::full(vec![3], inv);
        }
        let data = tiny_batch();
        let batch: Vec<&Instance> = data.iter().collect();
        let noise = Noise::draw(&mut ChaCha8Rng::seed_from_u64(1), 4, 3, 1);
        let (_, b) = m.elbo_graph(&mut Graph::new(), &mut Binder::new(BindMode::Train), &batch, 1.0, &noise).unwrap();
        assert!(b.kl_sum().abs() < 1e-12, "{b:?}");
        assert!((b.total - b.log_loss).abs() < 1e-12);
    }

    #[test]
    fn variant_gating() {
        let data = tiny_batch();
        let batch: Vec<&Instance> = data.iter().collect();
        let noise = Noise::draw(&mut ChaCha8Rng::seed_from_u64(1), 4, 3, 1);
        let run = |v| tiny_model(v, 5).elbo_graph(&mut Graph::new(), &mut Binder::new(BindMode::Train), &batch, 1.0, &noise).unwrap().1;
        let p = run(Variant::Point);
        assert_eq!(p.kl_sum(), 0.0);
        let f = run(Variant::Fixed);
        assert!(f.kl_user_post > 0.0 && f.kl_user_prior_reg == 0.0 && f.kl_item_prior_reg == 0.0);
        let r = run(Variant::NoR);
        assert!(r.kl_item_post > 0.0 && r.kl_user_prior_reg == 0.0);
        let full = run(Variant::Full);
        assert_eq!(full.kl_user_post, r.kl_user_post);
        assert!(full.kl_user_prior_reg > 0.0);
    }

    #[test]
    fn unseen_training_id_is_an_error() {
        let m = tiny_model(Variant::Full, 5);
        let mut data = tiny_batch();
        data[0].user_id = 99;
        let batch: Vec<&Instance> = data.iter().collect();
        let noise = Noise::zeros(4, 3);
        let r = m.elbo_graph(&mut Graph::new(), &mut Binder::new(BindMode::Train), &batch, 1.0, &noise);
        assert!(matches!(r, Err(TrainError::VarEmbed(crate::varembed::VarEmbedError::UnseenId(99)))));
    }

    #[test]
    fn every_group_passes_grad_check() {
        let m = tiny_model(Variant::Full, 6);
        let data = tiny_batch();
        let batch: Vec<&Instance> = data.iter().collect();
        let noise = Noise::draw(&mut ChaCha8Rng::seed_from_u64(2), 4, 3, 2);
        let opts = GradCheckOptions { max_coords: Some(8), kinks: KinkPolicy::Skip, ..Default::default() };
        for group in ParamGroup::ALL {
            let r = elbo_grad_check(&m, &batch, 0.7, &noise, group, &opts).unwrap();
            assert!(r.max_rel_err <= 1e-4, "{group:?}: {r:?}");
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn inference_policy() {
        let m = tiny_model(Variant::Full, 5);
        let mut data = tiny_batch();
        data[1].user_id = 77;
        let batch: Vec<&Instance> = data.iter().collect();
        let (u, _) = m.inference_embeddings(&batch).unwrap();
        let (mu_p, _) = m.user_prior.prior_params(&data[1].user_attrs).unwrap();
        assert_eq!(u.row(1), &mu_p[..]);
        // user 1 has frequency 2: strictly between prior and posterior means
        let (mu_p0, _) = m.user_prior.prior_params(&data[0].user_attrs).unwrap();
        let mu_q = m.user_post.mu.row(m.user_post.row(1).unwrap());
        for k in 0..3 {
            let (lo, hi) = (mu_q[k].min(mu_p0[k]), mu_q[k].max(mu_p0[k]));
            assert!(u.row(0)[k] >= lo && u.row(0)[k] <= hi);
        }
        let p = tiny_model(Variant::Point, 5);
        let (u, _) = p.inference_embeddings(&batch).unwrap();
        assert_eq!(u.row(0), p.user_post.mu.row(p.user_post.row(1).unwrap()));
        assert!(u.row(1).iter().all(|&x| x == 0.0));
        assert_eq!(p.logits(&batch).unwrap().len(), 4);
    }
}
