//! Discriminative heads mapping concatenated field embeddings to a CTR logit.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Instance, Schema};
use crate::diffgraph::{sigmoid, Graph, GraphError, NodeId, Tensor};
use crate::params::{normal_table, Binder, Linear, ParamGroup, ParamMut, ParamRef};
use crate::real::Real;
use crate::varembed::oov_route;

/// Probabilities are kept this far from 0 and 1 before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackboneError {
    #[error("block {position} is {got:?}, layout expects {expected:?}")]
    Layout { position: usize, expected: String, got: String },
    #[error("layout has {expected} fields, got {got} blocks")]
    FieldCount { expected: usize, got: usize },
    #[error("field {field:?} has dimension {got}, expected {expected}")]
    Dim { field: String, expected: usize, got: usize },
    #[error("factorization machine needs at least 2 fields, got {0}")]
    TooFewFields(usize),
    #[error("input has length {got}, head expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub const USER_ID_FIELD: &str = "user.id";
pub const ITEM_ID_FIELD: &str = "item.id";

/// Order and size of the blocks fed to the head: user ID, item ID, then the
/// deterministic side fields (user attributes, item attributes, context).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldLayout {
    pub dim: usize,
    /// Every field name in concatenation order.
    pub fields: Vec<String>,
    /// Cardinalities of the side fields (`fields[2..]`).
    pub side_cards: Vec<usize>,
    /// When false, user and item attributes reach the model only through the
    /// priors, and the head sees IDs and context alone.
    pub attrs_in_backbone: bool,
}

impl FieldLayout {
    pub fn from_schema(schema: &Schema, dim: usize, attrs_in_backbone: bool) -> Self {
        let mut fields = vec![USER_ID_FIELD.to_string(), ITEM_ID_FIELD.to_string()];
        let mut side_cards = Vec::new();
        let attrs = schema.user_attrs.iter().chain(&schema.item_attrs).filter(|_| attrs_in_backbone);
        for f in attrs.chain(&schema.context) {
            fields.push(f.name.clone());
            side_cards.push(f.cardinality);
        }
        FieldLayout { dim, fields, side_cards, attrs_in_backbone }
    }

    pub fn field_count(&self) -> usize {
        self.fields.len()
    }

    pub fn input_dim(&self) -> usize {
        self.dim * self.field_count()
    }

    pub fn side_fields(&self) -> &[String] {
        &self.fields[2..]
    }

    /// Codes of the side fields for one instance, in layout order.
    pub fn side_codes<'a>(&self, inst: &'a Instance) -> impl Iterator<Item = u32> + 'a {
        let attrs = self.attrs_in_backbone;
        inst.user_attrs
            .iter()
            .chain(&inst.item_attrs)
            .filter(move |_| attrs)
            .chain(&inst.context)
            .copied()
    }

    /// Per-side-field row indices for a batch, with out-of-vocabulary routing.
    pub fn side_rows(&self, batch: &[&Instance]) -> Vec<Vec<usize>> {
        let mut rows = vec![Vec::with_capacity(batch.len()); self.side_cards.len()];
        for inst in batch {
            for (f, code) in self.side_codes(inst).enumerate() {
                rows[f].push(oov_route(code, self.side_cards[f]));
            }
        }
        rows
    }

    fn check_names<'a>(&self, names: impl ExactSizeIterator<Item = &'a str>) -> Result<(), BackboneError> {
        if names.len() != self.fields.len() {
            return Err(BackboneError::FieldCount { expected: self.fields.len(), got: names.len() });
        }
        for (position, (got, expected)) in names.zip(&self.fields).enumerate() {
            if got != expected {
                return Err(BackboneError::Layout { position, expected: expected.clone(), got: got.to_string() });
            }
        }
        Ok(())
    }
}

/// Concatenate named blocks, checking them against the layout.
pub fn assemble_input<T: Real>(layout: &FieldLayout, blocks: &[(&str, &[T])]) -> Result<Vec<T>, BackboneError> {
    layout.check_names(blocks.iter().map(|(n, _)| *n))?;
    let mut out = Vec::with_capacity(layout.input_dim());
    for (name, v) in blocks {
        if v.len() != layout.dim {
            return Err(BackboneError::Dim { field: name.to_string(), expected: layout.dim, got: v.len() });
        }
        out.extend_from_slice(v);
    }
    Ok(out)
}

/// Sum of pairwise dot products, `½ Σ_d [(Σ_f v_fd)² − Σ_f v_fd²]`.
pub fn fm_interaction<T: Real>(fields: &[&[T]]) -> Result<T, BackboneError> {
    if fields.len() < 2 {
        return Err(BackboneError::TooFewFields(fields.len()));
    }
    let d = fields[0].len();
    let mut total = T::zero();
    for k in 0..d {
        let mut s = T::zero();
        let mut sq = T::zero();
        for f in fields {
            if f.len() != d {
                return Err(BackboneError::Dim { field: "fm".into(), expected: d, got: f.len() });
            }
            s = s + f[k];
            sq = sq + f[k] * f[k];
        }
        total = total + s * s - sq;
    }
    Ok(total * T::of(0.5))
}

/// Batched FM term: each field is `[n, d]`; the result is `[n, 1]`.
pub fn fm_graph<T: Real>(g: &mut Graph<T>, fields: &[NodeId]) -> Result<NodeId, BackboneError> {
    if fields.len() < 2 {
        return Err(BackboneError::TooFewFields(fields.len()));
    }
    let sum = g.sum_all(fields)?;
    let sum_sq = g.square(sum)?;
    let squares = fields.iter().map(|&f| g.square(f)).collect::<Result<Vec<_>, _>>()?;
    let sq_sum = g.sum_all(&squares)?;
    let diff = g.sub(sum_sq, sq_sum)?;
    let rows = g.row_sum(diff)?;
    Ok(g.scale(rows, 0.5)?)
}

/// `sigmoid(logit)` clamped to `[1e-7, 1 - 1e-7]`.
pub fn predict_ctr(logit: f64) -> f64 {
    sigmoid(logit).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Mean binary cross-entropy from logits, `softplus(s) − y·s`.
pub fn log_loss_graph<T: Real>(g: &mut Graph<T>, logits: NodeId, labels: &[u8]) -> Result<NodeId, GraphError> {
    let y = Tensor::new(vec![labels.len(), 1], labels.iter().map(|&l| T::of(l as f64)).collect())?;
    let y = g.constant(y);
    let sp = g.softplus(logits)?;
    let ys = g.mul(y, logits)?;
    let per = g.sub(sp, ys)?;
    g.reduce_mean(per)
}

/// Relu layers followed by a scalar linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpHead<T> {
    pub layers: Vec<Linear<T>>,
    pub out: Linear<T>,
}

impl<T: Real> MlpHead<T> {
    pub fn init<R: Rng>(rng: &mut R, input: usize, hidden: &[usize]) -> Self {
        let mut layers = Vec::with_capacity(hidden.len());
        let mut fan_in = input;
        for &h in hidden {
            layers.push(Linear::glorot(rng, fan_in, h));
            fan_in = h;
        }
        MlpHead { layers, out: Linear::glorot(rng, fan_in, 1) }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().unwrap_or(&self.out).fan_in()
    }

    pub fn forward(&self, g: &mut Graph<T>, binder: &mut Binder, prefix: &str, x: NodeId) -> Result<NodeId, GraphError> {
        let mut h = x;
        for (l, layer) in self.layers.iter().enumerate() {
            let a = layer.forward(g, binder, &format!("{prefix}.fc{l}"), h)?;
            h = g.relu(a)?;
        }
        self.out.forward(g, binder, &format!("{prefix}.out"), h)
    }

    fn push_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        for (l, layer) in self.layers.iter().enumerate() {
            layer.push_params(&format!("{prefix}.fc{l}"), ParamGroup::Head, out);
        }
        self.out.push_params(&format!("{prefix}.out"), ParamGroup::Head, out);
    }

    fn push_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.push_params_mut(&format!("{prefix}.fc{l}"), ParamGroup::Head, out);
        }
        self.out.push_params_mut(&format!("{prefix}.out"), ParamGroup::Head, out);
    }
}

/// Linear term over side fields, FM over all field embeddings, and an MLP
/// over their concatenation; the logit is the sum of the three.
#[derive(Clone, Debug, PartialEq)]
pub struct DeepFmHead<T> {
    /// One `[cardinality, 1]` weight column per side field.
    pub linear: Vec<Tensor<T>>,
    pub bias: Tensor<T>,
    pub mlp: MlpHead<T>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Mlp,
    #[default]
    DeepFm,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Head<T> {
    Mlp(MlpHead<T>),
    DeepFm(DeepFmHead<T>),
}

/// Deterministic side-field embeddings plus a head.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T> {
    pub layout: FieldLayout,
    pub side_tables: Vec<Tensor<T>>,
    pub head: Head<T>,
}

impl<T: Real> Backbone<T> {
    pub fn init<R: Rng>(rng: &mut R, layout: FieldLayout, kind: HeadKind, hidden: &[usize]) -> Self {
        let side_tables = layout.side_cards.iter().map(|&c| normal_table(rng, c, layout.dim, 0.01)).collect();
        let mlp = MlpHead::init(rng, layout.input_dim(), hidden);
        let head = match kind {
            HeadKind::Mlp => Head::Mlp(mlp),
            HeadKind::DeepFm => Head::DeepFm(DeepFmHead {
                linear: layout.side_cards.iter().map(|&c| Tensor::zeros(vec![c, 1])).collect(),
                bias: Tensor::zeros(vec![1]),
                mlp,
            }),
        };
        Backbone { layout, side_tables, head }
    }

    pub fn kind(&self) -> HeadKind {
        match self.head {
            Head::Mlp(_) => HeadKind::Mlp,
            Head::DeepFm(_) => HeadKind::DeepFm,
        }
    }

    /// Logits `[n, 1]` from ID embeddings `[n, dim]` and side-field rows.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        binder: &mut Binder,
        z_user: NodeId,
        z_item: NodeId,
        side_rows: &[Vec<usize>],
    ) -> Result<NodeId, BackboneError> {
        let mut blocks = vec![z_user, z_item];
        for (f, (table, rows)) in self.side_tables.iter().zip(side_rows).enumerate() {
            let t = binder.bind(g, &format!("backbone.emb{f}"), table);
            blocks.push(g.gather_rows(t, rows.clone())?);
        }
        for (f, &b) in blocks.iter().enumerate() {
            let got = g.value(b).cols();
            if got != self.layout.dim {
                return Err(BackboneError::Dim { field: self.layout.fields[f].clone(), expected: self.layout.dim, got });
            }
        }
        let x = g.concat(&blocks)?;
        match &self.head {
            Head::Mlp(mlp) => Ok(mlp.forward(g, binder, "head.mlp", x)?),
            Head::DeepFm(h) => {
                let deep = h.mlp.forward(g, binder, "head.mlp", x)?;
                let fm = fm_graph(g, &blocks)?;
                let mut logit = g.add(deep, fm)?;
                for (f, (w, rows)) in h.linear.iter().zip(side_rows).enumerate() {
                    let w = binder.bind(g, &format!("head.linear{f}"), w);
                    let term = g.gather_rows(w, rows.clone())?;
                    logit = g.add(logit, term)?;
                }
                let bias = binder.bind(g, "head.bias", &h.bias);
                Ok(g.add(logit, bias)?)
            }
        }
    }

    pub fn push_params<'a>(&'a self, out: &mut Vec<ParamRef<'a, T>>) {
        for (f, t) in self.side_tables.iter().enumerate() {
            out.push(ParamRef { name: format!("backbone.emb{f}"), group: ParamGroup::AttributeTables, value: t });
        }
        match &self.head {
            Head::Mlp(mlp) => mlp.push_params("head.mlp", out),
            Head::DeepFm(h) => {
                h.mlp.push_params("head.mlp", out);
                for (f, w) in h.linear.iter().enumerate() {
                    out.push(ParamRef { name: format!("head.linear{f}"), group: ParamGroup::Head, value: w });
                }
                out.push(ParamRef { name: "head.bias".into(), group: ParamGroup::Head, value: &h.bias });
            }
        }
    }

    pub fn push_params_mut<'a>(&'a mut self, out: &mut Vec<ParamMut<'a, T>>) {
        for (f, t) in self.side_tables.iter_mut().enumerate() {
            out.push(ParamMut { name: format!("backbone.emb{f}"), group: ParamGroup::AttributeTables, value: t });
        }
        match &mut self.head {
            Head::Mlp(mlp) => mlp.push_params_mut("head.mlp", out),
            Head::DeepFm(h) => {
                h.mlp.push_params_mut("head.mlp", out);
                for (f, w) in h.linear.iter_mut().enumerate() {
                    out.push(ParamMut { name: format!("head.linear{f}"), group: ParamGroup::Head, value: w });
                }
                out.push(ParamMut { name: "head.bias".into(), group: ParamGroup::Head, value: &mut h.bias });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FieldSpec;
    use crate::diffgraph::{grad_check_many, GradCheckOptions, KinkPolicy};
    use crate::params::BindMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn schema() -> Schema {
        let f = |n: &str, c| FieldSpec { name: n.into(), cardinality: c };
        Schema { user_attrs: vec![f("user.g", 3)], item_attrs: vec![f("item.y", 4)], context: vec![f("ctx.h", 2)] }
    }

    #[test]
    fn layout_order_and_size() {
        let l = FieldLayout::from_schema(&schema(), 8, true);
        assert_eq!(l.fields, ["user.id", "item.id", "user.g", "item.y", "ctx.h"]);
        assert_eq!(l.input_dim(), 40);
        let l = FieldLayout::from_schema(&schema(), 8, false);
        assert_eq!(l.fields, ["user.id", "item.id", "ctx.h"]);
        assert_eq!(l.side_cards, [2]);
    }

    #[test]
    fn assemble_examples() {
        let l = FieldLayout { dim: 8, fields: vec!["a".into(), "b".into()], side_cards: vec![], attrs_in_backbone: false };
        let a: Vec<f64> = (1..=8).map(f64::from).collect();
        let b: Vec<f64> = (9..=16).map(f64::from).collect();
        let out = assemble_input(&l, &[("a", &a), ("b", &b)]).unwrap();
        assert_eq!(out, (1..=16).map(f64::from).collect::<Vec<_>>());
        assert!(matches!(assemble_input(&l, &[("b", &b), ("a", &a)]), Err(BackboneError::Layout { .. })));
        assert!(matches!(assemble_input(&l, &[("a", &a)]), Err(BackboneError::FieldCount { .. })));
        assert!(matches!(assemble_input(&l, &[("a", &a), ("b", &a[..3])]), Err(BackboneError::Dim { .. })));
        let five = FieldLayout::from_schema(&schema(), 8, true);
        let z = [0.0f64; 8];
        let blocks: Vec<(&str, &[f64])> = five.fields.iter().map(|n| (n.as_str(), &z[..])).collect();
        assert_eq!(assemble_input(&five, &blocks).unwrap().len(), 40);
    }

    #[test]
    fn fm_examples() {
        assert_eq!(fm_interaction::<f64>(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap(), 0.0);
        assert_eq!(fm_interaction::<f64>(&[&[1.0, 1.0], &[1.0, 1.0]]).unwrap(), 2.0);
        assert!(fm_interaction::<f64>(&[&[1.0]]).is_err());
    }

    #[test]
    fn fm_graph_matches_scalar() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 0.5, -1.0]).unwrap());
        let b = g.constant(Tensor::matrix(2, 2, vec![3.0, -1.0, 2.0, 2.0]).unwrap());
        let c = g.constant(Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 1.0]).unwrap());
        let fm = fm_graph(&mut g, &[a, b, c]).unwrap();
        let row0 = fm_interaction::<f64>(&[&[1.0, 2.0], &[3.0, -1.0], &[0.0, 1.0]]).unwrap();
        let row1 = fm_interaction::<f64>(&[&[0.5, -1.0], &[2.0, 2.0], &[1.0, 1.0]]).unwrap();
        assert_eq!(g.value(fm).data(), &[row0, row1]);
    }

    #[test]
    fn predict_examples() {
        assert_eq!(predict_ctr(0.0), 0.5);
        assert!((predict_ctr(4.0) - 0.98201).abs() < 1e-5);
        assert!(predict_ctr(1.0) < predict_ctr(1.5));
        assert_eq!(predict_ctr(100.0), 1.0 - PROB_CLAMP);
        assert_eq!(predict_ctr(-100.0), PROB_CLAMP);
    }

    #[test]
    fn zero_head_predicts_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layout = FieldLayout::from_schema(&schema(), 4, true);
        let mut bb: Backbone<f64> = Backbone::init(&mut rng, layout, HeadKind::Mlp, &[6]);
        if let Head::Mlp(m) = &mut bb.head {
            m.out = Linear::zeros(6, 1);
        }
        let mut g = Graph::new();
        let mut binder = Binder::new(BindMode::Frozen);
        let zu = g.constant(Tensor::full(vec![3, 4], 0.3));
        let zi = g.constant(Tensor::full(vec![3, 4], -0.2));
        let rows = vec![vec![0, 1, 2], vec![3, 0, 0], vec![1, 1, 0]];
        let out = bb.forward(&mut g, &mut binder, zu, zi, &rows).unwrap();
        assert!(g.value(out).data().iter().all(|&v| predict_ctr(v) == 0.5));
    }

    #[test]
    fn log_loss_of_half() {
        let mut g = Graph::<f64>::new();
        let s = g.constant(Tensor::matrix(1, 1, vec![0.0]).unwrap());
        let l = log_loss_graph(&mut g, s, &[1]).unwrap();
        assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn deepfm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layout = FieldLayout::from_schema(&schema(), 3, true);
        let mut bb: Backbone<f64> = Backbone::init(&mut rng, layout, HeadKind::DeepFm, &[5, 4]);
        if let Head::DeepFm(h) = &mut bb.head {
            h.linear = h.linear.iter().map(|w| normal_table(&mut rng, w.rows(), 1, 0.5)).collect();
        }
        let rows = vec![vec![0, 1, 2, 1], vec![3, 2, 0, 1], vec![1, 1, 0, 0]];
        let zu = normal_table::<f64, _>(&mut rng, 4, 3, 1.0);
        let zi = normal_table::<f64, _>(&mut rng, 4, 3, 1.0);
        let mut params = Vec::new();
        bb.push_params(&mut params);
        let names: Vec<String> = params.iter().map(|p| p.name.clone()).collect();
        let mut points: Vec<Tensor<f64>> = params.iter().map(|p| p.value.clone()).collect();
        points.push(zu);
        points.push(zi);
        let opts = GradCheckOptions { max_coords: Some(6), kinks: KinkPolicy::Skip, ..Default::default() };
        let rep = grad_check_many(
            |g, ids| {
                let mut binder = Binder::new(BindMode::Frozen);
                for (n, &id) in names.iter().zip(ids) {
                    binder = binder.with_override(n.clone(), id);
                }
                let k = names.len();
                let logits = bb.forward(g, &mut binder, ids[k], ids[k + 1], &rows).map_err(|e| match e {
                    BackboneError::Graph(e) => e,
                    other => panic!("{other}"),
                })?;
                log_loss_graph(g, logits, &[1, 0, 1, 1])
            },
            &points,
            &opts,
        )
        .unwrap();
        assert!(rep.max_rel_err <= 1e-4, "{rep:?}");
        assert!(rep.checked > 20);
    }
}
