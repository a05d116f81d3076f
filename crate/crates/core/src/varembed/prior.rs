use rand::Rng;

use crate::diffgraph::{Graph, GraphError, NodeId};
use crate::params::{normal_table, BindMode, Binder, Linear, ParamGroup, ParamMut, ParamRef};
use crate::real::Real;
use crate::diffgraph::Tensor;

use super::VarEmbedError;

/// Maps an attribute tuple to `(mu_p, sigma_p)`: attribute embeddings, a
/// relu trunk, and two linear heads with `sigma_p = softplus(rho_p)`.
///
/// Attribute code 0 in every field is the out-of-vocabulary bucket; codes at
/// or beyond a field's cardinality are routed there.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorNetwork<T> {
    pub attr_tables: Vec<Tensor<T>>,
    pub trunk: Vec<Linear<T>>,
    pub mu_head: Linear<T>,
    pub rho_head: Linear<T>,
}

impl<T: Real> PriorNetwork<T> {
    /// Glorot trunk, zero heads: the initial prior is `N(0, (ln 2)² I)`.
    pub fn init<R: Rng>(rng: &mut R, cards: &[usize], dim: usize, hidden: &[usize]) -> Self {
        let attr_tables = cards.iter().map(|&c| normal_table(rng, c.max(1), dim, 0.01)).collect();
        let mut trunk = Vec::with_capacity(hidden.len());
        let mut fan_in = dim * cards.len();
        for &h in hidden {
            trunk.push(Linear::glorot(rng, fan_in, h));
            fan_in = h;
        }
        PriorNetwork {
            attr_tables,
            trunk,
            mu_head: Linear::zeros(fan_in, dim),
            rho_head: Linear::zeros(fan_in, dim),
        }
    }

    pub fn arity(&self) -> usize {
        self.attr_tables.len()
    }

    pub fn dim(&self) -> usize {
        self.mu_head.fan_out()
    }

    pub fn cards(&self) -> Vec<usize> {
        self.attr_tables.iter().map(|t| t.shape()[0]).collect()
    }

    /// Per-field row indices for a batch of attribute tuples, with OOV routing.
    pub fn field_rows<'a>(&self, tuples: impl IntoIterator<Item = &'a [u32]>) -> Result<Vec<Vec<usize>>, VarEmbedError> {
        let cards = self.cards();
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); cards.len()];
        for t in tuples {
            if t.len() != cards.len() {
                return Err(VarEmbedError::AttrArity { expected: cards.len(), got: t.len() });
            }
            for (f, &code) in t.iter().enumerate() {
                rows[f].push(oov_route(code, cards[f]));
            }
        }
        Ok(rows)
    }

    /// Batched forward; `rows[f]` are the row indices for field `f`.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        binder: &mut Binder,
        prefix: &str,
        rows: &[Vec<usize>],
    ) -> Result<(NodeId, NodeId), GraphError> {
        let mut parts = Vec::with_capacity(rows.len());
        for (f, (table, idx)) in self.attr_tables.iter().zip(rows).enumerate() {
            let t = binder.bind(g, &format!("{prefix}.attr{f}"), table);
            parts.push(g.gather_rows(t, idx.clone())?);
        }
        let mut h = g.concat(&parts)?;
        for (l, layer) in self.trunk.iter().enumerate() {
            let a = layer.forward(g, binder, &format!("{prefix}.fc{l}"), h)?;
            h = g.relu(a)?;
        }
        let mu = self.mu_head.forward(g, binder, &format!("{prefix}.mu_head"), h)?;
        let rho = self.rho_head.forward(g, binder, &format!("{prefix}.rho_head"), h)?;
        let sigma = g.softplus(rho)?;
        Ok((mu, sigma))
    }

    /// `(mu_p, sigma_p)` for one attribute tuple.
    pub fn prior_params(&self, attrs: &[u32]) -> Result<(Vec<T>, Vec<T>), VarEmbedError> {
        let (mu, sigma) = self.prior_batch(std::iter::once(attrs))?;
        Ok((mu.into_data(), sigma.into_data()))
    }

    /// `(mu_p, sigma_p)` for many tuples, each `[n, dim]`.
    pub fn prior_batch<'a>(&self, tuples: impl IntoIterator<Item = &'a [u32]>) -> Result<(Tensor<T>, Tensor<T>), VarEmbedError> {
        let rows = self.field_rows(tuples)?;
        let mut g = Graph::new();
        let mut binder = Binder::new(BindMode::Frozen);
        let (mu, sigma) = self.forward(&mut g, &mut binder, "prior", &rows)?;
        Ok((g.value(mu).clone(), g.value(sigma).clone()))
    }

    pub fn push_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        for (f, t) in self.attr_tables.iter().enumerate() {
            out.push(ParamRef { name: format!("{prefix}.attr{f}"), group: ParamGroup::AttributeTables, value: t });
        }
        for (l, layer) in self.trunk.iter().enumerate() {
            layer.push_params(&format!("{prefix}.fc{l}"), ParamGroup::PriorNet, out);
        }
        self.mu_head.push_params(&format!("{prefix}.mu_head"), ParamGroup::PriorNet, out);
        self.rho_head.push_params(&format!("{prefix}.rho_head"), ParamGroup::PriorNet, out);
    }

    pub fn push_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        for (f, t) in self.attr_tables.iter_mut().enumerate() {
            out.push(ParamMut { name: format!("{prefix}.attr{f}"), group: ParamGroup::AttributeTables, value: t });
        }
        for (l, layer) in self.trunk.iter_mut().enumerate() {
            layer.push_params_mut(&format!("{prefix}.fc{l}"), ParamGroup::PriorNet, out);
        }
        self.mu_head.push_params_mut(&format!("{prefix}.mu_head"), ParamGroup::PriorNet, out);
        self.rho_head.push_params_mut(&format!("{prefix}.rho_head"), ParamGroup::PriorNet, out);
    }
}

/// Codes outside `0..card` fall into the reserved bucket 0.
pub(crate) fn oov_route(code: u32, card: usize) -> usize {
    let c = code as usize;
    if c < card {
        c
    } else {
        0
    }
}
