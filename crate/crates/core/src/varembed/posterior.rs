use std::collections::HashMap;

use rand::Rng;

use crate::diffgraph::{softplus, Graph, GraphError, NodeId, Tensor};
use crate::params::{normal_table, Binder, ParamGroup, ParamMut, ParamRef};
use crate::real::Real;

use super::VarEmbedError;

/// Initial `rho`; softplus(-3) is about 0.049. Starting near the prior's
/// unit scale drowns the tiny initial means in sampling noise and training
/// stalls at chance.
pub const INIT_RHO: f64 = -3.0;

/// Per-ID Gaussian posterior `N(mu, softplus(rho)²)`, one row per ID seen in
/// training.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorTable<T> {
    ids: Vec<u32>,
    index: HashMap<u32, usize>,
    pub mu: Tensor<T>,
    pub rho: Tensor<T>,
}

impl<T: Real> PosteriorTable<T> {
    /// `mu ~ N(0, 0.01²)` and `rho = INIT_RHO`.
    pub fn init<R: Rng>(rng: &mut R, ids: Vec<u32>, dim: usize) -> Self {
        let mu = normal_table(rng, ids.len().max(1), dim, 0.01);
        let rows = ids.len().max(1);
        let rho = Tensor::new(vec![rows, dim], vec![T::of(INIT_RHO); rows * dim]).expect("consistent shapes");
        Self::from_parts(ids, mu, rho).expect("consistent shapes")
    }

    pub fn from_parts(ids: Vec<u32>, mu: Tensor<T>, rho: Tensor<T>) -> Result<Self, VarEmbedError> {
        let rows = ids.len().max(1);
        if mu.shape().len() != 2 || mu.shape()[0] != rows {
            return Err(VarEmbedError::DimMismatch { expected: rows, got: mu.shape()[0] });
        }
        if rho.shape() != mu.shape() {
            return Err(VarEmbedError::DimMismatch { expected: mu.len(), got: rho.len() });
        }
        let index = ids.iter().enumerate().map(|(r, &id)| (id, r)).collect();
        Ok(PosteriorTable { ids, index, mu, rho })
    }

    pub fn dim(&self) -> usize {
        self.mu.cols()
    }

    /// IDs in row order.
    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, id: u32) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn rows(&self, ids: impl IntoIterator<Item = u32>) -> Result<Vec<usize>, VarEmbedError> {
        ids.into_iter().map(|id| self.row(id).ok_or(VarEmbedError::UnseenId(id))).collect()
    }

    /// `(mu_q, sigma_q)` for one ID.
    pub fn params(&self, id: u32) -> Result<(Vec<T>, Vec<T>), VarEmbedError> {
        let r = self.row(id).ok_or(VarEmbedError::UnseenId(id))?;
        Ok((self.mu.row(r).to_vec(), self.rho.row(r).iter().map(|&x| softplus(x)).collect()))
    }

    /// Gather `(mu_q, sigma_q)` rows into the graph, each `[rows.len(), dim]`.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        binder: &mut Binder,
        prefix: &str,
        rows: &[usize],
    ) -> Result<(NodeId, NodeId), GraphError> {
        let mu = binder.bind(g, &format!("{prefix}.mu"), &self.mu);
        let rho = binder.bind(g, &format!("{prefix}.rho"), &self.rho);
        let mu_rows = g.gather_rows(mu, rows.to_vec())?;
        let rho_rows = g.gather_rows(rho, rows.to_vec())?;
        let sigma = g.softplus(rho_rows)?;
        Ok((mu_rows, sigma))
    }

    pub fn push_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        out.push(ParamRef { name: format!("{prefix}.mu"), group: ParamGroup::PosteriorMean, value: &self.mu });
        out.push(ParamRef { name: format!("{prefix}.rho"), group: ParamGroup::PosteriorScale, value: &self.rho });
    }

    pub fn push_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        out.push(ParamMut { name: format!("{prefix}.mu"), group: ParamGroup::PosteriorMean, value: &mut self.mu });
        out.push(ParamMut { name: format!("{prefix}.rho"), group: ParamGroup::PosteriorScale, value: &mut self.rho });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(mu: Vec<f64>, rho: Vec<f64>) -> PosteriorTable<f64> {
        let d = mu.len();
        PosteriorTable::from_parts(vec![7], Tensor::matrix(1, d, mu).unwrap(), Tensor::matrix(1, d, rho).unwrap())
            .unwrap()
    }

    #[test]
    fn zero_rho_gives_ln2() {
        let t = table(vec![0.0; 4], vec![0.0; 4]);
        let (_, s) = t.params(7).unwrap();
        assert!(s.iter().all(|&x| (x - std::f64::consts::LN_2).abs() < 1e-15));
    }

    #[test]
    fn very_negative_rho_is_tiny_but_positive() {
        let t = table(vec![0.1, -0.2], vec![-20.0, -20.0]);
        let (m, s) = t.params(7).unwrap();
        assert_eq!(m, vec![0.1, -0.2]);
        for x in s {
            assert!(x > 0.0 && (x - 2.061e-9).abs() < 1e-11, "{x}");
        }
    }

    #[test]
    fn unseen_id() {
        let t = table(vec![0.0], vec![0.0]);
        assert_eq!(t.params(8), Err(VarEmbedError::UnseenId(8)));
        assert_eq!(t.rows([7, 8]), Err(VarEmbedError::UnseenId(8)));
    }
}
