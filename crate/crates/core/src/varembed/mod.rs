//! Gaussian embedding posteriors, attribute-conditioned priors, and the
//! frequency-gated embedding used at inference time.

mod frequency;
mod gaussian;
mod inference;
mod posterior;
mod prior;

use thiserror::Error;

use crate::diffgraph::GraphError;

pub use frequency::FrequencyTable;
pub use gaussian::{kl_gaussian, kl_gaussian_graph, kl_monte_carlo, kl_standard_graph, kl_to_standard, sample_embedding, sample_graph};
pub use inference::{blend, gate, inference_embedding, GateConfig};
pub use posterior::PosteriorTable;
pub use prior::PriorNetwork;
pub(crate) use prior::oov_route;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VarEmbedError {
    #[error("id {0} has no posterior row")]
    UnseenId(u32),
    #[error("id {0} has a posterior row but no training frequency")]
    MissingFrequency(u32),
    #[error("scale must be positive, found {0}")]
    NonPositiveSigma(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("attribute tuple has {got} values, network expects {expected}")]
    AttrArity { expected: usize, got: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}
