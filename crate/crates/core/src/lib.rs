//! Variational embeddings for cold-start CTR prediction.
//!
//! Each user and item ID gets a Gaussian posterior over its embedding, regularized
//! toward a prior produced from the ID's attributes. Training maximizes an annealed
//! evidence lower bound; inference blends posterior and prior means by how often
//! the ID was seen in training.

pub mod diffgraph;
mod real;

pub use real::Real;
pub mod params;
pub mod varembed;
pub mod data;
pub mod backbone;
pub mod training;
pub mod eval;
pub mod selfcheck;
