use crate::diffgraph::sigmoid;
use crate::real::Real;

use super::{FrequencyTable, PosteriorTable, PriorNetwork, VarEmbedError};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GateConfig {
    pub stability_eps: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig { stability_eps: 1e-3 }
    }
}

/// Posterior weight `1 / (1 + exp(-freq + eps))`.
pub fn gate(freq: u64, cfg: &GateConfig) -> f64 {
    sigmoid(freq as f64 - cfg.stability_eps)
}

/// `g * mu_q + (1 - g) * mu_p`, coordinatewise, kept inside the segment
/// between the two points.
pub fn blend<T: Real>(mu_q: &[T], mu_p: &[T], weight: f64) -> Vec<T> {
    let w = T::of(weight);
    mu_q.iter()
        .zip(mu_p)
        .map(|(&q, &p)| {
            let z = p + w * (q - p);
            z.max(q.min(p)).min(q.max(p))
        })
        .collect()
}

/// Embedding used at prediction time. Seen IDs blend posterior and prior
/// means by the frequency gate; unseen IDs use the prior mean alone.
pub fn inference_embedding<T: Real>(
    table: &PosteriorTable<T>,
    net: &PriorNetwork<T>,
    id: Option<u32>,
    attrs: &[u32],
    freqs: &FrequencyTable,
    cfg: &GateConfig,
) -> Result<Vec<T>, VarEmbedError> {
    let (mu_p, _) = net.prior_params(attrs)?;
    let Some(id) = id else { return Ok(mu_p) };
    let Some(row) = table.row(id) else { return Ok(mu_p) };
    let f = freqs.get(id).ok_or(VarEmbedError::MissingFrequency(id))?;
    Ok(blend(table.mu.row(row), &mu_p, gate(f, cfg)))
}
