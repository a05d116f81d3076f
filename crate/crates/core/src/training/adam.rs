use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::diffgraph::Tensor;
use crate::params::ParamMut;
use crate::real::Real;

use super::TrainError;

#[derive(Clone, Debug, PartialEq)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter first and second moments, keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    moments: BTreeMap<String, Moments<T>>,
}

impl<T: Real> Default for AdamState<T> {
    fn default() -> Self {
        Self::new(AdamConfig::default())
    }
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState { config, step: 0, moments: BTreeMap::new() }
    }

    /// First-moment buffer of a parameter, if it has received a gradient.
    pub fn first_moment(&self, name: &str) -> Option<&[T]> {
        self.moments.get(name).map(|m| m.m.as_slice())
    }
}

/// One bias-corrected Adam update. Parameters without an entry in `grads`
/// are left untouched, as are their moments.
pub fn adam_step<T: Real>(
    params: &mut [ParamMut<'_, T>],
    grads: &HashMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<(), TrainError> {
    for p in params.iter() {
        if let Some(g) = grads.get(&p.name) {
            if g.shape() != p.value.shape() {
                return Err(TrainError::GradShape { name: p.name.clone(), expected: p.value.shape().to_vec(), got: g.shape().to_vec() });
            }
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
    let corr1 = T::of(1.0 - c.beta1.powi(t));
    let corr2 = T::of(1.0 - c.beta2.powi(t));
    let (lr, eps) = (T::of(lr), T::of(c.eps));
    for p in params.iter_mut() {
        let Some(g) = grads.get(&p.name) else { continue };
        let n = g.len();
        let mo = state.moments.entry(p.name.clone()).or_insert_with(|| Moments { m: vec![T::zero(); n], v: vec![T::zero(); n] });
        for (k, (w, &gk)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
            mo.m[k] = b1 * mo.m[k] + one_b1 * gk;
            mo.v[k] = b2 * mo.v[k] + one_b2 * gk * gk;
            let m_hat = mo.m[k] / corr1;
            let v_hat = mo.v[k] / corr2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
