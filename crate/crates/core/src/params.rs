//! Named parameters and their binding into a [`Graph`].

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::diffgraph::{Graph, GraphError, NodeId, Tensor};
use crate::real::Real;

/// Coarse grouping used by gradient checks and reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum ParamGroup {
    PosteriorMean,
    PosteriorScale,
    PriorNet,
    Head,
    AttributeTables,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::PosteriorMean,
        ParamGroup::PosteriorScale,
        ParamGroup::PriorNet,
        ParamGroup::Head,
        ParamGroup::AttributeTables,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::PosteriorMean => "posterior_mean",
            ParamGroup::PosteriorScale => "posterior_scale",
            ParamGroup::PriorNet => "prior_net",
            ParamGroup::Head => "head",
            ParamGroup::AttributeTables => "attribute_tables",
        }
    }
}

/// Mutable view of one named parameter.
pub struct ParamMut<'a, T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: &'a mut Tensor<T>,
}

/// Shared view of one named parameter.
pub struct ParamRef<'a, T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: &'a Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BindMode {
    /// Parameters become trainable leaves.
    Train,
    /// Parameters become constants; no gradients are produced.
    Frozen,
}

/// Maps parameter names to graph nodes for one forward pass.
///
/// A name bound twice resolves to the same node, so shared parameters
/// accumulate gradients in one place.
pub struct Binder {
    mode: BindMode,
    nodes: HashMap<String, NodeId>,
    order: Vec<String>,
}

impl Binder {
    pub fn new(mode: BindMode) -> Self {
        Binder { mode, nodes: HashMap::new(), order: Vec::new() }
    }

    /// Pre-bind `name` to an existing node (used by gradient checks).
    pub fn with_override(mut self, name: impl Into<String>, node: NodeId) -> Self {
        let name = name.into();
        self.order.push(name.clone());
        self.nodes.insert(name, node);
        self
    }

    pub fn bind<T: Real>(&mut self, g: &mut Graph<T>, name: &str, value: &Tensor<T>) -> NodeId {
        if let Some(&n) = self.nodes.get(name) {
            return n;
        }
        let n = match self.mode {
            BindMode::Train => g.param(value.clone()),
            BindMode::Frozen => g.constant(value.clone()),
        };
        self.nodes.insert(name.to_string(), n);
        self.order.push(name.to_string());
        n
    }

    pub fn node(&self, name: &str) -> Option<NodeId> {
        self.nodes.get(name).copied()
    }

    /// Bound names in first-bind order.
    pub fn names(&self) -> &[String] {
        &self.order
    }
}

/// Fully connected layer `x W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Real> Linear<T> {
    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let u = Uniform::new_inclusive(-a, a).expect("finite bound");
        let w = (0..fan_in * fan_out).map(|_| T::of(u.sample(rng))).collect();
        Linear {
            w: Tensor::new(vec![fan_in, fan_out], w).expect("shape"),
            b: Tensor::zeros(vec![fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear { w: Tensor::zeros(vec![fan_in, fan_out]), b: Tensor::zeros(vec![fan_out]) }
    }

    pub fn fan_in(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn forward(&self, g: &mut Graph<T>, binder: &mut Binder, prefix: &str, x: NodeId) -> Result<NodeId, GraphError> {
        let w = binder.bind(g, &format!("{prefix}.w"), &self.w);
        let b = binder.bind(g, &format!("{prefix}.b"), &self.b);
        let h = g.matmul(x, w)?;
        g.add(h, b)
    }

    pub fn push_params<'a>(&'a self, prefix: &str, group: ParamGroup, out: &mut Vec<ParamRef<'a, T>>) {
        out.push(ParamRef { name: format!("{prefix}.w"), group, value: &self.w });
        out.push(ParamRef { name: format!("{prefix}.b"), group, value: &self.b });
    }

    pub fn push_params_mut<'a>(&'a mut self, prefix: &str, group: ParamGroup, out: &mut Vec<ParamMut<'a, T>>) {
        out.push(ParamMut { name: format!("{prefix}.w"), group, value: &mut self.w });
        out.push(ParamMut { name: format!("{prefix}.b"), group, value: &mut self.b });
    }
}

/// `rows × cols` table with entries drawn from `N(0, std²)`.
pub fn normal_table<T: Real, R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor<T> {
    let n = Normal::new(0.0, std).expect("std must be finite and non-negative");
    let d = (0..rows * cols).map(|_| T::of(n.sample(rng))).collect();
    Tensor::new(vec![rows, cols], d).expect("shape")
}
