//! Finite-difference checks of every primitive adjoint and of the objective's
//! gradient for every parameter group, in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{build_frequency_tables, synth_coldstart, Instance, SynthConfig};
use crate::diffgraph::{grad_check_many, GradCheckOptions, Graph, GraphError, KinkPolicy, NodeId, PrimKind, Tensor};
use crate::params::ParamGroup;
use crate::training::{elbo_grad_check, Noise, TrainConfig, TrainError, Variant, VelfModel};

/// Max relative error accepted by [`CheckLine::pass`].
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
    /// Set when the check itself could not run.
    pub error: Option<String>,
}

impl CheckLine {
    pub fn pass(&self) -> bool {
        self.error.is_none() && self.checked > 0 && self.max_rel_err <= TOLERANCE
    }

    pub fn render(&self) -> String {
        let verdict = if self.pass() { "PASS" } else { "FAIL" };
        match &self.error {
            Some(e) => format!("{verdict} {:<28} error: {e}", self.name),
            None => format!(
                "{verdict} {:<28} max_rel_err {:.3e} ({} coords, {} skipped)",
                self.name, self.max_rel_err, self.checked, self.skipped
            ),
        }
    }
}

fn line(name: String, r: Result<crate::diffgraph::GradCheckReport, impl std::fmt::Display>) -> CheckLine {
    match r {
        Ok(r) => CheckLine { name, max_rel_err: r.max_rel_err, checked: r.checked, skipped: r.skipped, error: None },
        Err(e) => CheckLine { name, max_rel_err: f64::NAN, checked: 0, skipped: 0, error: Some(e.to_string()) },
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Random weights dotted with `out`, so every output coordinate matters.
fn weigh(g: &mut Graph<f64>, out: NodeId, rng: &mut ChaCha8Rng) -> Result<NodeId, GraphError> {
    let shape = g.value(out).shape().to_vec();
    let w = g.constant(random(rng, &shape, -1.5, 1.5));
    let p = g.mul(out, w)?;
    g.reduce_sum(p)
}

/// Inputs and a forward closure exercising one primitive.
fn primitive_case(kind: PrimKind, seed: u64) -> (Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId, GraphError>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize], lo, hi| random(&mut rng, shape, lo, hi);
    let inputs = match kind {
        PrimKind::MatMul => vec![r(&[3, 4], -1.0, 1.0), r(&[4, 2], -1.0, 1.0)],
        PrimKind::Add => vec![r(&[3, 4], -1.0, 1.0), r(&[4], -1.0, 1.0)],
        PrimKind::Mul => vec![r(&[3, 4], -1.0, 1.0), r(&[3, 4], -1.0, 1.0)],
        PrimKind::Concat => vec![r(&[3, 2], -1.0, 1.0), r(&[3, 3], -1.0, 1.0)],
        PrimKind::GatherRows => vec![r(&[5, 3], -1.0, 1.0)],
        // Keep relu inputs away from its kink.
        PrimKind::Relu => {
            let mut t = r(&[4, 3], 0.1, 1.0);
            t.data_mut().iter_mut().step_by(2).for_each(|x| *x = -*x);
            vec![t]
        }
        PrimKind::Log => vec![r(&[4, 3], 0.2, 2.0)],
        _ => vec![r(&[4, 3], -2.0, 2.0)],
    };
    let f = move |g: &mut Graph<f64>, x: &[NodeId]| -> Result<NodeId, GraphError> {
        let mut wrng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let out = match kind {
            PrimKind::MatMul => g.matmul(x[0], x[1])?,
            PrimKind::Add => g.add(x[0], x[1])?,
            PrimKind::Mul => g.mul(x[0], x[1])?,
            PrimKind::Concat => g.concat(&[x[0], x[1]])?,
            PrimKind::GatherRows => g.gather_rows(x[0], vec![0, 2, 2, 4])?,
            PrimKind::Relu => g.relu(x[0])?,
            PrimKind::Sigmoid => g.sigmoid(x[0])?,
            PrimKind::Exp => g.exp(x[0])?,
            PrimKind::Log => g.log(x[0])?,
            PrimKind::Softplus => g.softplus(x[0])?,
            PrimKind::Square => g.square(x[0])?,
            // Reductions: weigh the input first so the scalar depends on every entry non-uniformly.
            PrimKind::ReduceSum | PrimKind::ReduceMean => {
                let shape = g.value(x[0]).shape().to_vec();
                let w = g.constant(random(&mut wrng, &shape, -1.5, 1.5));
                let p = g.mul(x[0], w)?;
                let s = if kind == PrimKind::ReduceSum { g.reduce_sum(p)? } else { g.reduce_mean(p)? };
                return g.square(s);
            }
        };
        weigh(g, out, &mut wrng)
    };
    (inputs, Box::new(f))
}

/// One line per primitive. With `fault = Some(d)`, each primitive's own
/// adjoint is perturbed by `d` while it is being checked.
pub fn check_primitives(fault: Option<f64>) -> Vec<CheckLine> {
    PrimKind::ALL
        .iter()
        .enumerate()
        .map(|(k, &kind)| {
            let (inputs, f) = primitive_case(kind, 100 + k as u64);
            let opts = GradCheckOptions { fault: fault.map(|d| (kind, d)), ..Default::default() };
            line(format!("primitive {}", kind.name()), grad_check_many(f, &inputs, &opts))
        })
        .collect()
}

fn group_name(g: ParamGroup) -> &'static str {
    match g {
        ParamGroup::PosteriorMean => "posterior_mean",
        ParamGroup::PosteriorScale => "posterior_scale",
        ParamGroup::PriorNet => "prior_net",
        ParamGroup::Head => "head",
        ParamGroup::AttributeTables => "attribute_tables",
    }
}

fn small_model(variant: Variant) -> Result<(VelfModel<f64>, Vec<Instance>), TrainError> {
    let corpus = synth_coldstart(&SynthConfig { n_users: 6, n_items: 6, n_train: 24, n_test_new_items: 2, ..Default::default() });
    let data = corpus.splits.train;
    let (uf, itf) = build_frequency_tables(&data);
    let config = TrainConfig { variant, dim: 3, hidden: vec![6, 6], prior_hidden: vec![5], ..Default::default() };
    let model = VelfModel::init(&mut ChaCha8Rng::seed_from_u64(7), &config, &corpus.splits.schema, uf, itf)?;
    Ok((model, data.into_iter().take(12).collect()))
}

/// One line per (variant, parameter group). Relu kinks crossed by a probe are
/// skipped. A fault, if any, is injected in turn into `reduce_mean` (every
/// log-loss path) and `reduce_sum` (every KL path); the worst result is kept.
pub fn check_groups(fault: Option<f64>) -> Vec<CheckLine> {
    let fault_kinds: Vec<Option<(PrimKind, f64)>> = match fault {
        Some(d) => vec![Some((PrimKind::ReduceMean, d)), Some((PrimKind::ReduceSum, d))],
        None => vec![None],
    };
    let mut out = Vec::new();
    for variant in Variant::ALL {
        let built = small_model(variant);
        for group in ParamGroup::ALL {
            let name = format!("{} {}", variant.name(), group_name(group));
            let mut worst: Option<CheckLine> = None;
            for &f in &fault_kinds {
                let r = built.as_ref().map_err(|e| e.to_string()).and_then(|(model, batch)| {
                    let refs: Vec<&Instance> = batch.iter().collect();
                    let noise = Noise::draw(&mut ChaCha8Rng::seed_from_u64(11), refs.len(), model.config.dim, 2);
                    let opts = GradCheckOptions { max_coords: Some(24), kinks: KinkPolicy::Skip, fault: f, ..Default::default() };
                    elbo_grad_check(model, &refs, 0.7, &noise, group, &opts).map_err(|e| e.to_string())
                });
                let l = line(name.clone(), r);
                worst = match worst {
                    Some(w) if w.error.is_some() || w.max_rel_err >= l.max_rel_err => Some(w),
                    _ => Some(l),
                };
            }
            let mut l = worst.expect("at least one run");
            // Groups a variant never touches have nothing to compare.
            if !touches(variant, group) {
                l.name.push_str(" (unused)");
            }
            out.push(l);
        }
    }
    out
}

fn touches(variant: Variant, group: ParamGroup) -> bool {
    match group {
        ParamGroup::PriorNet => variant.uses_prior_net(),
        ParamGroup::PosteriorScale => variant != Variant::Point,
        _ => true,
    }
}
