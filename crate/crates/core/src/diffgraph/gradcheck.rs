use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, GraphError, NodeId, PrimKind, Tensor};

/// What to do when a finite-difference probe changes some relu's active set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KinkPolicy {
    /// Fail with [`GraphError::NonSmooth`].
    Error,
    /// Drop that coordinate from the comparison.
    Skip,
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many coordinates per input tensor, chosen by `seed`.
    pub max_coords: Option<usize>,
    pub seed: u64,
    pub kinks: KinkPolicy,
    /// Perturb the adjoint of one primitive (mutation self-test).
    pub fault: Option<(PrimKind, f64)>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-5, max_coords: None, seed: 0, kinks: KinkPolicy::Error, fault: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over inputs and coordinates of `|analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// Compare the analytic gradient of a scalar function of one tensor with
/// central differences. Returns the max relative error.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, step: f64) -> Result<f64, GraphError>
where
    F: Fn(&mut Graph<f64>, NodeId) -> Result<NodeId, GraphError>,
{
    let opts = GradCheckOptions { step, ..Default::default() };
    grad_check_many(|g, xs| f(g, xs[0]), std::slice::from_ref(point), &opts).map(|r| r.max_rel_err)
}

/// Multi-input variant of [`grad_check`].
pub fn grad_check_many<F>(f: F, points: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport, GraphError>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId, GraphError>,
{
    if !(opts.step > 0.0) {
        return Err(GraphError::BadStep);
    }
    let mut g = Graph::new();
    if let Some((kind, delta)) = opts.fault {
        g.inject_adjoint_fault(kind, delta);
    }
    let ids: Vec<NodeId> = points.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &ids)?;
    if !g.value(loss).is_finite() {
        return Err(GraphError::NonFinite);
    }
    let base_pattern = g.relu_pattern();
    let grads = g.backward(loss)?;

    let eval = |pts: &[Tensor<f64>]| -> Result<(f64, Vec<bool>), GraphError> {
        let mut h = Graph::new();
        let ids: Vec<NodeId> = pts.iter().map(|p| h.constant(p.clone())).collect();
        let out = f(&mut h, &ids)?;
        let v = h.value(out).data()[0];
        if !v.is_finite() {
            return Err(GraphError::NonFinite);
        }
        Ok((v, h.relu_pattern()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor<f64>> = points.to_vec();
    let mut report = GradCheckReport { max_rel_err: 0.0, checked: 0, skipped: 0 };
    for (t, id) in ids.iter().enumerate() {
        let n = points[t].len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let analytic = grads.get(*id);
        for c in coords {
            let a = analytic.map_or(0.0, |g| g.data()[c]);
            let x0 = points[t].data()[c];
            work[t].data_mut()[c] = x0 + opts.step;
            let (fp, pp) = eval(&work)?;
            work[t].data_mut()[c] = x0 - opts.step;
            let (fm, pm) = eval(&work)?;
            work[t].data_mut()[c] = x0;
            if pp != base_pattern || pm != base_pattern {
                match opts.kinks {
                    KinkPolicy::Error => return Err(GraphError::NonSmooth),
                    KinkPolicy::Skip => {
                        report.skipped += 1;
                        continue;
                    }
                }
            }
            let numeric = (fp - fm) / (2.0 * opts.step);
            let err = (a - numeric).abs() / a.abs().max(1.0);
            report.max_rel_err = report.max_rel_err.max(err);
            report.checked += 1;
        }
    }
    if report.checked == 0 && report.skipped > 0 {
        return Err(GraphError::NonSmooth);
    }
    Ok(report)
}
