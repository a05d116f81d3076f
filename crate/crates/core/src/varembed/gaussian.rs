use crate::diffgraph::{Graph, GraphError, NodeId, Tensor};
use crate::real::Real;

use super::VarEmbedError;

fn check_dims(a: usize, b: usize) -> Result<(), VarEmbedError> {
    if a == b {
        Ok(())
    } else {
        Err(VarEmbedError::DimMismatch { expected: a, got: b })
    }
}

fn check_sigma<T: Real>(s: &[T]) -> Result<(), VarEmbedError> {
    match s.iter().find(|&&x| !(x > T::zero())) {
        Some(&x) => Err(VarEmbedError::NonPositiveSigma(x.as_f64())),
        None => Ok(()),
    }
}

/// `z = mu + sigma * noise`.
pub fn sample_embedding<T: Real>(mu: &[T], sigma: &[T], noise: &[T]) -> Result<Vec<T>, VarEmbedError> {
    check_dims(mu.len(), sigma.len())?;
    check_dims(mu.len(), noise.len())?;
    check_sigma(sigma)?;
    Ok(mu.iter().zip(sigma).zip(noise).map(|((&m, &s), &e)| m + s * e).collect())
}

/// Reparameterized draw inside a graph; `noise` enters as a constant.
pub fn sample_graph<T: Real>(g: &mut Graph<T>, mu: NodeId, sigma: NodeId, noise: Tensor<T>) -> Result<NodeId, GraphError> {
    let eps = g.constant(noise);
    let scaled = g.mul(sigma, eps)?;
    g.add(mu, scaled)
}

/// Closed-form `KL(N(mu_q, sigma_q²) || N(mu_p, sigma_p²))` summed over
/// dimensions, accumulated in `f64`.
pub fn kl_gaussian<T: Real>(mu_q: &[T], sigma_q: &[T], mu_p: &[T], sigma_p: &[T]) -> Result<f64, VarEmbedError> {
    let d = mu_q.len();
    check_dims(d, sigma_q.len())?;
    check_dims(d, mu_p.len())?;
    check_dims(d, sigma_p.len())?;
    check_sigma(sigma_q)?;
    check_sigma(sigma_p)?;
    let mut kl = 0.0;
    for k in 0..d {
        let (mq, sq, mp, sp) = (mu_q[k].as_f64(), sigma_q[k].as_f64(), mu_p[k].as_f64(), sigma_p[k].as_f64());
        let diff = mq - mp;
        kl += (sp / sq).ln() + (sq * sq + diff * diff) / (2.0 * sp * sp) - 0.5;
    }
    Ok(kl)
}

/// Monte Carlo estimate of `KL(q || p)` from `n` draws of `q`, with its
/// standard error.
pub fn kl_monte_carlo<R: rand::Rng>(rng: &mut R, mu_q: &[f64], sigma_q: &[f64], mu_p: &[f64], sigma_p: &[f64], n: usize) -> (f64, f64) {
    let log_ratio = |z: f64, k: usize| {
        let a = (z - mu_q[k]) / sigma_q[k];
        let b = (z - mu_p[k]) / sigma_p[k];
        (sigma_p[k] / sigma_q[k]).ln() - 0.5 * a * a + 0.5 * b * b
    };
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n {
        let mut x = 0.0;
        for k in 0..mu_q.len() {
            let eps: f64 = rng.sample(rand_distr::StandardNormal);
            x += log_ratio(mu_q[k] + sigma_q[k] * eps, k);
        }
        sum += x;
        sum_sq += x * x;
    }
    let nf = n as f64;
    let mean = sum / nf;
    let var = (sum_sq / nf - mean * mean).max(0.0) * nf / (nf - 1.0).max(1.0);
    (mean, (var / nf).sqrt())
}

/// KL divergence to the standard normal hyper-prior.
pub fn kl_to_standard<T: Real>(mu: &[T], sigma: &[T]) -> Result<f64, VarEmbedError> {
    let zeros = vec![T::zero(); mu.len()];
    let ones = vec![T::one(); mu.len()];
    kl_gaussian(mu, sigma, &zeros, &ones)
}

/// Elementwise Gaussian KL terms; sum the result to get the divergence.
pub fn kl_gaussian_graph<T: Real>(
    g: &mut Graph<T>,
    mu_q: NodeId,
    sigma_q: NodeId,
    mu_p: NodeId,
    sigma_p: NodeId,
) -> Result<NodeId, GraphError> {
    let log_sp = g.log(sigma_p)?;
    let log_sq = g.log(sigma_q)?;
    let log_ratio = g.sub(log_sp, log_sq)?;
    let diff = g.sub(mu_q, mu_p)?;
    let diff_sq = g.square(diff)?;
    let var_q = g.square(sigma_q)?;
    let num = g.add(var_q, diff_sq)?;
    // 1 / (2 sigma_p²) = exp(-2 log sigma_p) / 2
    let neg2 = g.scale(log_sp, -2.0)?;
    let inv_var = g.exp(neg2)?;
    let quad = g.mul(num, inv_var)?;
    let half_quad = g.scale(quad, 0.5)?;
    let kl = g.add(log_ratio, half_quad)?;
    g.shift(kl, -0.5)
}

/// Elementwise KL terms against `N(0, I)`.
pub fn kl_standard_graph<T: Real>(g: &mut Graph<T>, mu: NodeId, sigma: NodeId) -> Result<NodeId, GraphError> {
    let var = g.square(sigma)?;
    let mu_sq = g.square(mu)?;
    let num = g.add(var, mu_sq)?;
    let half = g.scale(num, 0.5)?;
    let log_s = g.log(sigma)?;
    let kl = g.sub(half, log_s)?;
    g.shift(kl, -0.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_examples() {
        let z = vec![0.0f64; 8];
        let o = vec![1.0f64; 8];
        assert_eq!(kl_gaussian(&z, &o, &z, &o).unwrap(), 0.0);
        assert!((kl_gaussian(&[1.0], &[1.0], &[0.0], &[1.0]).unwrap() - 0.5).abs() < 1e-15);
        let want = -(2.0f64).ln() + 2.0 - 0.5;
        assert!((kl_gaussian(&[0.0], &[2.0], &[0.0], &[1.0]).unwrap() - want).abs() < 1e-15);
        assert!((want - 0.80685).abs() < 1e-5);
    }

    #[test]
    fn kl_to_standard_examples() {
        assert_eq!(kl_to_standard(&[0.0f64], &[1.0]).unwrap(), 0.0);
        assert!((kl_to_standard(&[1.0f64], &[1.0]).unwrap() - 0.5).abs() < 1e-15);
        let v = kl_to_standard(&[0.0f64], &[0.5]).unwrap();
        assert!((v - (2.0f64.ln() + 0.125 - 0.5)).abs() < 1e-15);
        assert!((v - 0.31815).abs() < 1e-5);
    }

    #[test]
    fn kl_rejects_bad_sigma() {
        assert_eq!(kl_gaussian(&[0.0f64], &[0.0], &[0.0], &[1.0]), Err(VarEmbedError::NonPositiveSigma(0.0)));
        assert!(matches!(kl_gaussian(&[0.0f64], &[1.0], &[0.0, 1.0], &[1.0]), Err(VarEmbedError::DimMismatch { .. })));
    }

    #[test]
    fn sample_examples() {
        assert_eq!(sample_embedding(&[0.3f64, -1.0], &[2.0, 0.5], &[0.0, 0.0]).unwrap(), vec![0.3, -1.0]);
        assert_eq!(sample_embedding(&[0.0f64, 0.0], &[1.0, 1.0], &[1.0, -1.0]).unwrap(), vec![1.0, -1.0]);
        assert!(sample_embedding(&[0.0f64], &[1.0, 1.0], &[1.0]).is_err());
    }

    #[test]
    fn graph_kl_matches_closed_form() {
        let mq = [0.3, -1.2, 0.0];
        let sq = [0.7, 1.5, 0.2];
        let mp = [0.1, 0.4, -0.9];
        let sp = [1.1, 0.6, 2.0];
        let mut g = Graph::<f64>::new();
        let n = |g: &mut Graph<f64>, x: &[f64]| g.constant(Tensor::matrix(1, 3, x.to_vec()).unwrap());
        let (a, b, c, d) = (n(&mut g, &mq), n(&mut g, &sq), n(&mut g, &mp), n(&mut g, &sp));
        let kl = kl_gaussian_graph(&mut g, a, b, c, d).unwrap();
        let s = g.reduce_sum(kl).unwrap();
        let want = kl_gaussian(&mq, &sq, &mp, &sp).unwrap();
        assert!((g.value(s).data()[0] - want).abs() < 1e-12);

        let z = n(&mut g, &[0.0; 3]);
        let o = n(&mut g, &[1.0; 3]);
        let k1 = kl_standard_graph(&mut g, a, b).unwrap();
        let k2 = kl_gaussian_graph(&mut g, a, b, z, o).unwrap();
        let (s1, s2) = (g.reduce_sum(k1).unwrap(), g.reduce_sum(k2).unwrap());
        assert!((g.value(s1).data()[0] - g.value(s2).data()[0]).abs() < 1e-12);
    }
}
