//! Ground truth for Gaussian-mixture targets under the linear interpolant.
//!
//! With `x_t = (1-t) x0 + t eps`, the marginal velocity is
//! `v(x,t) = (x - E[x0 | x_t = x]) / t`, and for an isotropic mixture the
//! conditional mean has a closed form through per-component posteriors with
//! marginal variance `s_i^2 = (1-t)^2 var_i + t^2`. A Monte-Carlo estimator
//! of the same quantity serves as the independent cross-check, and a
//! reference Euler integrator plus two-sample distances complete the
//! measurement kit.

use rand::rngs::StdRng;
use rand_distr::{Distribution, StandardNormal};

use crate::datagen::{sample_mixture, MixtureSpec};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::{slice_dist, slice_norm, Tensor};

/// Closed-form marginal velocity of the mixture at `(x, t)`, `t` strictly
/// inside `(0,1)`. Responsibilities are accumulated in log space.
pub fn oracle_velocity(spec: &MixtureSpec, x: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Config(format!("t must be in (0,1), got {t}")));
    }
    let d = spec.dim();
    if x.len() != d {
        return Err(Error::Shape(format!("point dim {} vs mixture dim {d}", x.len())));
    }
    let a = 1.0 - t;

    // log responsibilities: log w_i + log N(x; a*mu_i, s_i^2 I)
    let mut log_r = Vec::with_capacity(spec.components().len());
    for c in spec.components() {
        let s2 = a * a * c.var + t * t;
        let mut sq = 0.0;
        for k in 0..d {
            let diff = x[k] - a * c.mean[k];
            sq += diff * diff;
        }
        log_r.push(c.weight.ln() - 0.5 * d as f64 * s2.ln() - sq / (2.0 * s2));
    }
    let max = log_r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut resp: Vec<f64> = log_r.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = resp.iter().sum();
    for r in &mut resp {
        *r /= total;
    }

    // E[x0 | x] = sum_i r_i (mu_i + a var_i / s_i^2 * (x - a mu_i))
    let mut cond_mean = vec![0.0; d];
    for (r, c) in resp.iter().zip(spec.components()) {
        let s2 = a * a * c.var + t * t;
        let gain = a * c.var / s2;
        for k in 0..d {
            cond_mean[k] += r * (c.mean[k] + gain * (x[k] - a * c.mean[k]));
        }
    }

    let v: Vec<f64> = x.iter().zip(&cond_mean).map(|(xi, m)| (xi - m) / t).collect();
    if v.iter().any(|u| !u.is_finite()) {
        return Err(Error::Numeric("oracle velocity is not finite".into()));
    }
    Ok(v)
}

/// Brute-force estimate of the same velocity: draw `x0 ~ spec`, weight each
/// draw by `N(x; (1-t) x0, t^2 I)` in log space, return the weighted mean of
/// `(x - x0)/t`. Fails if the effective sample size drops below 10.
pub fn mc_velocity(spec: &MixtureSpec, x: &[f64], t: f64, n: usize, seed: u64) -> Result<Vec<f64>> {
    if n < 1000 {
        return Err(Error::Config(format!("mc_velocity needs n >= 1000, got {n}")));
    }
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Config(format!("t must be in (0,1), got {t}")));
    }
    let d = spec.dim();
    if x.len() != d {
        return Err(Error::Shape(format!("point dim {} vs mixture dim {d}", x.len())));
    }

    let draws = sample_mixture(spec, n, seed)?;
    let a = 1.0 - t;
    let mut log_w = Vec::with_capacity(n);
    for i in 0..n {
        let x0 = draws.points.row(i);
        let mut sq = 0.0;
        for k in 0..d {
            let diff = x[k] - a * x0[k];
            sq += diff * diff;
        }
        log_w.push(-sq / (2.0 * t * t));
    }
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    let ess = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
    if ess < 10.0 {
        return Err(Error::Numeric(format!(
            "mc_velocity unreliable: effective sample size {ess:.2} < 10"
        )));
    }

    let mut v = vec![0.0; d];
    for i in 0..n {
        let x0 = draws.points.row(i);
        let w = weights[i];
        for k in 0..d {
            v[k] += w * (x[k] - x0[k]) / t;
        }
    }
    Ok(v)
}

/// A draw from the time-t marginal of the corruption process:
/// `x = (1-t) x0 + t eps`.
pub fn marginal_point(spec: &MixtureSpec, t: f64, rng: &mut StdRng) -> Vec<f64> {
    let (x0, _) = crate::datagen::sample_one(spec, rng);
    x0.into_iter()
        .map(|v| {
            let eps: f64 = StandardNormal.sample(rng);
            (1.0 - t) * v + t * eps
        })
        .collect()
}

/// Endpoint padding for the oracle integrator; the velocity has a `1/t`
/// factor so integration stops at `t = delta` and finishes with one linear
/// extrapolation, which is exact for the conditional-mean limit.
pub const ORACLE_ENDPOINT_PADDING: f64 = 1e-3;

/// Euler-integrate the closed-form field from noise to a sample.
pub fn oracle_sample(spec: &MixtureSpec, noise: &[f64], steps: usize) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::Config("steps must be >= 1".into()));
    }
    let delta = ORACLE_ENDPOINT_PADDING;
    let t_start = 1.0 - delta;
    let mut x = noise.to_vec();
    let dt = (delta - t_start) / steps as f64;
    for k in 0..steps {
        let t = t_start + dt * k as f64;
        let v = oracle_velocity(spec, &x, t)?;
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi += dt * vi;
        }
    }
    // Final hop delta -> 0: x - delta * v(x, delta) = E[x0 | x].
    let v = oracle_velocity(spec, &x, delta)?;
    for (xi, vi) in x.iter_mut().zip(&v) {
        *xi -= delta * vi;
    }
    Ok(x)
}

/// Mean over random unit projections of the exact 1-D W2 distance between
/// equal-size samples.
pub fn sliced_wasserstein(a: &Tensor, b: &Tensor, n_proj: usize, seed: u64) -> Result<f64> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::Config("empty sample set".into()));
    }
    if a.row_len() != b.row_len() {
        return Err(Error::Shape(format!(
            "dimension mismatch: {} vs {}",
            a.row_len(),
            b.row_len()
        )));
    }
    if a.rows() != b.rows() {
        return Err(Error::Config(format!(
            "sliced_wasserstein expects equal sample counts, got {} vs {}",
            a.rows(),
            b.rows()
        )));
    }
    if n_proj == 0 {
        return Err(Error::Config("n_proj must be >= 1".into()));
    }

    let d = a.row_len();
    let n = a.rows();
    let mut rng = rng_from(seed);
    let mut acc = 0.0;
    let mut pa = vec![0.0; n];
    let mut pb = vec![0.0; n];
    for _ in 0..n_proj {
        let dir = random_unit(d, &mut rng);
        for i in 0..n {
            pa[i] = crate::tensor::slice_dot(a.row(i), &dir);
            pb[i] = crate::tensor::slice_dot(b.row(i), &dir);
        }
        pa.sort_by(|x, y| x.partial_cmp(y).unwrap());
        pb.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let mut sq = 0.0;
        for i in 0..n {
            let diff = pa[i] - pb[i];
            sq += diff * diff;
        }
        acc += (sq / n as f64).sqrt();
    }
    Ok(acc / n_proj as f64)
}

fn random_unit(d: usize, rng: &mut StdRng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = slice_norm(&v);
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Unbiased Gaussian-kernel MMD^2 estimate, clamped at zero.
pub fn mmd(a: &Tensor, b: &Tensor, bandwidth: f64) -> Result<f64> {
    let (m, n) = (a.rows(), b.rows());
    if m < 2 || n < 2 {
        return Err(Error::Config("mmd needs at least 2 points per set".into()));
    }
    if a.row_len() != b.row_len() {
        return Err(Error::Shape("mmd dimension mismatch".into()));
    }
    if bandwidth <= 0.0 {
        return Err(Error::Config("bandwidth must be positive".into()));
    }
    let g = 1.0 / (2.0 * bandwidth * bandwidth);
    let k = |u: &[f64], v: &[f64]| -> f64 {
        let dist = slice_dist(u, v);
        (-g * dist * dist).exp()
    };
    let mut kaa = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                kaa += k(a.row(i), a.row(j));
            }
        }
    }
    kaa /= (m * (m - 1)) as f64;
    let mut kbb = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                kbb += k(b.row(i), b.row(j));
            }
        }
    }
    kbb /= (n * (n - 1)) as f64;
    let mut kab = 0.0;
    for i in 0..m {
        for j in 0..n {
            kab += k(a.row(i), b.row(j));
        }
    }
    kab /= (m * n) as f64;
    Ok((kaa + kbb - 2.0 * kab).max(0.0))
}

/// Class-conditional sampler over the oracle field: balanced classes, one
/// trajectory per sample, noise seeded per index.
pub fn oracle_conditional_samples(
    spec: &MixtureSpec,
    n: usize,
    steps: usize,
    seed: u64,
) -> Result<Tensor> {
    let d = spec.dim();
    let classes = spec.class_ids();
    let conditionals: Vec<MixtureSpec> = classes
        .iter()
        .map(|&c| spec.conditional(c))
        .collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        let cls = i % conditionals.len();
        let mut rng = rng_from(derive_seed(seed, i as u64));
        let noise: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x = oracle_sample(&conditionals[cls], &noise, steps)?;
        data.extend_from_slice(&x);
    }
    Tensor::new(vec![n, d], data)
}
