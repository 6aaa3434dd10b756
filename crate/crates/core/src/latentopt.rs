//! Property optimization in latent space: fixed-size molecule embeddings, a
//! FITC sparse Gaussian process with an RBF kernel, expected improvement and
//! a batch Bayesian optimization loop over a pluggable problem.

use std::collections::HashMap;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::decoder::sample_from_latent;
use crate::encoder::{posterior, Posterior};
use crate::masks::MaskSet;
use crate::molgraph::{canonical_certificate, validate_molecule, MolecularGraph, ValenceTable, ValidityRule};
use crate::tensor::{cholesky, matmul, solve_lower, Tape, Tensor, TensorError, Var};
use crate::training::ModelParams;
use crate::{Error, Result};

/// `[mean_u μ_u, Σ_u μ_u]`, a `2D` vector.
pub fn molecule_embedding(post: &Posterior) -> Vec<f64> {
    let (n, d) = (post.n(), post.d());
    let mut sum = vec![0.0; d];
    for u in 0..n {
        for (s, m) in sum.iter_mut().zip(post.mu.row(u)) {
            *s += m;
        }
    }
    let mut out: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    out.extend(sum);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RbfHyper {
    pub variance: f64,
    pub lengthscale: f64,
    pub noise: f64,
}

impl RbfHyper {
    pub fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        self.variance * (-0.5 * sqdist(a, b) / (self.lengthscale * self.lengthscale)).exp()
    }
}

fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

const JITTERS: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];
const MIN_NOISE: f64 = 1e-6;

/// A conditioned FITC model. Targets are standardized internally.
#[derive(Debug, Clone)]
pub struct SgpModel {
    hyper: RbfHyper,
    inducing: Vec<Vec<f64>>,
    y_mean: f64,
    y_scale: f64,
    jitter: f64,
    l_m: Tensor,
    l_b: Tensor,
    c: Tensor,
    n_train: usize,
}

fn check_data(x: &[Vec<f64>], y: &[f64]) -> Result<usize> {
    if x.is_empty() {
        return Err(Error::Gp("no training points".into()));
    }
    if x.len() != y.len() {
        return Err(Error::Gp(format!("{} inputs but {} targets", x.len(), y.len())));
    }
    let dim = x[0].len();
    if dim == 0 || x.iter().any(|r| r.len() != dim) {
        return Err(Error::Gp("inputs must be non-empty rows of equal length".into()));
    }
    if x.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Gp("non-finite training data".into()));
    }
    Ok(dim)
}

fn standardization(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    (mean, if sd > 1e-12 { sd } else { 1.0 })
}

fn kernel_matrix(hyper: &RbfHyper, a: &[Vec<f64>], b: &[Vec<f64>]) -> Tensor {
    let data = a
        .iter()
        .flat_map(|p| b.iter().map(move |q| hyper.kernel(p, q)))
        .collect();
    Tensor::matrix(a.len(), b.len(), data).expect("sizes agree")
}

fn chol_with_jitter(k: &Tensor) -> Result<(Tensor, f64)> {
    let m = k.rows();
    let mut last = None;
    for jitter in JITTERS {
        let mut kj = k.clone();
        for i in 0..m {
            kj.data_mut()[i * m + i] += jitter;
        }
        match cholesky(&kj) {
            Ok(l) => return Ok((l, jitter)),
            Err(e) => last = Some(e),
        }
    }
    Err(Error::Gp(format!(
        "inducing kernel matrix not positive definite at jitter {:e}: {}",
        JITTERS[JITTERS.len() - 1],
        last.expect("at least one attempt")
    )))
}

impl SgpModel {
    /// Conditions a FITC model with fixed hyperparameters and inducing
    /// inputs. `standardization` defaults to the targets' own mean and
    /// standard deviation.
    pub fn condition(
        x: &[Vec<f64>],
        y: &[f64],
        inducing: Vec<Vec<f64>>,
        hyper: RbfHyper,
        standardization_override: Option<(f64, f64)>,
    ) -> Result<Self> {
        let dim = check_data(x, y)?;
        if inducing.is_empty() || inducing.iter().any(|r| r.len() != dim) {
            return Err(Error::Gp(
                "inducing inputs must be non-empty rows of the input width".into(),
            ));
        }
        if !(hyper.variance > 0.0 && hyper.lengthscale > 0.0 && hyper.noise > 0.0) {
            return Err(Error::Gp(format!("kernel hyperparameters must be positive: {hyper:?}")));
        }
        let (y_mean, y_scale) = standardization_override.unwrap_or_else(|| standardization(y));
        let ys: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_scale).collect();
        let n = x.len();
        let m = inducing.len();

        let (l_m, jitter) = chol_with_jitter(&kernel_matrix(&hyper, &inducing, &inducing))?;
        let k_mn = kernel_matrix(&hyper, &inducing, x);
        let v = solve_lower(&l_m, &k_mn);
        let lambda: Vec<f64> = (0..n)
            .map(|i| {
                let q: f64 = (0..m).map(|j| v.get2(j, i).powi(2)).sum();
                (hyper.variance - q).max(0.0) + hyper.noise
            })
            .collect();
        let mut v_scaled = v.clone();
        for j in 0..m {
            for (i, l) in lambda.iter().enumerate() {
                v_scaled.data_mut()[j * n + i] /= l;
            }
        }
        let mut b = matmul(&v_scaled, &v.transposed());
        for j in 0..m {
            b.data_mut()[j * m + j] += 1.0;
        }
        let l_b = cholesky(&b).map_err(|e| Error::Gp(format!("FITC inner matrix: {e}")))?;
        let r = matmul(&v_scaled, &Tensor::matrix(n, 1, ys)?);
        let c = solve_lower(&l_b, &r);
        Ok(SgpModel {
            hyper,
            inducing,
            y_mean,
            y_scale,
            jitter,
            l_m,
            l_b,
            c,
            n_train: n,
        })
    }

    /// Same hyperparameters, inducing inputs and target scaling, new data.
    pub fn recondition(&self, x: &[Vec<f64>], y: &[f64]) -> Result<Self> {
        SgpModel::condition(
            x,
            y,
            self.inducing.clone(),
            self.hyper,
            Some((self.y_mean, self.y_scale)),
        )
    }

    pub fn hyper(&self) -> RbfHyper {
        self.hyper
    }

    pub fn inducing(&self) -> &[Vec<f64>] {
        &self.inducing
    }

    pub fn n_train(&self) -> usize {
        self.n_train
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Latent mean and variance at `x`, in target units.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let m = self.inducing.len();
        let k: Vec<f64> = self.inducing.iter().map(|z| self.hyper.kernel(z, x)).collect();
        let a = solve_lower(&self.l_m, &Tensor::matrix(m, 1, k).expect("column"));
        let b = solve_lower(&self.l_b, &a);
        let mean: f64 = b.data().iter().zip(self.c.data()).map(|(p, q)| p * q).sum();
        let aa: f64 = a.data().iter().map(|v| v * v).sum();
        let bb: f64 = b.data().iter().map(|v| v * v).sum();
        let var = (self.hyper.variance - aa + bb).max(0.0);
        (self.y_mean + self.y_scale * mean, self.y_scale * self.y_scale * var)
    }

    /// Predictive distribution of a noisy observation at `x`.
    pub fn predict_y(&self, x: &[f64]) -> (f64, f64) {
        let (mean, var) = self.predict(x);
        (mean, var + self.y_scale * self.y_scale * self.hyper.noise)
    }

    pub fn log_predictive(&self, x: &[f64], y: f64) -> f64 {
        let (mean, var) = self.predict_y(x);
        -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (y - mean).powi(2) / var)
    }

    /// Mean held-out log-likelihood and root mean squared error.
    pub fn test_metrics(&self, x: &[Vec<f64>], y: &[f64]) -> Result<(f64, f64)> {
        check_data(x, y)?;
        let n = x.len() as f64;
        let ll = x
            .iter()
            .zip(y)
            .map(|(xi, &yi)| self.log_predictive(xi, yi))
            .sum::<f64>()
            / n;
        let mse = x
            .iter()
            .zip(y)
            .map(|(xi, &yi)| (self.predict(xi).0 - yi).powi(2))
            .sum::<f64>()
            / n;
        Ok((ll, mse.sqrt()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgpFitOptions {
    pub n_inducing: usize,
    pub seed: u64,
    pub steps: usize,
    pub lr: f64,
}

impl SgpFitOptions {
    pub fn new(n_inducing: usize, seed: u64) -> Self {
        SgpFitOptions {
            n_inducing,
            seed,
            steps: 150,
            lr: 0.05,
        }
    }
}

pub fn sgp_fit(x: &[Vec<f64>], y: &[f64], n_inducing: usize, seed: u64) -> Result<SgpModel> {
    sgp_fit_with(x, y, &SgpFitOptions::new(n_inducing, seed))
}

/// FITC log marginal likelihood per data point of standardized targets `y`,
/// as a function of `[log variance, log lengthscale, log noise]`.
fn fitc_objective<'t>(
    tape: &'t Tape,
    logs: &[Var<'t>],
    d_mm: &Tensor,
    d_nm: &Tensor,
    y: &Tensor,
    jitter: f64,
) -> std::result::Result<Var<'t>, TensorError> {
    let (m, n) = (d_mm.rows(), d_nm.rows());
    let (log_var, log_ell, log_noise) = (logs[0], logs[1], logs[2]);
    let coef = log_ell.scale(-2.0)?.exp()?.scale(0.5)?;
    let kernel = |d: &Tensor| -> std::result::Result<Var<'t>, TensorError> {
        let shape = d.shape().to_vec();
        tape.constant(d.clone())
            .mul(&coef.broadcast(&shape)?)?
            .neg()?
            .add(&log_var.broadcast(&shape)?)?
            .exp()
    };
    let mut jit = Tensor::identity(m);
    jit.data_mut().iter_mut().for_each(|v| *v *= jitter);
    let k_mm = kernel(d_mm)?.add(&tape.constant(jit))?;
    let k_mn = kernel(d_nm)?.transpose()?;
    let l_m = k_mm.cholesky()?;
    let v = l_m.solve_lower(&k_mn)?;
    let q = v.square()?.sum_axis(0)?;
    let noise = log_noise.exp()?.add_scalar(MIN_NOISE)?;
    let lambda = log_var.exp()?.broadcast(&[n])?.sub(&q)?.add(&noise.broadcast(&[n])?)?;
    let inv = lambda.recip()?;
    let b = v
        .mul_row(&inv)?
        .matmul(&v.transpose()?)?
        .add(&tape.constant(Tensor::identity(m)))?;
    let l_b = b.cholesky()?;
    let yv = tape.constant(y.clone());
    let y_inv = yv.mul(&inv)?;
    let c = l_b.solve_lower(&v.matmul(&y_inv.reshape(&[n, 1])?)?)?;
    let quad = yv.mul(&y_inv)?.sum()?.sub(&c.square()?.sum()?)?;
    let logdet = l_b.diag()?.log()?.sum()?.scale(2.0)?.add(&lambda.log()?.sum()?)?;
    quad.add(&logdet)?
        .scale(-0.5)?
        .add_scalar(-0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln())?
        .scale(1.0 / n as f64)
}

fn distinct_rows(x: &[Vec<f64>]) -> Vec<usize> {
    let mut seen = std::collections::HashSet::new();
    (0..x.len())
        .filter(|&i| seen.insert(x[i].iter().map(|v| v.to_bits()).collect::<Vec<_>>()))
        .collect()
}

fn median_distance(x: &[Vec<f64>]) -> f64 {
    let take = x.len().min(200);
    let mut d: Vec<f64> = (0..take)
        .flat_map(|i| (i + 1..take).map(move |j| (i, j)))
        .map(|(i, j)| sqdist(&x[i], &x[j]).sqrt())
        .filter(|d| *d > 0.0)
        .collect();
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    d[d.len() / 2]
}

/// Draws inducing inputs without replacement among the distinct rows of
/// `x`, then fits the kernel hyperparameters by Adam ascent on the FITC
/// marginal likelihood.
pub fn sgp_fit_with(x: &[Vec<f64>], y: &[f64], opts: &SgpFitOptions) -> Result<SgpModel> {
    check_data(x, y)?;
    if opts.n_inducing < 1 || opts.n_inducing > x.len() {
        return Err(Error::Gp(format!(
            "need 1 <= inducing points <= {} training points, got {}",
            x.len(),
            opts.n_inducing
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let distinct = distinct_rows(x);
    let m = opts.n_inducing.min(distinct.len());
    let mut picks: Vec<usize> = sample_indices(&mut rng, distinct.len(), m)
        .into_iter()
        .map(|i| distinct[i])
        .collect();
    picks.sort_unstable();
    let inducing: Vec<Vec<f64>> = picks.iter().map(|&i| x[i].clone()).collect();

    let (y_mean, y_scale) = standardization(y);
    let ys = Tensor::vector(y.iter().map(|v| (v - y_mean) / y_scale).collect());
    let pair = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        let data = a.iter().flat_map(|p| b.iter().map(move |q| sqdist(p, q))).collect();
        Tensor::matrix(a.len(), b.len(), data).expect("sizes agree")
    };
    let d_mm = pair(&inducing, &inducing);
    let d_nm = pair(x, &inducing);

    let ell0 = median_distance(x);
    let bounds = [
        (1e-3f64.ln(), 1e3f64.ln()),
        ((1e-3 * ell0).ln(), (1e3 * ell0).ln()),
        (MIN_NOISE.ln(), 10f64.ln()),
    ];
    let mut logs = vec![
        Tensor::scalar(0.0),
        Tensor::scalar(ell0.ln()),
        Tensor::scalar(0.1f64.ln()),
    ];
    let mut adam = crate::tensor::AdamState::new(&logs.iter().collect::<Vec<_>>(), opts.lr);
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    for step in 0..=opts.steps {
        let evaluated = JITTERS.iter().find_map(|&jitter| {
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = logs.iter().map(|t| tape.param(t.clone())).collect();
            let obj = fitc_objective(&tape, &vars, &d_mm, &d_nm, &ys, jitter).ok()?;
            let grads = tape.gradients(obj, &vars).ok()?;
            Some((obj.item(), grads))
        });
        let Some((value, grads)) = evaluated else {
            if best.is_none() {
                return Err(Error::Gp("FITC likelihood failed at every jitter level".into()));
            }
            log::debug!("sgp fit stopped at step {step}: factorization failed");
            break;
        };
        if best.as_ref().is_none_or(|(b, _)| value > *b) {
            best = Some((value, logs.clone()));
        }
        if step == opts.steps {
            break;
        }
        let mut refs: Vec<&mut Tensor> = logs.iter_mut().collect();
        if adam.ascend(&mut refs, &grads).is_err() {
            break;
        }
        for (t, (lo, hi)) in logs.iter_mut().zip(bounds) {
            let v = t.item().clamp(lo, hi);
            t.data_mut()[0] = v;
        }
    }
    let (value, logs) = best.expect("first step succeeded");
    let hyper = RbfHyper {
        variance: logs[0].item().exp(),
        lengthscale: logs[1].item().exp(),
        noise: logs[2].item().exp() + MIN_NOISE,
    };
    log::debug!("sgp fit: m = {m}, per-point log marginal {value:.4}, {hyper:?}");
    SgpModel::condition(x, y, inducing, hyper, Some((y_mean, y_scale)))
}

/// Expected improvement over `best` for a maximization problem.
pub fn expected_improvement(mean: f64, variance: f64, best: f64) -> f64 {
    let sigma = variance.max(0.0).sqrt();
    if sigma < 1e-300 {
        return (mean - best).max(0.0);
    }
    let z = (mean - best) / sigma;
    let std = Normal::standard();
    (sigma * (z * std.cdf(z) + std.pdf(z))).max(0.0)
}

/// The result of evaluating one proposed point.
#[derive(Debug, Clone)]
pub struct Evaluation<T> {
    pub item: Option<T>,
    /// Present only for items the objective accepts.
    pub score: Option<f64>,
    /// Where the scored item lives in the search space; appended to the data.
    pub embedding: Vec<f64>,
}

pub trait BoProblem: Sync {
    type Item: Send + Clone;

    fn evaluate(&self, x: &[f64], rng: &mut ChaCha8Rng) -> Evaluation<Self::Item>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoConfig {
    pub iterations: usize,
    pub batch: usize,
    pub n_inducing: usize,
    pub restarts: usize,
    pub local_starts: usize,
    pub ascent_steps: usize,
    pub fit_steps: usize,
    pub seed: u64,
    /// Search box; defaults to the data range widened by 10% per side.
    pub bounds: Option<(Vec<f64>, Vec<f64>)>,
}

impl Default for BoConfig {
    fn default() -> Self {
        BoConfig {
            iterations: 5,
            batch: 50,
            n_inducing: 100,
            restarts: 64,
            local_starts: 4,
            ascent_steps: 25,
            fit_steps: 150,
            seed: 0,
            bounds: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoRecord<T> {
    pub iteration: usize,
    pub proposal: Vec<f64>,
    pub ei: f64,
    pub item: Option<T>,
    pub score: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct BoOutcome<T> {
    pub records: Vec<BoRecord<T>>,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub models: Vec<RbfHyper>,
}

fn data_box(x: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let dim = x[0].len();
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for row in x {
        for (j, &v) in row.iter().enumerate() {
            lo[j] = lo[j].min(v);
            hi[j] = hi[j].max(v);
        }
    }
    for j in 0..dim {
        let pad = 0.1 * (hi[j] - lo[j]).max(1e-3);
        lo[j] -= pad;
        hi[j] += pad;
    }
    (lo, hi)
}

fn clip(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, l), h) in x.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(*l, *h);
    }
}

/// Maximizes EI by random multistart followed by finite-difference gradient
/// ascent from the best starts.
fn maximize_ei(
    model: &SgpModel,
    best: f64,
    lo: &[f64],
    hi: &[f64],
    anchors: &[Vec<f64>],
    config: &BoConfig,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, f64) {
    let ei = |x: &[f64]| {
        let (m, v) = model.predict(x);
        expected_improvement(m, v, best)
    };
    let dim = lo.len();
    let mut starts: Vec<Vec<f64>> = (0..config.restarts.max(1))
        .map(|_| {
            (0..dim)
                .map(|j| lo[j] + (hi[j] - lo[j]) * rng.random::<f64>())
                .collect()
        })
        .collect();
    starts.extend(anchors.iter().cloned());
    let mut scored: Vec<(f64, Vec<f64>)> = starts.into_par_iter().map(|x| (ei(&x), x)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    scored.truncate(config.local_starts.max(1));
    let width: Vec<f64> = lo.iter().zip(hi).map(|(l, h)| h - l).collect();
    let refined: Vec<(f64, Vec<f64>)> = scored
        .into_par_iter()
        .map(|(mut val, mut x)| {
            let mut step = 0.05;
            for _ in 0..config.ascent_steps {
                let grad: Vec<f64> = (0..dim)
                    .map(|j| {
                        let h = 1e-5 * width[j];
                        let mut up = x.clone();
                        up[j] += h;
                        let mut down = x.clone();
                        down[j] -= h;
                        (ei(&up) - ei(&down)) / (2.0 * h)
                    })
                    .collect();
                let norm = grad
                    .iter()
                    .zip(&width)
                    .map(|(g, w)| (g * w).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if norm == 0.0 || !norm.is_finite() {
                    break;
                }
                loop {
                    let mut cand: Vec<f64> = (0..dim)
                        .map(|j| x[j] + step * width[j] * width[j] * grad[j] / norm)
                        .collect();
                    clip(&mut cand, lo, hi);
                    let cv = ei(&cand);
                    if cv > val {
                        x = cand;
                        val = cv;
                        step *= 1.5;
                        break;
                    }
                    step *= 0.5;
                    if step < 1e-6 {
                        break;
                    }
                }
                if step < 1e-6 {
                    break;
                }
            }
            (val, x)
        })
        .collect();
    let (val, x) = refined
        .into_iter()
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .expect("at least one start");
    (x, val)
}

/// Batch Bayesian optimization. Each iteration fits a sparse GP to the data,
/// proposes `batch` points one at a time by maximizing EI and pretending the
/// model's mean was observed at each, evaluates the batch, and appends every
/// scored result.
pub fn bo_loop<P: BoProblem>(
    problem: &P,
    x0: Vec<Vec<f64>>,
    y0: Vec<f64>,
    config: &BoConfig,
) -> Result<BoOutcome<P::Item>> {
    check_data(&x0, &y0)?;
    let (lo, hi) = config.bounds.clone().unwrap_or_else(|| data_box(&x0));
    if lo.len() != x0[0].len()
        || hi.len() != lo.len()
        || lo
            .iter()
            .zip(&hi)
            .any(|(l, h)| l.partial_cmp(h) != Some(std::cmp::Ordering::Less))
    {
        return Err(Error::Config(
            "search bounds must match the input width with lower < upper".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (mut x, mut y) = (x0, y0);
    let mut records = Vec::new();
    let mut models = Vec::new();
    for iteration in 0..config.iterations {
        let fit = SgpFitOptions {
            steps: config.fit_steps,
            ..SgpFitOptions::new(config.n_inducing.clamp(1, x.len()), rng.random())
        };
        let model = sgp_fit_with(&x, &y, &fit)?;
        models.push(model.hyper());
        let best = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut order: Vec<usize> = (0..x.len()).collect();
        order.sort_by(|&a, &b| y[b].total_cmp(&y[a]));
        let anchors: Vec<Vec<f64>> = order.iter().take(3).map(|&i| x[i].clone()).collect();

        let (mut fx, mut fy) = (x.clone(), y.clone());
        let mut current = model.clone();
        let mut proposals = Vec::with_capacity(config.batch);
        for _ in 0..config.batch {
            let (p, ei) = maximize_ei(&current, best, &lo, &hi, &anchors, config, &mut rng);
            let (mean, _) = current.predict(&p);
            fx.push(p.clone());
            fy.push(mean);
            current = model.recondition(&fx, &fy)?;
            proposals.push((p, ei));
        }

        let seeds: Vec<u64> = proposals.iter().map(|_| rng.random()).collect();
        let evals: Vec<Evaluation<P::Item>> = proposals
            .par_iter()
            .zip(seeds)
            .map(|((p, _), s)| problem.evaluate(p, &mut ChaCha8Rng::seed_from_u64(s)))
            .collect();
        let mut scored = 0;
        for ((p, ei), e) in proposals.into_iter().zip(evals) {
            if let Some(s) = e.score {
                x.push(e.embedding.clone());
                y.push(s);
                scored += 1;
            }
            records.push(BoRecord {
                iteration,
                proposal: p,
                ei,
                item: e.item,
                score: e.score,
            });
        }
        log::info!(
            "bo iteration {iteration}: {scored}/{} scored, best so far {:.4}",
            config.batch,
            y.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        );
    }
    Ok(BoOutcome { records, x, y, models })
}

pub trait PropertyOracle: Sync {
    fn name(&self) -> &str;

    /// Scores a molecule; errors for molecules the property is undefined on.
    fn score(&self, g: &MolecularGraph) -> Result<f64>;
}

/// Lengths of a minimum cycle basis, ascending. Candidates are the cycles
/// closed by one edge between two branches of a shortest-path tree; an
/// independent subset of minimum total length is kept by elimination over
/// GF(2).
pub fn minimum_cycle_basis(g: &MolecularGraph) -> Vec<usize> {
    let n = g.n();
    let bonds = g.bonds();
    let m = bonds.len();
    let rank = m + g.components().len() - n;
    if rank == 0 {
        return Vec::new();
    }
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (e, b) in bonds.iter().enumerate() {
        adj[b.u].push((b.v, e));
        adj[b.v].push((b.u, e));
    }
    let words = m.div_ceil(64);
    let mut candidates: Vec<(usize, Vec<u64>)> = Vec::new();
    for root in 0..n {
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; n];
        let mut dist = vec![usize::MAX; n];
        dist[root] = 0;
        let mut queue = std::collections::VecDeque::from([root]);
        while let Some(u) = queue.pop_front() {
            for &(v, e) in &adj[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    parent[v] = Some((u, e));
                    queue.push_back(v);
                }
            }
        }
        let path = |mut v: usize| {
            let mut nodes = vec![v];
            let mut edges = Vec::new();
            while let Some((p, e)) = parent[v] {
                edges.push(e);
                nodes.push(p);
                v = p;
            }
            (nodes, edges)
        };
        for (e, b) in bonds.iter().enumerate() {
            if dist[b.u] == usize::MAX
                || parent[b.u].is_some_and(|(_, pe)| pe == e)
                || parent[b.v].is_some_and(|(_, pe)| pe == e)
            {
                continue;
            }
            let (nu, eu) = path(b.u);
            let (nv, ev) = path(b.v);
            let shared = nu.iter().filter(|x| nv.contains(x)).count();
            if shared != 1 {
                continue;
            }
            let mut bits = vec![0u64; words];
            for &x in eu.iter().chain(&ev).chain(std::iter::once(&e)) {
                bits[x / 64] ^= 1 << (x % 64);
            }
            candidates.push((eu.len() + ev.len() + 1, bits));
        }
    }
    candidates.sort();
    candidates.dedup();
    let mut pivots: Vec<(usize, Vec<u64>)> = Vec::new();
    let mut lengths = Vec::new();
    for (len, mut bits) in candidates {
        for (p, row) in &pivots {
            if bits[p / 64] >> (p % 64) & 1 == 1 {
                for (b, r) in bits.iter_mut().zip(row) {
                    *b ^= r;
                }
            }
        }
        if let Some(p) = (0..m).find(|&p| bits[p / 64] >> (p % 64) & 1 == 1) {
            pivots.push((p, bits));
            lengths.push(len);
            if lengths.len() == rank {
                break;
            }
        }
    }
    lengths
}

/// `mean degree − 0.5·(basis cycles longer than 6) − 0.1·|n − λ_n|`,
/// defined for valence-valid molecules.
pub fn proxy_property(g: &MolecularGraph, lambda_n: f64, table: &ValenceTable) -> Result<f64> {
    if !validate_molecule(g, table).satisfies(ValidityRule::Valence) {
        return Err(Error::Invalid("property is undefined for an invalid molecule".into()));
    }
    let n = g.n() as f64;
    let mean_degree = 2.0 * g.edge_count() as f64 / n;
    let long = minimum_cycle_basis(g).into_iter().filter(|&l| l > 6).count() as f64;
    Ok(mean_degree - 0.5 * long - 0.1 * (n - lambda_n).abs())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProxyProperty {
    pub lambda_n: f64,
    pub table: ValenceTable,
}

impl PropertyOracle for ProxyProperty {
    fn name(&self) -> &str {
        "proxy"
    }

    fn score(&self, g: &MolecularGraph) -> Result<f64> {
        proxy_property(g, self.lambda_n, &self.table)
    }
}

/// Embedding space of a trained model over a set of seed molecules.
pub struct MoleculeSpace<'a> {
    params: &'a ModelParams,
    posteriors: Vec<Posterior>,
    embeddings: Vec<Vec<f64>>,
    masks: MaskSet,
    table: ValenceTable,
    oracle: &'a dyn PropertyOracle,
}

impl<'a> MoleculeSpace<'a> {
    pub fn new(
        params: &'a ModelParams,
        molecules: &[MolecularGraph],
        masks: MaskSet,
        table: ValenceTable,
        oracle: &'a dyn PropertyOracle,
    ) -> Result<Self> {
        if molecules.is_empty() {
            return Err(Error::Invalid("need at least one seed molecule".into()));
        }
        let posteriors: Vec<Posterior> = molecules
            .par_iter()
            .map(|g| posterior(g, &params.enc))
            .collect::<Result<_>>()?;
        let embeddings = posteriors.iter().map(molecule_embedding).collect();
        Ok(MoleculeSpace {
            params,
            posteriors,
            embeddings,
            masks,
            table,
            oracle,
        })
    }

    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.embeddings
    }

    pub fn embed(&self, g: &MolecularGraph) -> Result<Vec<f64>> {
        Ok(molecule_embedding(&posterior(g, &self.params.enc)?))
    }

    /// Takes the seed molecule nearest to `x`, shifts each node mean by the
    /// difference in the mean half of the embedding, samples node latents
    /// around the shifted means and decodes with the masks.
    pub fn decode<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<MolecularGraph> {
        let d = self.params.dec.d();
        if x.len() != 2 * d {
            return Err(Error::Invalid(format!(
                "embedding has length {}, expected {}",
                x.len(),
                2 * d
            )));
        }
        let nearest = (0..self.embeddings.len())
            .min_by(|&a, &b| sqdist(&self.embeddings[a], x).total_cmp(&sqdist(&self.embeddings[b], x)))
            .expect("non-empty seed set");
        let post = &self.posteriors[nearest];
        let shift: Vec<f64> = (0..d).map(|j| x[j] - self.embeddings[nearest][j]).collect();
        let n = post.n();
        let mut z = Tensor::zeros(&[n, d]);
        for u in 0..n {
            for (j, s) in shift.iter().enumerate() {
                let eps: f64 = StandardNormal.sample(rng);
                z.data_mut()[u * d + j] = post.mu.get2(u, j) + s + post.sigma.get2(u, j) * eps;
            }
        }
        let (g, _) = sample_from_latent(&self.params.dec, &z, self.masks, &self.table, rng)?;
        Ok(g)
    }
}

impl BoProblem for MoleculeSpace<'_> {
    type Item = MolecularGraph;

    fn evaluate(&self, x: &[f64], rng: &mut ChaCha8Rng) -> Evaluation<MolecularGraph> {
        let g = match self.decode(x, rng) {
            Ok(g) => g,
            Err(e) => {
                log::debug!("decode failed: {e}");
                return Evaluation {
                    item: None,
                    score: None,
                    embedding: x.to_vec(),
                };
            }
        };
        let valid = validate_molecule(&g, &self.table).satisfies(ValidityRule::Valence);
        let score = if valid { self.oracle.score(&g).ok() } else { None };
        let embedding = match score.map(|_| self.embed(&g)) {
            Some(Ok(e)) => e,
            _ => x.to_vec(),
        };
        Evaluation {
            item: Some(g),
            score,
            embedding,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MoleculeBoReport {
    /// Distinct scored molecules, best first.
    pub ranked: Vec<(MolecularGraph, f64)>,
    pub n_proposed: usize,
    pub n_valid: usize,
    pub n_unique: usize,
    pub valid_fraction: f64,
    pub unique_fraction: f64,
}

/// Validity and uniqueness fractions over all proposals and the distinct
/// scored molecules ranked by score.
pub fn summarize_molecules(records: &[BoRecord<MolecularGraph>], table: &ValenceTable) -> Result<MoleculeBoReport> {
    let n_proposed = records.len();
    let mut n_valid = 0;
    let mut best: HashMap<Vec<u8>, (MolecularGraph, f64)> = HashMap::new();
    let mut distinct_valid = std::collections::HashSet::new();
    for r in records {
        let Some(g) = &r.item else { continue };
        if !validate_molecule(g, table).satisfies(ValidityRule::Valence) {
            continue;
        }
        n_valid += 1;
        let cert = canonical_certificate(g)?;
        distinct_valid.insert(cert.clone());
        if let Some(s) = r.score {
            let entry = best.entry(cert).or_insert_with(|| (g.clone(), s));
            if s > entry.1 {
                *entry = (g.clone(), s);
            }
        }
    }
    let mut ranked: Vec<(Vec<u8>, (MolecularGraph, f64))> = best.into_iter().collect();
    ranked.sort_by(|a, b| b.1 .1.total_cmp(&a.1 .1).then_with(|| a.0.cmp(&b.0)));
    let frac = |k: usize| {
        if n_proposed == 0 {
            0.0
        } else {
            k as f64 / n_proposed as f64
        }
    };
    Ok(MoleculeBoReport {
        ranked: ranked.into_iter().map(|(_, v)| v).collect(),
        n_proposed,
        n_valid,
        n_unique: distinct_valid.len(),
        valid_fraction: frac(n_valid),
        unique_fraction: frac(distinct_valid.len()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::Atom;

    fn sine_data(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-3.0..3.0)]).collect();
        let y = x
            .iter()
            .map(|r| {
                let e: f64 = StandardNormal.sample(&mut rng);
                r[0].sin() + 0.05 * e
            })
            .collect();
        (x, y)
    }

    #[test]
    fn embedding_halves() {
        let post = Posterior {
            mu: Tensor::matrix(1, 2, vec![0.5, -1.0]).unwrap(),
            sigma: Tensor::filled(&[1, 2], 1.0),
        };
        assert_eq!(molecule_embedding(&post), vec![0.5, -1.0, 0.5, -1.0]);
        let twice = Posterior {
            mu: Tensor::matrix(2, 2, vec![0.5, -1.0, 0.5, -1.0]).unwrap(),
            sigma: Tensor::filled(&[2, 2], 1.0),
        };
        assert_eq!(molecule_embedding(&twice), vec![0.5, -1.0, 1.0, -2.0]);
    }

    #[test]
    fn expected_improvement_closed_forms() {
        assert_eq!(expected_improvement(1.0, 0.0, 2.0), 0.0);
        assert_eq!(expected_improvement(3.0, 0.0, 2.0), 1.0);
        let v = expected_improvement(1.0, 4.0, 1.0);
        assert!((v - 2.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-12);
        assert!(expected_improvement(-50.0, 1.0, 0.0) >= 0.0);
    }

    proptest::proptest! {
        #[test]
        fn expected_improvement_is_monotone_in_mean(
            a in -5.0f64..5.0, b in -5.0f64..5.0, var in 0.0f64..4.0, best in -2.0f64..2.0
        ) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let (elo, ehi) = (expected_improvement(lo, var, best), expected_improvement(hi, var, best));
            proptest::prop_assert!(elo >= 0.0);
            proptest::prop_assert!(ehi >= elo - 1e-12);
        }
    }

    #[test]
    fn fitted_sgp_beats_prior_on_sine() {
        let (x, y) = sine_data(50, 1);
        let model = sgp_fit(&x, &y, 20, 0).unwrap();
        let (xt, yt) = sine_data(100, 2);
        let (ll, rmse) = model.test_metrics(&xt, &yt).unwrap();
        let (_, sd) = standardization(&yt);
        assert!(rmse < 0.5 * sd, "rmse {rmse} vs prior sd {sd}");
        assert!(ll.is_finite());
    }

    #[test]
    fn constant_targets_predict_the_constant() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let y = vec![2.5; 10];
        let model = sgp_fit(&x, &y, 5, 3).unwrap();
        for t in [0.0, 4.5, 20.0] {
            let (m, v) = model.predict(&[t]);
            assert!((m - 2.5).abs() < 1e-6);
            assert!(v <= model.hyper().variance + 1e-12);
        }
    }

    #[test]
    fn far_points_revert_to_prior() {
        let (x, y) = sine_data(30, 4);
        let hyper = RbfHyper {
            variance: 1.3,
            lengthscale: 0.7,
            noise: 0.01,
        };
        let model = SgpModel::condition(&x, &y, x[..10].to_vec(), hyper, None).unwrap();
        let (y_mean, y_scale) = standardization(&y);
        let (m, v) = model.predict(&[1e3]);
        assert!((m - y_mean).abs() < 1e-9);
        assert!((v - 1.3 * y_scale * y_scale).abs() < 1e-9);
    }

    #[test]
    fn interpolates_inducing_points_with_small_noise() {
        let x: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64 * 0.5]).collect();
        let y: Vec<f64> = x.iter().map(|r| r[0].cos()).collect();
        let hyper = RbfHyper {
            variance: 1.0,
            lengthscale: 0.8,
            noise: 1e-8,
        };
        let model = SgpModel::condition(&x, &y, x.clone(), hyper, None).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            assert!((model.predict(xi).0 - yi).abs() < 1e-4);
        }
    }

    #[test]
    fn rejects_bad_inducing_counts() {
        let (x, y) = sine_data(5, 0);
        assert!(sgp_fit(&x, &y, 0, 0).is_err());
        assert!(sgp_fit(&x, &y, 6, 0).is_err());
        assert!(sgp_fit(&x, &y[..4], 2, 0).is_err());
    }

    fn molecule(atoms: &[Atom], bonds: &[(usize, usize, u8)]) -> MolecularGraph {
        MolecularGraph::new(atoms.to_vec(), bonds.iter().copied()).unwrap()
    }

    fn ring(k: usize) -> MolecularGraph {
        let mut atoms = vec![Atom::C; k];
        let mut bonds: Vec<(usize, usize, u8)> = (0..k).map(|i| (i, (i + 1) % k, 1)).collect();
        for i in 0..k {
            for _ in 0..2 {
                bonds.push((i, atoms.len(), 1));
                atoms.push(Atom::H);
            }
        }
        molecule(&atoms, &bonds)
    }

    #[test]
    fn cycle_basis_examples() {
        assert_eq!(minimum_cycle_basis(&ring(8)), vec![8]);
        let fused = MolecularGraph::new(
            vec![Atom::C; 10],
            [
                (0, 1),
                (1, 2),
                (2, 3),
                (3, 4),
                (4, 5),
                (5, 0),
                (5, 6),
                (6, 7),
                (7, 8),
                (8, 9),
                (9, 4),
            ]
            .map(|(u, v)| (u, v, 1)),
        )
        .unwrap();
        assert_eq!(minimum_cycle_basis(&fused), vec![6, 6]);
        let k4 = MolecularGraph::new(
            vec![Atom::C; 4],
            [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)].map(|(u, v)| (u, v, 1)),
        )
        .unwrap();
        assert_eq!(minimum_cycle_basis(&k4), vec![3, 3, 3]);
        assert!(minimum_cycle_basis(&molecule(&[Atom::C, Atom::O], &[(0, 1, 2)])).is_empty());
    }

    #[test]
    fn proxy_property_examples() {
        let table = ValenceTable::default();
        let methanol = molecule(
            &[Atom::C, Atom::O, Atom::H, Atom::H, Atom::H, Atom::H],
            &[(0, 1, 1), (0, 2, 1), (0, 3, 1), (0, 4, 1), (1, 5, 1)],
        );
        let v = proxy_property(&methanol, 6.0, &table).unwrap();
        assert!((v - 10.0 / 6.0).abs() < 1e-12);

        let r8 = ring(8);
        let r6 = ring(6);
        let p8 = proxy_property(&r8, 24.0, &table).unwrap();
        let p6 = proxy_property(&r6, 18.0, &table).unwrap();
        assert!((p8 - (2.0 - 0.5)).abs() < 1e-12);
        assert!((p6 - 2.0).abs() < 1e-12);

        let perm: Vec<usize> = (0..r8.n()).rev().collect();
        assert_eq!(
            proxy_property(&r8.relabel(&perm), 20.0, &table).unwrap(),
            proxy_property(&r8, 20.0, &table).unwrap()
        );

        let bad = molecule(
            &[Atom::O, Atom::H, Atom::H, Atom::H],
            &[(0, 1, 1), (0, 2, 1), (0, 3, 1)],
        );
        assert!(proxy_property(&bad, 4.0, &table).is_err());
    }

    struct Toy;

    impl BoProblem for Toy {
        type Item = f64;

        fn evaluate(&self, x: &[f64], _rng: &mut ChaCha8Rng) -> Evaluation<f64> {
            Evaluation {
                item: Some(x[0]),
                score: Some(-(x[0] - 0.3).powi(2)),
                embedding: x.to_vec(),
            }
        }
    }

    #[test]
    fn bo_improves_on_a_quadratic() {
        let x0 = vec![vec![0.9], vec![0.7], vec![0.1]];
        let y0: Vec<f64> = x0.iter().map(|r: &Vec<f64>| -(r[0] - 0.3).powi(2)).collect();
        let config = BoConfig {
            iterations: 3,
            batch: 3,
            seed: 1,
            bounds: Some((vec![0.0], vec![1.0])),
            ..BoConfig::default()
        };
        let out = bo_loop(&Toy, x0, y0, &config).unwrap();
        assert_eq!(out.records.len(), 9);
        let best = out
            .records
            .iter()
            .filter_map(|r| r.item)
            .min_by(|a, b| (a - 0.3).abs().total_cmp(&(b - 0.3).abs()))
            .unwrap();
        assert!((best - 0.3).abs() < 0.05, "{best}");
    }

    struct Constant;

    impl BoProblem for Constant {
        type Item = ();

        fn evaluate(&self, x: &[f64], _rng: &mut ChaCha8Rng) -> Evaluation<()> {
            Evaluation {
                item: Some(()),
                score: Some(1.0),
                embedding: x.to_vec(),
            }
        }
    }

    #[test]
    fn constant_objective_terminates() {
        let x0: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64, 1.0 - i as f64]).collect();
        let out = bo_loop(
            &Constant,
            x0,
            vec![1.0; 4],
            &BoConfig {
                iterations: 2,
                batch: 4,
                ..BoConfig::default()
            },
        )
        .unwrap();
        assert_eq!(out.records.len(), 8);
        assert!(out.y.iter().all(|&v| v == 1.0));
    }
}
