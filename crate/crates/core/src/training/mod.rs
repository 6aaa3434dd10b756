//! Variational objective and the optimization loop.
//!
//! The per-graph objective is
//!
//! ```text
//! mean over S sources s of log p(G, order_s | Z)  -  KL(q(Z|G) || N(0, I))  +  log Pois(n; λ_n)
//! ```
//!
//! with one reparameterized `Z` per graph, BFS edge orders rooted at
//! sources drawn from ζ, and negative-sampled edge partitions. All the
//! randomness is drawn up front into an [`ElboNoise`] so the objective is a
//! deterministic function of the parameters.

mod checkpoint;

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;

use crate::decoder::{
    graph_logprob_planned, plan_steps, poisson_logpmf, DecoderParams, DecoderVars, Partition, StepPlan,
};
use crate::encoder::{draw_noise, posterior_vars, EncoderParams, EncoderVars, Posterior};
use crate::masks::{MaskKind, MaskSet};
use crate::molgraph::{Bond, MolecularGraph, ValenceTable};
use crate::tensor::{AdamState, Tape, Tensor, Var};
use crate::{Error, Result};

/// Source-node distribution for BFS orders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ZetaKind {
    #[default]
    Uniform,
    Degree,
    MaxDegree,
}

impl ZetaKind {
    pub const ALL: [ZetaKind; 3] = [ZetaKind::Uniform, ZetaKind::Degree, ZetaKind::MaxDegree];
}

impl FromStr for ZetaKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(ZetaKind::Uniform),
            "degree" => Ok(ZetaKind::Degree),
            "max_degree" | "max-degree" => Ok(ZetaKind::MaxDegree),
            other => Err(format!("unknown source distribution {other:?}")),
        }
    }
}

impl fmt::Display for ZetaKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ZetaKind::Uniform => "uniform",
            ZetaKind::Degree => "degree",
            ZetaKind::MaxDegree => "max_degree",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub d: usize,
    pub k: usize,
    pub hidden: usize,
    /// Negative samples per edge step.
    pub l: usize,
    pub lr: f64,
    /// Source samples per graph.
    pub s: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub mask: MaskKind,
    pub zeta: ZetaKind,
    pub table: ValenceTable,
}

impl Hyperparams {
    /// Molecule defaults: D=5, K=5, L=10, lr=0.005.
    pub fn molecules() -> Self {
        Hyperparams {
            d: 5,
            k: 5,
            hidden: crate::encoder::DEFAULT_HIDDEN,
            l: 10,
            lr: 0.005,
            s: 1,
            batch_size: 16,
            iterations: 500,
            seed: 0,
            mask: MaskKind::None,
            zeta: ZetaKind::Uniform,
            table: ValenceTable::default(),
        }
    }

    /// Synthetic-graph defaults: D=7, K=3.
    pub fn synthetic() -> Self {
        Hyperparams {
            d: 7,
            k: 3,
            ..Hyperparams::molecules()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 4 {
            return Err(Error::Config(format!("D = {} must be at least 4", self.d)));
        }
        if self.k < 1 || self.l < 1 || self.s < 1 || self.batch_size < 1 || self.hidden < 1 {
            return Err(Error::Config(
                "K, L, S, hidden width and batch size must be positive".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }

    pub fn masks(&self) -> MaskSet {
        self.mask.into()
    }
}

/// Encoder and decoder weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub enc: EncoderParams,
    pub dec: DecoderParams,
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(hyper: &Hyperparams, rng: &mut R) -> Result<Self> {
        hyper.validate()?;
        Ok(ModelParams {
            enc: EncoderParams::init(hyper.d, hyper.k, hyper.hidden, rng)?,
            dec: DecoderParams::init(hyper.d, hyper.hidden, rng),
        })
    }

    pub fn names(&self) -> Vec<String> {
        let mut n = self.enc.names();
        n.extend(self.dec.names());
        n
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut t = self.enc.tensors();
        t.extend(self.dec.tensors());
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = self.enc.tensors_mut();
        t.extend(self.dec.tensors_mut());
        t
    }

    pub fn from_tensors(k: usize, mut ts: Vec<Tensor>) -> Result<Self> {
        if ts.len() < k + 6 {
            return Err(Error::Checkpoint(format!("too few tensors: {}", ts.len())));
        }
        let dec = ts.split_off(k + 6);
        Ok(ModelParams {
            enc: EncoderParams::from_tensors(k, ts)?,
            dec: DecoderParams::from_tensors(dec)?,
        })
    }
}

/// Draws a BFS source among `nodes` according to ζ.
pub fn sample_source_among<R: Rng + ?Sized>(degrees: &[usize], nodes: &[usize], zeta: ZetaKind, rng: &mut R) -> usize {
    match zeta {
        ZetaKind::Uniform => *nodes.choose(rng).expect("non-empty node set"),
        ZetaKind::Degree => {
            let total: usize = nodes.iter().map(|&u| degrees[u]).sum();
            if total == 0 {
                return *nodes.choose(rng).expect("non-empty node set");
            }
            let mut r = rng.random_range(0..total);
            for &u in nodes {
                if r < degrees[u] {
                    return u;
                }
                r -= degrees[u];
            }
            unreachable!("degree mass exhausted")
        }
        ZetaKind::MaxDegree => {
            let max = nodes.iter().map(|&u| degrees[u]).max().expect("non-empty node set");
            let top: Vec<usize> = nodes.iter().copied().filter(|&u| degrees[u] == max).collect();
            *top.choose(rng).expect("argmax exists")
        }
    }
}

/// Source node: uniform, degree-proportional, or uniform over the maximum
/// degree nodes. None of these depend on node labels.
pub fn sample_source<R: Rng + ?Sized>(g: &MolecularGraph, zeta: ZetaKind, rng: &mut R) -> usize {
    let nodes: Vec<usize> = (0..g.n()).collect();
    sample_source_among(&g.degrees(), &nodes, zeta, rng)
}

/// Breadth-first edge order from `source` with neighbours visited in
/// uniformly random order. A tree edge is emitted when it discovers a node;
/// any other edge when its second endpoint is dequeued. If nodes remain
/// unreached, traversal restarts from a ζ-drawn unreached node.
pub fn bfs_edge_order<R: Rng + ?Sized>(g: &MolecularGraph, source: usize, zeta: ZetaKind, rng: &mut R) -> Vec<Bond> {
    let n = g.n();
    let adj = g.adjacency();
    let degrees = g.degrees();
    let mut visited = vec![false; n];
    let mut done = vec![false; n];
    let mut parent = vec![usize::MAX; n];
    let mut order = Vec::with_capacity(g.edge_count());
    let mut queue = VecDeque::new();
    let mut next = Some(source);
    while let Some(s) = next {
        visited[s] = true;
        queue.push_back(s);
        while let Some(u) = queue.pop_front() {
            let mut nbrs = adj[u].clone();
            nbrs.shuffle(rng);
            for (v, o) in nbrs {
                if !visited[v] {
                    visited[v] = true;
                    parent[v] = u;
                    queue.push_back(v);
                } else if !done[v] || parent[u] == v {
                    continue;
                }
                order.push(Bond {
                    u: u.min(v),
                    v: u.max(v),
                    order: o,
                });
            }
            done[u] = true;
        }
        let rest: Vec<usize> = (0..n).filter(|&u| !visited[u]).collect();
        next = (!rest.is_empty()).then(|| sample_source_among(&degrees, &rest, zeta, rng));
    }
    order
}

/// `½ Σ_u (Σ σ² + Σ μ² − D − Σ log σ²)` on the tape.
pub fn kl_var<'t>(mu: Var<'t>, sigma: Var<'t>) -> Result<Var<'t>> {
    let count = mu.value().len() as f64;
    let s2 = sigma.square()?.sum()?;
    let m2 = mu.square()?.sum()?;
    let log_s2 = sigma.log()?.sum()?.scale(2.0)?;
    Ok(s2.add(&m2)?.sub(&log_s2)?.add_scalar(-count)?.scale(0.5)?)
}

pub fn kl_term(post: &Posterior) -> f64 {
    let mut total = 0.0;
    for (m, s) in post.mu.data().iter().zip(post.sigma.data()) {
        total += s * s + m * m - 1.0 - (s * s).ln();
    }
    0.5 * total
}

/// Pre-drawn randomness of one ELBO evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboNoise {
    pub eps: Tensor,
    pub orders: Vec<Vec<Bond>>,
    pub plans: Vec<Vec<StepPlan>>,
}

impl ElboNoise {
    pub fn draw<R: Rng + ?Sized>(
        g: &MolecularGraph,
        hyper: &Hyperparams,
        partition: Partition,
        rng: &mut R,
    ) -> Result<Self> {
        let eps = draw_noise(g.n(), hyper.d, rng);
        let mut orders = Vec::with_capacity(hyper.s);
        let mut plans = Vec::with_capacity(hyper.s);
        for _ in 0..hyper.s {
            let source = sample_source(g, hyper.zeta, rng);
            let order = bfs_edge_order(g, source, hyper.zeta, rng);
            plans.push(plan_steps(g, &order, hyper.masks(), &hyper.table, partition, rng)?);
            orders.push(order);
        }
        Ok(ElboNoise { eps, orders, plans })
    }
}

/// The per-graph objective on a tape, given frozen noise.
pub fn elbo_var<'t>(
    tape: &'t Tape,
    enc: &EncoderVars<'t>,
    dec: &DecoderVars<'t>,
    g: &MolecularGraph,
    noise: &ElboNoise,
    lambda_n: f64,
) -> Result<Var<'t>> {
    if g.n() == 0 {
        return Err(Error::Invalid("cannot evaluate an empty graph".into()));
    }
    let (mu, sigma) = posterior_vars(tape, enc, g)?;
    let z = mu.add(&sigma.mul(&tape.constant(noise.eps.clone()))?)?;
    let mut lp: Option<Var<'t>> = None;
    for plans in &noise.plans {
        let term = graph_logprob_planned(tape, dec, z, g, plans)?;
        lp = Some(match lp {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    let lp = lp
        .ok_or_else(|| Error::Config("at least one source sample is required".into()))?
        .scale(1.0 / noise.plans.len() as f64)?;
    let kl = kl_var(mu, sigma)?;
    Ok(lp.sub(&kl)?.add_scalar(poisson_logpmf(g.n(), lambda_n))?)
}

/// Value and parameter gradients of the frozen-noise objective, gradients
/// in [`ModelParams::tensors`] order.
pub fn elbo_with_grad(
    params: &ModelParams,
    g: &MolecularGraph,
    noise: &ElboNoise,
    lambda_n: f64,
) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let enc = EncoderVars::register(&tape, &params.enc);
    let dec = DecoderVars::register(&tape, &params.dec);
    let elbo = elbo_var(&tape, &enc, &dec, g, noise, lambda_n)?;
    let mut vars = enc.all();
    vars.extend(dec.all());
    let grads = tape.gradients(elbo, &vars)?;
    Ok((elbo.item(), grads))
}

pub fn elbo_value(params: &ModelParams, g: &MolecularGraph, noise: &ElboNoise, lambda_n: f64) -> Result<f64> {
    let tape = Tape::new();
    let enc = EncoderVars::register(&tape, &params.enc);
    let dec = DecoderVars::register(&tape, &params.dec);
    Ok(elbo_var(&tape, &enc, &dec, g, noise, lambda_n)?.item())
}

/// Stochastic objective with fresh noise from `rng`.
pub fn elbo<R: Rng + ?Sized>(
    g: &MolecularGraph,
    params: &ModelParams,
    hyper: &Hyperparams,
    lambda_n: f64,
    rng: &mut R,
) -> Result<f64> {
    let noise = ElboNoise::draw(g, hyper, Partition::NegativeSampled(hyper.l), rng)?;
    elbo_value(params, g, &noise, lambda_n)
}

/// Poisson maximum-likelihood rate: the mean node count.
pub fn fit_lambda_n(corpus: &[MolecularGraph]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Invalid(
            "cannot fit the node-count rate on an empty corpus".into(),
        ));
    }
    Ok(corpus.iter().map(|g| g.n() as f64).sum::<f64>() / corpus.len() as f64)
}

/// Corpus indices grouped by node count, in ascending node count.
pub fn create_batches(corpus: &[MolecularGraph]) -> Vec<Vec<usize>> {
    let mut by_n: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, g) in corpus.iter().enumerate() {
        by_n.entry(g.n()).or_default().push(i);
    }
    by_n.into_values().collect()
}

/// Mean objective over the whole corpus with per-graph noise derived from
/// `seed`; comparable across training iterations.
pub fn corpus_elbo(
    params: &ModelParams,
    corpus: &[MolecularGraph],
    hyper: &Hyperparams,
    lambda_n: f64,
    seed: u64,
) -> Result<f64> {
    let values: Vec<f64> = corpus
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            elbo(g, params, hyper, lambda_n, &mut rng)
        })
        .collect::<Result<_>>()?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub mean_elbo: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

/// Trains from a fresh initialization.
pub fn train(corpus: &[MolecularGraph], hyper: &Hyperparams) -> Result<TrainOutput> {
    train_with(corpus, hyper, |_, _| {})
}

/// Like [`train`], calling `on_row` with the log row and the updated
/// parameters after every iteration.
pub fn train_with(
    corpus: &[MolecularGraph],
    hyper: &Hyperparams,
    mut on_row: impl FnMut(&LogRow, &ModelParams),
) -> Result<TrainOutput> {
    hyper.validate()?;
    if corpus.iter().any(|g| g.n() == 0) {
        return Err(Error::Invalid("corpus contains an empty graph".into()));
    }
    let lambda_n = fit_lambda_n(corpus)?;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut params = ModelParams::init(hyper, &mut rng)?;
    let batches = create_batches(corpus);
    let mut adam = AdamState::new(&params.tensors(), hyper.lr);
    let start = Instant::now();
    let mut log = Vec::with_capacity(hyper.iterations);

    for iteration in 0..hyper.iterations {
        let batch = batches.choose(&mut rng).expect("non-empty corpus");
        let mut members: Vec<usize> = if batch.len() > hyper.batch_size {
            batch.choose_multiple(&mut rng, hyper.batch_size).copied().collect()
        } else {
            batch.clone()
        };
        members.sort_unstable();
        let seeds: Vec<u64> = members.iter().map(|_| rng.random()).collect();

        let wrap = |e: Error| Error::Training {
            iteration,
            source: Box::new(e),
        };
        let results: Vec<(f64, Vec<Tensor>)> = members
            .par_iter()
            .zip(seeds.par_iter())
            .map(|(&i, &seed)| {
                let g = &corpus[i];
                let mut grng = ChaCha8Rng::seed_from_u64(seed);
                let noise = ElboNoise::draw(g, hyper, Partition::NegativeSampled(hyper.l), &mut grng)?;
                elbo_with_grad(&params, g, &noise, lambda_n)
            })
            .collect::<Result<_>>()
            .map_err(wrap)?;

        let scale = 1.0 / results.len() as f64;
        let mut mean_grads: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut mean_elbo = 0.0;
        for (value, grads) in &results {
            mean_elbo += value * scale;
            for (acc, g) in mean_grads.iter_mut().zip(grads) {
                for (a, x) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += x * scale;
                }
            }
        }
        adam.ascend(&mut params.tensors_mut(), &mean_grads)
            .map_err(|e| wrap(e.into()))?;

        let row = LogRow {
            iteration,
            mean_elbo,
            wall_time: start.elapsed().as_secs_f64(),
        };
        log::debug!("iteration {iteration}: elbo {mean_elbo:.4}");
        on_row(&row, &params);
        log.push(row);
    }

    Ok(TrainOutput {
        checkpoint: Checkpoint {
            params,
            lambda_n,
            hyper: hyper.clone(),
            iteration: hyper.iterations,
        },
        log,
    })
}
