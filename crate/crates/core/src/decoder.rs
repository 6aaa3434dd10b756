//! Generative model: node types, a Poisson edge count, then edges and bond
//! orders one at a time under masks.
//!
//! Every head is a single softplus hidden layer followed by a linear readout.
//! Pair heads see `z_u + z_v`, so `(u, v)` and `(v, u)` score the same; the
//! hidden pre-activation is computed as `z_u W + z_v W + b` so one `Z W`
//! product serves every pair.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use statrs::function::gamma::ln_gamma;

use crate::encoder::draw_noise;
use crate::masks::{MaskSet, MaskState};
use crate::molgraph::{Atom, Bond, MolecularGraph, ValenceTable};
use crate::tensor::{logsumexp, matmul, softplus, Tape, Tensor, Var};
use crate::{Error, Result};

pub const NUM_ATOM_TYPES: usize = 4;
pub const NUM_BOND_ORDERS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub w_gamma: Tensor,
    pub b_gamma: Tensor,
    pub o_gamma: Tensor,
    pub c_gamma: Tensor,
    pub w_beta: Tensor,
    pub b_beta: Tensor,
    pub o_beta: Tensor,
    pub c_beta: Tensor,
    pub w_alpha: Tensor,
    pub b_alpha: Tensor,
    pub o_alpha: Tensor,
    pub w_xi: Tensor,
    pub b_xi: Tensor,
    pub o_xi: Tensor,
    pub c_xi: Tensor,
}

const DECODER_NAMES: [&str; 15] = [
    "dec.w_gamma",
    "dec.b_gamma",
    "dec.o_gamma",
    "dec.c_gamma",
    "dec.w_beta",
    "dec.b_beta",
    "dec.o_beta",
    "dec.c_beta",
    "dec.w_alpha",
    "dec.b_alpha",
    "dec.o_alpha",
    "dec.w_xi",
    "dec.b_xi",
    "dec.o_xi",
    "dec.c_xi",
];

impl DecoderParams {
    pub fn init<R: Rng + ?Sized>(d: usize, hidden: usize, rng: &mut R) -> Self {
        let wstd = 1.0 / (d as f64).sqrt();
        let ostd = 1.0 / (hidden as f64).sqrt();
        DecoderParams {
            w_gamma: Tensor::randn(&[d, hidden], wstd, rng),
            b_gamma: Tensor::zeros(&[hidden]),
            o_gamma: Tensor::randn(&[hidden, NUM_ATOM_TYPES], ostd, rng),
            c_gamma: Tensor::zeros(&[NUM_ATOM_TYPES]),
            w_beta: Tensor::randn(&[d, hidden], wstd, rng),
            b_beta: Tensor::zeros(&[hidden]),
            o_beta: Tensor::randn(&[hidden, 1], 0.01, rng),
            c_beta: Tensor::zeros(&[1]),
            w_alpha: Tensor::randn(&[d, hidden], wstd, rng),
            b_alpha: Tensor::zeros(&[hidden]),
            o_alpha: Tensor::randn(&[hidden, 1], ostd, rng),
            w_xi: Tensor::randn(&[d, hidden], wstd, rng),
            b_xi: Tensor::zeros(&[hidden]),
            o_xi: Tensor::randn(&[hidden, NUM_BOND_ORDERS], ostd, rng),
            c_xi: Tensor::zeros(&[NUM_BOND_ORDERS]),
        }
    }

    pub fn d(&self) -> usize {
        self.w_gamma.rows()
    }

    pub fn names(&self) -> Vec<String> {
        DECODER_NAMES.iter().map(|s| s.to_string()).collect()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.w_gamma,
            &self.b_gamma,
            &self.o_gamma,
            &self.c_gamma,
            &self.w_beta,
            &self.b_beta,
            &self.o_beta,
            &self.c_beta,
            &self.w_alpha,
            &self.b_alpha,
            &self.o_alpha,
            &self.w_xi,
            &self.b_xi,
            &self.o_xi,
            &self.c_xi,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w_gamma,
            &mut self.b_gamma,
            &mut self.o_gamma,
            &mut self.c_gamma,
            &mut self.w_beta,
            &mut self.b_beta,
            &mut self.o_beta,
            &mut self.c_beta,
            &mut self.w_alpha,
            &mut self.b_alpha,
            &mut self.o_alpha,
            &mut self.w_xi,
            &mut self.b_xi,
            &mut self.o_xi,
            &mut self.c_xi,
        ]
    }

    pub fn from_tensors(ts: Vec<Tensor>) -> Result<Self> {
        let got = ts.len();
        let arr: [Tensor; 15] = ts
            .try_into()
            .map_err(|_| Error::Checkpoint(format!("expected 15 decoder tensors, got {got}")))?;
        let [w_gamma, b_gamma, o_gamma, c_gamma, w_beta, b_beta, o_beta, c_beta, w_alpha, b_alpha, o_alpha, w_xi, b_xi, o_xi, c_xi] =
            arr;
        Ok(DecoderParams {
            w_gamma,
            b_gamma,
            o_gamma,
            c_gamma,
            w_beta,
            b_beta,
            o_beta,
            c_beta,
            w_alpha,
            b_alpha,
            o_alpha,
            w_xi,
            b_xi,
            o_xi,
            c_xi,
        })
    }
}

#[derive(Clone)]
pub struct DecoderVars<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> DecoderVars<'t> {
    pub fn register(tape: &'t Tape, p: &DecoderParams) -> Self {
        DecoderVars {
            vars: p.tensors().into_iter().map(|t| tape.param(t.clone())).collect(),
        }
    }

    /// Inverse of [`DecoderVars::all`].
    pub fn from_vars(vars: &[Var<'t>]) -> Result<Self> {
        if vars.len() != DECODER_NAMES.len() {
            return Err(Error::Config(format!(
                "expected {} decoder variables, got {}",
                DECODER_NAMES.len(),
                vars.len()
            )));
        }
        Ok(DecoderVars { vars: vars.to_vec() })
    }

    /// Same order as [`DecoderParams::tensors`].
    pub fn all(&self) -> Vec<Var<'t>> {
        self.vars.clone()
    }

    fn get(&self, i: usize) -> Var<'t> {
        self.vars[i]
    }
}

pub fn poisson_logpmf(k: usize, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return if k == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    k as f64 * lambda.ln() - lambda - ln_gamma(k as f64 + 1.0)
}

/// How each edge step's softmax denominator is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Exact,
    /// The true pair plus up to `L` uniformly drawn other candidates,
    /// reweighted by (other candidates) / (drawn).
    NegativeSampled(usize),
}

/// Everything random or mask-dependent about one edge step, fixed ahead of
/// building the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPlan {
    pub edge: (usize, usize),
    pub order: u8,
    pub others: Vec<(usize, usize)>,
    /// Log of the reweighting factor applied to every entry of `others`.
    pub log_scale: f64,
    pub weight_options: [bool; 3],
}

/// Walks `order` through a fresh mask state, recording the competing pairs
/// at every step.
pub fn plan_steps<R: Rng + ?Sized>(
    g: &MolecularGraph,
    order: &[Bond],
    masks: MaskSet,
    table: &ValenceTable,
    partition: Partition,
    rng: &mut R,
) -> Result<Vec<StepPlan>> {
    if order.len() != g.edge_count() {
        return Err(Error::EdgeOrder(format!(
            "{} edges in order, {} in graph",
            order.len(),
            g.edge_count()
        )));
    }
    let mut state = MaskState::new(g.atoms(), table, masks);
    let mut plans = Vec::with_capacity(order.len());
    for b in order {
        if g.bond_order(b.u, b.v) != Some(b.order) {
            return Err(Error::EdgeOrder(format!(
                "({}, {}, {}) is not a bond",
                b.u, b.v, b.order
            )));
        }
        if !state.edge_mask(b.u, b.v) {
            return Err(Error::EdgeOrder(format!("({}, {}) is masked or repeated", b.u, b.v)));
        }
        let edge = (b.u.min(b.v), b.u.max(b.v));
        let (others, log_scale) = match partition {
            Partition::Exact => {
                let mut all = state.candidates();
                all.retain(|&p| p != edge);
                (all, 0.0)
            }
            Partition::NegativeSampled(l) => {
                let pool = state.candidate_count() - 1;
                let drawn = state.sample_candidates(rng, l, Some(edge));
                let scale = if drawn.is_empty() {
                    0.0
                } else {
                    (pool as f64 / drawn.len() as f64).ln()
                };
                (drawn, scale)
            }
        };
        let weight_options = state.weight_options(b.u, b.v);
        state.commit(b.u, b.v, b.order)?;
        plans.push(StepPlan {
            edge,
            order: b.order,
            others,
            log_scale,
            weight_options,
        });
    }
    Ok(plans)
}

/// Log-likelihood of `g` under latent `Z` for the edge order encoded in
/// `plans`: node types + Poisson edge count + every edge and bond-order
/// step.
pub fn graph_logprob_planned<'t>(
    tape: &'t Tape,
    vars: &DecoderVars<'t>,
    z: Var<'t>,
    g: &MolecularGraph,
    plans: &[StepPlan],
) -> Result<Var<'t>> {
    let n = g.n();
    let zshape = z.shape();
    if zshape.len() != 2 || zshape[0] != n {
        return Err(Error::LatentRows {
            expected: n,
            got: zshape.first().copied().unwrap_or(0),
        });
    }

    // Node types.
    let hg = z.matmul(&vars.get(0))?.add_row(&vars.get(1))?.softplus()?;
    let flogits = hg
        .matmul(&vars.get(2))?
        .add_row(&vars.get(3))?
        .reshape(&[n * NUM_ATOM_TYPES])?;
    let true_idx: Vec<usize> = g
        .atoms()
        .iter()
        .enumerate()
        .map(|(u, a)| u * NUM_ATOM_TYPES + a.index())
        .collect();
    let offsets: Vec<usize> = (0..=n).map(|u| u * NUM_ATOM_TYPES).collect();
    let feat = flogits
        .gather_rows(&true_idx)?
        .sum()?
        .sub(&flogits.segment_logsumexp(&offsets)?.sum()?)?;

    // Edge count.
    let l = plans.len();
    let log_lambda = log_edge_intensity(vars, z)?;
    let count = log_lambda
        .scale(l as f64)?
        .sub(&log_lambda.exp()?)?
        .add_scalar(-ln_gamma(l as f64 + 1.0))?;

    let mut total = feat.add(&count)?;
    if l == 0 {
        return Ok(total);
    }

    // Edge steps.
    let pa = z.matmul(&vars.get(8))?;
    let mut pairs = Vec::new();
    let mut shift = Vec::new();
    let mut seg = vec![0];
    let mut true_pos = Vec::with_capacity(l);
    for p in plans {
        true_pos.push(pairs.len());
        pairs.push(p.edge);
        shift.push(0.0);
        for &pair in &p.others {
            pairs.push(pair);
            shift.push(p.log_scale);
        }
        seg.push(pairs.len());
    }
    let logits = pa
        .pair_readout(&vars.get(9), &vars.get(10), &pairs)?
        .reshape(&[pairs.len()])?;
    let shifted = logits.add(&tape.constant(Tensor::vector(shift)))?;
    let edges = logits
        .gather_rows(&true_pos)?
        .sum()?
        .sub(&shifted.segment_logsumexp(&seg)?.sum()?)?;

    // Bond orders.
    let px = z.matmul(&vars.get(11))?;
    let edges_only: Vec<(usize, usize)> = plans.iter().map(|p| p.edge).collect();
    let wlogits = px
        .pair_readout(&vars.get(12), &vars.get(13), &edges_only)?
        .add_row(&vars.get(14))?
        .reshape(&[l * NUM_BOND_ORDERS])?;
    let mut allowed = Vec::new();
    let mut wseg = vec![0];
    let mut wtrue = Vec::with_capacity(l);
    for (k, p) in plans.iter().enumerate() {
        for m in 0..NUM_BOND_ORDERS {
            if p.weight_options[m] {
                allowed.push(k * NUM_BOND_ORDERS + m);
            }
        }
        wseg.push(allowed.len());
        wtrue.push(k * NUM_BOND_ORDERS + p.order as usize - 1);
    }
    let weights = wlogits
        .gather_rows(&wtrue)?
        .sum()?
        .sub(&wlogits.gather_rows(&allowed)?.segment_logsumexp(&wseg)?.sum()?)?;

    total = total.add(&edges)?.add(&weights)?;
    Ok(total)
}

fn log_edge_intensity<'t>(vars: &DecoderVars<'t>, z: Var<'t>) -> Result<Var<'t>> {
    let hb = z.matmul(&vars.get(4))?.add_row(&vars.get(5))?.softplus()?;
    let pooled = hb.sum_axis(0)?;
    let h = pooled.shape()[0];
    Ok(pooled
        .reshape(&[1, h])?
        .matmul(&vars.get(6))?
        .reshape(&[1])?
        .add(&vars.get(7))?
        .reshape(&[])?)
}

/// Tape-free evaluation of [`graph_logprob_planned`].
#[allow(clippy::too_many_arguments)]
pub fn graph_logprob<R: Rng + ?Sized>(
    g: &MolecularGraph,
    z: &Tensor,
    order: &[Bond],
    params: &DecoderParams,
    partition: Partition,
    masks: MaskSet,
    table: &ValenceTable,
    rng: &mut R,
) -> Result<f64> {
    if z.rows() != g.n() {
        return Err(Error::LatentRows {
            expected: g.n(),
            got: z.rows(),
        });
    }
    let plans = plan_steps(g, order, masks, table, partition, rng)?;
    let tape = Tape::new();
    let vars = DecoderVars::register(&tape, params);
    let zv = tape.constant(z.clone());
    Ok(graph_logprob_planned(&tape, &vars, zv, g, &plans)?.item())
}

/// Decoder heads evaluated once for a fixed `Z`, for sampling and
/// enumeration.
#[derive(Debug, Clone)]
pub struct DecoderEval<'p> {
    params: &'p DecoderParams,
    feature_logits: Tensor,
    log_lambda: f64,
    pa: Tensor,
    px: Tensor,
}

fn dense_hidden(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let mut h = matmul(x, w);
    let c = h.cols();
    for (i, v) in h.data_mut().iter_mut().enumerate() {
        *v = softplus(*v + b.data()[i % c]);
    }
    h
}

impl<'p> DecoderEval<'p> {
    pub fn new(params: &'p DecoderParams, z: &Tensor) -> Result<Self> {
        let hg = dense_hidden(z, &params.w_gamma, &params.b_gamma);
        let mut feature_logits = matmul(&hg, &params.o_gamma);
        for (i, v) in feature_logits.data_mut().iter_mut().enumerate() {
            *v += params.c_gamma.data()[i % NUM_ATOM_TYPES];
        }
        let hb = dense_hidden(z, &params.w_beta, &params.b_beta);
        let h = hb.cols();
        let pooled: Vec<f64> = (0..h).map(|j| (0..hb.rows()).map(|i| hb.get2(i, j)).sum()).collect();
        let log_lambda =
            pooled.iter().zip(params.o_beta.data()).map(|(a, b)| a * b).sum::<f64>() + params.c_beta.item();
        if !feature_logits.is_finite() || !log_lambda.is_finite() {
            return Err(crate::tensor::TensorError::NonFinite { op: "decoder" }.into());
        }
        Ok(DecoderEval {
            params,
            feature_logits,
            log_lambda,
            pa: matmul(z, &params.w_alpha),
            px: matmul(z, &params.w_xi),
        })
    }

    pub fn n(&self) -> usize {
        self.feature_logits.rows()
    }

    pub fn feature_logprobs(&self, u: usize) -> [f64; NUM_ATOM_TYPES] {
        let row = self.feature_logits.row(u);
        let lse = logsumexp(row);
        std::array::from_fn(|q| row[q] - lse)
    }

    /// Poisson rate of the edge count.
    pub fn edge_rate(&self) -> f64 {
        self.log_lambda.exp()
    }

    pub fn log_edge_rate(&self) -> f64 {
        self.log_lambda
    }

    fn pair_hidden(&self, proj: &Tensor, bias: &Tensor, u: usize, v: usize) -> Vec<f64> {
        proj.row(u)
            .iter()
            .zip(proj.row(v))
            .zip(bias.data())
            .map(|((a, b), c)| softplus(a + b + c))
            .collect()
    }

    pub fn edge_logit(&self, u: usize, v: usize) -> f64 {
        let h = self.pair_hidden(&self.pa, &self.params.b_alpha, u, v);
        h.iter().zip(self.params.o_alpha.data()).map(|(a, b)| a * b).sum()
    }

    pub fn weight_logits(&self, u: usize, v: usize) -> [f64; NUM_BOND_ORDERS] {
        let h = self.pair_hidden(&self.px, &self.params.b_xi, u, v);
        let o = &self.params.o_xi;
        std::array::from_fn(|m| {
            h.iter().enumerate().map(|(j, x)| x * o.get2(j, m)).sum::<f64>() + self.params.c_xi.data()[m]
        })
    }

    /// Masked softmax over the current candidate pairs, in
    /// [`MaskState::candidates`] order.
    pub fn edge_distribution(&self, state: &MaskState) -> Vec<((usize, usize), f64)> {
        let cands = state.candidates();
        let logits: Vec<f64> = cands.iter().map(|&(u, v)| self.edge_logit(u, v)).collect();
        let lse = logsumexp(&logits);
        cands
            .into_iter()
            .zip(logits)
            .map(|(p, a)| (p, (a - lse).exp()))
            .collect()
    }

    /// Log-probabilities of bond orders 1..=3 (masked entries are -inf), or
    /// `None` when every order is masked.
    pub fn weight_logprobs(&self, state: &MaskState, u: usize, v: usize) -> Option<[f64; NUM_BOND_ORDERS]> {
        let opts = state.weight_options(u, v);
        if !opts.iter().any(|&b| b) {
            return None;
        }
        let logits = self.weight_logits(u, v);
        let allowed: Vec<f64> = (0..NUM_BOND_ORDERS).filter(|&m| opts[m]).map(|m| logits[m]).collect();
        let lse = logsumexp(&allowed);
        Some(std::array::from_fn(|m| {
            if opts[m] {
                logits[m] - lse
            } else {
                f64::NEG_INFINITY
            }
        }))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TraceEvent {
    Edge {
        u: usize,
        v: usize,
        order: u8,
        edge_logprob: f64,
        weight_logprob: f64,
    },
    /// A pair drawn with no admissible bond order; it leaves the candidate
    /// set and the step is retried.
    Rejected { u: usize, v: usize, edge_logprob: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationTrace {
    pub n: usize,
    pub atoms: Vec<Atom>,
    pub feature_logprob: f64,
    /// Edge count drawn from the Poisson.
    pub target_edges: usize,
    pub count_logprob: f64,
    pub events: Vec<TraceEvent>,
    /// Edges requested but not placed because candidates ran out.
    pub shortfall: usize,
}

impl GenerationTrace {
    pub fn total_logprob(&self) -> f64 {
        let steps: f64 = self
            .events
            .iter()
            .map(|e| match e {
                TraceEvent::Edge {
                    edge_logprob,
                    weight_logprob,
                    ..
                } => edge_logprob + weight_logprob,
                TraceEvent::Rejected { edge_logprob, .. } => *edge_logprob,
            })
            .sum();
        self.feature_logprob + self.count_logprob + steps
    }

    /// The committed edges in generation order.
    pub fn edge_order(&self) -> Vec<Bond> {
        self.events
            .iter()
            .filter_map(|e| match *e {
                TraceEvent::Edge { u, v, order, .. } => Some(Bond { u, v, order }),
                TraceEvent::Rejected { .. } => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SampleOptions {
    /// Node count; drawn from Poisson(`lambda_n`) (redrawn while zero) when
    /// absent.
    pub n: Option<usize>,
    pub lambda_n: f64,
    pub masks: MaskSet,
    pub table: ValenceTable,
}

fn draw_categorical<R: Rng + ?Sized>(rng: &mut R, probs: impl Iterator<Item = f64>) -> usize {
    let probs: Vec<f64> = probs.collect();
    let r: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if r < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Prior sample: `n`, then `Z ~ N(0, I)`, then [`sample_from_latent`].
pub fn sample_graph<R: Rng + ?Sized>(
    params: &DecoderParams,
    rng: &mut R,
    opts: &SampleOptions,
) -> Result<(MolecularGraph, GenerationTrace)> {
    let n = match opts.n {
        Some(0) => return Err(Error::Invalid("cannot sample a graph with zero nodes".into())),
        Some(n) => n,
        None => {
            if opts.lambda_n <= 0.0 || !opts.lambda_n.is_finite() {
                return Err(Error::Config(format!(
                    "node-count rate {} must be positive",
                    opts.lambda_n
                )));
            }
            let pois = Poisson::new(opts.lambda_n).map_err(|e| Error::Config(e.to_string()))?;
            loop {
                let n = pois.sample(rng) as usize;
                if n > 0 {
                    break n;
                }
            }
        }
    };
    let z = draw_noise(n, params.d(), rng);
    sample_from_latent(params, &z, opts.masks, &opts.table, rng)
}

pub fn sample_from_latent<R: Rng + ?Sized>(
    params: &DecoderParams,
    z: &Tensor,
    masks: MaskSet,
    table: &ValenceTable,
    rng: &mut R,
) -> Result<(MolecularGraph, GenerationTrace)> {
    let eval = DecoderEval::new(params, z)?;
    let n = eval.n();
    let mut atoms = Vec::with_capacity(n);
    let mut feature_logprob = 0.0;
    for u in 0..n {
        let lp = eval.feature_logprobs(u);
        let q = draw_categorical(rng, lp.iter().map(|x| x.exp()));
        atoms.push(Atom::from_index(q).expect("four atom types"));
        feature_logprob += lp[q];
    }
    let rate = eval.edge_rate();
    let target = if rate > 0.0 {
        Poisson::new(rate)
            .map_err(|e| Error::Config(e.to_string()))?
            .sample(rng) as usize
    } else {
        0
    };
    let count_logprob = poisson_logpmf(target, rate);

    let mut state = MaskState::new(&atoms, table, masks);
    let mut events = Vec::new();
    let mut bonds = Vec::new();
    while bonds.len() < target {
        let dist = eval.edge_distribution(&state);
        if dist.is_empty() {
            break;
        }
        let i = draw_categorical(rng, dist.iter().map(|&(_, p)| p));
        let ((u, v), p) = dist[i];
        let edge_logprob = p.ln();
        match eval.weight_logprobs(&state, u, v) {
            None => {
                state.reject(u, v);
                events.push(TraceEvent::Rejected { u, v, edge_logprob });
            }
            Some(wl) => {
                let m = draw_categorical(rng, wl.iter().map(|x| x.exp()));
                let order = m as u8 + 1;
                state.commit(u, v, order)?;
                bonds.push((u, v, order));
                events.push(TraceEvent::Edge {
                    u,
                    v,
                    order,
                    edge_logprob,
                    weight_logprob: wl[m],
                });
            }
        }
    }
    let shortfall = target - bonds.len();
    let g = MolecularGraph::new(atoms.clone(), bonds)?;
    Ok((
        g,
        GenerationTrace {
            n,
            atoms,
            feature_logprob,
            target_edges: target,
            count_logprob,
            events,
            shortfall,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::MaskKind;
    use crate::molgraph::validate_molecule;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(seed: u64) -> DecoderParams {
        DecoderParams::init(5, 16, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn latent(n: usize, seed: u64) -> Tensor {
        draw_noise(n, 5, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn poisson_closed_form() {
        let want = 2.0 * 2f64.ln() - 2.0 - 2f64.ln();
        assert!((poisson_logpmf(2, 2.0) - want).abs() < 1e-12);
        assert!((poisson_logpmf(2, 2.0) + 1.3069).abs() < 1e-4);
    }

    #[test]
    fn feature_softmax_examples() {
        let mut p = params(1);
        p.o_gamma = Tensor::zeros(p.o_gamma.shape());
        let z = latent(2, 2);
        let eval = DecoderEval::new(&p, &z).unwrap();
        for lp in eval.feature_logprobs(0) {
            assert!((lp - 0.25f64.ln()).abs() < 1e-15);
        }
        p.c_gamma = Tensor::vector(vec![1.0, 0.0, 0.0, 0.0]);
        let eval = DecoderEval::new(&p, &z).unwrap();
        let e = std::f64::consts::E;
        assert!((eval.feature_logprobs(1)[0].exp() - e / (e + 3.0)).abs() < 1e-12);
        let total: f64 = eval.feature_logprobs(1).iter().map(|x| x.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn edge_rate_ignores_row_order() {
        let p = params(3);
        let z = latent(4, 4);
        let rows = [2, 0, 3, 1];
        let mut zp = Tensor::zeros(&[4, 5]);
        for (i, &r) in rows.iter().enumerate() {
            zp.data_mut()[i * 5..(i + 1) * 5].copy_from_slice(z.row(r));
        }
        let a = DecoderEval::new(&p, &z).unwrap().log_edge_rate();
        let b = DecoderEval::new(&p, &zp).unwrap().log_edge_rate();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn edge_softmax_matches_direct_summation() {
        let p = params(5);
        let z = latent(4, 6);
        let eval = DecoderEval::new(&p, &z).unwrap();
        let state = MaskState::new(&[Atom::C; 4], &ValenceTable::default(), MaskKind::None.into());
        let dist = eval.edge_distribution(&state);
        assert_eq!(dist.len(), 6);
        let denom: f64 = dist.iter().map(|&((u, v), _)| eval.edge_logit(u, v).exp()).sum();
        for &((u, v), pr) in &dist {
            assert!((pr - eval.edge_logit(u, v).exp() / denom).abs() < 1e-14);
            assert_eq!(eval.edge_logit(u, v), eval.edge_logit(v, u));
        }
        let total: f64 = dist.iter().map(|d| d.1).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weight_distribution_respects_masks() {
        let p = params(7);
        let z = latent(4, 8);
        let eval = DecoderEval::new(&p, &z).unwrap();
        let atoms = [Atom::C, Atom::C, Atom::H, Atom::C];
        let mut state = MaskState::new(&atoms, &ValenceTable::default(), MaskKind::Valence.into());
        state.commit(0, 1, 3).unwrap();
        let wl = eval.weight_logprobs(&state, 0, 3).unwrap();
        assert_eq!(wl[0], 0.0);
        assert!(wl[1] == f64::NEG_INFINITY && wl[2] == f64::NEG_INFINITY);

        let mut flat = p.clone();
        flat.o_xi = Tensor::zeros(flat.o_xi.shape());
        let eval = DecoderEval::new(&flat, &z).unwrap();
        let fresh = MaskState::new(&atoms, &ValenceTable::default(), MaskKind::None.into());
        for lp in eval.weight_logprobs(&fresh, 0, 1).unwrap() {
            assert!((lp.exp() - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_edge_negative_sampling_is_exact() {
        let p = params(9);
        let g = MolecularGraph::new(vec![Atom::C, Atom::N, Atom::O, Atom::C], [(1, 2, 1)]).unwrap();
        let z = latent(4, 10);
        let table = ValenceTable::default();
        let masks = MaskKind::Valence.into();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let exact = graph_logprob(&g, &z, g.bonds(), &p, Partition::Exact, masks, &table, &mut rng).unwrap();
        let sampled = graph_logprob(
            &g,
            &z,
            g.bonds(),
            &p,
            Partition::NegativeSampled(5),
            masks,
            &table,
            &mut rng,
        )
        .unwrap();
        assert!((exact - sampled).abs() < 1e-12, "{exact} vs {sampled}");
    }

    #[test]
    fn latent_row_mismatch_is_an_error() {
        let p = params(11);
        let g = MolecularGraph::new(vec![Atom::C, Atom::O], [(0, 1, 2)]).unwrap();
        let err = graph_logprob(
            &g,
            &latent(3, 1),
            g.bonds(),
            &p,
            Partition::Exact,
            MaskSet::default(),
            &ValenceTable::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap_err();
        assert!(matches!(err, Error::LatentRows { expected: 2, got: 3 }));
    }

    #[test]
    fn trace_total_matches_exact_likelihood() {
        let mut p = params(13);
        p.c_beta = Tensor::vector(vec![1.5]);
        let table = ValenceTable::default();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut checked = 0;
        for _ in 0..60 {
            let z = draw_noise(6, 5, &mut rng);
            let (g, trace) = sample_from_latent(&p, &z, MaskKind::Valence.into(), &table, &mut rng).unwrap();
            if trace.shortfall > 0 || trace.events.len() != g.edge_count() {
                continue;
            }
            let lp = graph_logprob(
                &g,
                &z,
                &trace.edge_order(),
                &p,
                Partition::Exact,
                MaskKind::Valence.into(),
                &table,
                &mut rng,
            )
            .unwrap();
            assert!(
                (lp - trace.total_logprob()).abs() < 1e-9,
                "{lp} vs {}",
                trace.total_logprob()
            );
            checked += 1;
        }
        assert!(checked > 10);
    }

    #[test]
    fn valence_masked_samples_never_exceed_budgets() {
        let mut p = params(15);
        p.c_beta = Tensor::vector(vec![3.0]);
        let table = ValenceTable::default();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let opts = SampleOptions {
            n: None,
            lambda_n: 9.0,
            masks: MaskKind::Valence.into(),
            table,
        };
        for _ in 0..10_000 {
            let (g, trace) = sample_graph(&p, &mut rng, &opts).unwrap();
            let sums = g.bond_order_sums();
            for (u, a) in g.atoms().iter().enumerate() {
                assert!(sums[u] <= table.max_valence(*a));
            }
            assert!(validate_molecule(&g, &table).satisfies(crate::molgraph::ValidityRule::Valence));
            assert!(!trace.events.iter().any(|e| matches!(e, TraceEvent::Rejected { .. })));
        }
    }

    #[test]
    fn triangle_free_samples_have_no_triangles() {
        let mut p = params(17);
        p.c_beta = Tensor::vector(vec![3.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let opts = SampleOptions {
            n: Some(8),
            lambda_n: 8.0,
            masks: MaskKind::TriangleFree.into(),
            table: ValenceTable::default(),
        };
        for _ in 0..500 {
            assert!(!sample_graph(&p, &mut rng, &opts).unwrap().0.has_triangle());
        }
    }
}
