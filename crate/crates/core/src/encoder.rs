//! Probabilistic encoder: K-hop aggregation embeddings feeding per-node
//! diagonal Gaussian posteriors.
//!
//! With one-hot atom features `f_u` (padded to `D`), the embeddings are
//!
//! ```text
//! c_u(1) = f_u W_1
//! c_u(k) = (f_u W_k) ⊙ Σ_{v ∈ N(u)} y_uv c_v(k-1)
//! ```
//!
//! and `[μ_u, σ_u]` come from a softplus network over `c_u(1) ‖ … ‖ c_u(K)`.
//! Neighbour sums are accumulated in sorted order per coordinate, so the
//! output is exactly invariant to node relabeling.

use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::molgraph::MolecularGraph;
use crate::tensor::{Adjacency, Tape, Tensor, Var};
use crate::{Error, Result};

pub const DEFAULT_HIDDEN: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// `W_1..W_K`, each `D × D`, acting on row vectors.
    pub w: Vec<Tensor>,
    pub w_h: Tensor,
    pub b_h: Tensor,
    pub w_mu: Tensor,
    pub b_mu: Tensor,
    pub w_sigma: Tensor,
    pub b_sigma: Tensor,
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(d: usize, k: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        if d < 4 {
            return Err(Error::Config(format!("latent dimension {d} < 4")));
        }
        if k < 1 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        let wstd = 1.0 / (d as f64).sqrt();
        Ok(EncoderParams {
            w: (0..k).map(|_| Tensor::randn(&[d, d], wstd, rng)).collect(),
            w_h: Tensor::randn(&[k * d, hidden], 1.0 / ((k * d) as f64).sqrt(), rng),
            b_h: Tensor::zeros(&[hidden]),
            w_mu: Tensor::randn(&[hidden, d], 1.0 / (hidden as f64).sqrt(), rng),
            b_mu: Tensor::zeros(&[d]),
            w_sigma: Tensor::randn(&[hidden, d], 1.0 / (hidden as f64).sqrt(), rng),
            b_sigma: Tensor::filled(&[d], -1.0),
        })
    }

    pub fn d(&self) -> usize {
        self.w[0].rows()
    }

    pub fn k(&self) -> usize {
        self.w.len()
    }

    pub fn hidden(&self) -> usize {
        self.b_h.len()
    }

    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = (1..=self.k()).map(|k| format!("enc.w{k}")).collect();
        names.extend(
            [
                "enc.w_h",
                "enc.b_h",
                "enc.w_mu",
                "enc.b_mu",
                "enc.w_sigma",
                "enc.b_sigma",
            ]
            .map(String::from),
        );
        names
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.w.iter().collect();
        out.extend([
            &self.w_h,
            &self.b_h,
            &self.w_mu,
            &self.b_mu,
            &self.w_sigma,
            &self.b_sigma,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.w.iter_mut().collect();
        out.extend([
            &mut self.w_h,
            &mut self.b_h,
            &mut self.w_mu,
            &mut self.b_mu,
            &mut self.w_sigma,
            &mut self.b_sigma,
        ]);
        out
    }

    /// Rebuilds from tensors in [`EncoderParams::tensors`] order.
    pub fn from_tensors(k: usize, mut ts: Vec<Tensor>) -> Result<Self> {
        if ts.len() != k + 6 {
            return Err(Error::Checkpoint(format!(
                "expected {} encoder tensors, got {}",
                k + 6,
                ts.len()
            )));
        }
        let rest = ts.split_off(k);
        let [w_h, b_h, w_mu, b_mu, w_sigma, b_sigma]: [Tensor; 6] = rest.try_into().expect("length checked");
        Ok(EncoderParams {
            w: ts,
            w_h,
            b_h,
            w_mu,
            b_mu,
            w_sigma,
            b_sigma,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Encoder parameters registered on a tape.
#[derive(Clone)]
pub struct EncoderVars<'t> {
    pub w: Vec<Var<'t>>,
    pub w_h: Var<'t>,
    pub b_h: Var<'t>,
    pub w_mu: Var<'t>,
    pub b_mu: Var<'t>,
    pub w_sigma: Var<'t>,
    pub b_sigma: Var<'t>,
}

impl<'t> EncoderVars<'t> {
    pub fn register(tape: &'t Tape, p: &EncoderParams) -> Self {
        EncoderVars {
            w: p.w.iter().map(|w| tape.param(w.clone())).collect(),
            w_h: tape.param(p.w_h.clone()),
            b_h: tape.param(p.b_h.clone()),
            w_mu: tape.param(p.w_mu.clone()),
            b_mu: tape.param(p.b_mu.clone()),
            w_sigma: tape.param(p.w_sigma.clone()),
            b_sigma: tape.param(p.b_sigma.clone()),
        }
    }

    /// Inverse of [`EncoderVars::all`] for `k` hop matrices.
    pub fn from_vars(k: usize, vars: &[Var<'t>]) -> Result<Self> {
        if vars.len() != k + 6 {
            return Err(Error::Config(format!(
                "expected {} encoder variables, got {}",
                k + 6,
                vars.len()
            )));
        }
        let rest = &vars[k..];
        Ok(EncoderVars {
            w: vars[..k].to_vec(),
            w_h: rest[0],
            b_h: rest[1],
            w_mu: rest[2],
            b_mu: rest[3],
            w_sigma: rest[4],
            b_sigma: rest[5],
        })
    }

    /// Same order as [`EncoderParams::tensors`].
    pub fn all(&self) -> Vec<Var<'t>> {
        let mut out = self.w.clone();
        out.extend([self.w_h, self.b_h, self.w_mu, self.b_mu, self.w_sigma, self.b_sigma]);
        out
    }
}

/// One-hot atom types zero-padded to width `d`, one row per node.
pub fn node_features(g: &MolecularGraph, d: usize) -> Tensor {
    let mut f = Tensor::zeros(&[g.n(), d]);
    for (u, a) in g.atoms().iter().enumerate() {
        f.data_mut()[u * d + a.index()] = 1.0;
    }
    f
}

/// Bond-order weighted adjacency.
pub fn weighted_adjacency(g: &MolecularGraph) -> Rc<Adjacency> {
    Rc::new(
        g.adjacency()
            .into_iter()
            .map(|l| l.into_iter().map(|(v, o)| (v, o as f64)).collect())
            .collect(),
    )
}

/// Embeddings `c(1..K)`, each an `[n, D]` matrix.
pub fn embed<'t>(tape: &'t Tape, vars: &EncoderVars<'t>, g: &MolecularGraph) -> Result<Vec<Var<'t>>> {
    if vars.w.is_empty() {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let d = vars.w[0].value().rows();
    let f = tape.constant(node_features(g, d));
    let adj = weighted_adjacency(g);
    let mut cs = Vec::with_capacity(vars.w.len());
    let mut prev = f.matmul(&vars.w[0])?;
    cs.push(prev);
    for w in &vars.w[1..] {
        let agg = prev.neighbor_sum(Rc::clone(&adj))?;
        prev = f.matmul(w)?.mul(&agg)?;
        cs.push(prev);
    }
    Ok(cs)
}

/// `(μ, σ)` as `[n, D]` tape variables.
pub fn posterior_vars<'t>(tape: &'t Tape, vars: &EncoderVars<'t>, g: &MolecularGraph) -> Result<(Var<'t>, Var<'t>)> {
    let cs = embed(tape, vars, g)?;
    let x = tape.concat_cols(&cs)?;
    let h = x.matmul(&vars.w_h)?.add_row(&vars.b_h)?.softplus()?;
    let mu = h.matmul(&vars.w_mu)?.add_row(&vars.b_mu)?.softplus()?;
    let sigma = h.matmul(&vars.w_sigma)?.add_row(&vars.b_sigma)?.softplus()?;
    Ok((mu, sigma))
}

/// Per-node Gaussian parameters, rows indexed by node.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub mu: Tensor,
    pub sigma: Tensor,
}

impl Posterior {
    pub fn n(&self) -> usize {
        self.mu.rows()
    }

    pub fn d(&self) -> usize {
        self.mu.cols()
    }
}

pub fn posterior(g: &MolecularGraph, params: &EncoderParams) -> Result<Posterior> {
    if g.n() == 0 {
        return Err(Error::Invalid("cannot encode an empty graph".into()));
    }
    let tape = Tape::new();
    let vars = EncoderVars::register(&tape, params);
    let (mu, sigma) = posterior_vars(&tape, &vars, g)?;
    Ok(Posterior {
        mu: (*mu.value()).clone(),
        sigma: (*sigma.value()).clone(),
    })
}

/// Standard normal noise of the posterior's shape.
pub fn draw_noise<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Tensor {
    let data = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(vec![n, d], data).expect("shape matches")
}

/// `z_u = μ_u + σ_u ⊙ ε_u`; returns `(Z, ε)`.
pub fn sample_latent<R: Rng + ?Sized>(post: &Posterior, rng: &mut R) -> (Tensor, Tensor) {
    let eps = draw_noise(post.n(), post.d(), rng);
    (latent_from_noise(post, &eps), eps)
}

pub fn latent_from_noise(post: &Posterior, eps: &Tensor) -> Tensor {
    let data = post
        .mu
        .data()
        .iter()
        .zip(post.sigma.data())
        .zip(eps.data())
        .map(|((m, s), e)| m + s * e)
        .collect();
    Tensor::new(post.mu.shape().to_vec(), data).expect("shape matches")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::Atom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(d: usize, k: usize, seed: u64) -> EncoderParams {
        EncoderParams::init(d, k, DEFAULT_HIDDEN, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn embeddings(g: &MolecularGraph, p: &EncoderParams) -> Vec<Tensor> {
        let tape = Tape::new();
        let vars = EncoderVars::register(&tape, p);
        embed(&tape, &vars, g)
            .unwrap()
            .into_iter()
            .map(|c| (*c.value()).clone())
            .collect()
    }

    #[test]
    fn rejects_bad_dimensions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(EncoderParams::init(3, 2, 8, &mut rng).is_err());
        assert!(EncoderParams::init(5, 0, 8, &mut rng).is_err());
    }

    #[test]
    fn isolated_node_has_zero_second_hop() {
        let g = MolecularGraph::new(vec![Atom::C, Atom::O, Atom::N], [(0, 1, 2)]).unwrap();
        let cs = embeddings(&g, &params(5, 3, 1));
        assert!(cs[1].row(2).iter().all(|&x| x == 0.0));
        assert!(cs[2].row(2).iter().all(|&x| x == 0.0));
        assert!(cs[0].row(2).iter().any(|&x| x != 0.0));
    }

    #[test]
    fn path_with_identity_weights_matches_hand_evaluation() {
        // C=O-C path (orders 2, 1) with W_k = I, evaluated coordinate by coordinate.
        let g = MolecularGraph::new(vec![Atom::C, Atom::O, Atom::C], [(0, 1, 2), (1, 2, 1)]).unwrap();
        let mut p = params(4, 3, 2);
        for w in &mut p.w {
            *w = Tensor::identity(4);
        }
        let cs = embeddings(&g, &p);
        let f = [[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0], [1.0, 0.0, 0.0, 0.0]];
        let nbrs: [&[(usize, f64)]; 3] = [&[(1, 2.0)], &[(0, 2.0), (2, 1.0)], &[(1, 1.0)]];
        let mut prev = f;
        for (k, c) in cs.iter().enumerate() {
            let mut cur = [[0.0; 4]; 3];
            for u in 0..3 {
                for j in 0..4 {
                    cur[u][j] = if k == 0 {
                        f[u][j]
                    } else {
                        f[u][j] * nbrs[u].iter().map(|&(v, y)| y * prev[v][j]).sum::<f64>()
                    };
                    assert_eq!(c.get2(u, j), cur[u][j], "k={} u={u} j={j}", k + 1);
                }
            }
            prev = cur;
        }
        // O sits between two carbons, so its own-type coordinate sees no carbon mass.
        assert_eq!(cs[1].row(1), &[0.0; 4]);
    }

    #[test]
    fn zero_head_gives_type_independent_mu() {
        let g = MolecularGraph::new(vec![Atom::C, Atom::C, Atom::H], [(0, 1, 1), (1, 2, 1)]).unwrap();
        let mut p = params(5, 2, 3);
        for t in [&mut p.w_h, &mut p.b_h, &mut p.w_mu, &mut p.b_mu] {
            *t = Tensor::zeros(t.shape());
        }
        let post = posterior(&g, &p).unwrap();
        let expect = crate::tensor::softplus(0.0);
        assert!(post.mu.data().iter().all(|&m| m == expect));
    }

    #[test]
    fn sigma_is_positive_and_param_count_is_size_free() {
        let p = params(5, 4, 4);
        let small = MolecularGraph::new(vec![Atom::C, Atom::O], [(0, 1, 2)]).unwrap();
        let big = MolecularGraph::new(vec![Atom::C; 9], (0..8).map(|i| (i, i + 1, 1))).unwrap();
        for g in [&small, &big] {
            assert!(posterior(g, &p).unwrap().sigma.data().iter().all(|&s| s > 0.0));
        }
        let expected = 4 * 25 + 20 * 16 + 16 + 2 * (16 * 5 + 5);
        assert_eq!(p.num_parameters(), expected);
    }

    #[test]
    fn latent_sampling_is_reproducible_and_collapses_at_zero_sigma() {
        let g = MolecularGraph::new(vec![Atom::C, Atom::O], [(0, 1, 2)]).unwrap();
        let mut post = posterior(&g, &params(5, 2, 5)).unwrap();
        let a = sample_latent(&post, &mut ChaCha8Rng::seed_from_u64(9)).0;
        let b = sample_latent(&post, &mut ChaCha8Rng::seed_from_u64(9)).0;
        assert_eq!(a, b);
        post.sigma = Tensor::zeros(post.sigma.shape());
        assert_eq!(sample_latent(&post, &mut ChaCha8Rng::seed_from_u64(1)).0, post.mu);
    }

    #[test]
    fn latent_sample_mean_matches_mu() {
        let post = Posterior {
            mu: Tensor::matrix(1, 4, vec![0.5, -1.0, 2.0, 0.0]).unwrap(),
            sigma: Tensor::matrix(1, 4, vec![1.0, 0.3, 2.0, 0.1]).unwrap(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let draws = 100_000;
        let mut sum = [0.0; 4];
        for _ in 0..draws {
            let (z, _) = sample_latent(&post, &mut rng);
            for (s, x) in sum.iter_mut().zip(z.data()) {
                *s += x;
            }
        }
        for (j, s) in sum.iter().enumerate() {
            let mean = s / draws as f64;
            let tol = 3.0 * post.sigma.data()[j] / (draws as f64).sqrt();
            assert!((mean - post.mu.data()[j]).abs() < tol, "coord {j}: {mean}");
        }
    }
}
