//! Synthetic graph families with exact likelihoods, corpus generators and
//! ranking metrics.
//!
//! Synthetic graphs reuse [`MolecularGraph`] with every node typed `C` and
//! every edge of order 1.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::molgraph::{Atom, MolecularGraph, ValenceTable};
use crate::{Error, Result};

pub const NEUTRAL_ATOM: Atom = Atom::C;

fn neutral_graph(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> MolecularGraph {
    MolecularGraph::new(vec![NEUTRAL_ATOM; n], edges.into_iter().map(|(u, v)| (u, v, 1)))
        .expect("generated edges are well formed")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KroneckerSpec {
    pub theta: [[f64; 2]; 2],
    pub k: u32,
}

impl KroneckerSpec {
    pub fn new(theta: [[f64; 2]; 2], k: u32) -> Result<Self> {
        if k < 1 {
            return Err(Error::Config("Kronecker power must be at least 1".into()));
        }
        if theta.iter().flatten().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("initiator entries must lie in [0, 1]".into()));
        }
        Ok(KroneckerSpec { theta, k })
    }

    pub fn n(&self) -> usize {
        1 << self.k
    }

    /// Entry `(u, v)` of the k-fold Kronecker power of the initiator.
    pub fn power_entry(&self, u: usize, v: usize) -> f64 {
        (0..self.k).map(|i| self.theta[(u >> i) & 1][(v >> i) & 1]).product()
    }

    /// Probability of the undirected pair: the mean of both orientations.
    pub fn pair_prob(&self, u: usize, v: usize) -> f64 {
        0.5 * (self.power_entry(u, v) + self.power_entry(v, u))
    }
}

pub const KRONECKER_THETA_A: [[f64; 2]; 2] = [[0.9, 0.6], [0.3, 0.2]];
pub const KRONECKER_THETA_B: [[f64; 2]; 2] = [[0.6, 0.6], [0.6, 0.6]];

pub fn gen_kronecker<R: Rng + ?Sized>(spec: &KroneckerSpec, rng: &mut R) -> MolecularGraph {
    let n = spec.n();
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            if rng.random_bool(spec.pair_prob(u, v).clamp(0.0, 1.0)) {
                edges.push((u, v));
            }
        }
    }
    neutral_graph(n, edges)
}

/// `Σ_{u<v} A_uv log p_uv + (1 − A_uv) log(1 − p_uv)` under the identity
/// labeling; `-inf` when the graph is impossible.
pub fn loglik_kronecker(g: &MolecularGraph, spec: &KroneckerSpec) -> Result<f64> {
    let n = spec.n();
    if g.n() != n {
        return Err(Error::Invalid(format!(
            "graph has {} nodes, the Kronecker model expects {n}",
            g.n()
        )));
    }
    let mut total = 0.0;
    for u in 0..n {
        for v in (u + 1)..n {
            let p = spec.pair_prob(u, v);
            let q = if g.bond_order(u, v).is_some() { p } else { 1.0 - p };
            if q <= 0.0 {
                return Ok(f64::NEG_INFINITY);
            }
            total += q.ln();
        }
    }
    Ok(total)
}

/// A preferential-attachment graph with its construction record.
#[derive(Debug, Clone, PartialEq)]
pub struct BaGraph {
    pub graph: MolecularGraph,
    pub m: usize,
    /// For every node added after the seed graph, its targets in the order
    /// they were picked.
    pub arrivals: Vec<Vec<usize>>,
}

fn ba_seed(m: usize) -> Vec<(usize, usize)> {
    if m == 1 {
        vec![(0, 1)]
    } else {
        (0..=m).flat_map(|u| (u + 1..=m).map(move |v| (u, v))).collect()
    }
}

fn ba_seed_size(m: usize) -> usize {
    if m == 1 {
        2
    } else {
        m + 1
    }
}

/// Preferential attachment. For `m = 1` the seed is a single edge `0–1`; for
/// larger `m` a clique on `m + 1` nodes. Each new node picks `m` distinct
/// targets one after another, each with probability proportional to degree
/// among the targets not yet picked.
pub fn gen_ba<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> Result<BaGraph> {
    if m < 1 || n <= m {
        return Err(Error::Config(format!("need m >= 1 and n > m, got n = {n}, m = {m}")));
    }
    let seed = ba_seed_size(m);
    let mut edges = ba_seed(m);
    let mut degree = vec![0usize; n.max(seed)];
    for &(u, v) in &edges {
        degree[u] += 1;
        degree[v] += 1;
    }
    let mut arrivals = Vec::new();
    for t in seed..n {
        let mut picked: Vec<usize> = Vec::with_capacity(m);
        for _ in 0..m {
            let total: usize = (0..t).filter(|u| !picked.contains(u)).map(|u| degree[u]).sum();
            let mut r = rng.random_range(0..total);
            let target = (0..t)
                .filter(|u| !picked.contains(u))
                .find(|&u| {
                    if r < degree[u] {
                        true
                    } else {
                        r -= degree[u];
                        false
                    }
                })
                .expect("degree mass covers draw");
            picked.push(target);
        }
        for &v in &picked {
            degree[v] += 1;
            degree[t] += 1;
            edges.push((v, t));
        }
        arrivals.push(picked);
    }
    Ok(BaGraph {
        graph: neutral_graph(n.max(seed), edges),
        m,
        arrivals,
    })
}

/// Log-probability of the recorded construction.
pub fn loglik_ba(ba: &BaGraph) -> Result<f64> {
    let n = ba.graph.n();
    let m = ba.m;
    let seed = ba_seed_size(m);
    if ba.arrivals.len() + seed != n {
        return Err(Error::Invalid(format!(
            "arrival record covers {} nodes, graph has {n}",
            ba.arrivals.len() + seed
        )));
    }
    let mut degree = vec![0usize; n];
    for (u, v) in ba_seed(m) {
        degree[u] += 1;
        degree[v] += 1;
    }
    let mut total = 0.0;
    for (i, targets) in ba.arrivals.iter().enumerate() {
        let t = seed + i;
        if targets.len() != m {
            return Err(Error::Invalid(format!(
                "node {t} has {} targets, expected {m}",
                targets.len()
            )));
        }
        let mut picked: Vec<usize> = Vec::with_capacity(m);
        for &v in targets {
            if v >= t || picked.contains(&v) || ba.graph.bond_order(v, t).is_none() {
                return Err(Error::Invalid(format!(
                    "node {t}: target {v} inconsistent with the graph"
                )));
            }
            let mass: usize = (0..t).filter(|u| !picked.contains(u)).map(|u| degree[u]).sum();
            total += (degree[v] as f64 / mass as f64).ln();
            picked.push(v);
        }
        for &v in &picked {
            degree[v] += 1;
            degree[t] += 1;
        }
    }
    Ok(total)
}

pub fn erdos_renyi<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> MolecularGraph {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            if rng.random_bool(p) {
                edges.push((u, v));
            }
        }
    }
    neutral_graph(n, edges)
}

/// Adds pairs in random order whenever they close no triangle, until no pair
/// can be added.
pub fn maximal_triangle_free<R: Rng + ?Sized>(n: usize, rng: &mut R) -> MolecularGraph {
    let mut pairs: Vec<(usize, usize)> = (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v))).collect();
    pairs.shuffle(rng);
    let mut nbrs: Vec<HashSet<usize>> = vec![HashSet::new(); n];
    let mut edges = Vec::new();
    for (u, v) in pairs {
        if nbrs[u].intersection(&nbrs[v]).next().is_none() {
            nbrs[u].insert(v);
            nbrs[v].insert(u);
            edges.push((u, v));
        }
    }
    neutral_graph(n, edges)
}

/// Half sparse Erdős–Rényi graphs redrawn until triangle-free, half random
/// maximal triangle-free graphs; node counts uniform in `min_n..=max_n`.
pub fn triangle_free_corpus<R: Rng + ?Sized>(
    count: usize,
    min_n: usize,
    max_n: usize,
    rng: &mut R,
) -> Vec<MolecularGraph> {
    (0..count)
        .map(|i| {
            let n = rng.random_range(min_n..=max_n);
            if i % 2 == 0 {
                let p = (2.0 / n as f64).min(1.0);
                loop {
                    let g = erdos_renyi(n, p, rng);
                    if !g.has_triangle() {
                        break g;
                    }
                }
            } else {
                maximal_triangle_free(n, rng)
            }
        })
        .collect()
}

/// Small saturated molecules over C, N, O with explicit hydrogens: 1–4
/// heavy atoms on a random tree (optionally closed into a ring), a few
/// bonds promoted to double or triple, then hydrogens filling every
/// remaining valence. Redrawn until the molecule has at most `max_atoms`
/// atoms.
pub fn random_small_molecule<R: Rng + ?Sized>(max_atoms: usize, rng: &mut R) -> MolecularGraph {
    let table = ValenceTable::default();
    loop {
        let heavy = rng.random_range(1..=4usize);
        let atoms: Vec<Atom> = (0..heavy)
            .map(|_| match rng.random_range(0..10) {
                0..=5 => Atom::C,
                6..=7 => Atom::N,
                _ => Atom::O,
            })
            .collect();
        let mut used: Vec<u32> = vec![0; heavy];
        let mut bonds: Vec<(usize, usize, u8)> = Vec::new();
        let mut ok = true;
        for v in 1..heavy {
            let u = rng.random_range(0..v);
            bonds.push((u, v, 1));
            used[u] += 1;
            used[v] += 1;
        }
        if heavy >= 3 && rng.random_bool(0.25) {
            let (u, v) = (0, heavy - 1);
            if bonds.iter().all(|&(a, b, _)| (a, b) != (u, v)) {
                bonds.push((u, v, 1));
                used[u] += 1;
                used[v] += 1;
            }
        }
        for b in bonds.iter_mut() {
            if rng.random_bool(0.3) {
                let extra = rng.random_range(1..=2u32);
                let room = |x: usize| table.max_valence(atoms[x]) - used[x].min(table.max_valence(atoms[x]));
                let add = extra.min(room(b.0)).min(room(b.1));
                b.2 += add as u8;
                used[b.0] += add;
                used[b.1] += add;
            }
        }
        for (x, &a) in atoms.iter().enumerate() {
            if used[x] > table.max_valence(a) {
                ok = false;
            }
        }
        if !ok {
            continue;
        }
        let mut all_atoms = atoms.clone();
        for (x, &a) in atoms.iter().enumerate() {
            for _ in used[x]..table.max_valence(a) {
                let h = all_atoms.len();
                all_atoms.push(Atom::H);
                bonds.push((x, h, 1));
            }
        }
        if all_atoms.len() <= max_atoms && all_atoms.len() >= 2 {
            return MolecularGraph::new(all_atoms, bonds).expect("constructed molecule is well formed");
        }
    }
}

pub fn small_molecule_corpus<R: Rng + ?Sized>(count: usize, max_atoms: usize, rng: &mut R) -> Vec<MolecularGraph> {
    (0..count).map(|_| random_small_molecule(max_atoms, rng)).collect()
}

/// Ids sorted by decreasing score, ties broken by increasing id.
pub fn rank_by_score(scores: &[(usize, f64)]) -> Vec<usize> {
    let mut s = scores.to_vec();
    s.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    s.into_iter().map(|(id, _)| id).collect()
}

fn positions(list: &[usize]) -> Result<std::collections::HashMap<usize, usize>> {
    let mut pos = std::collections::HashMap::with_capacity(list.len());
    for (i, &id) in list.iter().enumerate() {
        if pos.insert(id, i).is_some() {
            return Err(Error::Invalid(format!("duplicate id {id} in ranking")));
        }
    }
    Ok(pos)
}

/// Spearman rank correlation of two rankings of the same ids: the Pearson
/// correlation of each id's positions.
pub fn spearman(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() < 2 {
        return Err(Error::Invalid("rank correlation needs at least two items".into()));
    }
    if a.len() != b.len() {
        return Err(Error::Invalid("rankings have different lengths".into()));
    }
    let pa = positions(a)?;
    let pb = positions(b)?;
    let n = a.len() as f64;
    let mean = (n - 1.0) / 2.0;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (id, &ra) in &pa {
        let rb = *pb
            .get(id)
            .ok_or_else(|| Error::Invalid(format!("id {id} missing from the second ranking")))? as f64;
        let ra = ra as f64;
        cov += (ra - mean) * (rb - mean);
        va += (ra - mean) * (ra - mean);
        vb += (rb - mean) * (rb - mean);
    }
    Ok(cov / (va * vb).sqrt())
}

/// Top/bottom precision. With `s = max(1, ⌊fraction·N⌋)`, take the first and
/// last `s` ids of the reference ranking `tp`; keep only those ids in `tx`,
/// in `tx` order; `γ↑` is the share of the kept list's first `s` entries
/// that lie in the reference top slice, `γ↓` the share of its last `s`
/// entries that lie in the reference bottom slice.
pub fn precision_top_bottom(tp: &[usize], tx: &[usize], fraction: f64) -> Result<(f64, f64)> {
    let n = tp.len();
    if n != tx.len() {
        return Err(Error::Invalid("rankings have different lengths".into()));
    }
    let s = ((fraction * n as f64).floor() as usize).max(1);
    if 2 * s > n {
        return Err(Error::Invalid(format!(
            "top and bottom slices of size {s} overlap in {n} items"
        )));
    }
    positions(tp)?;
    positions(tx)?;
    let top: HashSet<usize> = tp[..s].iter().copied().collect();
    let bottom: HashSet<usize> = tp[n - s..].iter().copied().collect();
    let kept: Vec<usize> = tx
        .iter()
        .copied()
        .filter(|id| top.contains(id) || bottom.contains(id))
        .collect();
    if kept.len() != 2 * s {
        return Err(Error::Invalid("rankings cover different ids".into()));
    }
    let up = kept[..s].iter().filter(|id| top.contains(id)).count() as f64 / s as f64;
    let down = kept[s..].iter().filter(|id| bottom.contains(id)).count() as f64 / s as f64;
    Ok((up, down))
}
