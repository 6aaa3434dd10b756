//! Decode-time masks over candidate edges and bond orders.
//!
//! A [`MaskState`] tracks what has been generated so far and answers which
//! pairs may still be proposed and with which bond orders. Mask kinds combine
//! conjunctively.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::molgraph::{Atom, ValenceTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskKind {
    None,
    Valence,
    TriangleFree,
}

impl FromStr for MaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(MaskKind::None),
            "valence" => Ok(MaskKind::Valence),
            "triangle-free" | "triangle_free" => Ok(MaskKind::TriangleFree),
            other => Err(format!("unknown mask kind {other:?}")),
        }
    }
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskKind::None => "none",
            MaskKind::Valence => "valence",
            MaskKind::TriangleFree => "triangle-free",
        })
    }
}

/// The set of active mask kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MaskSet {
    pub valence: bool,
    pub triangle_free: bool,
}

impl MaskSet {
    pub fn of(kinds: &[MaskKind]) -> Self {
        let mut s = MaskSet::default();
        for k in kinds {
            match k {
                MaskKind::None => {}
                MaskKind::Valence => s.valence = true,
                MaskKind::TriangleFree => s.triangle_free = true,
            }
        }
        s
    }
}

impl From<MaskKind> for MaskSet {
    fn from(k: MaskKind) -> Self {
        MaskSet::of(&[k])
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MaskError {
    #[error("pair ({0}, {1}) is not a valid node pair")]
    BadPair(usize, usize),
    #[error("pair ({0}, {1}) was already generated or rejected")]
    AlreadyUsed(usize, usize),
    #[error("pair ({0}, {1}) is masked")]
    EdgeMasked(usize, usize),
    #[error("bond order {m} is masked for pair ({u}, {v})")]
    WeightMasked { u: usize, v: usize, m: u8 },
}

fn key(u: usize, v: usize) -> (usize, usize) {
    if u < v {
        (u, v)
    } else {
        (v, u)
    }
}

#[derive(Debug, Clone)]
pub struct MaskState {
    kinds: MaskSet,
    remaining: Vec<u32>,
    edges: HashSet<(usize, usize)>,
    rejected: HashSet<(usize, usize)>,
    nbrs: Vec<Vec<usize>>,
    // Pairs that are generated or rejected, per node.
    blocked: Vec<Vec<usize>>,
    // Nodes that can still take a bond (all nodes unless valence is active).
    open: Vec<bool>,
    open_list: Vec<usize>,
    open_pos: Vec<usize>,
    // Blocked pairs whose endpoints are both open.
    blocked_open: usize,
}

impl MaskState {
    pub fn new(atoms: &[Atom], table: &ValenceTable, kinds: MaskSet) -> Self {
        let n = atoms.len();
        let remaining: Vec<u32> = atoms.iter().map(|&a| table.max_valence(a)).collect();
        let open: Vec<bool> = (0..n).map(|u| !kinds.valence || remaining[u] > 0).collect();
        let open_list: Vec<usize> = (0..n).filter(|&u| open[u]).collect();
        let mut open_pos = vec![usize::MAX; n];
        for (i, &u) in open_list.iter().enumerate() {
            open_pos[u] = i;
        }
        MaskState {
            kinds,
            remaining,
            edges: HashSet::new(),
            rejected: HashSet::new(),
            nbrs: vec![Vec::new(); n],
            blocked: vec![Vec::new(); n],
            open,
            open_list,
            open_pos,
            blocked_open: 0,
        }
    }

    pub fn n(&self) -> usize {
        self.remaining.len()
    }

    pub fn kinds(&self) -> MaskSet {
        self.kinds
    }

    /// Bond-order budget left at `u` (its maximum valence minus committed
    /// bond orders).
    pub fn remaining_valence(&self, u: usize) -> u32 {
        self.remaining[u]
    }

    pub fn is_generated(&self, u: usize, v: usize) -> bool {
        self.edges.contains(&key(u, v))
    }

    pub fn is_rejected(&self, u: usize, v: usize) -> bool {
        self.rejected.contains(&key(u, v))
    }

    pub fn generated_count(&self) -> usize {
        self.edges.len()
    }

    fn closes_triangle(&self, u: usize, v: usize) -> bool {
        let (a, b) = if self.nbrs[u].len() <= self.nbrs[v].len() {
            (u, v)
        } else {
            (v, u)
        };
        self.nbrs[a].iter().any(|&w| self.edges.contains(&key(w, b)))
    }

    /// Whether `(u, v)` may be proposed now: a fresh, non-rejected pair of
    /// distinct nodes that every active mask kind allows.
    pub fn edge_mask(&self, u: usize, v: usize) -> bool {
        let n = self.n();
        if u == v || u >= n || v >= n {
            return false;
        }
        let k = key(u, v);
        if self.edges.contains(&k) || self.rejected.contains(&k) {
            return false;
        }
        if self.kinds.valence && (self.remaining[u] < 1 || self.remaining[v] < 1) {
            return false;
        }
        if self.kinds.triangle_free && self.closes_triangle(u, v) {
            return false;
        }
        true
    }

    pub fn weight_mask(&self, u: usize, v: usize, m: u8) -> bool {
        if !(1..=3).contains(&m) {
            return false;
        }
        !self.kinds.valence || (m as u32 <= self.remaining[u] && m as u32 <= self.remaining[v])
    }

    /// Allowed bond orders 1, 2, 3 for the pair.
    pub fn weight_options(&self, u: usize, v: usize) -> [bool; 3] {
        [1, 2, 3].map(|m| self.weight_mask(u, v, m))
    }

    fn block(&mut self, u: usize, v: usize) {
        self.blocked[u].push(v);
        self.blocked[v].push(u);
        if self.open[u] && self.open[v] {
            self.blocked_open += 1;
        }
    }

    fn close(&mut self, u: usize) {
        self.open[u] = false;
        let pos = self.open_pos[u];
        let last = *self.open_list.last().expect("open list non-empty");
        self.open_list.swap_remove(pos);
        if last != u {
            self.open_pos[last] = pos;
        }
        self.open_pos[u] = usize::MAX;
        let lost = self.blocked[u].iter().filter(|&&p| self.open[p]).count();
        self.blocked_open -= lost;
    }

    pub fn commit(&mut self, u: usize, v: usize, m: u8) -> Result<(), MaskError> {
        let n = self.n();
        if u == v || u >= n || v >= n {
            return Err(MaskError::BadPair(u, v));
        }
        let k = key(u, v);
        if self.edges.contains(&k) || self.rejected.contains(&k) {
            return Err(MaskError::AlreadyUsed(u, v));
        }
        if !self.edge_mask(u, v) {
            return Err(MaskError::EdgeMasked(u, v));
        }
        if !self.weight_mask(u, v, m) {
            return Err(MaskError::WeightMasked { u, v, m });
        }
        self.edges.insert(k);
        self.nbrs[u].push(v);
        self.nbrs[v].push(u);
        self.block(u, v);
        for x in [u, v] {
            self.remaining[x] = self.remaining[x].saturating_sub(m as u32);
            if self.kinds.valence && self.remaining[x] == 0 && self.open[x] {
                self.close(x);
            }
        }
        Ok(())
    }

    /// Removes a pair from future candidate sets (no bond order fits it).
    pub fn reject(&mut self, u: usize, v: usize) {
        let k = key(u, v);
        if u == v || self.edges.contains(&k) || !self.rejected.insert(k) {
            return;
        }
        self.block(u, v);
    }

    /// All currently unmasked pairs `(u, v)` with `u < v`, in lexicographic
    /// order.
    pub fn candidates(&self) -> Vec<(usize, usize)> {
        let n = self.n();
        let mut out = Vec::new();
        for u in 0..n {
            if !self.open[u] {
                continue;
            }
            for v in (u + 1)..n {
                if self.open[v] && self.edge_mask(u, v) {
                    out.push((u, v));
                }
            }
        }
        out
    }

    pub fn candidate_count(&self) -> usize {
        if self.kinds.triangle_free {
            return self.candidates().len();
        }
        let k = self.open_list.len();
        k * k.saturating_sub(1) / 2 - self.blocked_open
    }

    /// Up to `k` distinct candidates drawn uniformly without replacement,
    /// never returning `exclude`.
    pub fn sample_candidates<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        k: usize,
        exclude: Option<(usize, usize)>,
    ) -> Vec<(usize, usize)> {
        let exclude = exclude.map(|(u, v)| key(u, v));
        let excluded_is_candidate = exclude.is_some_and(|(u, v)| self.edge_mask(u, v));
        if !self.kinds.triangle_free {
            let total = self.candidate_count() - usize::from(excluded_is_candidate);
            let open = self.open_list.len();
            let pairs = open * open.saturating_sub(1) / 2;
            if total > k && total * 3 >= pairs {
                return self.rejection_sample(rng, k, exclude);
            }
        }
        let mut all = self.candidates();
        if let Some(e) = exclude {
            all.retain(|&p| p != e);
        }
        if all.len() <= k {
            return all;
        }
        rand::seq::index::sample(rng, all.len(), k)
            .into_iter()
            .map(|i| all[i])
            .collect()
    }

    fn rejection_sample<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        k: usize,
        exclude: Option<(usize, usize)>,
    ) -> Vec<(usize, usize)> {
        let open = self.open_list.len();
        let mut chosen = Vec::with_capacity(k);
        let mut seen = HashSet::with_capacity(k);
        while chosen.len() < k {
            let i = rng.random_range(0..open);
            let j = rng.random_range(0..open);
            if i == j {
                continue;
            }
            let p = key(self.open_list[i], self.open_list[j]);
            if Some(p) == exclude || seen.contains(&p) || !self.edge_mask(p.0, p.1) {
                continue;
            }
            seen.insert(p);
            chosen.push(p);
        }
        chosen
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn state(atoms: &[Atom], kind: MaskKind) -> MaskState {
        MaskState::new(atoms, &ValenceTable::default(), kind.into())
    }

    #[test]
    fn hydrogen_takes_one_bond() {
        let mut s = state(&[Atom::H, Atom::C, Atom::C], MaskKind::Valence);
        s.commit(0, 1, 1).unwrap();
        assert!(!s.edge_mask(0, 2));
        assert!(s.edge_mask(1, 2));
    }

    #[test]
    fn triangle_closing_pair_is_masked() {
        let mut s = state(&[Atom::C; 3], MaskKind::TriangleFree);
        s.commit(0, 1, 1).unwrap();
        s.commit(1, 2, 1).unwrap();
        assert!(!s.edge_mask(0, 2));
    }

    #[test]
    fn no_mask_allows_everything_fresh() {
        let mut s = state(&[Atom::H; 3], MaskKind::None);
        s.commit(0, 1, 3).unwrap();
        assert!(s.edge_mask(0, 2));
        assert!(s.edge_mask(1, 2));
        assert!(s.weight_options(0, 2).iter().all(|&b| b));
    }

    #[test]
    fn weight_mask_examples() {
        let mut s = state(
            &[Atom::C, Atom::C, Atom::C, Atom::H, Atom::H, Atom::H],
            MaskKind::Valence,
        );
        for h in 3..6 {
            s.commit(0, h, 1).unwrap();
        }
        assert!(!s.weight_mask(0, 1, 2));
        assert!(s.weight_mask(1, 2, 3));

        let s = state(&[Atom::O, Atom::N], MaskKind::Valence);
        assert!(s.weight_mask(0, 1, 2));
        assert!(!s.weight_mask(0, 1, 3));
    }

    #[test]
    fn commit_bookkeeping() {
        let mut s = state(&[Atom::O, Atom::C, Atom::C], MaskKind::Valence);
        s.commit(0, 1, 1).unwrap();
        assert_eq!(s.commit(0, 1, 1), Err(MaskError::AlreadyUsed(0, 1)));
        s.commit(0, 2, 1).unwrap();
        assert_eq!(s.remaining_valence(0), 0);
        assert!(!s.edge_mask(0, 1) && !s.edge_mask(0, 2));
        assert_eq!(s.candidates(), vec![(1, 2)]);
        assert_eq!(s.candidate_count(), 1);
        assert_eq!(s.commit(1, 2, 3), Ok(()));
        assert_eq!(s.candidate_count(), 0);
    }

    #[test]
    fn rejected_pairs_leave_candidates() {
        let mut s = state(&[Atom::C; 3], MaskKind::None);
        s.reject(0, 2);
        assert_eq!(s.candidates(), vec![(0, 1), (1, 2)]);
        assert_eq!(s.candidate_count(), 2);
    }

    #[test]
    fn sampled_candidates_are_distinct_and_exclude() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let atoms = vec![Atom::C; 40];
        let mut s = state(&atoms, MaskKind::Valence);
        s.commit(0, 1, 3).unwrap();
        for _ in 0..50 {
            let got = s.sample_candidates(&mut rng, 10, Some((2, 3)));
            let set: BTreeSet<_> = got.iter().copied().collect();
            assert_eq!(set.len(), 10);
            assert!(!set.contains(&(2, 3)));
            assert!(got.iter().all(|&(u, v)| u < v && s.edge_mask(u, v)));
        }
        let small = state(&[Atom::C; 3], MaskKind::None);
        let got = small.sample_candidates(&mut rng, 10, Some((0, 1)));
        assert_eq!(got.len(), 2);
    }

    #[test]
    fn rejection_sampler_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = state(&[Atom::C; 5], MaskKind::None);
        let mut counts = std::collections::HashMap::new();
        let trials = 20_000;
        for _ in 0..trials {
            for p in s.sample_candidates(&mut rng, 1, Some((0, 1))) {
                *counts.entry(p).or_insert(0usize) += 1;
            }
        }
        assert_eq!(counts.len(), 9);
        let expect = trials as f64 / 9.0;
        let sd = (expect * (1.0 - 1.0 / 9.0)).sqrt();
        for (&p, &c) in &counts {
            assert!((c as f64 - expect).abs() < 4.0 * sd, "{p:?}: {c}");
        }
    }

    fn pairs(n: usize) -> Vec<(usize, usize)> {
        (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v))).collect()
    }

    /// Every graph reachable by mask-permitted commits, keyed by sorted
    /// (u, v, order) lists.
    fn reachable(atoms: &[Atom], kinds: MaskSet, max_order: u8) -> BTreeSet<Vec<(usize, usize, u8)>> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![(MaskState::new(atoms, &ValenceTable::default(), kinds), Vec::new())];
        while let Some((s, bonds)) = stack.pop() {
            if !seen.insert(bonds.clone()) {
                continue;
            }
            for (u, v) in s.candidates() {
                for m in 1..=max_order {
                    if !s.weight_mask(u, v, m) {
                        continue;
                    }
                    let mut t = s.clone();
                    t.commit(u, v, m).unwrap();
                    let mut b: Vec<_> = bonds.clone();
                    b.push((u, v, m));
                    b.sort_unstable();
                    stack.push((t, b));
                }
            }
        }
        seen
    }

    #[test]
    fn valence_masks_are_sound_on_small_graphs() {
        let table = ValenceTable::default();
        for atoms in [
            vec![Atom::C, Atom::H, Atom::H, Atom::O],
            vec![Atom::N, Atom::O, Atom::C, Atom::H, Atom::C],
        ] {
            for bonds in reachable(&atoms, MaskKind::Valence.into(), 3) {
                let mut sum = vec![0u32; atoms.len()];
                for &(u, v, m) in &bonds {
                    sum[u] += m as u32;
                    sum[v] += m as u32;
                }
                for (u, a) in atoms.iter().enumerate() {
                    assert!(sum[u] <= table.max_valence(*a), "{bonds:?}");
                }
            }
        }
    }

    #[test]
    fn triangle_free_masks_are_sound_and_complete() {
        for n in 3..=5 {
            let atoms = vec![Atom::C; n];
            let reach: BTreeSet<Vec<(usize, usize)>> = reachable(&atoms, MaskKind::TriangleFree.into(), 1)
                .into_iter()
                .map(|b| b.into_iter().map(|(u, v, _)| (u, v)).collect())
                .collect();
            let ps = pairs(n);
            let mut expected = BTreeSet::new();
            for mask in 0u32..(1 << ps.len()) {
                let edges: Vec<(usize, usize)> = (0..ps.len()).filter(|i| mask >> i & 1 == 1).map(|i| ps[i]).collect();
                let set: HashSet<_> = edges.iter().copied().collect();
                let tri = (0..n).any(|a| {
                    (a + 1..n).any(|b| {
                        (b + 1..n).any(|c| set.contains(&(a, b)) && set.contains(&(b, c)) && set.contains(&(a, c)))
                    })
                });
                if !tri {
                    expected.insert(edges);
                }
            }
            assert_eq!(reach, expected, "n = {n}");
        }
    }

    #[test]
    fn fast_count_matches_enumeration_along_random_traces() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.random_range(2..12);
            let atoms: Vec<Atom> = (0..n).map(|_| Atom::ALL[rng.random_range(0..4)]).collect();
            for kind in [MaskKind::None, MaskKind::Valence] {
                let mut s = state(&atoms, kind);
                loop {
                    assert_eq!(s.candidate_count(), s.candidates().len());
                    let c = s.candidates();
                    if c.is_empty() || s.generated_count() > 20 {
                        break;
                    }
                    let (u, v) = c[rng.random_range(0..c.len())];
                    if rng.random_bool(0.2) {
                        s.reject(u, v);
                        continue;
                    }
                    let opts: Vec<u8> = (1..=3).filter(|&m| s.weight_mask(u, v, m)).collect();
                    s.commit(u, v, opts[rng.random_range(0..opts.len())]).unwrap();
                }
            }
        }
    }
}
