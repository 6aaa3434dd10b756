//! Molecular graphs: atoms as typed nodes, bonds as weighted undirected edges.

use std::collections::{BTreeMap, HashSet};
use std::fmt::{self, Write as _};
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Atom {
    C,
    H,
    N,
    O,
}

impl Atom {
    pub const ALL: [Atom; 4] = [Atom::C, Atom::H, Atom::N, Atom::O];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Atom> {
        Atom::ALL.get(i).copied()
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Atom::C => "C",
            Atom::H => "H",
            Atom::N => "N",
            Atom::O => "O",
        }
    }

    pub fn from_symbol(s: &str) -> Option<Atom> {
        match s {
            "C" => Some(Atom::C),
            "H" => Some(Atom::H),
            "N" => Some(Atom::N),
            "O" => Some(Atom::O),
            _ => None,
        }
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

/// Maximum total bond order per atom type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValenceTable {
    max: [u32; 4],
}

impl Default for ValenceTable {
    fn default() -> Self {
        ValenceTable { max: [4, 1, 3, 2] }
    }
}

impl ValenceTable {
    pub fn new(c: u32, h: u32, n: u32, o: u32) -> Self {
        ValenceTable { max: [c, h, n, o] }
    }

    pub fn max_valence(&self, atom: Atom) -> u32 {
        self.max[atom.index()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Bond {
    pub u: usize,
    pub v: usize,
    pub order: u8,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("self-loop at node {0}")]
    SelfLoop(usize),
    #[error("unknown atom symbol {0:?}")]
    UnknownAtom(String),
    #[error("bond endpoint {index} out of range for {n} atoms")]
    IndexOutOfRange { index: i64, n: usize },
    #[error("duplicate bond between {0} and {1}")]
    DuplicateBond(usize, usize),
    #[error("bond order {0} not in 1..=3")]
    BadOrder(i64),
    #[error("malformed record: {0}")]
    Json(String),
    #[error("line {line}: {source}")]
    Line {
        line: usize,
        #[source]
        source: Box<GraphError>,
    },
    #[error("io: {0}")]
    Io(String),
    #[error("graph has {n} nodes, above the canonical-labeling limit {limit}")]
    TooLarge { n: usize, limit: usize },
    #[error("no samples to evaluate")]
    EmptySamples,
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// Undirected graph with atom-typed nodes and bond orders in {1, 2, 3}.
/// Bonds are stored with `u < v`, sorted.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MolecularGraph {
    atoms: Vec<Atom>,
    bonds: Vec<Bond>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    atoms: Vec<String>,
    bonds: Vec<[i64; 3]>,
}

impl MolecularGraph {
    pub fn new(atoms: Vec<Atom>, bonds: impl IntoIterator<Item = (usize, usize, u8)>) -> Result<Self> {
        let n = atoms.len();
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for (u, v, order) in bonds {
            check_bond(u as i64, v as i64, order as i64, n)?;
            let (a, b) = if u < v { (u, v) } else { (v, u) };
            if !seen.insert((a, b)) {
                return Err(GraphError::DuplicateBond(a, b));
            }
            out.push(Bond { u: a, v: b, order });
        }
        out.sort();
        Ok(MolecularGraph { atoms, bonds: out })
    }

    pub fn empty() -> Self {
        MolecularGraph {
            atoms: Vec::new(),
            bonds: Vec::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.atoms.len()
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    pub fn edge_count(&self) -> usize {
        self.bonds.len()
    }

    /// Neighbour lists with bond orders, in ascending neighbour order.
    pub fn adjacency(&self) -> Vec<Vec<(usize, u8)>> {
        let mut adj = vec![Vec::new(); self.n()];
        for b in &self.bonds {
            adj[b.u].push((b.v, b.order));
            adj[b.v].push((b.u, b.order));
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.n()];
        for b in &self.bonds {
            d[b.u] += 1;
            d[b.v] += 1;
        }
        d
    }

    /// Sum of incident bond orders per node.
    pub fn bond_order_sums(&self) -> Vec<u32> {
        let mut s = vec![0; self.n()];
        for b in &self.bonds {
            s[b.u] += b.order as u32;
            s[b.v] += b.order as u32;
        }
        s
    }

    pub fn bond_order(&self, u: usize, v: usize) -> Option<u8> {
        let (a, b) = if u < v { (u, v) } else { (v, u) };
        self.bonds
            .binary_search_by(|x| (x.u, x.v).cmp(&(a, b)))
            .ok()
            .map(|i| self.bonds[i].order)
    }

    /// Connected components as sorted node lists, ordered by smallest member.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let adj = self.adjacency();
        let mut seen = vec![false; self.n()];
        let mut comps = Vec::new();
        for s in 0..self.n() {
            if seen[s] {
                continue;
            }
            seen[s] = true;
            let mut stack = vec![s];
            let mut comp = Vec::new();
            while let Some(u) = stack.pop() {
                comp.push(u);
                for &(v, _) in &adj[u] {
                    if !seen[v] {
                        seen[v] = true;
                        stack.push(v);
                    }
                }
            }
            comp.sort_unstable();
            comps.push(comp);
        }
        comps
    }

    pub fn is_connected(&self) -> bool {
        self.n() > 0 && self.components().len() == 1
    }

    /// Relabels nodes so that old node `i` becomes `perm[i]`.
    pub fn relabel(&self, perm: &[usize]) -> MolecularGraph {
        assert_eq!(perm.len(), self.n(), "permutation length");
        let mut atoms = vec![Atom::C; self.n()];
        for (i, &p) in perm.iter().enumerate() {
            atoms[p] = self.atoms[i];
        }
        let bonds = self.bonds.iter().map(|b| (perm[b.u], perm[b.v], b.order));
        MolecularGraph::new(atoms, bonds).expect("relabeling preserves validity")
    }

    pub fn has_triangle(&self) -> bool {
        let adj = self.adjacency();
        let sets: Vec<HashSet<usize>> = adj.iter().map(|l| l.iter().map(|&(v, _)| v).collect()).collect();
        self.bonds
            .iter()
            .any(|b| adj[b.u].iter().any(|&(w, _)| w != b.v && sets[b.v].contains(&w)))
    }

    /// One JSONL record, without the trailing newline.
    pub fn to_json_line(&self) -> String {
        let rec = Record {
            atoms: self.atoms.iter().map(|a| a.symbol().to_string()).collect(),
            bonds: self
                .bonds
                .iter()
                .map(|b| [b.u as i64, b.v as i64, b.order as i64])
                .collect(),
        };
        serde_json::to_string(&rec).expect("record serializes")
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let rec: Record = serde_json::from_str(line).map_err(|e| GraphError::Json(e.to_string()))?;
        let atoms = rec
            .atoms
            .iter()
            .map(|s| Atom::from_symbol(s).ok_or_else(|| GraphError::UnknownAtom(s.clone())))
            .collect::<Result<Vec<_>>>()?;
        let n = atoms.len();
        let mut bonds = Vec::with_capacity(rec.bonds.len());
        for [u, v, o] in rec.bonds {
            check_bond(u, v, o, n)?;
            bonds.push((u as usize, v as usize, o as u8));
        }
        MolecularGraph::new(atoms, bonds)
    }

    /// Graphviz rendering: node label = atom symbol, edge label = bond order.
    pub fn to_dot(&self, name: &str) -> String {
        let mut s = format!("graph {name} {{\n");
        for (i, a) in self.atoms.iter().enumerate() {
            let _ = writeln!(s, "  {i} [label=\"{a}\"];");
        }
        for b in &self.bonds {
            let _ = writeln!(s, "  {} -- {} [label=\"{}\"];", b.u, b.v, b.order);
        }
        s.push_str("}\n");
        s
    }
}

fn check_bond(u: i64, v: i64, order: i64, n: usize) -> Result<()> {
    for idx in [u, v] {
        if idx < 0 || idx as usize >= n {
            return Err(GraphError::IndexOutOfRange { index: idx, n });
        }
    }
    if u == v {
        return Err(GraphError::SelfLoop(u as usize));
    }
    if !(1..=3).contains(&order) {
        return Err(GraphError::BadOrder(order));
    }
    Ok(())
}

/// Reads one graph per non-blank line. Errors carry the 1-based line number.
pub fn parse_corpus<R: BufRead>(reader: R) -> Result<Vec<MolecularGraph>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| GraphError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let g = MolecularGraph::from_json_line(&line).map_err(|e| GraphError::Line {
            line: i + 1,
            source: Box::new(e),
        })?;
        out.push(g);
    }
    Ok(out)
}

pub fn write_corpus(graphs: &[MolecularGraph]) -> String {
    let mut s = String::new();
    for g in graphs {
        s.push_str(&g.to_json_line());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    OverValence,
    Isolated,
    Disconnected,
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub node: Option<usize>,
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub valid: bool,
    pub violations: Vec<Violation>,
}

/// Which violations disqualify a molecule. `Valence` checks only the
/// per-atom bond-order budget; `Full` also demands a single connected
/// component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ValidityRule {
    #[default]
    Valence,
    Full,
}

impl ValidityReport {
    pub fn satisfies(&self, rule: ValidityRule) -> bool {
        match rule {
            ValidityRule::Full => self.valid,
            ValidityRule::Valence => !self
                .violations
                .iter()
                .any(|v| matches!(v.kind, ViolationKind::OverValence | ViolationKind::Empty)),
        }
    }
}

/// Checks bond-order budgets and connectivity. Unfilled valence is taken to
/// be saturated by implicit hydrogens.
pub fn validate_molecule(g: &MolecularGraph, table: &ValenceTable) -> ValidityReport {
    let mut violations = Vec::new();
    if g.n() == 0 {
        violations.push(Violation {
            node: None,
            kind: ViolationKind::Empty,
        });
    }
    let sums = g.bond_order_sums();
    for (u, (&s, &a)) in sums.iter().zip(g.atoms()).enumerate() {
        if s > table.max_valence(a) {
            violations.push(Violation {
                node: Some(u),
                kind: ViolationKind::OverValence,
            });
        }
    }
    if g.n() > 1 {
        for (u, d) in g.degrees().into_iter().enumerate() {
            if d == 0 {
                violations.push(Violation {
                    node: Some(u),
                    kind: ViolationKind::Isolated,
                });
            }
        }
        if g.components().len() > 1 {
            violations.push(Violation {
                node: None,
                kind: ViolationKind::Disconnected,
            });
        }
    }
    ValidityReport {
        valid: violations.is_empty(),
        violations,
    }
}

pub const DEFAULT_CERTIFICATE_LIMIT: usize = 64;

/// Canonical byte string: equal for two graphs iff they are isomorphic as
/// atom-typed, bond-ordered graphs.
///
/// Colour refinement seeded with (atom, degree, incident orders), then an
/// individualization-refinement search over the first non-singleton cell;
/// the lexicographically smallest leaf encoding wins. Interchangeable
/// vertices (same atom, same neighbourhood with the same orders) are
/// explored once.
pub fn canonical_certificate(g: &MolecularGraph) -> Result<Vec<u8>> {
    canonical_certificate_with_limit(g, DEFAULT_CERTIFICATE_LIMIT)
}

pub fn canonical_certificate_with_limit(g: &MolecularGraph, limit: usize) -> Result<Vec<u8>> {
    let n = g.n();
    if n > limit {
        return Err(GraphError::TooLarge { n, limit });
    }
    let adj = g.adjacency();
    let mut seed: Vec<(usize, usize, Vec<u8>)> = (0..n)
        .map(|u| {
            let mut orders: Vec<u8> = adj[u].iter().map(|&(_, o)| o).collect();
            orders.sort_unstable();
            (g.atoms()[u].index(), adj[u].len(), orders)
        })
        .collect();
    let colors = rank(&seed);
    seed.clear();
    let colors = refine(&adj, colors);
    let mut best: Option<Vec<u32>> = None;
    search(g, &adj, colors, &mut best);
    let words = best.unwrap_or_default();
    let mut out = Vec::with_capacity(words.len() * 4);
    for w in words {
        out.extend_from_slice(&w.to_le_bytes());
    }
    Ok(out)
}

/// Dense ranks of `keys` in sorted order.
fn rank<K: Ord + Clone>(keys: &[K]) -> Vec<usize> {
    let mut sorted: Vec<K> = keys.to_vec();
    sorted.sort();
    sorted.dedup();
    keys.iter()
        .map(|k| sorted.binary_search(k).expect("key present"))
        .collect()
}

fn refine(adj: &[Vec<(usize, u8)>], mut colors: Vec<usize>) -> Vec<usize> {
    let mut count = distinct(&colors);
    loop {
        let sigs: Vec<(usize, Vec<(usize, u8)>)> = adj
            .iter()
            .enumerate()
            .map(|(u, nbrs)| {
                let mut s: Vec<(usize, u8)> = nbrs.iter().map(|&(v, o)| (colors[v], o)).collect();
                s.sort_unstable();
                (colors[u], s)
            })
            .collect();
        let next = rank(&sigs);
        let c = distinct(&next);
        colors = next;
        if c == count {
            return colors;
        }
        count = c;
    }
}

fn distinct(colors: &[usize]) -> usize {
    let mut c = colors.to_vec();
    c.sort_unstable();
    c.dedup();
    c.len()
}

fn search(g: &MolecularGraph, adj: &[Vec<(usize, u8)>], colors: Vec<usize>, best: &mut Option<Vec<u32>>) {
    let n = colors.len();
    let mut cells: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (u, &c) in colors.iter().enumerate() {
        cells.entry(c).or_default().push(u);
    }
    let target = cells.values().find(|c| c.len() > 1).cloned();
    let Some(cell) = target else {
        let leaf = encode(g, &colors);
        if best.as_ref().is_none_or(|b| leaf < *b) {
            *best = Some(leaf);
        }
        return;
    };
    let mut explored: Vec<usize> = Vec::new();
    for &v in &cell {
        if explored.iter().any(|&w| twins(g, adj, v, w)) {
            continue;
        }
        explored.push(v);
        let indiv: Vec<usize> = (0..n).map(|u| 2 * colors[u] + usize::from(u != v)).collect();
        let next = refine(adj, rank(&indiv));
        search(g, adj, next, best);
    }
}

/// Swapping `a` and `b` is an automorphism.
fn twins(g: &MolecularGraph, adj: &[Vec<(usize, u8)>], a: usize, b: usize) -> bool {
    if g.atoms()[a] != g.atoms()[b] || adj[a].len() != adj[b].len() {
        return false;
    }
    let strip =
        |x: usize, other: usize| -> Vec<(usize, u8)> { adj[x].iter().copied().filter(|&(w, _)| w != other).collect() };
    strip(a, b) == strip(b, a)
}

fn encode(g: &MolecularGraph, colors: &[usize]) -> Vec<u32> {
    let n = g.n();
    let mut atoms = vec![0u32; n];
    for (u, &c) in colors.iter().enumerate() {
        atoms[c] = g.atoms()[u].index() as u32;
    }
    let mut edges: Vec<(u32, u32, u32)> = g
        .bonds()
        .iter()
        .map(|b| {
            let (x, y) = (colors[b.u] as u32, colors[b.v] as u32);
            (x.min(y), x.max(y), b.order as u32)
        })
        .collect();
    edges.sort_unstable();
    let mut out = Vec::with_capacity(2 + n + 3 * edges.len());
    out.push(n as u32);
    out.push(edges.len() as u32);
    out.extend(atoms);
    for (x, y, o) in edges {
        out.extend([x, y, o]);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityMetrics {
    pub validity: f64,
    pub novelty: f64,
    pub uniqueness: f64,
    pub connected_fraction: f64,
    pub n_samples: usize,
    pub n_valid: usize,
    pub n_unique: usize,
    pub n_novel: usize,
    pub rule: ValidityRule,
}

/// Validity over all samples; novelty and uniqueness over the valid subset:
/// novelty = 1 - |valid ∩ corpus| / |valid| (with multiplicity),
/// uniqueness = |distinct valid| / n_samples.
pub fn compute_metrics(
    samples: &[MolecularGraph],
    corpus: &[MolecularGraph],
    table: &ValenceTable,
    rule: ValidityRule,
) -> Result<QualityMetrics> {
    if samples.is_empty() {
        return Err(GraphError::EmptySamples);
    }
    let corpus_certs: HashSet<Vec<u8>> = corpus.iter().map(canonical_certificate).collect::<Result<_>>()?;
    let mut n_valid = 0;
    let mut n_connected = 0;
    let mut n_in_corpus = 0;
    let mut distinct = HashSet::new();
    for s in samples {
        let report = validate_molecule(s, table);
        if s.is_connected() {
            n_connected += 1;
        }
        if !report.satisfies(rule) {
            continue;
        }
        n_valid += 1;
        let cert = canonical_certificate(s)?;
        if corpus_certs.contains(&cert) {
            n_in_corpus += 1;
        }
        distinct.insert(cert);
    }
    let ns = samples.len() as f64;
    let (novelty, n_novel) = if n_valid == 0 {
        (0.0, 0)
    } else {
        (1.0 - n_in_corpus as f64 / n_valid as f64, n_valid - n_in_corpus)
    };
    Ok(QualityMetrics {
        validity: n_valid as f64 / ns,
        novelty,
        uniqueness: distinct.len() as f64 / ns,
        connected_fraction: n_connected as f64 / ns,
        n_samples: samples.len(),
        n_valid,
        n_unique: distinct.len(),
        n_novel,
        rule,
    })
}
