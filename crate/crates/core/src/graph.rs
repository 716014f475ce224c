//! Communication graphs over clients.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Result, SimError};
use crate::rng::substream;

const REGULAR_MAX_RESTARTS: usize = 10_000;

/// Undirected, unweighted simple graph with benign/malicious labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    neighbors: Vec<Vec<usize>>,
    malicious: Vec<bool>,
}

impl Topology {
    /// Build from an edge list; rejects self-loops, duplicates and
    /// out-of-range endpoints.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut sets = vec![BTreeSet::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(SimError::param(format!("edge ({a}, {b}) outside 0..{n}")));
            }
            if a == b {
                return Err(SimError::param(format!("self-loop at {a}")));
            }
            if !sets[a].insert(b) || !sets[b].insert(a) {
                return Err(SimError::param(format!("duplicate edge ({a}, {b})")));
            }
        }
        Ok(Self {
            neighbors: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
            malicious: vec![false; n],
        })
    }

    pub fn n(&self) -> usize {
        self.neighbors.len()
    }

    /// Sorted neighbor ids, never including `i`.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.neighbors[a].binary_search(&b).is_ok()
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(a, ns)| ns.iter().filter(move |&&b| b > a).map(move |&b| (a, b)))
    }

    pub fn is_malicious(&self, i: usize) -> bool {
        self.malicious[i]
    }

    pub fn malicious_ids(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.malicious[i]).collect()
    }

    pub fn benign_ids(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| !self.malicious[i]).collect()
    }

    pub fn with_malicious(mut self, ids: impl IntoIterator<Item = usize>) -> Result<Self> {
        self.malicious = vec![false; self.n()];
        for i in ids {
            if i >= self.n() {
                return Err(SimError::param(format!("malicious id {i} outside 0..{}", self.n())));
            }
            self.malicious[i] = true;
        }
        Ok(self)
    }

    /// Mark `count` uniformly chosen clients as malicious.
    pub fn with_random_malicious(self, count: usize, seed: u64) -> Result<Self> {
        if count > self.n() {
            return Err(SimError::param("more malicious clients than clients"));
        }
        let mut ids: Vec<usize> = (0..self.n()).collect();
        ids.shuffle(&mut substream(seed, "graph/roles", &[]));
        ids.truncate(count);
        self.with_malicious(ids)
    }

    /// Checks symmetry, absence of self-loops and sortedness.
    pub fn validate(&self) -> Result<()> {
        for (i, ns) in self.neighbors.iter().enumerate() {
            if ns.windows(2).any(|w| w[0] >= w[1]) {
                return Err(SimError::param(format!("neighbor list of {i} not strictly sorted")));
            }
            for &j in ns {
                if j == i {
                    return Err(SimError::param(format!("self-loop at {i}")));
                }
                if j >= self.n() || !self.has_edge(j, i) {
                    return Err(SimError::param(format!("edge ({i}, {j}) is not symmetric")));
                }
            }
        }
        Ok(())
    }

    /// `id: a,b,c` per node, then `malicious: ...`.
    pub fn to_adjacency_text(&self) -> String {
        let mut out = String::new();
        for (i, ns) in self.neighbors.iter().enumerate() {
            let _ = writeln!(out, "{i}: {}", join_ids(ns));
        }
        let _ = writeln!(out, "malicious: {}", join_ids(&self.malicious_ids()));
        out
    }
}

fn join_ids(ids: &[usize]) -> String {
    ids.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse_ids(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<usize>().map_err(|e| SimError::Parse(format!("bad id `{t}`: {e}"))))
        .collect()
}

impl FromStr for Topology {
    type Err = SimError;

    fn from_str(text: &str) -> Result<Self> {
        let mut rows: Vec<(usize, Vec<usize>)> = Vec::new();
        let mut malicious = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (head, tail) = line
                .split_once(':')
                .ok_or_else(|| SimError::Parse(format!("missing `:` in `{line}`")))?;
            if head.trim() == "malicious" {
                malicious = parse_ids(tail)?;
            } else {
                let id = head
                    .trim()
                    .parse::<usize>()
                    .map_err(|e| SimError::Parse(format!("bad node id `{head}`: {e}")))?;
                rows.push((id, parse_ids(tail)?));
            }
        }
        let n = rows.len();
        let mut seen = vec![false; n];
        let mut neighbors = vec![Vec::new(); n];
        for (id, mut ns) in rows {
            if id >= n || seen[id] {
                return Err(SimError::Parse(format!("node ids must be exactly 0..{n}; bad id {id}")));
            }
            seen[id] = true;
            ns.sort_unstable();
            neighbors[id] = ns;
        }
        let topo = Topology {
            neighbors,
            malicious: vec![false; n],
        };
        topo.validate()?;
        topo.with_malicious(malicious)
    }
}

/// Uniform-ish random `v`-regular graph via the pairing model: points are
/// matched one pair at a time, rejecting pairs that would create a loop or
/// a multi-edge, and the whole pairing restarts when it gets stuck. Dense
/// requests (`v > (n-1)/2`) are generated as complements of sparse ones.
pub fn gen_regular(n: usize, v: usize, seed: u64) -> Result<Topology> {
    if v >= n || !(n * v).is_multiple_of(2) {
        return Err(SimError::param(format!("no simple {v}-regular graph on {n} nodes")));
    }
    if v == 0 {
        return Topology::from_edges(n, &[]);
    }
    if v == n - 1 {
        return gen_complete(n);
    }
    if 2 * v > n - 1 {
        let sparse = gen_regular(n, n - 1 - v, seed)?;
        let edges: Vec<(usize, usize)> = (0..n)
            .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
            .filter(|&(a, b)| !sparse.has_edge(a, b))
            .collect();
        return Topology::from_edges(n, &edges);
    }
    let mut rng = substream(seed, "graph/regular", &[n as u64, v as u64]);
    'restart: for _ in 0..REGULAR_MAX_RESTARTS {
        let mut points: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, v)).collect();
        let mut adj = vec![BTreeSet::new(); n];
        while !points.is_empty() {
            let mut placed = false;
            // a bounded number of attempts before declaring the pairing stuck
            for _ in 0..(4 * points.len() + 16) {
                let a = rng.random_range(0..points.len());
                let b = rng.random_range(0..points.len());
                let (u, w) = (points[a], points[b]);
                if a == b || u == w || adj[u].contains(&w) {
                    continue;
                }
                adj[u].insert(w);
                adj[w].insert(u);
                let (hi, lo) = if a > b { (a, b) } else { (b, a) };
                points.swap_remove(hi);
                points.swap_remove(lo);
                placed = true;
                break;
            }
            if !placed {
                continue 'restart;
            }
        }
        let edges: Vec<(usize, usize)> = adj
            .iter()
            .enumerate()
            .flat_map(|(a, s)| s.iter().filter(move |&&b| b > a).map(move |&b| (a, b)))
            .collect();
        return Topology::from_edges(n, &edges);
    }
    Err(SimError::param(format!(
        "regular-({n}, {v}) pairing did not converge after {REGULAR_MAX_RESTARTS} restarts"
    )))
}

pub fn gen_complete(n: usize) -> Result<Topology> {
    check_n(n)?;
    let edges: Vec<(usize, usize)> = (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect();
    Topology::from_edges(n, &edges)
}

/// Cycle `0-1-...-(n-1)-0`; for `n = 2` a single edge.
pub fn gen_ring(n: usize) -> Result<Topology> {
    check_n(n)?;
    let mut edges: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
    if n > 2 {
        edges.push((0, n - 1));
    }
    Topology::from_edges(n, &edges)
}

/// G(n, p).
pub fn gen_erdos_renyi(n: usize, p_edge: f64, seed: u64) -> Result<Topology> {
    check_n(n)?;
    check_prob(p_edge, "p_edge")?;
    let mut rng = substream(seed, "graph/erdos_renyi", &[n as u64]);
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if rng.random::<f64>() < p_edge {
                edges.push((a, b));
            }
        }
    }
    Topology::from_edges(n, &edges)
}

/// Watts-Strogatz: ring lattice with `k` nearest neighbors (`k/2` per side),
/// then each lattice edge `(i, i+j)` is rewired with probability `p_rewire`
/// to a uniformly chosen new endpoint that is neither `i` nor a neighbor.
pub fn gen_small_world(n: usize, k: usize, p_rewire: f64, seed: u64) -> Result<Topology> {
    check_n(n)?;
    check_prob(p_rewire, "p_rewire")?;
    if !k.is_multiple_of(2) || k >= n {
        return Err(SimError::param(format!("small-world k={k} must be even and < n={n}")));
    }
    let mut rng = substream(seed, "graph/small_world", &[n as u64, k as u64]);
    let mut adj = vec![BTreeSet::new(); n];
    for i in 0..n {
        for j in 1..=k / 2 {
            let b = (i + j) % n;
            adj[i].insert(b);
            adj[b].insert(i);
        }
    }
    for j in 1..=k / 2 {
        for i in 0..n {
            let b = (i + j) % n;
            if rng.random::<f64>() >= p_rewire || !adj[i].contains(&b) {
                continue;
            }
            let candidates: Vec<usize> = (0..n).filter(|&c| c != i && !adj[i].contains(&c)).collect();
            if candidates.is_empty() {
                continue;
            }
            let c = candidates[rng.random_range(0..candidates.len())];
            adj[i].remove(&b);
            adj[b].remove(&i);
            adj[i].insert(c);
            adj[c].insert(i);
        }
    }
    let edges: Vec<(usize, usize)> = adj
        .iter()
        .enumerate()
        .flat_map(|(a, s)| s.iter().filter(move |&&b| b > a).map(move |&b| (a, b)))
        .collect();
    Topology::from_edges(n, &edges)
}

fn check_n(n: usize) -> Result<()> {
    if n < 2 {
        return Err(SimError::param(format!("need at least 2 clients, got {n}")));
    }
    Ok(())
}

fn check_prob(p: f64, name: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(SimError::param(format!("{name}={p} outside [0, 1]")));
    }
    Ok(())
}

/// Fraction of edges joining a malicious client to a benign one.
pub fn femb(topo: &Topology) -> Result<f64> {
    let total = topo.edge_count();
    if total == 0 {
        return Err(SimError::UndefinedMetric("FEMB of a graph without edges".into()));
    }
    let cross = topo
        .edges()
        .filter(|&(a, b)| topo.is_malicious(a) != topo.is_malicious(b))
        .count();
    Ok(cross as f64 / total as f64)
}

/// Whether the subgraph induced on benign clients is connected. With no
/// benign client the answer is `false`.
pub fn benign_subgraph_connected(topo: &Topology) -> bool {
    let benign = topo.benign_ids();
    let Some(&start) = benign.first() else {
        return false;
    };
    let mut seen = vec![false; topo.n()];
    seen[start] = true;
    let mut queue = VecDeque::from([start]);
    let mut reached = 1;
    while let Some(u) = queue.pop_front() {
        for &w in topo.neighbors(u) {
            if !seen[w] && !topo.is_malicious(w) {
                seen[w] = true;
                reached += 1;
                queue.push_back(w);
            }
        }
    }
    reached == benign.len()
}

/// Benign clients all of whose neighbors are malicious (or which have none).
pub fn isolated_benign(topo: &Topology) -> Vec<usize> {
    topo.benign_ids()
        .into_iter()
        .filter(|&i| topo.neighbors(i).iter().all(|&j| topo.is_malicious(j)))
        .collect()
}

/// Clients taking part in round `round`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnectivityMask {
    pub round: usize,
    active: Vec<bool>,
}

impl ConnectivityMask {
    pub fn all(n: usize, round: usize) -> Self {
        Self {
            round,
            active: vec![true; n],
        }
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.active[i]
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.active
    }

    pub fn active_ids(&self) -> Vec<usize> {
        (0..self.active.len()).filter(|&i| self.active[i]).collect()
    }
}

/// Each client drops out independently with `drop_prob`; a pure function
/// of `(seed, round)`.
pub fn sample_mask(topo: &Topology, drop_prob: f64, round: usize, seed: u64) -> Result<ConnectivityMask> {
    check_prob(drop_prob, "drop_prob")?;
    let mut rng = substream(seed, "graph/mask", &[round as u64]);
    let active = (0..topo.n()).map(|_| rng.random::<f64>() >= drop_prob).collect();
    Ok(ConnectivityMask { round, active })
}
