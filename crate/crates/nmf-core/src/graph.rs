//! Directed weighted diffusion networks: representation, synthetic
//! generators (stochastic Kronecker, uniform random), rate sampling, and the
//! tab-separated file format.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::distributions::{Distribution, Uniform};
use rand::Rng;

use crate::{Error, Result};

/// One directed edge `src -> dst` carrying a nonnegative rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub alpha: f64,
}

/// Immutable directed network with per-edge transmission rates.
///
/// The matrix view follows the convention that row `j`, column `i` holds the
/// rate of edge `i -> j`, so `rate_matrix() * x` accumulates, for each node,
/// the incoming rate weighted by the state of its in-neighbors.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectedNetwork {
    n: usize,
    edges: Vec<Edge>,
}

impl DirectedNetwork {
    /// Builds a network from an edge list. Edges are stored sorted by
    /// `(src, dst)`; self-loops, duplicates, out-of-range ids, and negative
    /// or non-finite rates are rejected. Zero-rate edges are dropped.
    pub fn new(n: usize, edges: Vec<(usize, usize, f64)>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidNetwork("node count must be positive".into()));
        }
        let mut list = Vec::with_capacity(edges.len());
        for (src, dst, alpha) in edges {
            if src == dst {
                return Err(Error::InvalidNetwork(format!("self-loop at node {src}")));
            }
            if src >= n || dst >= n {
                return Err(Error::InvalidNetwork(format!(
                    "edge ({src},{dst}) out of range for n={n}"
                )));
            }
            if !alpha.is_finite() || alpha < 0.0 {
                return Err(Error::InvalidNetwork(format!(
                    "edge ({src},{dst}) has invalid rate {alpha}"
                )));
            }
            if alpha > 0.0 {
                list.push(Edge { src, dst, alpha });
            }
        }
        list.sort_by_key(|e| (e.src, e.dst));
        if list.windows(2).any(|w| (w[0].src, w[0].dst) == (w[1].src, w[1].dst)) {
            return Err(Error::InvalidNetwork("duplicate edge".into()));
        }
        Ok(Self { n, edges: list })
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Dense rate matrix `A` with `A[[dst, src]] = alpha` for each edge.
    pub fn rate_matrix(&self) -> Array2<f64> {
        let mut a = Array2::zeros((self.n, self.n));
        for e in &self.edges {
            a[[e.dst, e.src]] = e.alpha;
        }
        a
    }

    /// 0/1 support mask with the same layout as [`Self::rate_matrix`].
    pub fn support_mask(&self) -> Array2<u8> {
        let mut m = Array2::zeros((self.n, self.n));
        for e in &self.edges {
            m[[e.dst, e.src]] = 1;
        }
        m
    }

    /// Out-adjacency lists `(dst, alpha)` indexed by source node.
    pub fn out_adjacency(&self) -> Vec<Vec<(usize, f64)>> {
        let mut adj = vec![Vec::new(); self.n];
        for e in &self.edges {
            adj[e.src].push((e.dst, e.alpha));
        }
        adj
    }

    /// Redraws every edge rate i.i.d. uniform on `[low, high)`, keeping the
    /// topology. Requires `0 <= low < high`.
    pub fn sample_rates<R: Rng>(&self, low: f64, high: f64, rng: &mut R) -> Result<Self> {
        if !(low >= 0.0 && low < high) {
            return Err(Error::InvalidArgument(format!(
                "rate interval must satisfy 0 <= low < high, got [{low}, {high})"
            )));
        }
        let dist = Uniform::new(low, high);
        let edges = self
            .edges
            .iter()
            .map(|e| Edge { alpha: dist.sample(rng), ..*e })
            .collect();
        Ok(Self { n: self.n, edges })
    }

    /// Serializes to the text format: comment lines start with `#`, the
    /// first payload line is `n=<count>`, then one `src<TAB>dst<TAB>alpha`
    /// line per edge with rates printed to 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n={}", self.n);
        for e in &self.edges {
            let _ = writeln!(s, "{}\t{}\t{:.16e}", e.src, e.dst, e.alpha);
        }
        s
    }

    /// Parses the text format produced by [`Self::to_text`]. Errors carry
    /// 1-based line numbers.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut n: Option<usize> = None;
        let mut edges = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if n.is_none() {
                let rest = line.strip_prefix("n=").ok_or_else(|| Error::Parse {
                    line: lineno,
                    msg: format!("expected 'n=<count>', got '{line}'"),
                })?;
                let count = rest.trim().parse::<usize>().map_err(|e| Error::Parse {
                    line: lineno,
                    msg: format!("bad node count '{rest}': {e}"),
                })?;
                n = Some(count);
                continue;
            }
            let mut parts = line.split('\t');
            let (src, dst, alpha) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), Some(c), None) => (a, b, c),
                _ => {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("expected 'src<TAB>dst<TAB>alpha', got '{line}'"),
                    })
                }
            };
            let parse_id = |s: &str| {
                s.trim().parse::<usize>().map_err(|e| Error::Parse {
                    line: lineno,
                    msg: format!("bad node id '{s}': {e}"),
                })
            };
            let src = parse_id(src)?;
            let dst = parse_id(dst)?;
            let alpha = alpha.trim().parse::<f64>().map_err(|e| Error::Parse {
                line: lineno,
                msg: format!("bad rate '{alpha}': {e}"),
            })?;
            let nn = n.unwrap();
            if src == dst {
                return Err(Error::Parse { line: lineno, msg: format!("self-loop at node {src}") });
            }
            if src >= nn || dst >= nn {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("edge ({src},{dst}) out of range for n={nn}"),
                });
            }
            if !alpha.is_finite() || alpha < 0.0 {
                return Err(Error::Parse { line: lineno, msg: format!("negative or non-finite rate {alpha}") });
            }
            edges.push((src, dst, alpha));
        }
        let n = n.ok_or(Error::Parse { line: 1, msg: "missing 'n=<count>' header".into() })?;
        Self::new(n, edges)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }
}

/// Seed of a stochastic Kronecker generator: 2x2 initiator matrix, number of
/// Kronecker power iterations, and the exact edge count to place.
#[derive(Debug, Clone, Copy)]
pub struct KroneckerSeed {
    pub initiator: [[f64; 2]; 2],
    pub iterations: u32,
    pub target_edges: usize,
}

/// Hierarchical-community initiator matrix.
pub const HIER_INITIATOR: [[f64; 2]; 2] = [[0.9, 0.1], [0.1, 0.9]];
/// Core-periphery initiator matrix.
pub const CORE_INITIATOR: [[f64; 2]; 2] = [[0.9, 0.5], [0.5, 0.3]];

/// Samples a Kronecker graph with exactly `seed.target_edges` distinct
/// directed edges on `2^iterations` nodes. Each edge is drawn by `iterations`
/// independent categorical picks over the initiator cells (cell probability
/// proportional to the Kronecker-power entry); self-loops and duplicates are
/// rejected and redrawn. Deterministic for a fixed `rng`.
pub fn kronecker_generate<R: Rng>(seed: &KroneckerSeed, rng: &mut R) -> Result<DirectedNetwork> {
    let p = seed.initiator;
    for row in &p {
        for &v in row {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!(
                    "initiator entries must lie in [0,1], got {v}"
                )));
            }
        }
    }
    if seed.iterations == 0 || seed.iterations > 30 {
        return Err(Error::InvalidArgument(format!(
            "iterations must be in 1..=30, got {}",
            seed.iterations
        )));
    }
    let n = 1usize << seed.iterations;
    let cells = n * n - n; // non-self-loop cells
    if seed.target_edges > cells {
        return Err(Error::InvalidArgument(format!(
            "cannot place {} edges in {} available cells",
            seed.target_edges, cells
        )));
    }
    let total: f64 = p.iter().flatten().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument("initiator matrix is all zero".into()));
    }
    // Cumulative weights over the 4 cells in (row, col) order.
    let flat = [p[0][0], p[0][1], p[1][0], p[1][1]];
    let mut cum = [0.0; 4];
    let mut acc = 0.0;
    for (c, w) in cum.iter_mut().zip(flat) {
        acc += w;
        *c = acc;
    }

    let mut seen = HashSet::with_capacity(seed.target_edges * 2);
    let mut edges = Vec::with_capacity(seed.target_edges);
    let mut attempts: u64 = 0;
    let max_attempts = 1_000_000 + 10_000 * seed.target_edges as u64;
    while edges.len() < seed.target_edges {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::InvalidArgument(format!(
                "gave up placing {} edges after {attempts} draws; initiator mass may \
                 be concentrated on self-loop cells",
                seed.target_edges
            )));
        }
        let mut src = 0usize;
        let mut dst = 0usize;
        for _ in 0..seed.iterations {
            let u: f64 = rng.gen_range(0.0..total);
            let cell = cum.iter().position(|&c| u < c).unwrap_or(3);
            src = (src << 1) | (cell >> 1);
            dst = (dst << 1) | (cell & 1);
        }
        if src != dst && seen.insert((src, dst)) {
            edges.push((src, dst, 1.0));
        }
    }
    DirectedNetwork::new(n, edges)
}

/// Uniform directed graph: `m` edges drawn uniformly without replacement
/// from all non-self-loop ordered pairs.
pub fn random_generate<R: Rng>(n: usize, m: usize, rng: &mut R) -> Result<DirectedNetwork> {
    if n < 2 {
        return Err(Error::InvalidArgument("need at least 2 nodes".into()));
    }
    let cells = n * n - n;
    if m > cells {
        return Err(Error::InvalidArgument(format!(
            "cannot place {m} edges in {cells} available cells"
        )));
    }
    let mut seen = HashSet::with_capacity(m * 2);
    let mut edges = Vec::with_capacity(m);
    while edges.len() < m {
        let src = rng.gen_range(0..n);
        let dst = rng.gen_range(0..n);
        if src != dst && seen.insert((src, dst)) {
            edges.push((src, dst, 1.0));
        }
    }
    DirectedNetwork::new(n, edges)
}
