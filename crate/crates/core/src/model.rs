//! Pairwise Markov random fields over spin variables and their factor-graph
//! form.
//!
//! A model is p(x) ∝ exp(Σ_{(i,j)} J_ij·x_i·x_j + Σ_i h_i·x_i) with
//! x ∈ {−1,+1}^n. Spins map to state indices {0, 1} in that order, so state
//! `s` carries spin `2s − 1`. Factor tables are stored in log domain,
//! row-major over the factor scope with the first scope variable most
//! significant.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Structural family of a model, inferred from its edge set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Topology {
    Grid { rows: usize, cols: usize },
    Complete { n: usize },
    Custom,
}

/// One coupling J_ij between variables `i < j`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub coupling: f64,
}

/// Pairwise binary MRF: fields `h`, couplings on `edges`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseMRF {
    pub n: usize,
    pub h: Vec<f64>,
    pub edges: Vec<Edge>,
    pub topology: Topology,
}

/// Spin value (−1 or +1) of a state index (0 or 1).
pub fn spin(state: usize) -> f64 {
    2.0 * state as f64 - 1.0
}

/// State index (0 or 1) of a spin value (−1 or +1).
pub fn state_of_spin(s: i8) -> usize {
    if s > 0 {
        1
    } else {
        0
    }
}

impl PairwiseMRF {
    /// Build a model from raw parts. Edges are canonicalized to `i < j`;
    /// self-loops, duplicate edges, and out-of-range indices are rejected.
    pub fn new(n: usize, h: Vec<f64>, edges: Vec<Edge>) -> Result<Self> {
        if h.len() != n {
            return Err(Error::contract(format!("{} fields for {} nodes", h.len(), n)));
        }
        let mut canonical = Vec::with_capacity(edges.len());
        let mut seen = std::collections::HashSet::new();
        for e in edges {
            let (i, j) = if e.i < e.j { (e.i, e.j) } else { (e.j, e.i) };
            if i == j {
                return Err(Error::Domain(format!("self-loop on node {}", i)));
            }
            if j >= n {
                return Err(Error::Domain(format!("edge ({}, {}) out of range for n={}", i, j, n)));
            }
            if !seen.insert((i, j)) {
                return Err(Error::Domain(format!("duplicate edge ({}, {})", i, j)));
            }
            canonical.push(Edge { i, j, coupling: e.coupling });
        }
        let topology = detect_topology(n, &canonical);
        Ok(PairwiseMRF { n, h, edges: canonical, topology })
    }

    /// Log of the unnormalized score: Σ J_ij·s_i·s_j + Σ h_i·s_i, with states
    /// given as indices in {0, 1}.
    pub fn log_score(&self, x: &[usize]) -> f64 {
        debug_assert_eq!(x.len(), self.n);
        let mut t = 0.0;
        for e in &self.edges {
            t += e.coupling * spin(x[e.i]) * spin(x[e.j]);
        }
        for (i, &hi) in self.h.iter().enumerate() {
            t += hi * spin(x[i]);
        }
        t
    }

    /// Adjacency as (neighbor, edge index) lists.
    pub fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.n];
        for (idx, e) in self.edges.iter().enumerate() {
            adj[e.i].push((e.j, idx));
            adj[e.j].push((e.i, idx));
        }
        adj
    }

    /// Expand to a factor graph: one pairwise factor per edge (in edge
    /// order), then one unary factor per node. Unary factors are flagged so
    /// region construction can tell them apart.
    pub fn to_factor_graph(&self) -> FactorGraph {
        let mut factors = Vec::with_capacity(self.edges.len() + self.n);
        for e in &self.edges {
            let mut table = [0.0; 4];
            for (si, sj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                table[si * 2 + sj] = e.coupling * spin(si) * spin(sj);
            }
            factors.push(Factor {
                scope: vec![e.i, e.j],
                log_table: table.to_vec(),
                unary: false,
            });
        }
        for (i, &hi) in self.h.iter().enumerate() {
            factors.push(Factor { scope: vec![i], log_table: vec![-hi, hi], unary: true });
        }
        FactorGraph::new(self.n, 2, factors).expect("edge-canonical model expands cleanly")
    }
}

fn detect_topology(n: usize, edges: &[Edge]) -> Topology {
    let set: std::collections::HashSet<(usize, usize)> =
        edges.iter().map(|e| (e.i, e.j)).collect();
    if n >= 2 && set.len() == n * (n - 1) / 2 {
        return Topology::Complete { n };
    }
    for rows in 2..=n / 2 {
        if !n.is_multiple_of(rows) {
            continue;
        }
        let cols = n / rows;
        if cols < 2 {
            continue;
        }
        if set.len() == grid_edge_count(rows, cols)
            && grid_edge_pairs(rows, cols).all(|p| set.contains(&p))
        {
            return Topology::Grid { rows, cols };
        }
    }
    Topology::Custom
}

fn grid_edge_count(rows: usize, cols: usize) -> usize {
    rows * (cols - 1) + cols * (rows - 1)
}

/// Lattice edges of a `rows × cols` grid over row-major node indices, in
/// canonical order: scan nodes row-major, emitting the rightward then the
/// downward edge of each.
pub fn grid_edge_pairs(rows: usize, cols: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..rows).flat_map(move |r| {
        (0..cols).flat_map(move |c| {
            let v = r * cols + c;
            let right = (c + 1 < cols).then_some((v, v + 1));
            let down = (r + 1 < rows).then_some((v, v + cols));
            right.into_iter().chain(down)
        })
    })
}

/// Random Ising instance: couplings J ~ N(0, 1) and fields h ~ N(0, γ²),
/// drawn from a seeded stream (couplings in canonical edge order first, then
/// fields by node), so (topology, γ, seed) pins the instance exactly.
pub fn random_ising(topology: Topology, gamma: f64, seed: u64) -> Result<PairwiseMRF> {
    if gamma < 0.0 {
        return Err(Error::contract("field scale gamma must be >= 0"));
    }
    let (n, pairs): (usize, Vec<(usize, usize)>) = match topology {
        Topology::Grid { rows, cols } => {
            if rows < 2 || cols < 2 {
                return Err(Error::contract("grid needs at least 2 rows and 2 columns"));
            }
            (rows * cols, grid_edge_pairs(rows, cols).collect())
        }
        Topology::Complete { n } => {
            if n < 2 {
                return Err(Error::contract("complete graph needs at least 2 nodes"));
            }
            (n, (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect())
        }
        Topology::Custom => {
            return Err(Error::contract("no generator for custom topologies"));
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edges = pairs
        .into_iter()
        .map(|(i, j)| Edge { i, j, coupling: rng.sample::<f64, _>(StandardNormal) })
        .collect();
    // Scaling a standard normal keeps gamma = 0 exact (h ≡ 0) without
    // branching the RNG stream.
    let h = (0..n).map(|_| gamma * rng.sample::<f64, _>(StandardNormal)).collect();
    PairwiseMRF::new(n, h, edges)
}

/// One factor: an ordered variable scope and a log-domain table, row-major
/// with the first scope variable most significant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Factor {
    pub scope: Vec<usize>,
    pub log_table: Vec<f64>,
    pub unary: bool,
}

impl Factor {
    /// Flat table index of an assignment restricted to this factor's scope.
    pub fn index_of(&self, x: &[usize], k: usize) -> usize {
        let mut idx = 0;
        for &v in &self.scope {
            idx = idx * k + x[v];
        }
        idx
    }
}

/// Bipartite factor graph over `n` variables of uniform cardinality `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorGraph {
    pub n: usize,
    pub k: usize,
    pub factors: Vec<Factor>,
    /// For each variable, the factors touching it (ascending factor id).
    var_factors: Vec<Vec<usize>>,
}

impl FactorGraph {
    pub fn new(n: usize, k: usize, factors: Vec<Factor>) -> Result<Self> {
        if k < 2 {
            return Err(Error::contract("cardinality must be at least 2"));
        }
        let mut var_factors = vec![Vec::new(); n];
        for (a, f) in factors.iter().enumerate() {
            if f.scope.is_empty() || f.scope.len() > 2 {
                return Err(Error::Domain(format!(
                    "factor {} has arity {}; only unary and pairwise factors are supported",
                    a,
                    f.scope.len()
                )));
            }
            let mut seen = std::collections::HashSet::new();
            for &v in &f.scope {
                if v >= n {
                    return Err(Error::Domain(format!("factor {} references variable {}", a, v)));
                }
                if !seen.insert(v) {
                    return Err(Error::Domain(format!("factor {} repeats variable {}", a, v)));
                }
                var_factors[v].push(a);
            }
            if f.log_table.len() != k.pow(f.scope.len() as u32) {
                return Err(Error::Domain(format!(
                    "factor {} table has {} entries, expected {}",
                    a,
                    f.log_table.len(),
                    k.pow(f.scope.len() as u32)
                )));
            }
        }
        Ok(FactorGraph { n, k, factors, var_factors })
    }

    /// Factors touching variable `i`.
    pub fn factors_of(&self, i: usize) -> &[usize] {
        &self.var_factors[i]
    }

    /// Number of factors touching variable `i` (its factor-graph degree).
    pub fn degree(&self, i: usize) -> usize {
        self.var_factors[i].len()
    }

    /// Σ_a log ψ_a(x_a) for a full assignment of state indices.
    pub fn log_score(&self, x: &[usize]) -> f64 {
        self.factors.iter().map(|f| f.log_table[f.index_of(x, self.k)]).sum()
    }

    /// Ids and endpoints of the pairwise (non-unary) factors, in factor
    /// order. For graphs built from a [`PairwiseMRF`] this matches its edge
    /// list.
    pub fn pairwise_factors(&self) -> Vec<(usize, usize, usize)> {
        self.factors
            .iter()
            .enumerate()
            .filter(|(_, f)| f.scope.len() == 2)
            .map(|(a, f)| (a, f.scope[0], f.scope[1]))
            .collect()
    }

    /// Total joint states as a checked product, for capacity guards.
    pub fn state_count(&self) -> u128 {
        (0..self.n).fold(1u128, |acc, _| acc.saturating_mul(self.k as u128))
    }
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

/// Render a model in the native text format:
///
/// ```text
/// ising <n>
/// node <i> <h_i>
/// edge <i> <j> <J_ij>
/// ```
///
/// Floats use the shortest representation that round-trips exactly.
pub fn serialize_model(m: &PairwiseMRF) -> String {
    let mut out = String::new();
    out.push_str(&format!("ising {}\n", m.n));
    for (i, h) in m.h.iter().enumerate() {
        out.push_str(&format!("node {} {}\n", i, h));
    }
    for e in &m.edges {
        out.push_str(&format!("edge {} {} {}\n", e.i, e.j, e.coupling));
    }
    out
}

/// Parse the native model format. `#` starts a comment; blank lines are
/// skipped; nodes without a `node` line get h = 0. The topology tag is
/// re-inferred from the edge set, so serialize → parse is the identity on
/// generated models.
pub fn parse_model(text: &str) -> Result<PairwiseMRF> {
    let mut n: Option<usize> = None;
    let mut h: Vec<f64> = Vec::new();
    let mut h_set: Vec<bool> = Vec::new();
    let mut edges: Vec<Edge> = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let lineno = lineno + 1;
        let mut tok = line.split_whitespace();
        let head = tok.next().unwrap();
        let parse_err = |msg: &str| Error::Parse { line: lineno, message: msg.to_string() };
        match head {
            "ising" => {
                if n.is_some() {
                    return Err(parse_err("duplicate header"));
                }
                let count: usize = tok
                    .next()
                    .ok_or_else(|| parse_err("missing node count"))?
                    .parse()
                    .map_err(|_| parse_err("bad node count"))?;
                if count == 0 {
                    return Err(parse_err("node count must be positive"));
                }
                n = Some(count);
                h = vec![0.0; count];
                h_set = vec![false; count];
            }
            "node" => {
                let n = n.ok_or_else(|| parse_err("node line before header"))?;
                let i: usize = tok
                    .next()
                    .ok_or_else(|| parse_err("missing node index"))?
                    .parse()
                    .map_err(|_| parse_err("bad node index"))?;
                let val: f64 = tok
                    .next()
                    .ok_or_else(|| parse_err("missing field value"))?
                    .parse()
                    .map_err(|_| parse_err("bad field value"))?;
                if i >= n {
                    return Err(parse_err("node index out of range"));
                }
                if h_set[i] {
                    return Err(parse_err("duplicate node line"));
                }
                h[i] = val;
                h_set[i] = true;
            }
            "edge" => {
                if n.is_none() {
                    return Err(parse_err("edge line before header"));
                }
                let i: usize = tok
                    .next()
                    .ok_or_else(|| parse_err("missing edge endpoint"))?
                    .parse()
                    .map_err(|_| parse_err("bad edge endpoint"))?;
                let j: usize = tok
                    .next()
                    .ok_or_else(|| parse_err("missing edge endpoint"))?
                    .parse()
                    .map_err(|_| parse_err("bad edge endpoint"))?;
                let coupling: f64 = tok
                    .next()
                    .ok_or_else(|| parse_err("missing coupling"))?
                    .parse()
                    .map_err(|_| parse_err("bad coupling"))?;
                edges.push(Edge { i, j, coupling });
            }
            other => {
                return Err(parse_err(&format!("unknown directive '{}'", other)));
            }
        }
        if tok.next().is_some() {
            return Err(Error::Parse { line: lineno, message: "trailing tokens".into() });
        }
    }

    let n = n.ok_or_else(|| Error::Parse { line: 0, message: "missing 'ising <n>' header".into() })?;
    PairwiseMRF::new(n, h, edges)
}

/// Parse a UAI MARKOV network. Tables are given in probability domain and
/// must be strictly positive (they are stored as logs); all variables must
/// share one cardinality and factors must be unary or pairwise.
pub fn parse_uai(text: &str) -> Result<FactorGraph> {
    // The format is whitespace-delimited with no semantic line structure, so
    // parse a token stream but remember each token's line for error messages.
    let tokens: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .flat_map(|(ln, line)| line.split_whitespace().map(move |t| (ln + 1, t)))
        .collect();
    let mut pos = 0usize;
    let mut next = |what: &str| -> Result<(usize, &str)> {
        let t = tokens.get(pos).copied().ok_or_else(|| Error::Parse {
            line: tokens.last().map(|(ln, _)| *ln).unwrap_or(0),
            message: format!("unexpected end of file, expected {}", what),
        })?;
        pos += 1;
        Ok(t)
    };

    let (ln, kind) = next("network type")?;
    if !kind.eq_ignore_ascii_case("MARKOV") {
        return Err(Error::Parse { line: ln, message: format!("expected MARKOV, got '{}'", kind) });
    }
    let (ln, tok) = next("variable count")?;
    let n: usize = tok.parse().map_err(|_| Error::Parse { line: ln, message: "bad variable count".into() })?;
    let mut k: Option<usize> = None;
    for _ in 0..n {
        let (ln, tok) = next("cardinality")?;
        let c: usize =
            tok.parse().map_err(|_| Error::Parse { line: ln, message: "bad cardinality".into() })?;
        if c < 2 {
            return Err(Error::Parse { line: ln, message: "cardinality must be at least 2".into() });
        }
        match k {
            None => k = Some(c),
            Some(k) if k != c => {
                return Err(Error::Parse {
                    line: ln,
                    message: "mixed cardinalities are not supported".into(),
                });
            }
            _ => {}
        }
    }
    let k = k.ok_or_else(|| Error::Parse { line: 0, message: "empty variable list".into() })?;

    let (ln, tok) = next("factor count")?;
    let nf: usize = tok.parse().map_err(|_| Error::Parse { line: ln, message: "bad factor count".into() })?;
    let mut scopes: Vec<Vec<usize>> = Vec::with_capacity(nf);
    for _ in 0..nf {
        let (ln, tok) = next("scope size")?;
        let arity: usize =
            tok.parse().map_err(|_| Error::Parse { line: ln, message: "bad scope size".into() })?;
        let mut scope = Vec::with_capacity(arity);
        for _ in 0..arity {
            let (ln, tok) = next("scope variable")?;
            let v: usize = tok
                .parse()
                .map_err(|_| Error::Parse { line: ln, message: "bad scope variable".into() })?;
            if v >= n {
                return Err(Error::Parse { line: ln, message: format!("variable {} out of range", v) });
            }
            scope.push(v);
        }
        scopes.push(scope);
    }
    let mut factors = Vec::with_capacity(nf);
    for scope in scopes {
        let (ln, tok) = next("table size")?;
        let count: usize =
            tok.parse().map_err(|_| Error::Parse { line: ln, message: "bad table size".into() })?;
        let expected = k.pow(scope.len() as u32);
        if count != expected {
            return Err(Error::Parse {
                line: ln,
                message: format!("table size {} does not match scope ({} expected)", count, expected),
            });
        }
        let mut log_table = Vec::with_capacity(count);
        for _ in 0..count {
            let (ln, tok) = next("table entry")?;
            let v: f64 =
                tok.parse().map_err(|_| Error::Parse { line: ln, message: "bad table entry".into() })?;
            if v.is_nan() || v <= 0.0 || !v.is_finite() {
                return Err(Error::Parse {
                    line: ln,
                    message: "table entries must be strictly positive".into(),
                });
            }
            log_table.push(v.ln());
        }
        let unary = scope.len() == 1;
        factors.push(Factor { scope, log_table, unary });
    }
    if pos != tokens.len() {
        let (ln, _) = tokens[pos];
        return Err(Error::Parse { line: ln, message: "trailing tokens".into() });
    }
    FactorGraph::new(n, k, factors)
}

/// Render a dataset: one assignment per line, space-separated spins (−1/1).
pub fn serialize_dataset(samples: &[Vec<i8>]) -> String {
    let mut out = String::new();
    for row in samples {
        let line: Vec<String> = row.iter().map(|s| s.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

/// Parse a dataset of spin assignments. Every row must have `n` entries,
/// each −1 or 1.
pub fn parse_dataset(text: &str, n: usize) -> Result<Vec<Vec<i8>>> {
    let mut rows = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut row = Vec::with_capacity(n);
        for tok in line.split_whitespace() {
            match tok {
                "-1" => row.push(-1i8),
                "1" | "+1" => row.push(1i8),
                other => {
                    return Err(Error::Parse {
                        line: lineno + 1,
                        message: format!("expected spin -1 or 1, got '{}'", other),
                    });
                }
            }
        }
        if row.len() != n {
            return Err(Error::Parse {
                line: lineno + 1,
                message: format!("expected {} spins, got {}", n, row.len()),
            });
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Convert a spin row to state indices.
pub fn states_of_spins(spins: &[i8]) -> Vec<usize> {
    spins.iter().map(|&s| state_of_spin(s)).collect()
}

/// Convert a state-index row to spins; inverse of [`states_of_spins`].
pub fn spins_of_states(states: &[usize]) -> Vec<i8> {
    states.iter().map(|&x| if x == 1 { 1 } else { -1 }).collect()
}
