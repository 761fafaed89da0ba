//! Region graphs: hierarchical clusters of variables and factors used by
//! generalized belief propagation and region-based free-energy minimization.
//!
//! A region is a set of variables together with factors whose scopes fall
//! inside that set. A region graph arranges regions in levels, with edges
//! from each region to the strictly smaller regions one level below, and
//! assigns each region an integer counting number so that every variable and
//! every factor is counted exactly once across the whole graph.
//!
//! This module provides root-region constructors (planar grid faces, the
//! star cycle basis of a complete graph, and a general cycle-growing
//! procedure), the cluster-variation construction that grows lower levels by
//! intersecting regions, counting-number assignment, a validity checker for
//! the counted-once identity, and evaluation of the region-based free energy
//! on arbitrary belief sets.

use std::collections::{BTreeSet, HashSet, VecDeque};

use crate::error::{Error, Result};
use crate::model::{FactorGraph, PairwiseMRF, Topology};

/// One cluster in a region graph: a sorted variable scope, the factors
/// attached to it, its level, and its counting number.
#[derive(Debug, Clone)]
pub struct Region {
    pub id: usize,
    /// Sorted, deduplicated variable scope.
    pub vars: Vec<usize>,
    /// Sorted factor ids; every attached factor's scope lies inside `vars`.
    pub factors: Vec<usize>,
    /// Depth in the graph; roots sit at level 0.
    pub level: usize,
    /// Integer weight making energy/entropy contributions count once.
    pub counting_number: i64,
}

/// Immutable DAG of regions with precomputed relational structure.
#[derive(Debug, Clone)]
pub struct RegionGraph {
    regions: Vec<Region>,
    /// Parent → child pairs; every edge goes to a strictly deeper level.
    edges: Vec<(usize, usize)>,
    /// Region ids grouped by level, ascending id within a level.
    levels: Vec<Vec<usize>>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    ancestors: Vec<Vec<usize>>,
    descendants: Vec<Vec<usize>>,
    n_vars: usize,
    n_factors: usize,
}

impl RegionGraph {
    /// Builds a region graph from explicit regions and parent→child edges,
    /// validating structure against the factor graph the regions refer to.
    ///
    /// Requirements: region ids equal their positions; scopes are nonempty;
    /// every attached factor's scope lies inside the region's variable set;
    /// levels are contiguous from 0; every edge goes from a region to a
    /// strict sub-region at a strictly deeper level (usually the next one).
    /// Counting numbers are computed immediately from the ancestor
    /// structure.
    pub fn new(
        mut regions: Vec<Region>,
        mut edges: Vec<(usize, usize)>,
        fg: &FactorGraph,
    ) -> Result<Self> {
        if regions.is_empty() {
            return Err(Error::contract("region graph needs at least one region"));
        }
        for (pos, region) in regions.iter_mut().enumerate() {
            if region.id != pos {
                return Err(Error::Structure(format!(
                    "region at position {pos} carries id {}; ids must match positions",
                    region.id
                )));
            }
            region.vars.sort_unstable();
            region.vars.dedup();
            region.factors.sort_unstable();
            region.factors.dedup();
            if region.vars.is_empty() {
                return Err(Error::Structure(format!("region {pos} has an empty scope")));
            }
            if let Some(&v) = region.vars.iter().find(|&&v| v >= fg.n) {
                return Err(Error::Structure(format!(
                    "region {pos} references variable {v} outside the model (n = {})",
                    fg.n
                )));
            }
            for &a in &region.factors {
                let scope = match fg.factors.get(a) {
                    Some(f) => &f.scope,
                    None => {
                        return Err(Error::Structure(format!(
                            "region {pos} references factor {a} outside the model"
                        )))
                    }
                };
                if !is_subset(scope, &region.vars) {
                    return Err(Error::Structure(format!(
                        "region {pos} attaches factor {a} whose scope is not inside its variable set"
                    )));
                }
            }
        }

        let count = regions.len();
        let depth = regions.iter().map(|r| r.level).max().unwrap() + 1;
        let mut levels = vec![Vec::new(); depth];
        for region in &regions {
            levels[region.level].push(region.id);
        }
        if let Some(l) = levels.iter().position(|ids| ids.is_empty()) {
            return Err(Error::Structure(format!("level {l} has no regions")));
        }

        edges.sort_unstable();
        if edges.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Structure("duplicate region edge".into()));
        }
        let mut parents = vec![Vec::new(); count];
        let mut children = vec![Vec::new(); count];
        for &(p, c) in &edges {
            if p >= count || c >= count {
                return Err(Error::Structure(format!(
                    "edge ({p}, {c}) references a region outside the graph"
                )));
            }
            if regions[c].level <= regions[p].level {
                return Err(Error::Structure(format!(
                    "edge ({p}, {c}) does not go to a strictly deeper level"
                )));
            }
            let strict = regions[c].vars.len() < regions[p].vars.len();
            if !strict || !is_subset(&regions[c].vars, &regions[p].vars) {
                return Err(Error::Structure(format!(
                    "edge ({p}, {c}) does not go to a strict sub-region"
                )));
            }
            parents[c].push(p);
            children[p].push(c);
        }

        // Relational closures, walking levels top-down then bottom-up.
        let mut ancestors: Vec<Vec<usize>> = vec![Vec::new(); count];
        for level in &levels {
            for &r in level {
                let mut seen: BTreeSet<usize> = BTreeSet::new();
                for &p in &parents[r] {
                    seen.insert(p);
                    seen.extend(ancestors[p].iter().copied());
                }
                ancestors[r] = seen.into_iter().collect();
            }
        }
        let mut descendants: Vec<Vec<usize>> = vec![Vec::new(); count];
        for level in levels.iter().rev() {
            for &r in level {
                let mut seen: BTreeSet<usize> = BTreeSet::new();
                for &c in &children[r] {
                    seen.insert(c);
                    seen.extend(descendants[c].iter().copied());
                }
                descendants[r] = seen.into_iter().collect();
            }
        }

        let mut graph = RegionGraph {
            regions,
            edges,
            levels,
            parents,
            children,
            ancestors,
            descendants,
            n_vars: fg.n,
            n_factors: fg.factors.len(),
        };
        counting_numbers(&mut graph);
        Ok(graph)
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn region(&self, id: usize) -> &Region {
        &self.regions[id]
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    /// Parent→child edges, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Region ids per level, roots first.
    pub fn levels(&self) -> &[Vec<usize>] {
        &self.levels
    }

    pub fn parents(&self, id: usize) -> &[usize] {
        &self.parents[id]
    }

    pub fn children(&self, id: usize) -> &[usize] {
        &self.children[id]
    }

    /// All regions with a directed path down to `id`, sorted by id.
    pub fn ancestors(&self, id: usize) -> &[usize] {
        &self.ancestors[id]
    }

    /// All regions reachable downward from `id`, sorted by id.
    pub fn descendants(&self, id: usize) -> &[usize] {
        &self.descendants[id]
    }

    /// Descendants of `id` together with `id` itself, sorted.
    pub fn descendants_and_self(&self, id: usize) -> Vec<usize> {
        let mut out = self.descendants[id].clone();
        let pos = out.binary_search(&id).unwrap_err();
        out.insert(pos, id);
        out
    }

    pub fn var_count(&self) -> usize {
        self.n_vars
    }

    pub fn factor_count(&self) -> usize {
        self.n_factors
    }

    /// Plain-text dump: one `region ...` line per region in id order, then
    /// one `edge <parent> <child>` line per edge.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for r in &self.regions {
            let vars = join_ids(&r.vars);
            let factors = join_ids(&r.factors);
            out.push_str(&format!(
                "region {} level {} c {} vars {} factors {}\n",
                r.id, r.level, r.counting_number, vars, factors
            ));
        }
        for &(p, c) in &self.edges {
            out.push_str(&format!("edge {p} {c}\n"));
        }
        out
    }
}

fn join_ids(ids: &[usize]) -> String {
    ids.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

/// True when sorted slice `a` is a subset of sorted slice `b`.
fn is_subset(a: &[usize], b: &[usize]) -> bool {
    let mut it = b.iter();
    'outer: for &x in a {
        for &y in it.by_ref() {
            if y == x {
                continue 'outer;
            }
            if y > x {
                return false;
            }
        }
        return false;
    }
    true
}

/// Sorted intersection of two sorted slices.
fn intersect(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

/// Variable sets of the unit square faces of a `rows × cols` grid in
/// row-major layout, optionally followed by the perimeter cycle's variable
/// set. Returned sets are sorted and distinct (on a 2×2 grid the perimeter
/// coincides with the single face and is not repeated).
pub fn faces_planar_grid(
    rows: usize,
    cols: usize,
    include_infinite_face: bool,
) -> Result<Vec<Vec<usize>>> {
    if rows < 2 || cols < 2 {
        return Err(Error::contract(format!(
            "grid faces need rows and cols >= 2, got {rows}x{cols}"
        )));
    }
    let mut out = Vec::with_capacity((rows - 1) * (cols - 1) + 1);
    for r in 0..rows - 1 {
        for c in 0..cols - 1 {
            let v = r * cols + c;
            out.push(vec![v, v + 1, v + cols, v + cols + 1]);
        }
    }
    if include_infinite_face {
        let mut perimeter: Vec<usize> = (0..rows * cols)
            .filter(|v| {
                let (r, c) = (v / cols, v % cols);
                r == 0 || r == rows - 1 || c == 0 || c == cols - 1
            })
            .collect();
        perimeter.sort_unstable();
        if !out.contains(&perimeter) {
            out.push(perimeter);
        }
    }
    Ok(out)
}

/// Triangle variable sets from the star spanning tree of a complete graph:
/// one triangle `{root, j, k}` per off-tree edge `(j, k)`. Produces
/// `(n−1)(n−2)/2` sets.
pub fn star_cycle_basis_complete(n: usize, root: usize) -> Result<Vec<Vec<usize>>> {
    if n < 3 {
        return Err(Error::contract(format!(
            "star cycle basis needs n >= 3, got {n}"
        )));
    }
    if root >= n {
        return Err(Error::contract(format!(
            "star root {root} out of range for n = {n}"
        )));
    }
    let mut out = Vec::with_capacity((n - 1) * (n - 2) / 2);
    for j in 0..n {
        for k in j + 1..n {
            if j != root && k != root {
                let mut tri = vec![root, j, k];
                tri.sort_unstable();
                out.push(tri);
            }
        }
    }
    Ok(out)
}

/// Root regions grown from a general graph's edge structure.
#[derive(Debug, Clone)]
pub struct GeneralRoots {
    /// Cycle variable sets; on a connected graph their count equals
    /// |E| − |V| + 1.
    pub cycles: Vec<Vec<usize>>,
    /// Bridge edges that belong to no cycle, kept as 2-variable roots.
    pub bridge_regions: Vec<Vec<usize>>,
    /// Degree-zero variables, kept as singleton roots.
    pub isolated: Vec<usize>,
    /// True when the graph had edges but no cycle at all, so the roots are
    /// just the edges themselves.
    pub acyclic_fallback: bool,
}

impl GeneralRoots {
    /// All root variable sets in deterministic order: cycles, then bridge
    /// edges, then isolated singletons.
    pub fn all(&self) -> Vec<Vec<usize>> {
        let mut out = self.cycles.clone();
        out.extend(self.bridge_regions.iter().cloned());
        out.extend(self.isolated.iter().map(|&v| vec![v]));
        out
    }
}

/// Grows a cycle set covering every edge of an arbitrary graph.
///
/// Complete graphs get the star cycle basis; graphs containing a full
/// row-major grid lattice are seeded with the grid faces. Otherwise cycles
/// are grown one at a time: the lowest-index unused edge touching a visited
/// vertex is closed into a cycle through a shortest path, searching first
/// through unvisited vertices to reach the visited set and then through
/// already-used edges (breadth-first, lowest-index neighbor first). Edges
/// on no cycle become 2-variable bridge regions and degree-zero variables
/// become singletons, so the output always covers the whole graph.
pub fn root_regions_general(n: usize, edge_list: &[(usize, usize)]) -> Result<GeneralRoots> {
    let mut edges: Vec<(usize, usize)> = Vec::with_capacity(edge_list.len());
    for &(a, b) in edge_list {
        if a == b {
            return Err(Error::contract(format!("self-loop on variable {a}")));
        }
        if a >= n || b >= n {
            return Err(Error::contract(format!(
                "edge ({a}, {b}) out of range for n = {n}"
            )));
        }
        edges.push((a.min(b), a.max(b)));
    }
    {
        let mut sorted = edges.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::contract("duplicate edge in graph"));
        }
    }

    let mut degree = vec![0usize; n];
    let mut adjacency = vec![Vec::new(); n];
    for (idx, &(a, b)) in edges.iter().enumerate() {
        degree[a] += 1;
        degree[b] += 1;
        adjacency[a].push((b, idx));
        adjacency[b].push((a, idx));
    }
    for list in &mut adjacency {
        list.sort_unstable();
    }
    let isolated: Vec<usize> = (0..n).filter(|&v| degree[v] == 0).collect();

    let mut cycles: Vec<Vec<usize>> = Vec::new();
    let mut bridge_regions: Vec<Vec<usize>> = Vec::new();
    let mut used = vec![false; edges.len()];
    let mut visited = vec![false; n];

    if n >= 3 && edges.len() == n * (n - 1) / 2 {
        // Every pair present: the star basis already covers every edge.
        return Ok(GeneralRoots {
            cycles: star_cycle_basis_complete(n, 0)?,
            bridge_regions,
            isolated,
            acyclic_fallback: false,
        });
    }

    if let Some((rows, cols)) = detect_grid_lattice(n, &edges) {
        cycles = faces_planar_grid(rows, cols, false)?;
        visited.fill(true);
        for (idx, &(a, b)) in edges.iter().enumerate() {
            if lattice_edge(a, b, cols, rows) {
                used[idx] = true;
            }
        }
    }

    loop {
        // Lowest-index unused edge touching the visited set; if none exists
        // but unused edges remain, seed a fresh component.
        let next = used
            .iter()
            .enumerate()
            .position(|(idx, &u)| !u && (visited[edges[idx].0] || visited[edges[idx].1]));
        let e = match next {
            Some(e) => e,
            None => match used.iter().position(|&u| !u) {
                Some(e) => {
                    visited[edges[e].0] = true;
                    e
                }
                None => break,
            },
        };
        let (a, b) = edges[e];
        used[e] = true;
        let (s, t) = if visited[a] { (a, b) } else { (b, a) };
        if visited[t] {
            // Close through already-used edges.
            match bfs_path(s, t, &adjacency, |idx| used[idx] && idx != e) {
                Some(path) => {
                    let mut cycle = path;
                    cycle.sort_unstable();
                    cycle.dedup();
                    cycles.push(cycle);
                }
                None => bridge_regions.push(vec![s.min(t), s.max(t)]),
            }
            continue;
        }
        // Reach back to the visited set through unvisited vertices, then
        // return to the edge's start through used edges.
        let inner = bfs_to_visited(t, e, &adjacency, &visited);
        match inner {
            Some((path, path_edges)) => {
                let u = *path.last().unwrap();
                let back = if u == s {
                    Some(vec![s])
                } else {
                    bfs_path(u, s, &adjacency, |idx| used[idx])
                };
                match back {
                    Some(back_path) => {
                        let mut cycle: Vec<usize> = vec![s];
                        cycle.extend(path.iter().copied());
                        cycle.extend(back_path.iter().copied());
                        cycle.sort_unstable();
                        cycle.dedup();
                        for &v in &cycle {
                            visited[v] = true;
                        }
                        for idx in path_edges {
                            used[idx] = true;
                        }
                        cycles.push(cycle);
                    }
                    None => {
                        visited[t] = true;
                        bridge_regions.push(vec![s.min(t), s.max(t)]);
                    }
                }
            }
            None => {
                // No way back: the edge is a bridge.
                visited[t] = true;
                bridge_regions.push(vec![s.min(t), s.max(t)]);
            }
        }
    }

    let acyclic_fallback = cycles.is_empty() && !edges.is_empty();
    Ok(GeneralRoots {
        cycles,
        bridge_regions,
        isolated,
        acyclic_fallback,
    })
}

/// Breadth-first shortest path from `from` to `to` over edges passing the
/// filter, scanning neighbors in ascending index order. Returns the vertex
/// path including both endpoints.
fn bfs_path<F: Fn(usize) -> bool>(
    from: usize,
    to: usize,
    adjacency: &[Vec<(usize, usize)>],
    allow: F,
) -> Option<Vec<usize>> {
    if from == to {
        return Some(vec![from]);
    }
    let mut parent = vec![usize::MAX; adjacency.len()];
    let mut queue = VecDeque::new();
    parent[from] = from;
    queue.push_back(from);
    while let Some(v) = queue.pop_front() {
        for &(w, idx) in &adjacency[v] {
            if !allow(idx) || parent[w] != usize::MAX {
                continue;
            }
            parent[w] = v;
            if w == to {
                let mut path = vec![w];
                let mut cur = w;
                while cur != from {
                    cur = parent[cur];
                    path.push(cur);
                }
                path.reverse();
                return Some(path);
            }
            queue.push_back(w);
        }
    }
    None
}

/// Breadth-first search from `start` through unvisited vertices, stopping at
/// the nearest visited vertex. Returns the vertex path from `start` to that
/// vertex and the edge indices along it; the seeding edge is excluded.
fn bfs_to_visited(
    start: usize,
    banned_edge: usize,
    adjacency: &[Vec<(usize, usize)>],
    visited: &[bool],
) -> Option<(Vec<usize>, Vec<usize>)> {
    let mut parent: Vec<(usize, usize)> = vec![(usize::MAX, usize::MAX); adjacency.len()];
    let mut queue = VecDeque::new();
    parent[start] = (start, usize::MAX);
    queue.push_back(start);
    while let Some(v) = queue.pop_front() {
        for &(w, idx) in &adjacency[v] {
            if idx == banned_edge || parent[w].0 != usize::MAX {
                continue;
            }
            parent[w] = (v, idx);
            if visited[w] {
                let mut path = vec![w];
                let mut path_edges = vec![idx];
                let mut cur = v;
                while cur != start {
                    path.push(cur);
                    path_edges.push(parent[cur].1);
                    cur = parent[cur].0;
                }
                path.push(start);
                path.reverse();
                path_edges.reverse();
                return Some((path, path_edges));
            }
            if !visited[w] {
                queue.push_back(w);
            }
        }
    }
    None
}

/// Looks for a row-major grid layout whose full lattice is contained in the
/// edge set. Among qualifying shapes, prefers the one with the most faces,
/// then the fewest rows.
fn detect_grid_lattice(n: usize, edges: &[(usize, usize)]) -> Option<(usize, usize)> {
    let edge_set: HashSet<(usize, usize)> = edges.iter().copied().collect();
    let mut best: Option<(usize, usize)> = None;
    for rows in 2..=n / 2 {
        if !n.is_multiple_of(rows) {
            continue;
        }
        let cols = n / rows;
        if cols < 2 {
            continue;
        }
        let complete = (0..rows).all(|r| {
            (0..cols).all(|c| {
                let v = r * cols + c;
                (c + 1 >= cols || edge_set.contains(&(v, v + 1)))
                    && (r + 1 >= rows || edge_set.contains(&(v, v + cols)))
            })
        });
        if complete {
            let faces = (rows - 1) * (cols - 1);
            let better = match best {
                None => true,
                Some((br, bc)) => faces > (br - 1) * (bc - 1),
            };
            if better {
                best = Some((rows, cols));
            }
        }
    }
    best
}

/// True when `(a, b)` (with `a < b`) is a lattice edge of the row-major
/// `rows × cols` grid.
fn lattice_edge(a: usize, b: usize, cols: usize, rows: usize) -> bool {
    let (ra, ca) = (a / cols, a % cols);
    let (rb, cb) = (b / cols, b % cols);
    ra < rows && rb < rows && ((ra == rb && cb == ca + 1) || (ca == cb && rb == ra + 1))
}

/// Builds a region graph from root variable sets by repeated intersection.
///
/// Roots are normalized first: duplicates are merged and any root contained
/// in another root is absorbed by it (the construction requires an antichain
/// of roots, and cycle sets from general graphs can nest). Every variable
/// must be covered by some root. The collection is then closed under
/// pairwise intersection — each new overlap is itself a region — which is
/// what makes the counted-once identity provable for every variable and
/// factor covered by the roots. A region's level is the length of the
/// longest chain of strictly larger regions above it, and each region's
/// parents are its inclusion-minimal strict supersets, so ancestry along
/// edges coincides with containment. Every factor is attached to every
/// region whose variable set covers its scope, and the counted-once
/// identity is still asserted by `check_validity` rather than assumed.
pub fn cluster_variation(fg: &FactorGraph, roots: &[Vec<usize>]) -> Result<RegionGraph> {
    let mut normalized: Vec<Vec<usize>> = Vec::with_capacity(roots.len());
    for root in roots {
        let mut r = root.clone();
        r.sort_unstable();
        r.dedup();
        if r.is_empty() {
            return Err(Error::contract("empty root region"));
        }
        if let Some(&v) = r.iter().find(|&&v| v >= fg.n) {
            return Err(Error::contract(format!(
                "root region references variable {v} outside the model (n = {})",
                fg.n
            )));
        }
        normalized.push(r);
    }
    normalized.sort_unstable();
    normalized.dedup();
    // Keep only maximal roots: a root inside another root carries nothing
    // the larger one does not already cover.
    let maximal: Vec<Vec<usize>> = normalized
        .iter()
        .filter(|r| {
            !normalized
                .iter()
                .any(|other| other.len() > r.len() && is_subset(r, other))
        })
        .cloned()
        .collect();

    let mut covered = vec![false; fg.n];
    for root in &maximal {
        for &v in root {
            covered[v] = true;
        }
    }
    if let Some(v) = covered.iter().position(|&c| !c) {
        return Err(Error::contract(format!(
            "root regions do not cover variable {v}"
        )));
    }

    // Close the collection under intersection.
    let mut collection: BTreeSet<Vec<usize>> = maximal.iter().cloned().collect();
    loop {
        let snapshot: Vec<Vec<usize>> = collection.iter().cloned().collect();
        let mut grew = false;
        for i in 0..snapshot.len() {
            for j in i + 1..snapshot.len() {
                let cut = intersect(&snapshot[i], &snapshot[j]);
                if !cut.is_empty() && collection.insert(cut) {
                    grew = true;
                }
            }
        }
        if !grew {
            break;
        }
    }

    // Longest-chain depth below the roots; larger scopes never sit below
    // smaller ones, so one pass in decreasing-size order settles levels.
    let mut scopes: Vec<Vec<usize>> = collection.into_iter().collect();
    scopes.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
    let mut levels = vec![0usize; scopes.len()];
    for idx in 0..scopes.len() {
        let mut level = 0;
        for above in 0..idx {
            if scopes[above].len() > scopes[idx].len()
                && is_subset(&scopes[idx], &scopes[above])
            {
                level = level.max(levels[above] + 1);
            }
        }
        levels[idx] = level;
    }

    // Region ids ordered by level, then by scope for determinism.
    let mut order: Vec<usize> = (0..scopes.len()).collect();
    order.sort_by(|&a, &b| levels[a].cmp(&levels[b]).then_with(|| scopes[a].cmp(&scopes[b])));
    let mut regions: Vec<Region> = Vec::with_capacity(scopes.len());
    for (id, &idx) in order.iter().enumerate() {
        let factors: Vec<usize> = fg
            .factors
            .iter()
            .enumerate()
            .filter(|(_, f)| is_subset(&f.scope, &scopes[idx]))
            .map(|(a, _)| a)
            .collect();
        regions.push(Region {
            id,
            vars: scopes[idx].clone(),
            factors,
            level: levels[idx],
            counting_number: 0,
        });
    }

    // Parents are the inclusion-minimal strict supersets, so that the set
    // of edge-ancestors of a region is exactly the set of regions
    // containing it.
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for child in 0..regions.len() {
        let supersets: Vec<usize> = (0..regions.len())
            .filter(|&p| {
                regions[p].vars.len() > regions[child].vars.len()
                    && is_subset(&regions[child].vars, &regions[p].vars)
            })
            .collect();
        for &p in &supersets {
            let minimal = !supersets.iter().any(|&t| {
                t != p
                    && regions[t].vars.len() < regions[p].vars.len()
                    && is_subset(&regions[t].vars, &regions[p].vars)
            });
            if minimal {
                edges.push((p, child));
            }
        }
    }

    RegionGraph::new(regions, edges, fg)
}

/// Default region-graph construction for a pairwise model, keyed off its
/// topology: grids use their unit-square faces as roots (optionally joined
/// by the perimeter cycle), complete graphs use the star cycle basis rooted
/// at node 0, and everything else falls back to the general cycle-growing
/// procedure. The result is the cluster-variation graph over those roots.
///
/// The graph depends only on the model's structure, never on its parameter
/// values, so one graph stays valid while fields and couplings change —
/// factor ids in the attached regions match any factor graph expanded from a
/// model with the same node count and edge set.
pub fn region_graph_for_model(
    model: &PairwiseMRF,
    include_infinite_face: bool,
) -> Result<RegionGraph> {
    let fg = model.to_factor_graph();
    let roots = match model.topology {
        Topology::Grid { rows, cols } => faces_planar_grid(rows, cols, include_infinite_face)?,
        Topology::Complete { n } => star_cycle_basis_complete(n, 0)?,
        _ => {
            let edge_list: Vec<(usize, usize)> =
                model.edges.iter().map(|e| (e.i, e.j)).collect();
            root_regions_general(model.n, &edge_list)?.all()
        }
    };
    cluster_variation(&fg, &roots)
}

/// Region graph mirroring plain belief propagation: one root per pairwise
/// factor scope (plus singleton roots for variables touching no pairwise
/// factor) and one child singleton per connected variable. Factors attach
/// maximally, so unary factors sit in every region containing their
/// variable; the counting recursion then gives each pair region weight 1 and
/// each connected singleton weight 1 − degree.
pub fn bethe_region_graph(fg: &FactorGraph) -> Result<RegionGraph> {
    let mut pair_scopes: Vec<Vec<usize>> = fg
        .factors
        .iter()
        .filter(|f| f.scope.len() == 2)
        .map(|f| f.scope.clone())
        .collect();
    pair_scopes.sort_unstable();
    pair_scopes.dedup();
    let mut connected = vec![false; fg.n];
    for scope in &pair_scopes {
        for &v in scope {
            connected[v] = true;
        }
    }
    let mut roots = pair_scopes;
    roots.extend(
        connected
            .iter()
            .enumerate()
            .filter(|(_, &c)| !c)
            .map(|(v, _)| vec![v]),
    );
    cluster_variation(fg, &roots)
}

/// Recomputes counting numbers in place: every root gets 1, and each deeper
/// region gets 1 minus the sum over all its ancestors.
pub fn counting_numbers(rg: &mut RegionGraph) {
    let order: Vec<usize> = rg.levels.iter().flatten().copied().collect();
    for r in order {
        let anc_sum: i64 = rg.ancestors[r]
            .iter()
            .map(|&a| rg.regions[a].counting_number)
            .sum();
        rg.regions[r].counting_number = 1 - anc_sum;
    }
}

/// Outcome of the counted-once check for one region graph.
#[derive(Debug, Clone)]
pub struct ValidityReport {
    pub valid: bool,
    /// Per-variable sums of counting numbers over regions containing it.
    pub variable_counts: Vec<i64>,
    /// Per-factor sums of counting numbers over regions attaching it.
    pub factor_counts: Vec<i64>,
    /// Variables whose sum differs from 1.
    pub offending_variables: Vec<usize>,
    /// Factors whose sum differs from 1.
    pub offending_factors: Vec<usize>,
}

/// Verifies that every variable and every factor of the model is counted
/// exactly once across the region graph, reporting offenders rather than
/// failing.
pub fn check_validity(rg: &RegionGraph, fg: &FactorGraph) -> ValidityReport {
    let mut variable_counts = vec![0i64; fg.n];
    let mut factor_counts = vec![0i64; fg.factors.len()];
    for region in &rg.regions {
        for &v in &region.vars {
            variable_counts[v] += region.counting_number;
        }
        for &a in &region.factors {
            factor_counts[a] += region.counting_number;
        }
    }
    let offending_variables: Vec<usize> = variable_counts
        .iter()
        .enumerate()
        .filter(|&(_, &c)| c != 1)
        .map(|(v, _)| v)
        .collect();
    let offending_factors: Vec<usize> = factor_counts
        .iter()
        .enumerate()
        .filter(|&(_, &c)| c != 1)
        .map(|(a, _)| a)
        .collect();
    ValidityReport {
        valid: offending_variables.is_empty() && offending_factors.is_empty(),
        variable_counts,
        factor_counts,
        offending_variables,
        offending_factors,
    }
}

/// A normalized belief over a sorted variable scope, stored row-major with
/// the first scope variable most significant.
#[derive(Debug, Clone)]
pub struct BeliefTable {
    pub scope: Vec<usize>,
    pub k: usize,
    pub table: Vec<f64>,
}

impl BeliefTable {
    /// Wraps a table after checking its size, nonnegativity, and
    /// normalization (sum within 1e-9 of one).
    pub fn new(scope: Vec<usize>, k: usize, table: Vec<f64>) -> Result<Self> {
        let expected = k.checked_pow(scope.len() as u32).ok_or_else(|| {
            Error::contract("belief table size overflows")
        })?;
        if table.len() != expected {
            return Err(Error::contract(format!(
                "belief table over {} variables with {k} states needs {expected} entries, got {}",
                scope.len(),
                table.len()
            )));
        }
        if table.iter().any(|&p| p.is_nan() || p < 0.0) {
            return Err(Error::contract("belief table has a negative or NaN entry"));
        }
        let sum: f64 = table.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!(
                "belief table sums to {sum}, expected 1"
            )));
        }
        Ok(BeliefTable { scope, k, table })
    }

    /// Normalizes a nonnegative weight table into a belief.
    pub fn from_unnormalized(scope: Vec<usize>, k: usize, mut table: Vec<f64>) -> Result<Self> {
        if table.iter().any(|&p| p.is_nan() || p < 0.0) {
            return Err(Error::contract("belief weights have a negative or NaN entry"));
        }
        let sum: f64 = table.iter().sum();
        if sum.is_nan() || sum <= 0.0 || !sum.is_finite() {
            return Err(Error::numeric("belief normalization"));
        }
        for p in &mut table {
            *p /= sum;
        }
        BeliefTable::new(scope, k, table)
    }

    /// The uniform belief over a scope.
    pub fn uniform(scope: Vec<usize>, k: usize) -> Self {
        let len = k.pow(scope.len() as u32);
        BeliefTable {
            scope,
            k,
            table: vec![1.0 / len as f64; len],
        }
    }

    /// Sums out every variable not in `sub`, which must be a sorted subset
    /// of the scope, returning the belief over `sub`.
    pub fn marginalize_onto(&self, sub: &[usize]) -> Result<BeliefTable> {
        if !is_subset(sub, &self.scope) {
            return Err(Error::Query(
                "marginalization target is not inside the belief scope".into(),
            ));
        }
        let keep: Vec<usize> = sub
            .iter()
            .map(|v| self.scope.iter().position(|s| s == v).unwrap())
            .collect();
        let out_len = self.k.pow(sub.len() as u32);
        let mut out = vec![0.0; out_len];
        let m = self.scope.len();
        let mut states = vec![0usize; m];
        for (idx, &p) in self.table.iter().enumerate() {
            decode_states(idx, self.k, m, &mut states);
            let mut out_idx = 0;
            for &pos in &keep {
                out_idx = out_idx * self.k + states[pos];
            }
            out[out_idx] += p;
        }
        BeliefTable::new(sub.to_vec(), self.k, out)
    }
}

/// Writes the mixed-radix digits of `idx` (base `k`, `m` digits, first digit
/// most significant) into `states`.
fn decode_states(idx: usize, k: usize, m: usize, states: &mut [usize]) {
    let mut rest = idx;
    for pos in (0..m).rev() {
        states[pos] = rest % k;
        rest /= k;
    }
}

/// Energy of one joint assignment of a region's variables: the negated sum
/// of the log-potentials of every factor attached to the region, evaluated
/// at the assignment restricted to each factor's scope.
pub fn region_energy(region: &Region, fg: &FactorGraph, x: &[usize]) -> Result<f64> {
    if x.len() != region.vars.len() {
        return Err(Error::Query(format!(
            "assignment over {} variables for a region with {}",
            x.len(),
            region.vars.len()
        )));
    }
    if let Some(&s) = x.iter().find(|&&s| s >= fg.k) {
        return Err(Error::Query(format!("state {s} out of range for k = {}", fg.k)));
    }
    let mut energy = 0.0;
    for &a in &region.factors {
        let factor = &fg.factors[a];
        let mut idx = 0;
        for &v in &factor.scope {
            let pos = region.vars.binary_search(&v).map_err(|_| {
                Error::Structure(format!(
                    "factor {a} scope variable {v} missing from region {}",
                    region.id
                ))
            })?;
            idx = idx * fg.k + x[pos];
        }
        energy -= factor.log_table[idx];
    }
    Ok(energy)
}

/// Dense energy table of a region, indexed like its belief table.
pub fn region_energy_table(region: &Region, fg: &FactorGraph) -> Result<Vec<f64>> {
    let m = region.vars.len();
    let len = fg.k.pow(m as u32);
    let mut out = vec![0.0; len];
    let mut states = vec![0usize; m];
    for (idx, slot) in out.iter_mut().enumerate() {
        decode_states(idx, fg.k, m, &mut states);
        *slot = region_energy(region, fg, &states)?;
    }
    Ok(out)
}

/// Region-based free energy of a belief set: the counting-number-weighted
/// sum over regions of expected energy minus entropy. Beliefs are indexed
/// by region id, must match each region's scope, and must be normalized
/// within 1e-6; zero-probability entries contribute no entropy.
pub fn region_free_energy(
    rg: &RegionGraph,
    beliefs: &[BeliefTable],
    fg: &FactorGraph,
) -> Result<f64> {
    if beliefs.len() != rg.len() {
        return Err(Error::contract(format!(
            "{} beliefs supplied for {} regions",
            beliefs.len(),
            rg.len()
        )));
    }
    let mut total = 0.0;
    for region in rg.regions() {
        let belief = &beliefs[region.id];
        if belief.scope != region.vars {
            return Err(Error::contract(format!(
                "belief scope mismatch for region {}",
                region.id
            )));
        }
        if belief.k != fg.k {
            return Err(Error::contract(format!(
                "belief over {} states for a model with {}",
                belief.k, fg.k
            )));
        }
        let sum: f64 = belief.table.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::contract(format!(
                "belief for region {} sums to {sum}, expected 1",
                region.id
            )));
        }
        if belief.table.iter().any(|&p| p.is_nan() || p < 0.0) {
            return Err(Error::contract(format!(
                "belief for region {} has a negative or NaN entry",
                region.id
            )));
        }
        let energies = region_energy_table(region, fg)?;
        let mut contribution = 0.0;
        for (&p, &e) in belief.table.iter().zip(&energies) {
            if p > 0.0 {
                contribution += p * (e + p.ln());
            }
        }
        total += region.counting_number as f64 * contribution;
    }
    if !total.is_finite() {
        return Err(Error::numeric("region free energy"));
    }
    Ok(total)
}

/// Marginal tables for arbitrary variable sets, read off a region belief
/// set: each query is marginalized out of every region whose scope covers
/// it and the results are averaged. On locally consistent beliefs every
/// covering region agrees and the average is that shared marginal.
pub fn extract_marginals(
    rg: &RegionGraph,
    beliefs: &[BeliefTable],
    queries: &[Vec<usize>],
) -> Result<Vec<BeliefTable>> {
    if beliefs.len() != rg.len() {
        return Err(Error::contract(format!(
            "{} beliefs supplied for {} regions",
            beliefs.len(),
            rg.len()
        )));
    }
    let mut out = Vec::with_capacity(queries.len());
    for query in queries {
        let mut scope = query.clone();
        scope.sort_unstable();
        scope.dedup();
        let mut accumulated: Option<Vec<f64>> = None;
        let mut covering = 0usize;
        for region in rg.regions() {
            if !is_subset(&scope, &region.vars) {
                continue;
            }
            let marg = beliefs[region.id].marginalize_onto(&scope)?;
            match &mut accumulated {
                None => accumulated = Some(marg.table),
                Some(acc) => {
                    for (a, m) in acc.iter_mut().zip(&marg.table) {
                        *a += m;
                    }
                }
            }
            covering += 1;
        }
        let Some(mut table) = accumulated else {
            return Err(Error::Query(format!(
                "no region covers the variables {}",
                join_ids(&scope)
            )));
        };
        for p in &mut table {
            *p /= covering as f64;
        }
        out.push(BeliefTable::new(scope, beliefs[0].k, table)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::{exact_inference, exact_scope_marginals};
    use crate::model::{grid_edge_pairs, random_ising, Edge, PairwiseMRF, Topology};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_model(rows: usize, cols: usize, seed: u64) -> PairwiseMRF {
        random_ising(Topology::Grid { rows, cols }, 0.5, seed).unwrap()
    }

    fn complete_model(n: usize, seed: u64) -> PairwiseMRF {
        random_ising(Topology::Complete { n }, 1.0, seed).unwrap()
    }

    fn custom_model(n: usize, pairs: &[(usize, usize)], seed: u64) -> PairwiseMRF {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let edges: Vec<Edge> = pairs
            .iter()
            .map(|&(i, j)| Edge {
                i,
                j,
                coupling: rng.gen_range(-1.0..1.0),
            })
            .collect();
        let h: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
        PairwiseMRF::new(n, h, edges).unwrap()
    }

    /// Exact marginals of every region scope, packaged as belief tables.
    fn exact_beliefs(rg: &RegionGraph, fg: &FactorGraph) -> Vec<BeliefTable> {
        let mut order: Vec<usize> = (0..rg.len()).collect();
        order.sort_by(|&a, &b| rg.region(a).vars.cmp(&rg.region(b).vars));
        let scopes: Vec<Vec<usize>> = order.iter().map(|&r| rg.region(r).vars.clone()).collect();
        let tables = exact_scope_marginals(fg, &scopes).unwrap();
        let mut beliefs: Vec<Option<BeliefTable>> = vec![None; rg.len()];
        for (&r, table) in order.iter().zip(tables) {
            beliefs[r] =
                Some(BeliefTable::new(rg.region(r).vars.clone(), fg.k, table).unwrap());
        }
        beliefs.into_iter().map(|b| b.unwrap()).collect()
    }

    #[test]
    fn grid_faces_enumerate_unit_squares() {
        let faces = faces_planar_grid(2, 3, false).unwrap();
        assert_eq!(faces, vec![vec![0, 1, 3, 4], vec![1, 2, 4, 5]]);
        let faces = faces_planar_grid(5, 5, false).unwrap();
        assert_eq!(faces.len(), 16);
        assert!(faces.iter().all(|f| f.len() == 4));
    }

    #[test]
    fn perimeter_region_joins_the_faces() {
        let faces = faces_planar_grid(2, 3, true).unwrap();
        assert_eq!(faces.len(), 3);
        assert_eq!(faces[2], vec![0, 1, 2, 3, 4, 5]);
        let faces = faces_planar_grid(3, 3, true).unwrap();
        assert_eq!(faces.len(), 5);
        assert_eq!(faces[4], vec![0, 1, 2, 3, 5, 6, 7, 8]);
        // On a 2x2 grid the perimeter is the single face; no duplicate.
        let faces = faces_planar_grid(2, 2, true).unwrap();
        assert_eq!(faces, vec![vec![0, 1, 2, 3]]);
    }

    #[test]
    fn degenerate_grids_are_rejected() {
        assert!(faces_planar_grid(1, 5, false).is_err());
        assert!(faces_planar_grid(2, 1, true).is_err());
    }

    #[test]
    fn star_basis_has_one_triangle_per_off_tree_edge() {
        let tris = star_cycle_basis_complete(4, 0).unwrap();
        assert_eq!(tris, vec![vec![0, 1, 2], vec![0, 1, 3], vec![0, 2, 3]]);
        assert_eq!(star_cycle_basis_complete(9, 0).unwrap().len(), 28);
        // Cycle-space dimension of the complete graph on 4 vertices.
        assert_eq!(tris.len(), 6 - 4 + 1);
        assert!(star_cycle_basis_complete(2, 0).is_err());
        assert!(star_cycle_basis_complete(4, 7).is_err());
    }

    #[test]
    fn general_roots_on_a_grid_are_its_faces() {
        let edges: Vec<(usize, usize)> = grid_edge_pairs(3, 3).collect();
        let roots = root_regions_general(9, &edges).unwrap();
        assert_eq!(roots.cycles, faces_planar_grid(3, 3, false).unwrap());
        assert!(roots.bridge_regions.is_empty());
        assert!(roots.isolated.is_empty());
        assert!(!roots.acyclic_fallback);
    }

    #[test]
    fn general_roots_on_a_complete_graph_are_star_triangles() {
        let mut edges = Vec::new();
        for i in 0..5 {
            for j in i + 1..5 {
                edges.push((i, j));
            }
        }
        let roots = root_regions_general(5, &edges).unwrap();
        assert_eq!(roots.cycles, star_cycle_basis_complete(5, 0).unwrap());
        assert_eq!(roots.cycles.len(), 10 - 5 + 1);
    }

    #[test]
    fn chord_over_a_grid_adds_exactly_one_cycle() {
        let mut edges: Vec<(usize, usize)> = grid_edge_pairs(3, 3).collect();
        edges.push((0, 4));
        let roots = root_regions_general(9, &edges).unwrap();
        assert_eq!(roots.cycles.len(), 13 - 9 + 1);
        let faces = faces_planar_grid(3, 3, false).unwrap();
        assert_eq!(&roots.cycles[..4], &faces[..]);
        let extra = &roots.cycles[4];
        assert!(extra.contains(&0) && extra.contains(&4));
        // Every edge's endpoints appear together in some root.
        for &(a, b) in &edges {
            assert!(
                roots.all().iter().any(|r| r.contains(&a) && r.contains(&b)),
                "edge ({a}, {b}) uncovered"
            );
        }
    }

    #[test]
    fn trees_fall_back_to_edge_regions_with_a_warning() {
        let edges = vec![(0, 1), (1, 2), (1, 3)];
        let roots = root_regions_general(4, &edges).unwrap();
        assert!(roots.acyclic_fallback);
        assert!(roots.cycles.is_empty());
        assert_eq!(
            roots.bridge_regions,
            vec![vec![0, 1], vec![1, 2], vec![1, 3]]
        );
    }

    #[test]
    fn bridges_and_isolated_variables_become_small_roots() {
        // Two triangles joined by a bridge, plus an isolated variable.
        let edges = vec![(0, 1), (0, 2), (1, 2), (2, 3), (3, 4), (3, 5), (4, 5)];
        let roots = root_regions_general(7, &edges).unwrap();
        assert_eq!(roots.cycles.len(), 7 - 6 + 1);
        assert_eq!(roots.bridge_regions, vec![vec![2, 3]]);
        assert_eq!(roots.isolated, vec![6]);
        assert!(!roots.acyclic_fallback);
        for &(a, b) in &edges {
            assert!(roots.all().iter().any(|r| r.contains(&a) && r.contains(&b)));
        }
    }

    #[test]
    fn two_face_construction_yields_single_overlap_child() {
        let fg = grid_model(2, 3, 7).to_factor_graph();
        let roots = faces_planar_grid(2, 3, false).unwrap();
        let rg = cluster_variation(&fg, &roots).unwrap();
        assert_eq!(rg.len(), 3);
        assert_eq!(rg.levels().len(), 2);
        let child = rg.region(rg.levels()[1][0]);
        assert_eq!(child.vars, vec![1, 4]);
        assert_eq!(child.counting_number, -1);
        assert_eq!(rg.region(0).counting_number, 1);
        assert_eq!(rg.region(1).counting_number, 1);
        // The overlap child carries the coupling factor between its two
        // variables plus both unary factors.
        let pair_id = fg
            .pairwise_factors()
            .iter()
            .find(|&&(_, i, j)| (i, j) == (1, 4))
            .unwrap()
            .0;
        assert!(child.factors.contains(&pair_id));
        let unary_ids: Vec<usize> = fg
            .factors
            .iter()
            .enumerate()
            .filter(|(_, f)| f.unary && (f.scope == [1] || f.scope == [4]))
            .map(|(a, _)| a)
            .collect();
        for a in unary_ids {
            assert!(child.factors.contains(&a));
        }
        assert!(check_validity(&rg, &fg).valid);
    }

    #[test]
    fn disjoint_roots_make_a_single_level() {
        let fg = custom_model(4, &[(0, 1), (2, 3)], 3).to_factor_graph();
        let rg = cluster_variation(&fg, &[vec![0, 1], vec![2, 3]]).unwrap();
        assert_eq!(rg.levels().len(), 1);
        assert_eq!(rg.len(), 2);
        assert!(rg.edges().is_empty());
        assert!(check_validity(&rg, &fg).valid);
    }

    #[test]
    fn uncovered_variable_is_named_in_the_error() {
        let fg = custom_model(3, &[(0, 1), (1, 2)], 1).to_factor_graph();
        let err = cluster_variation(&fg, &[vec![0, 1]]).unwrap_err();
        assert!(err.to_string().contains("variable 2"), "{err}");
    }

    #[test]
    fn nested_roots_are_absorbed_by_their_supersets() {
        let fg = custom_model(4, &[(0, 1), (1, 2), (2, 3), (0, 3), (0, 2)], 5).to_factor_graph();
        // A square cycle and a triangle inside it, as the general
        // constructor produces on a chorded square.
        let rg = cluster_variation(&fg, &[vec![0, 1, 2, 3], vec![0, 1, 2]]).unwrap();
        assert_eq!(rg.len(), 1);
        assert_eq!(rg.region(0).vars, vec![0, 1, 2, 3]);
        assert!(check_validity(&rg, &fg).valid);
    }

    #[test]
    fn grid_with_perimeter_region_stays_valid() {
        for (rows, cols) in [(3, 3), (4, 4), (5, 5)] {
            let fg = grid_model(rows, cols, 11).to_factor_graph();
            let roots = faces_planar_grid(rows, cols, true).unwrap();
            let rg = cluster_variation(&fg, &roots).unwrap();
            let report = check_validity(&rg, &fg);
            assert!(report.valid, "{rows}x{cols}: {:?}", report.offending_factors);
        }
    }

    #[test]
    fn star_construction_on_complete_graphs_stays_valid() {
        for n in 4..=7 {
            let fg = complete_model(n, n as u64).to_factor_graph();
            let roots = star_cycle_basis_complete(n, 0).unwrap();
            let rg = cluster_variation(&fg, &roots).unwrap();
            assert!(check_validity(&rg, &fg).valid, "n = {n}");
        }
    }

    #[test]
    fn three_level_hand_graph_counts_every_node_once() {
        // Region graph over the 2x3 grid whose roots are the two faces and
        // the perimeter, with the perimeter deliberately not carrying the
        // interior coupling factor: mid-level regions one per coupling,
        // singletons below. Counting numbers must come out as 1 at the
        // roots, -1 at every pair, and 1 at every singleton, and the
        // counted-once identity must hold for variables and factors alike.
        let model = grid_model(2, 3, 13);
        let fg = model.to_factor_graph();
        let pair_id = |i: usize, j: usize| {
            fg.pairwise_factors()
                .iter()
                .find(|&&(_, a, b)| (a, b) == (i, j))
                .unwrap()
                .0
        };
        let unary_id = |i: usize| {
            fg.factors
                .iter()
                .enumerate()
                .find(|(_, f)| f.unary && f.scope == [i])
                .map(|(a, _)| a)
                .unwrap()
        };
        // Lattice couplings of the 2x3 grid in canonical order.
        let (a, b, c, d, e, f2, g) = (
            pair_id(0, 1),
            pair_id(1, 2),
            pair_id(0, 3),
            pair_id(1, 4),
            pair_id(2, 5),
            pair_id(3, 4),
            pair_id(4, 5),
        );
        let mut regions = Vec::new();
        let push = |vars: Vec<usize>, mut factors: Vec<usize>, level: usize,
                        regions: &mut Vec<Region>| {
            for &v in &vars {
                factors.push(unary_id(v));
            }
            regions.push(Region {
                id: regions.len(),
                vars,
                factors,
                level,
                counting_number: 0,
            });
        };
        push(vec![0, 1, 3, 4], vec![a, c, d, f2], 0, &mut regions);
        push(vec![1, 2, 4, 5], vec![b, d, e, g], 0, &mut regions);
        push(vec![0, 1, 2, 3, 4, 5], vec![a, b, c, e, f2, g], 0, &mut regions);
        push(vec![0, 1], vec![a], 1, &mut regions);
        push(vec![1, 2], vec![b], 1, &mut regions);
        push(vec![0, 3], vec![c], 1, &mut regions);
        push(vec![1, 4], vec![d], 1, &mut regions);
        push(vec![2, 5], vec![e], 1, &mut regions);
        push(vec![3, 4], vec![f2], 1, &mut regions);
        push(vec![4, 5], vec![g], 1, &mut regions);
        for v in 0..6 {
            push(vec![v], vec![], 2, &mut regions);
        }
        let edges = vec![
            (0, 3),
            (2, 3),
            (1, 4),
            (2, 4),
            (0, 5),
            (2, 5),
            (0, 6),
            (1, 6),
            (1, 7),
            (2, 7),
            (0, 8),
            (2, 8),
            (1, 9),
            (2, 9),
            (3, 10),
            (5, 10),
            (3, 11),
            (4, 11),
            (6, 11),
            (4, 12),
            (7, 12),
            (5, 13),
            (8, 13),
            (6, 14),
            (8, 14),
            (9, 14),
            (7, 15),
            (9, 15),
        ];
        let rg = RegionGraph::new(regions, edges, &fg).unwrap();
        for root in 0..3 {
            assert_eq!(rg.region(root).counting_number, 1);
        }
        for pair in 3..10 {
            assert_eq!(rg.region(pair).counting_number, -1, "region {pair}");
        }
        for singleton in 10..16 {
            assert_eq!(rg.region(singleton).counting_number, 1, "region {singleton}");
        }
        let report = check_validity(&rg, &fg);
        assert!(report.valid, "{:?}", report);
        // Counted-once holds, but the entropy decomposition of this graph
        // is approximate, so the free energy at exact beliefs lands near
        // (not on) the exact value.
        let beliefs = exact_beliefs(&rg, &fg);
        let exact = exact_inference(&fg).unwrap();
        let free_energy = region_free_energy(&rg, &beliefs, &fg).unwrap();
        assert!(
            (free_energy + exact.log_z).abs() < 0.5,
            "gap {} unexpectedly large",
            (free_energy + exact.log_z).abs()
        );
    }

    #[test]
    fn bethe_construction_weights_match_degrees() {
        let model = grid_model(3, 3, 17);
        let fg = model.to_factor_graph();
        let rg = bethe_region_graph(&fg).unwrap();
        let adjacency = model.adjacency();
        for region in rg.regions() {
            match region.vars.len() {
                2 => assert_eq!(region.counting_number, 1),
                1 => {
                    let degree = adjacency[region.vars[0]].len() as i64;
                    assert_eq!(region.counting_number, 1 - degree);
                }
                other => panic!("unexpected region size {other}"),
            }
        }
        assert!(check_validity(&rg, &fg).valid);
    }

    #[test]
    fn bethe_construction_keeps_disconnected_variables() {
        let fg = custom_model(3, &[(0, 1)], 9).to_factor_graph();
        let rg = bethe_region_graph(&fg).unwrap();
        assert!(rg
            .regions()
            .iter()
            .any(|r| r.vars == vec![2] && r.level == 0 && r.counting_number == 1));
        assert!(check_validity(&rg, &fg).valid);
    }

    #[test]
    fn missing_factor_is_reported_by_the_validity_check() {
        let fg = custom_model(2, &[(0, 1)], 21).to_factor_graph();
        let pair = fg.pairwise_factors()[0].0;
        let regions = vec![
            Region {
                id: 0,
                vars: vec![0, 1],
                // The coupling factor is deliberately left out everywhere.
                factors: fg
                    .factors
                    .iter()
                    .enumerate()
                    .filter(|(_, f)| f.unary)
                    .map(|(a, _)| a)
                    .collect(),
                level: 0,
                counting_number: 0,
            },
        ];
        let rg = RegionGraph::new(regions, vec![], &fg).unwrap();
        let report = check_validity(&rg, &fg);
        assert!(!report.valid);
        assert_eq!(report.offending_factors, vec![pair]);
        assert!(report.offending_variables.is_empty());
    }

    #[test]
    fn malformed_region_graphs_are_rejected() {
        let fg = custom_model(3, &[(0, 1), (1, 2)], 2).to_factor_graph();
        let region = |id, vars: Vec<usize>, level| Region {
            id,
            vars,
            factors: vec![],
            level,
            counting_number: 0,
        };
        // Edge to a non-subset region.
        let err = RegionGraph::new(
            vec![region(0, vec![0, 1], 0), region(1, vec![1, 2], 1)],
            vec![(0, 1)],
            &fg,
        )
        .unwrap_err();
        assert!(err.to_string().contains("strict sub-region"), "{err}");
        // Edge running sideways within a level.
        let err = RegionGraph::new(
            vec![region(0, vec![0, 1, 2], 0), region(1, vec![0, 1], 0)],
            vec![(0, 1)],
            &fg,
        )
        .unwrap_err();
        assert!(err.to_string().contains("deeper level"), "{err}");
        // Factor attached outside its scope.
        let pair = fg.pairwise_factors()[0].0;
        let err = RegionGraph::new(
            vec![Region {
                id: 0,
                vars: vec![0, 2],
                factors: vec![pair],
                level: 0,
                counting_number: 0,
            }],
            vec![],
            &fg,
        )
        .unwrap_err();
        assert!(err.to_string().contains("scope"), "{err}");
    }

    #[test]
    fn dump_lists_regions_then_edges() {
        let fg = grid_model(2, 3, 7).to_factor_graph();
        let roots = faces_planar_grid(2, 3, false).unwrap();
        let rg = cluster_variation(&fg, &roots).unwrap();
        let dump = rg.dump();
        let lines: Vec<&str> = dump.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[0].starts_with("region 0 level 0 c 1 vars 0 1 3 4 factors "));
        assert!(lines[2].starts_with("region 2 level 1 c -1 vars 1 4 factors "));
        assert_eq!(lines[3], "edge 0 2");
        assert_eq!(lines[4], "edge 1 2");
    }

    #[test]
    fn exact_beliefs_recover_negative_log_z_on_decomposable_graphs() {
        // Wherever the region structure expresses an exact factorization of
        // the joint — a separator-structured face pair, tree models under
        // the pair/singleton construction, disjoint roots, or a single
        // all-covering region — the free energy at exact marginals is the
        // exact negative log partition function.
        let mut cases: Vec<(PairwiseMRF, RegionGraph)> = Vec::new();
        let two_faces = grid_model(2, 3, 23);
        let fg = two_faces.to_factor_graph();
        cases.push((
            two_faces.clone(),
            cluster_variation(&fg, &faces_planar_grid(2, 3, false).unwrap()).unwrap(),
        ));
        let chain = custom_model(5, &[(0, 1), (1, 2), (2, 3), (3, 4)], 37);
        let fg = chain.to_factor_graph();
        cases.push((chain.clone(), bethe_region_graph(&fg).unwrap()));
        let star_tree = custom_model(5, &[(0, 1), (0, 2), (0, 3), (0, 4)], 39);
        let fg = star_tree.to_factor_graph();
        cases.push((star_tree.clone(), bethe_region_graph(&fg).unwrap()));
        let disjoint = custom_model(4, &[(0, 1), (2, 3)], 41);
        let fg = disjoint.to_factor_graph();
        cases.push((
            disjoint.clone(),
            cluster_variation(&fg, &[vec![0, 1], vec![2, 3]]).unwrap(),
        ));
        let single = grid_model(2, 2, 43);
        let fg = single.to_factor_graph();
        cases.push((
            single.clone(),
            cluster_variation(&fg, &faces_planar_grid(2, 2, true).unwrap()).unwrap(),
        ));
        for (model, rg) in cases {
            let fg = model.to_factor_graph();
            let beliefs = exact_beliefs(&rg, &fg);
            let exact = exact_inference(&fg).unwrap();
            let free_energy = region_free_energy(&rg, &beliefs, &fg).unwrap();
            assert_abs_diff_eq!(free_energy, -exact.log_z, epsilon = 1e-8);
        }
    }

    #[test]
    fn exact_beliefs_on_loopy_graphs_show_the_entropy_gap() {
        // On region graphs that do not express an exact factorization the
        // counted-once identity fixes the energy term but the entropy term
        // is an approximation, so the free energy at exact marginals
        // deviates from the exact value. A uniformly coupled triangle makes
        // the gap large and predictable: under strong couplings the joint
        // keeps one bit of entropy while the pair/singleton decomposition
        // reports nearly none.
        let n = 3;
        let edges: Vec<Edge> = [(0, 1), (0, 2), (1, 2)]
            .iter()
            .map(|&(i, j)| Edge {
                i,
                j,
                coupling: 5.0,
            })
            .collect();
        let fg = PairwiseMRF::new(n, vec![0.0; n], edges)
            .unwrap()
            .to_factor_graph();
        let rg = bethe_region_graph(&fg).unwrap();
        assert!(check_validity(&rg, &fg).valid);
        let beliefs = exact_beliefs(&rg, &fg);
        let exact = exact_inference(&fg).unwrap();
        let free_energy = region_free_energy(&rg, &beliefs, &fg).unwrap();
        let gap = free_energy + exact.log_z;
        assert!(
            (gap - 2f64.ln()).abs() < 1e-3,
            "expected a one-bit entropy gap, got {gap}"
        );
        // Milder loopy cases: the gap is small but genuinely nonzero.
        let cases: Vec<(PairwiseMRF, Vec<Vec<usize>>)> = vec![
            (
                grid_model(3, 3, 29),
                faces_planar_grid(3, 3, true).unwrap(),
            ),
            (
                complete_model(6, 31),
                star_cycle_basis_complete(6, 0).unwrap(),
            ),
        ];
        for (model, roots) in cases {
            let fg = model.to_factor_graph();
            let rg = cluster_variation(&fg, &roots).unwrap();
            let beliefs = exact_beliefs(&rg, &fg);
            let exact = exact_inference(&fg).unwrap();
            let free_energy = region_free_energy(&rg, &beliefs, &fg).unwrap();
            assert!((free_energy + exact.log_z).abs() < 1.0);
        }
    }

    #[test]
    fn uniform_beliefs_on_a_flat_model_give_n_log_two() {
        let n = 9;
        let h = vec![0.0; n];
        let edges: Vec<Edge> = grid_edge_pairs(3, 3)
            .map(|(i, j)| Edge {
                i,
                j,
                coupling: 0.0,
            })
            .collect();
        let fg = PairwiseMRF::new(n, h, edges).unwrap().to_factor_graph();
        for rg in [
            cluster_variation(&fg, &faces_planar_grid(3, 3, false).unwrap()).unwrap(),
            bethe_region_graph(&fg).unwrap(),
        ] {
            let beliefs: Vec<BeliefTable> = rg
                .regions()
                .iter()
                .map(|r| BeliefTable::uniform(r.vars.clone(), fg.k))
                .collect();
            let free_energy = region_free_energy(&rg, &beliefs, &fg).unwrap();
            assert_abs_diff_eq!(free_energy, -(n as f64) * 2f64.ln(), epsilon = 1e-10);
        }
    }

    #[test]
    fn unnormalized_beliefs_are_rejected() {
        let fg = grid_model(2, 2, 3).to_factor_graph();
        let rg = cluster_variation(&fg, &faces_planar_grid(2, 2, false).unwrap()).unwrap();
        let mut beliefs: Vec<BeliefTable> = rg
            .regions()
            .iter()
            .map(|r| BeliefTable::uniform(r.vars.clone(), fg.k))
            .collect();
        for p in &mut beliefs[0].table {
            *p *= 1.01;
        }
        let err = region_free_energy(&rg, &beliefs, &fg).unwrap_err();
        assert!(err.to_string().contains("sums to"), "{err}");
    }

    #[test]
    fn region_energy_matches_the_model_by_hand() {
        let model = custom_model(2, &[(0, 1)], 41);
        let fg = model.to_factor_graph();
        let rg = bethe_region_graph(&fg).unwrap();
        let root = rg
            .regions()
            .iter()
            .find(|r| r.vars.len() == 2)
            .unwrap();
        let j = model.edges[0].coupling;
        let (h0, h1) = (model.h[0], model.h[1]);
        for (x0, x1) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let s0 = 2.0 * x0 as f64 - 1.0;
            let s1 = 2.0 * x1 as f64 - 1.0;
            let expected = -(j * s0 * s1 + h0 * s0 + h1 * s1);
            let got = region_energy(root, &fg, &[x0, x1]).unwrap();
            assert_abs_diff_eq!(got, expected, epsilon = 1e-12);
        }
        let table = region_energy_table(root, &fg).unwrap();
        assert_eq!(table.len(), 4);
        assert_abs_diff_eq!(
            table[1],
            region_energy(root, &fg, &[0, 1]).unwrap(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn belief_marginalization_sums_out_variables() {
        let table = vec![0.1, 0.2, 0.3, 0.4];
        let belief = BeliefTable::new(vec![2, 5], 2, table).unwrap();
        let onto_first = belief.marginalize_onto(&[2]).unwrap();
        assert_abs_diff_eq!(onto_first.table[0], 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(onto_first.table[1], 0.7, epsilon = 1e-12);
        let onto_second = belief.marginalize_onto(&[5]).unwrap();
        assert_abs_diff_eq!(onto_second.table[0], 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(onto_second.table[1], 0.6, epsilon = 1e-12);
        assert!(belief.marginalize_onto(&[3]).is_err());
        assert!(BeliefTable::new(vec![0], 2, vec![0.7, 0.2]).is_err());
        assert!(BeliefTable::new(vec![0], 2, vec![-0.1, 1.1]).is_err());
    }

    #[test]
    fn extracted_marginals_match_the_oracle_on_exact_beliefs() {
        let model = grid_model(3, 3, 61);
        let fg = model.to_factor_graph();
        let rg = cluster_variation(&fg, &faces_planar_grid(3, 3, false).unwrap()).unwrap();
        let beliefs = exact_beliefs(&rg, &fg);
        let exact = exact_inference(&fg).unwrap();
        let queries: Vec<Vec<usize>> = (0..9).map(|i| vec![i]).collect();
        let singles = extract_marginals(&rg, &beliefs, &queries).unwrap();
        for (i, m) in singles.iter().enumerate() {
            for (s, &p) in m.table.iter().enumerate() {
                assert_abs_diff_eq!(p, exact.node_marginals[i][s], epsilon = 1e-9);
            }
        }
        let pair_queries: Vec<Vec<usize>> =
            exact.pair_marginals.iter().map(|pm| vec![pm.i, pm.j]).collect();
        let pairs = extract_marginals(&rg, &beliefs, &pair_queries).unwrap();
        for (pm, m) in exact.pair_marginals.iter().zip(&pairs) {
            for (s, &p) in m.table.iter().enumerate() {
                assert_abs_diff_eq!(p, pm.table[s], epsilon = 1e-9);
            }
        }
        // A query equal to a root scope returns that root's table.
        let root_scope = rg.region(0).vars.clone();
        let root = extract_marginals(&rg, &beliefs, std::slice::from_ref(&root_scope)).unwrap();
        for (a, b) in root[0].table.iter().zip(&beliefs[0].table) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        // Nobody covers {0, 8} (opposite grid corners).
        let err = extract_marginals(&rg, &beliefs, &[vec![0, 8]]).unwrap_err();
        assert!(err.to_string().contains("0 8"), "{err}");
    }

    /// Random connected graph on `n` vertices: a random tree plus extra
    /// random edges.
    fn random_connected_graph(n: usize, extra: usize, seed: u64) -> Vec<(usize, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edges: Vec<(usize, usize)> = (1..n)
            .map(|v| {
                let p = rng.gen_range(0..v);
                (p, v)
            })
            .collect();
        let mut tries = 0;
        while edges.len() < n - 1 + extra && tries < 50 {
            tries += 1;
            let a = rng.gen_range(0..n);
            let b = rng.gen_range(0..n);
            if a == b {
                continue;
            }
            let e = (a.min(b), a.max(b));
            if !edges.contains(&e) {
                edges.push(e);
            }
        }
        edges
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn general_construction_is_valid_on_random_graphs(
            n in 4usize..9,
            extra in 1usize..5,
            seed in 0u64..1000,
        ) {
            let edges = random_connected_graph(n, extra, seed);
            let roots = root_regions_general(n, &edges).unwrap();
            prop_assert_eq!(roots.cycles.len(), edges.len() - n + 1);
            for &(a, b) in &edges {
                prop_assert!(
                    roots.all().iter().any(|r| r.contains(&a) && r.contains(&b))
                );
            }
            let model = custom_model(n, &edges, seed ^ 0xabcd);
            let fg = model.to_factor_graph();
            let rg = cluster_variation(&fg, &roots.all()).unwrap();
            let report = check_validity(&rg, &fg);
            prop_assert!(report.valid);
        }

        #[test]
        fn counting_numbers_sum_to_variable_count(
            n in 4usize..9,
            extra in 0usize..4,
            seed in 0u64..1000,
        ) {
            let edges = random_connected_graph(n, extra, seed);
            let model = custom_model(n, &edges, seed ^ 0x1234);
            let fg = model.to_factor_graph();
            let rg = bethe_region_graph(&fg).unwrap();
            let weighted: i64 = rg
                .regions()
                .iter()
                .map(|r| r.counting_number * r.vars.len() as i64)
                .sum();
            prop_assert_eq!(weighted, n as i64);
        }
    }
}
