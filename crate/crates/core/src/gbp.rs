//! Parent-to-child generalized belief propagation on region graphs.
//!
//! Each region-graph edge (P → R) carries a message over R's variables.
//! The update for that message divides a marginalized product of the
//! potentials private to P and the messages entering P's down-set from
//! outside (the set N(P,R)) by the messages running within the down-set
//! into R (the set H(P,R), excluding the edge itself). Updates run
//! sequentially in level order with a fixed region-id tiebreak, with
//! probability-domain damping, so runs are deterministic.

use std::collections::HashMap;
use std::time::Instant;

use crate::classic::InferenceResult;
use crate::error::{Error, Result};
use crate::exact::PairMarginal;
use crate::model::FactorGraph;
use crate::regiongraph::{
    extract_marginals, region_energy_table, region_free_energy, BeliefTable, RegionGraph,
};

/// Messages and their update-rule index sets, one per region-graph edge.
///
/// `n_sets[e]` and `h_sets[e]` hold edge indices into `edges`:
/// for e = (P, R), N(P,R) collects the edges (I, J) with J inside P's
/// down-set but not R's and I outside P's down-set, and H(P,R) collects
/// the edges (I, J) with J in R's down-set and I in P's down-set but not
/// R's, minus (P, R) itself.
#[derive(Debug, Clone)]
pub struct RegionMessageStore {
    edges: Vec<(usize, usize)>,
    messages: Vec<Vec<f64>>,
    n_sets: Vec<Vec<usize>>,
    h_sets: Vec<Vec<usize>>,
    clamp_events: usize,
}

impl RegionMessageStore {
    /// Edges in update order: by child level, then child id, then parent id.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Current message on edge `e`, a normalized table over the child scope.
    pub fn message(&self, e: usize) -> &[f64] {
        &self.messages[e]
    }

    /// Edge indices making up N(P,R) for edge `e`.
    pub fn n_set(&self, e: usize) -> &[usize] {
        &self.n_sets[e]
    }

    /// Edge indices making up H(P,R) for edge `e`.
    pub fn h_set(&self, e: usize) -> &[usize] {
        &self.h_sets[e]
    }

    /// How many times a division had to clamp a near-zero message entry.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    fn reset_uniform(&mut self, rg: &RegionGraph, k: usize) {
        for (e, &(_, r)) in self.edges.iter().enumerate() {
            let len = k.pow(rg.region(r).vars.len() as u32);
            self.messages[e] = vec![1.0 / len as f64; len];
        }
        self.clamp_events = 0;
    }
}

/// Builds the message store for a region graph: uniform initial messages
/// plus the N and H index sets of every edge, computed from down-set
/// membership exactly as defined on [`RegionMessageStore`].
pub fn build_message_sets(rg: &RegionGraph) -> RegionMessageStore {
    let mut edges: Vec<(usize, usize)> = rg.edges().to_vec();
    edges.sort_by_key(|&(p, r)| (rg.region(r).level, r, p));
    let down: Vec<Vec<bool>> = (0..rg.len())
        .map(|r| {
            let mut mask = vec![false; rg.len()];
            for d in rg.descendants_and_self(r) {
                mask[d] = true;
            }
            mask
        })
        .collect();
    let mut n_sets = Vec::with_capacity(edges.len());
    let mut h_sets = Vec::with_capacity(edges.len());
    for &(p, r) in &edges {
        let mut n = Vec::new();
        let mut h = Vec::new();
        for (e2, &(i, j)) in edges.iter().enumerate() {
            if down[p][j] && !down[r][j] && !down[p][i] {
                n.push(e2);
            }
            if (i, j) != (p, r) && down[r][j] && down[p][i] && !down[r][i] {
                h.push(e2);
            }
        }
        n_sets.push(n);
        h_sets.push(h);
    }
    let messages = edges.iter().map(|_| Vec::new()).collect();
    let mut store = RegionMessageStore {
        edges,
        messages,
        n_sets,
        h_sets,
        clamp_events: 0,
    };
    // Message tables need the state count; regions store only scopes, so
    // default to binary and let gbp_run resize for the model's actual k.
    store.messages = store
        .edges
        .iter()
        .map(|&(_, r)| {
            let len = 2usize.pow(rg.region(r).vars.len() as u32);
            vec![1.0 / len as f64; len]
        })
        .collect();
    store
}

/// For sorted scopes `inner ⊆ outer`, the map from joint indices over
/// `outer` to joint indices over `inner`.
fn projection(outer: &[usize], inner: &[usize], k: usize) -> Vec<usize> {
    let positions: Vec<usize> = inner
        .iter()
        .map(|v| outer.iter().position(|o| o == v).expect("inner ⊆ outer"))
        .collect();
    let m = outer.len();
    let len = k.pow(m as u32);
    let mut map = vec![0usize; len];
    let mut states = vec![0usize; m];
    for (idx, slot) in map.iter_mut().enumerate() {
        let mut rest = idx;
        for pos in (0..m).rev() {
            states[pos] = rest % k;
            rest /= k;
        }
        let mut out = 0;
        for &pos in &positions {
            out = out * k + states[pos];
        }
        *slot = out;
    }
    map
}

/// Precomputed tables for one edge update.
struct EdgePlan {
    /// Log-potentials private to the parent (attached to P but not R),
    /// tabulated over the parent scope.
    log_psi: Vec<f64>,
    /// (edge, projection from parent-scope indices) per N(P,R) member.
    n_proj: Vec<(usize, Vec<usize>)>,
    /// Parent-scope index → child-scope index, for the marginalization.
    sum_map: Vec<usize>,
    /// (edge, projection from child-scope indices) per H(P,R) member.
    h_proj: Vec<(usize, Vec<usize>)>,
}

fn edge_plans(rg: &RegionGraph, fg: &FactorGraph, store: &RegionMessageStore) -> Vec<EdgePlan> {
    let k = fg.k;
    store
        .edges
        .iter()
        .enumerate()
        .map(|(e, &(p, r))| {
            let parent = rg.region(p);
            let child = rg.region(r);
            let plen = k.pow(parent.vars.len() as u32);
            let mut log_psi = vec![0.0; plen];
            for &a in &parent.factors {
                if child.factors.binary_search(&a).is_ok() {
                    continue;
                }
                let f = &fg.factors[a];
                let proj = projection(&parent.vars, &f.scope, k);
                for (idx, slot) in log_psi.iter_mut().enumerate() {
                    *slot += f.log_table[proj[idx]];
                }
            }
            let n_proj = store.n_sets[e]
                .iter()
                .map(|&ne| {
                    let (_, j) = store.edges[ne];
                    (ne, projection(&parent.vars, &rg.region(j).vars, k))
                })
                .collect();
            let sum_map = projection(&parent.vars, &child.vars, k);
            let h_proj = store.h_sets[e]
                .iter()
                .map(|&he| {
                    let (_, j) = store.edges[he];
                    (he, projection(&child.vars, &rg.region(j).vars, k))
                })
                .collect();
            EdgePlan {
                log_psi,
                n_proj,
                sum_map,
                h_proj,
            }
        })
        .collect()
}

/// Recomputes one message in place (with damping) and returns the largest
/// entry change.
fn refresh_edge(
    store: &mut RegionMessageStore,
    plans: &[EdgePlan],
    e: usize,
    damping: f64,
) -> Result<f64> {
    let plan = &plans[e];
    let mut work = plan.log_psi.clone();
    for (ne, proj) in &plan.n_proj {
        let m = &store.messages[*ne];
        for (idx, w) in work.iter_mut().enumerate() {
            *w += m[proj[idx]].ln();
        }
    }
    let peak = work.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !peak.is_finite() {
        return Err(Error::numeric("region message numerator"));
    }
    let out_len = store.messages[e].len();
    let mut update = vec![0.0; out_len];
    for (idx, &w) in work.iter().enumerate() {
        update[plan.sum_map[idx]] += (w - peak).exp();
    }
    for (he, proj) in &plan.h_proj {
        let m = &store.messages[*he];
        for (r_idx, u) in update.iter_mut().enumerate() {
            let mut denom = m[proj[r_idx]];
            if denom < 1e-12 {
                denom = 1e-12;
                store.clamp_events += 1;
            }
            *u /= denom;
        }
    }
    let sum: f64 = update.iter().sum();
    if sum.is_nan() || sum <= 0.0 || !sum.is_finite() {
        return Err(Error::numeric("region message normalization"));
    }
    for (s, u) in update.iter_mut().enumerate() {
        *u = (1.0 - damping) * (*u / sum) + damping * store.messages[e][s];
    }
    if update.iter().any(|&p| p.is_nan()) {
        return Err(Error::numeric("region message positivity"));
    }
    // Near-deterministic potentials can underflow entries all the way
    // to zero; floor them so messages stay strictly positive, and
    // renormalize.
    let mut floored = false;
    for u in update.iter_mut() {
        if *u < 1e-12 {
            *u = 1e-12;
            floored = true;
        }
    }
    if floored {
        store.clamp_events += 1;
        let sum: f64 = update.iter().sum();
        for u in update.iter_mut() {
            *u /= sum;
        }
    }
    let mut delta: f64 = 0.0;
    for (s, &u) in update.iter().enumerate() {
        delta = delta.max((u - store.messages[e][s]).abs());
    }
    store.messages[e] = update;
    Ok(delta)
}

/// One sequential sweep over all edges; returns the largest message change.
fn gbp_sweep(store: &mut RegionMessageStore, plans: &[EdgePlan], damping: f64) -> Result<f64> {
    let mut delta: f64 = 0.0;
    for e in 0..plans.len() {
        delta = delta.max(refresh_edge(store, plans, e, damping)?);
    }
    Ok(delta)
}

/// Region beliefs implied by the current messages: each region combines its
/// attached potentials, the messages from its direct parents, and the
/// messages entering its strict descendants from parents outside its
/// down-set.
pub fn gbp_region_beliefs(
    rg: &RegionGraph,
    fg: &FactorGraph,
    store: &RegionMessageStore,
) -> Result<Vec<BeliefTable>> {
    check_store(rg, store)?;
    let k = fg.k;
    let edge_index: HashMap<(usize, usize), usize> = store
        .edges
        .iter()
        .enumerate()
        .map(|(e, &pr)| (pr, e))
        .collect();
    let mut beliefs = Vec::with_capacity(rg.len());
    for region in rg.regions() {
        let mut in_down = vec![false; rg.len()];
        for d in rg.descendants_and_self(region.id) {
            in_down[d] = true;
        }
        let energies = region_energy_table(region, fg)?;
        let mut log_b: Vec<f64> = energies.iter().map(|&e| -e).collect();
        for &p in rg.parents(region.id) {
            let e = edge_index[&(p, region.id)];
            for (idx, lb) in log_b.iter_mut().enumerate() {
                *lb += store.messages[e][idx].ln();
            }
        }
        for &d in rg.descendants(region.id) {
            for &p in rg.parents(d) {
                if in_down[p] {
                    continue;
                }
                let e = edge_index[&(p, d)];
                let proj = projection(&region.vars, &rg.region(d).vars, k);
                for (idx, lb) in log_b.iter_mut().enumerate() {
                    *lb += store.messages[e][proj[idx]].ln();
                }
            }
        }
        let peak = log_b.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !peak.is_finite() {
            return Err(Error::numeric(format!("belief of region {}", region.id)));
        }
        let table: Vec<f64> = log_b.iter().map(|&l| (l - peak).exp()).collect();
        beliefs.push(BeliefTable::from_unnormalized(
            region.vars.clone(),
            k,
            table,
        )?);
    }
    Ok(beliefs)
}

/// Total parent-child marginalization disagreement of a belief set:
/// Σ over edges (P → R) of Σ_x |Σ_{S(P)\S(R)} b_P − b_R|.
pub fn parent_child_inconsistency(rg: &RegionGraph, beliefs: &[BeliefTable]) -> Result<f64> {
    let mut total = 0.0;
    for &(p, r) in rg.edges() {
        let marg = beliefs[p].marginalize_onto(&rg.region(r).vars)?;
        for (a, b) in marg.table.iter().zip(&beliefs[r].table) {
            total += (a - b).abs();
        }
    }
    Ok(total)
}

fn check_store(rg: &RegionGraph, store: &RegionMessageStore) -> Result<()> {
    if store.edges.len() != rg.edges().len() {
        return Err(Error::contract(format!(
            "message store has {} edges, region graph has {}",
            store.edges.len(),
            rg.edges().len()
        )));
    }
    let mut a = store.edges.clone();
    let mut b = rg.edges().to_vec();
    a.sort_unstable();
    b.sort_unstable();
    if a != b {
        return Err(Error::contract(
            "message store edges do not match the region graph",
        ));
    }
    Ok(())
}

/// Runs generalized belief propagation to convergence or `max_iters`
/// sweeps, then evaluates region beliefs, the region free energy, and
/// node/pair marginals (averaged over covering regions).
///
/// Messages are (re)initialized uniform, so every run from the same inputs
/// is identical. `damping` mixes each damped update with the previous
/// message in the probability domain; 0.2 is a reasonable default on loopy
/// region graphs. Near-zero divisors are clamped at 1e-12 and counted on
/// the store rather than failing the run; true NaN or overflow is an error.
pub fn gbp_run(
    rg: &RegionGraph,
    fg: &FactorGraph,
    store: &mut RegionMessageStore,
    max_iters: usize,
    tol: f64,
    damping: f64,
) -> Result<InferenceResult> {
    if !(0.0..1.0).contains(&damping) {
        return Err(Error::contract(format!(
            "damping must lie in [0, 1), got {damping}"
        )));
    }
    check_store(rg, store)?;
    let start = Instant::now();
    store.reset_uniform(rg, fg.k);
    let plans = edge_plans(rg, fg, store);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        iterations += 1;
        let delta = gbp_sweep(store, &plans, damping)?;
        if delta < tol {
            converged = true;
            break;
        }
    }
    let beliefs = gbp_region_beliefs(rg, fg, store)?;
    let free_energy = region_free_energy(rg, &beliefs, fg)?;
    let mut queries: Vec<Vec<usize>> = (0..fg.n).map(|i| vec![i]).collect();
    let pairs = fg.pairwise_factors();
    queries.extend(pairs.iter().map(|&(_, i, j)| vec![i, j]));
    let tables = extract_marginals(rg, &beliefs, &queries)?;
    let node_beliefs = tables[..fg.n].iter().map(|t| t.table.clone()).collect();
    let pair_beliefs = pairs
        .iter()
        .zip(&tables[fg.n..])
        .map(|(&(_, i, j), t)| PairMarginal {
            i,
            j,
            table: t.table.clone(),
        })
        .collect();
    Ok(InferenceResult {
        node_beliefs,
        pair_beliefs,
        free_energy,
        iterations,
        converged,
        runtime_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}
