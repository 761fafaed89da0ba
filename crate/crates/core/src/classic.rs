//! Baseline inference on factor graphs: mean field, loopy belief
//! propagation with optional damping, and the Bethe free energy.
//!
//! Both solvers return the shared [`InferenceResult`] carrying univariate
//! beliefs, per-coupling pairwise beliefs, a free-energy estimate read as
//! −log Ẑ, and convergence bookkeeping. Loopy BP runs synchronously (every
//! message updated from the previous iterate) so runs are deterministic,
//! and damping mixes old and new messages in the probability domain.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::exact::PairMarginal;
use crate::model::FactorGraph;

/// Output of an approximate inference run.
#[derive(Debug, Clone)]
pub struct InferenceResult {
    /// One normalized K-vector per variable.
    pub node_beliefs: Vec<Vec<f64>>,
    /// One normalized table per pairwise factor, in factor order.
    pub pair_beliefs: Vec<PairMarginal>,
    /// Free-energy estimate, interpreted as −log Ẑ.
    pub free_energy: f64,
    /// Sweeps performed.
    pub iterations: usize,
    /// Whether the stopping tolerance was met within the sweep budget.
    pub converged: bool,
    /// Wall-clock time of the solve.
    pub runtime_ms: f64,
}

/// Normalized messages from each factor to each variable in its scope,
/// indexed `[factor][scope position]`.
#[derive(Debug, Clone)]
pub struct MessageStore {
    messages: Vec<Vec<Vec<f64>>>,
}

impl MessageStore {
    /// Uniform messages for every (factor, variable) pair of the graph.
    pub fn uniform(fg: &FactorGraph) -> Self {
        let messages = fg
            .factors
            .iter()
            .map(|f| vec![vec![1.0 / fg.k as f64; fg.k]; f.scope.len()])
            .collect();
        MessageStore { messages }
    }

    /// Message from factor `a` to the variable at `pos` in its scope.
    pub fn message(&self, a: usize, pos: usize) -> &[f64] {
        &self.messages[a][pos]
    }
}

/// Node and factor belief tables in factor-graph order, the operands of the
/// Bethe free energy.
#[derive(Debug, Clone)]
pub struct BetheBeliefs {
    /// One K-vector per variable.
    pub node: Vec<Vec<f64>>,
    /// One table per factor (unary factors carry a K-vector).
    pub factor: Vec<Vec<f64>>,
}

/// Value of the Bethe free energy together with the outcome of the local
/// consistency check on the beliefs it was evaluated at.
#[derive(Debug, Clone, Copy)]
pub struct BetheEvaluation {
    pub value: f64,
    /// False when some factor belief disagreed with a node belief (or was
    /// unnormalized) beyond 1e-6; the value is still computed.
    pub consistent: bool,
}

fn normalize(v: &mut [f64], context: &str) -> Result<()> {
    let sum: f64 = v.iter().sum();
    if sum.is_nan() || sum <= 0.0 || !sum.is_finite() {
        return Err(Error::numeric(context));
    }
    for p in v.iter_mut() {
        *p /= sum;
    }
    Ok(())
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// Positions of each variable within each factor scope it appears in,
/// as `(factor, position)` lists per variable.
fn var_slots(fg: &FactorGraph) -> Vec<Vec<(usize, usize)>> {
    let mut slots = vec![Vec::new(); fg.n];
    for (a, f) in fg.factors.iter().enumerate() {
        for (pos, &v) in f.scope.iter().enumerate() {
            slots[v].push((a, pos));
        }
    }
    slots
}

/// Mean-field coordinate ascent.
///
/// Sweeps variables in ascending order, replacing each belief with the
/// softmax of its expected log-potentials under the current beliefs of its
/// neighbors, until the largest belief change in a sweep drops below `tol`
/// or the sweep budget runs out. The returned free energy is the
/// mean-field objective: expected energy under the product distribution
/// minus its entropy. Pairwise beliefs are the products of the node
/// beliefs.
pub fn mean_field(fg: &FactorGraph, max_iters: usize, tol: f64) -> Result<InferenceResult> {
    let start = Instant::now();
    let k = fg.k;
    let mut beliefs = vec![vec![1.0 / k as f64; k]; fg.n];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        iterations += 1;
        let mut delta: f64 = 0.0;
        for i in 0..fg.n {
            let mut logits = vec![0.0; k];
            for &a in fg.factors_of(i) {
                let f = &fg.factors[a];
                match f.scope.len() {
                    1 => {
                        for (s, logit) in logits.iter_mut().enumerate() {
                            *logit += f.log_table[s];
                        }
                    }
                    2 => {
                        let (other, i_first) = if f.scope[0] == i {
                            (f.scope[1], true)
                        } else {
                            (f.scope[0], false)
                        };
                        for (s, logit) in logits.iter_mut().enumerate() {
                            let mut expected = 0.0;
                            for (t, &q) in beliefs[other].iter().enumerate() {
                                let idx = if i_first { s * k + t } else { t * k + s };
                                expected += q * f.log_table[idx];
                            }
                            *logit += expected;
                        }
                    }
                    _ => unreachable!("factor arity is validated at construction"),
                }
            }
            let updated = softmax(&logits);
            for (new, old) in updated.iter().zip(&beliefs[i]) {
                delta = delta.max((new - old).abs());
            }
            beliefs[i] = updated;
        }
        if delta < tol {
            converged = true;
            break;
        }
    }

    // Mean-field free energy: expected energy minus product entropy.
    let mut free_energy = 0.0;
    for f in &fg.factors {
        match f.scope.len() {
            1 => {
                let b = &beliefs[f.scope[0]];
                for (s, &lp) in f.log_table.iter().enumerate() {
                    free_energy -= b[s] * lp;
                }
            }
            2 => {
                let (bi, bj) = (&beliefs[f.scope[0]], &beliefs[f.scope[1]]);
                for (s, &pi) in bi.iter().enumerate() {
                    for (t, &pj) in bj.iter().enumerate() {
                        free_energy -= pi * pj * f.log_table[s * k + t];
                    }
                }
            }
            _ => unreachable!(),
        }
    }
    for b in &beliefs {
        for &p in b {
            if p > 0.0 {
                free_energy += p * p.ln();
            }
        }
    }
    if !free_energy.is_finite() {
        return Err(Error::numeric("mean-field free energy"));
    }

    let pair_beliefs = fg
        .pairwise_factors()
        .into_iter()
        .map(|(_, i, j)| {
            let mut table = vec![0.0; k * k];
            for s in 0..k {
                for t in 0..k {
                    table[s * k + t] = beliefs[i][s] * beliefs[j][t];
                }
            }
            PairMarginal { i, j, table }
        })
        .collect();

    Ok(InferenceResult {
        node_beliefs: beliefs,
        pair_beliefs,
        free_energy,
        iterations,
        converged,
        runtime_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// One synchronous message sweep; returns the largest entry-wise change.
fn bp_sweep(
    fg: &FactorGraph,
    slots: &[Vec<(usize, usize)>],
    store: &mut MessageStore,
    damping: f64,
) -> Result<f64> {
    let k = fg.k;
    // Variable-to-factor products from the current messages.
    let incoming = |j: usize, skip: usize| -> Result<Vec<f64>> {
        let mut n = vec![1.0; k];
        for &(b, pos) in &slots[j] {
            if b == skip {
                continue;
            }
            for (s, val) in n.iter_mut().enumerate() {
                *val *= store.messages[b][pos][s];
            }
        }
        normalize(&mut n, "variable-to-factor product")?;
        Ok(n)
    };
    let mut next = store.messages.clone();
    for (a, f) in fg.factors.iter().enumerate() {
        match f.scope.len() {
            1 => {
                let mut m: Vec<f64> = f.log_table.iter().map(|&l| l.exp()).collect();
                normalize(&mut m, "unary message")?;
                next[a][0] = m;
            }
            2 => {
                let (i, j) = (f.scope[0], f.scope[1]);
                let n_j = incoming(j, a)?;
                let n_i = incoming(i, a)?;
                let mut to_i = vec![0.0; k];
                let mut to_j = vec![0.0; k];
                for s in 0..k {
                    for t in 0..k {
                        let psi = f.log_table[s * k + t].exp();
                        to_i[s] += psi * n_j[t];
                        to_j[t] += psi * n_i[s];
                    }
                }
                normalize(&mut to_i, "factor-to-variable message")?;
                normalize(&mut to_j, "factor-to-variable message")?;
                next[a][0] = to_i;
                next[a][1] = to_j;
            }
            _ => unreachable!(),
        }
    }
    let mut delta: f64 = 0.0;
    for (a, f) in next.iter_mut().enumerate() {
        for (pos, m) in f.iter_mut().enumerate() {
            for (s, val) in m.iter_mut().enumerate() {
                let mixed = (1.0 - damping) * *val + damping * store.messages[a][pos][s];
                delta = delta.max((mixed - store.messages[a][pos][s]).abs());
                *val = mixed;
            }
            if m.iter().any(|&p| p.is_nan() || p <= 0.0) {
                return Err(Error::numeric("message positivity"));
            }
        }
    }
    store.messages = std::mem::take(&mut next);
    Ok(delta)
}

/// Node and factor beliefs implied by a message store.
fn bp_beliefs(
    fg: &FactorGraph,
    slots: &[Vec<(usize, usize)>],
    store: &MessageStore,
) -> Result<BetheBeliefs> {
    let k = fg.k;
    let mut node = Vec::with_capacity(fg.n);
    for slots_i in slots.iter() {
        let mut b = vec![1.0; k];
        for &(a, pos) in slots_i {
            for (s, val) in b.iter_mut().enumerate() {
                *val *= store.messages[a][pos][s];
            }
        }
        normalize(&mut b, "node belief")?;
        node.push(b);
    }
    let mut factor = Vec::with_capacity(fg.factors.len());
    for (a, f) in fg.factors.iter().enumerate() {
        match f.scope.len() {
            1 => {
                let i = f.scope[0];
                let mut b = vec![0.0; k];
                for (s, val) in b.iter_mut().enumerate() {
                    let mut n = f.log_table[s].exp();
                    for &(bf, pos) in &slots[i] {
                        if bf != a {
                            n *= store.messages[bf][pos][s];
                        }
                    }
                    *val = n;
                }
                normalize(&mut b, "unary factor belief")?;
                factor.push(b);
            }
            2 => {
                let (i, j) = (f.scope[0], f.scope[1]);
                let mut n_i = vec![1.0; k];
                let mut n_j = vec![1.0; k];
                for &(bf, pos) in &slots[i] {
                    if bf != a {
                        for (s, val) in n_i.iter_mut().enumerate() {
                            *val *= store.messages[bf][pos][s];
                        }
                    }
                }
                for &(bf, pos) in &slots[j] {
                    if bf != a {
                        for (s, val) in n_j.iter_mut().enumerate() {
                            *val *= store.messages[bf][pos][s];
                        }
                    }
                }
                let mut b = vec![0.0; k * k];
                for s in 0..k {
                    for t in 0..k {
                        b[s * k + t] = f.log_table[s * k + t].exp() * n_i[s] * n_j[t];
                    }
                }
                normalize(&mut b, "pairwise factor belief")?;
                factor.push(b);
            }
            _ => unreachable!(),
        }
    }
    Ok(BetheBeliefs { node, factor })
}

/// Loopy belief propagation with synchronous updates and probability-domain
/// damping (`new = (1−damping)·update + damping·old`).
///
/// Messages start uniform and iterate until the largest message change in a
/// sweep drops below `tol` or `max_iters` sweeps elapse; non-convergence is
/// reported through the flag, while numeric blow-ups (NaN or vanishing
/// normalizers) are errors. The free energy is the Bethe free energy of the
/// final beliefs.
pub fn loopy_bp(
    fg: &FactorGraph,
    max_iters: usize,
    tol: f64,
    damping: f64,
) -> Result<InferenceResult> {
    if !(0.0..1.0).contains(&damping) {
        return Err(Error::contract(format!(
            "damping must lie in [0, 1), got {damping}"
        )));
    }
    let start = Instant::now();
    let slots = var_slots(fg);
    let mut store = MessageStore::uniform(fg);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        iterations += 1;
        let delta = bp_sweep(fg, &slots, &mut store, damping)?;
        if delta < tol {
            converged = true;
            break;
        }
    }
    let beliefs = bp_beliefs(fg, &slots, &store)?;
    let energy = bethe_free_energy(fg, &beliefs)?;
    let pair_beliefs = fg
        .pairwise_factors()
        .into_iter()
        .map(|(a, i, j)| PairMarginal {
            i,
            j,
            table: beliefs.factor[a].clone(),
        })
        .collect();
    Ok(InferenceResult {
        node_beliefs: beliefs.node,
        pair_beliefs,
        free_energy: energy.value,
        iterations,
        converged,
        runtime_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Bethe free energy of a belief set:
/// `Σ_a Σ b_a ln(b_a/ψ_a) − Σ_i (d_i−1) Σ b_i ln b_i`
/// with `d_i` the number of factors touching variable `i`.
///
/// Factor beliefs are checked against the node beliefs for local
/// consistency within 1e-6; disagreement clears the `consistent` flag but
/// the value is still computed. Zero-probability entries contribute no
/// entropy.
pub fn bethe_free_energy(fg: &FactorGraph, beliefs: &BetheBeliefs) -> Result<BetheEvaluation> {
    let k = fg.k;
    if beliefs.node.len() != fg.n || beliefs.factor.len() != fg.factors.len() {
        return Err(Error::contract(format!(
            "belief set shaped {}/{} for a graph with {} variables and {} factors",
            beliefs.node.len(),
            beliefs.factor.len(),
            fg.n,
            fg.factors.len()
        )));
    }
    let mut consistent = true;
    for (i, b) in beliefs.node.iter().enumerate() {
        if b.len() != k {
            return Err(Error::contract(format!("node belief {i} has wrong arity")));
        }
        let sum: f64 = b.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || b.iter().any(|&p| p.is_nan() || p < 0.0) {
            consistent = false;
        }
    }
    let mut value = 0.0;
    for (a, f) in fg.factors.iter().enumerate() {
        let b = &beliefs.factor[a];
        if b.len() != f.log_table.len() {
            return Err(Error::contract(format!(
                "factor belief {a} has {} entries, factor table has {}",
                b.len(),
                f.log_table.len()
            )));
        }
        let sum: f64 = b.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || b.iter().any(|&p| p.is_nan() || p < 0.0) {
            consistent = false;
        }
        // Marginal agreement with the node beliefs.
        for (pos, &v) in f.scope.iter().enumerate() {
            for s in 0..k {
                let mut marg = 0.0;
                for (idx, &p) in b.iter().enumerate() {
                    let state = if f.scope.len() == 2 {
                        if pos == 0 {
                            idx / k
                        } else {
                            idx % k
                        }
                    } else {
                        idx
                    };
                    if state == s {
                        marg += p;
                    }
                }
                if (marg - beliefs.node[v][s]).abs() > 1e-6 {
                    consistent = false;
                }
            }
        }
        for (idx, &p) in b.iter().enumerate() {
            if p > 0.0 {
                value += p * (p.ln() - f.log_table[idx]);
            }
        }
    }
    for (i, b) in beliefs.node.iter().enumerate() {
        let d = fg.degree(i) as f64;
        let mut entropy_term = 0.0;
        for &p in b {
            if p > 0.0 {
                entropy_term += p * p.ln();
            }
        }
        value -= (d - 1.0) * entropy_term;
    }
    if !value.is_finite() {
        return Err(Error::numeric("Bethe free energy"));
    }
    Ok(BetheEvaluation { value, consistent })
}

/// Deterministic random belief set that is locally consistent by
/// construction: node beliefs are sampled from a Dirichlet-like stick
/// split, and each binary pairwise belief gets a random joint entry within
/// the bounds its margins allow. Handy for exercising free-energy
/// evaluations; for k > 2 the pairwise tables fall back to products of the
/// node beliefs.
pub fn random_consistent_beliefs(fg: &FactorGraph, seed: u64) -> BetheBeliefs {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = fg.k;
    let node: Vec<Vec<f64>> = (0..fg.n)
        .map(|_| {
            let mut b: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
            let sum: f64 = b.iter().sum();
            for p in &mut b {
                *p /= sum;
            }
            b
        })
        .collect();
    let factor = fg
        .factors
        .iter()
        .map(|f| match f.scope.len() {
            1 => node[f.scope[0]].clone(),
            2 => {
                let (bi, bj) = (&node[f.scope[0]], &node[f.scope[1]]);
                if k == 2 {
                    let (p, q) = (bi[1], bj[1]);
                    let lo = (p + q - 1.0).max(0.0);
                    let hi = p.min(q);
                    let t = rng.gen_range(0.0..1.0) * (hi - lo) + lo;
                    vec![1.0 - p - q + t, q - t, p - t, t]
                } else {
                    let mut table = vec![0.0; k * k];
                    for s in 0..k {
                        for u in 0..k {
                            table[s * k + u] = bi[s] * bj[u];
                        }
                    }
                    table
                }
            }
            _ => unreachable!(),
        })
        .collect();
    BetheBeliefs { node, factor }
}
