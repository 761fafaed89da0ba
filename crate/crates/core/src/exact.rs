//! Brute-force ground truth: exact partition function, marginals, samplers,
//! and data likelihoods by full enumeration.
//!
//! States are visited in reflected mixed-radix Gray order, so each step flips
//! a single variable and the unnormalized log score is maintained
//! incrementally in O(degree) per step (with periodic recomputation to shed
//! floating-point drift). The partition function uses a streaming
//! log-sum-exp: one pass finds the maximum log score, a second accumulates
//! shifted weights. Everything here is deliberately simple and serves as the
//! oracle the approximate methods are measured against.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::FactorGraph;

/// Hard cap on enumerated joint states (2^25; a 5×5 binary grid exactly
/// fits). Anything larger is refused rather than silently churning.
pub const MAX_STATES: u128 = 1 << 25;

/// Exact inference output: log Z plus all univariate and pairwise marginals.
#[derive(Clone, Debug)]
pub struct ExactResult {
    pub log_z: f64,
    /// `node_marginals[i][s]` = p(x_i = s); one row per variable.
    pub node_marginals: Vec<Vec<f64>>,
    /// One entry per pairwise factor, in factor order.
    pub pair_marginals: Vec<PairMarginal>,
}

/// Joint marginal over one pairwise factor's scope, row-major with `i` the
/// most significant index.
#[derive(Clone, Debug)]
pub struct PairMarginal {
    pub i: usize,
    pub j: usize,
    pub table: Vec<f64>,
}

/// Loopless reflected mixed-radix Gray enumeration: each call reports one
/// digit change (variable, old state, new state) until all k^n assignments
/// have been visited.
struct Gray {
    radix: usize,
    n: usize,
    digits: Vec<usize>,
    dirs: Vec<isize>,
    focus: Vec<usize>,
}

impl Gray {
    fn new(n: usize, radix: usize) -> Self {
        Gray {
            radix,
            n,
            digits: vec![0; n],
            dirs: vec![1; n],
            focus: (0..=n).collect(),
        }
    }

    fn next_flip(&mut self) -> Option<(usize, usize, usize)> {
        let j = self.focus[0];
        self.focus[0] = 0;
        if j == self.n {
            return None;
        }
        let old = self.digits[j];
        let new = (old as isize + self.dirs[j]) as usize;
        self.digits[j] = new;
        if new == 0 || new == self.radix - 1 {
            self.dirs[j] = -self.dirs[j];
            self.focus[j] = self.focus[j + 1];
            self.focus[j + 1] = j + 1;
        }
        Some((j, old, new))
    }
}

/// Maintains Σ_a log ψ_a(x_a) across single-variable flips.
struct Scorer<'a> {
    fg: &'a FactorGraph,
    /// For each variable: (factor id, stride of this variable in its table).
    per_var: Vec<Vec<(usize, usize)>>,
    /// Current flat table index per factor.
    idx: Vec<usize>,
    score: f64,
    steps: u32,
}

impl<'a> Scorer<'a> {
    fn new(fg: &'a FactorGraph) -> Self {
        let mut per_var = vec![Vec::new(); fg.n];
        for (a, f) in fg.factors.iter().enumerate() {
            for (p, &v) in f.scope.iter().enumerate() {
                let stride = fg.k.pow((f.scope.len() - 1 - p) as u32);
                per_var[v].push((a, stride));
            }
        }
        let score = fg.factors.iter().map(|f| f.log_table[0]).sum();
        Scorer { fg, per_var, idx: vec![0; fg.factors.len()], score, steps: 0 }
    }

    fn score(&self) -> f64 {
        self.score
    }

    fn apply(&mut self, var: usize, old: usize, new: usize) {
        let delta = new as isize - old as isize;
        for &(a, stride) in &self.per_var[var] {
            let i0 = self.idx[a];
            let i1 = (i0 as isize + delta * stride as isize) as usize;
            let t = &self.fg.factors[a].log_table;
            self.score += t[i1] - t[i0];
            self.idx[a] = i1;
        }
        self.steps += 1;
        if self.steps == 1 << 16 {
            // Millions of incremental +/- updates accumulate rounding noise;
            // a periodic exact recomputation keeps it bounded.
            self.score = self
                .fg
                .factors
                .iter()
                .zip(&self.idx)
                .map(|(f, &i)| f.log_table[i])
                .sum();
            self.steps = 0;
        }
    }
}

/// Like [`Scorer`] but tracks flat indices into arbitrary scope tables and
/// accumulates weight into them.
struct ScopeTracker {
    per_var: Vec<Vec<(usize, usize)>>,
    idx: Vec<usize>,
    tables: Vec<Vec<f64>>,
}

impl ScopeTracker {
    fn new(n: usize, k: usize, scopes: &[Vec<usize>]) -> Self {
        let mut per_var = vec![Vec::new(); n];
        let mut tables = Vec::with_capacity(scopes.len());
        for (t, scope) in scopes.iter().enumerate() {
            for (p, &v) in scope.iter().enumerate() {
                let stride = k.pow((scope.len() - 1 - p) as u32);
                per_var[v].push((t, stride));
            }
            tables.push(vec![0.0; k.pow(scope.len() as u32)]);
        }
        ScopeTracker { per_var, idx: vec![0; scopes.len()], tables }
    }

    fn apply(&mut self, var: usize, old: usize, new: usize) {
        let delta = new as isize - old as isize;
        for &(t, stride) in &self.per_var[var] {
            self.idx[t] = (self.idx[t] as isize + delta * stride as isize) as usize;
        }
    }

    fn accumulate(&mut self, w: f64) {
        for (table, &i) in self.tables.iter_mut().zip(&self.idx) {
            table[i] += w;
        }
    }
}

fn guard_capacity(fg: &FactorGraph) -> Result<()> {
    let states = fg.state_count();
    if states > MAX_STATES {
        return Err(Error::Capacity { states, limit: MAX_STATES });
    }
    Ok(())
}

/// Maximum of the unnormalized log score over all assignments.
fn max_log_score(fg: &FactorGraph) -> f64 {
    let mut scorer = Scorer::new(fg);
    let mut gray = Gray::new(fg.n, fg.k);
    let mut max = scorer.score();
    while let Some((v, old, new)) = gray.next_flip() {
        scorer.apply(v, old, new);
        if scorer.score() > max {
            max = scorer.score();
        }
    }
    max
}

/// Exact joint marginals over the given scopes (each strictly increasing).
/// Every returned table is normalized to sum 1 and laid out row-major with
/// the first scope variable most significant.
pub fn exact_scope_marginals(fg: &FactorGraph, scopes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
    guard_capacity(fg)?;
    for scope in scopes {
        if scope.is_empty() || scope.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::contract(format!("scope {:?} must be strictly increasing", scope)));
        }
        if *scope.last().unwrap() >= fg.n {
            return Err(Error::contract(format!("scope {:?} out of range", scope)));
        }
    }
    let max = max_log_score(fg);
    let mut scorer = Scorer::new(fg);
    let mut gray = Gray::new(fg.n, fg.k);
    let mut tracker = ScopeTracker::new(fg.n, fg.k, scopes);
    tracker.accumulate((scorer.score() - max).exp());
    while let Some((v, old, new)) = gray.next_flip() {
        scorer.apply(v, old, new);
        tracker.apply(v, old, new);
        tracker.accumulate((scorer.score() - max).exp());
    }
    let mut tables = tracker.tables;
    for t in &mut tables {
        let z: f64 = t.iter().sum();
        if z.is_nan() || z <= 0.0 || !z.is_finite() {
            return Err(Error::numeric("scope marginal normalization"));
        }
        for v in t.iter_mut() {
            *v /= z;
        }
    }
    Ok(tables)
}

/// Exact log partition function.
pub fn exact_log_z(fg: &FactorGraph) -> Result<f64> {
    guard_capacity(fg)?;
    let max = max_log_score(fg);
    let mut scorer = Scorer::new(fg);
    let mut gray = Gray::new(fg.n, fg.k);
    let mut z = (scorer.score() - max).exp();
    while let Some((v, old, new)) = gray.next_flip() {
        scorer.apply(v, old, new);
        z += (scorer.score() - max).exp();
    }
    let log_z = max + z.ln();
    if !log_z.is_finite() {
        return Err(Error::numeric("log partition function"));
    }
    Ok(log_z)
}

/// Exact log Z plus every univariate marginal and the joint marginal of each
/// pairwise factor.
pub fn exact_inference(fg: &FactorGraph) -> Result<ExactResult> {
    let mut scopes: Vec<Vec<usize>> = (0..fg.n).map(|i| vec![i]).collect();
    let pairs = fg.pairwise_factors();
    for &(_, i, j) in &pairs {
        scopes.push(vec![i.min(j), i.max(j)]);
    }
    let mut tables = exact_scope_marginals(fg, &scopes)?;
    let log_z = exact_log_z(fg)?;
    let pair_tables = tables.split_off(fg.n);
    let pair_marginals = pairs
        .iter()
        .zip(pair_tables)
        .map(|(&(_, i, j), mut table)| {
            if i > j {
                // Tables were accumulated over the sorted scope; present them
                // in the factor's own (i, j) order.
                table = transpose_square(&table, fg.k);
                PairMarginal { i, j, table }
            } else {
                PairMarginal { i, j, table }
            }
        })
        .collect();
    Ok(ExactResult { log_z, node_marginals: tables, pair_marginals })
}

fn transpose_square(t: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; t.len()];
    for a in 0..k {
        for b in 0..k {
            out[b * k + a] = t[a * k + b];
        }
    }
    out
}

/// Independent draws from the exact joint distribution.
///
/// Enumerates states once, walking a sorted list of uniform thresholds; this
/// is a categorical draw over all k^n assignments without materializing the
/// full probability vector.
pub fn exact_sample(fg: &FactorGraph, count: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    guard_capacity(fg)?;
    let max = max_log_score(fg);
    // Total shifted mass, so thresholds can be drawn on the true scale.
    let mut scorer = Scorer::new(fg);
    let mut gray = Gray::new(fg.n, fg.k);
    let mut total = (scorer.score() - max).exp();
    while let Some((v, old, new)) = gray.next_flip() {
        scorer.apply(v, old, new);
        total += (scorer.score() - max).exp();
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut thresholds: Vec<(f64, usize)> =
        (0..count).map(|t| (rng.gen::<f64>() * total, t)).collect();
    thresholds.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite thresholds"));

    let mut samples = vec![Vec::new(); count];
    let mut scorer = Scorer::new(fg);
    let mut gray = Gray::new(fg.n, fg.k);
    let mut x = vec![0usize; fg.n];
    let mut cum = (scorer.score() - max).exp();
    let mut next = 0usize;
    loop {
        while next < count && thresholds[next].0 < cum {
            samples[thresholds[next].1] = x.clone();
            next += 1;
        }
        if next == count {
            break;
        }
        match gray.next_flip() {
            Some((v, old, new)) => {
                x[v] = new;
                scorer.apply(v, old, new);
                cum += (scorer.score() - max).exp();
            }
            None => {
                // Rounding can leave the last thresholds just above the final
                // cumulative sum; they belong to the last state.
                for t in &thresholds[next..] {
                    samples[t.1] = x.clone();
                }
                break;
            }
        }
    }
    Ok(samples)
}

/// Gibbs sampler with systematic sweeps (variables in ascending order).
/// Records one sample every `thin` sweeps after `burn_in` sweeps.
pub fn gibbs_sample(
    fg: &FactorGraph,
    count: usize,
    burn_in: usize,
    thin: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if thin == 0 {
        return Err(Error::contract("thinning interval must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<usize> = (0..fg.n).map(|_| rng.gen_range(0..fg.k)).collect();
    let mut samples = Vec::with_capacity(count);

    // Per-variable (factor, stride) pairs, as in the enumeration scorer.
    let mut per_var = vec![Vec::new(); fg.n];
    for (a, f) in fg.factors.iter().enumerate() {
        for (p, &v) in f.scope.iter().enumerate() {
            per_var[v].push((a, fg.k.pow((f.scope.len() - 1 - p) as u32)));
        }
    }

    let mut logits = vec![0.0; fg.k];
    let mut probs = vec![0.0; fg.k];
    let total_sweeps = burn_in + count.saturating_mul(thin);
    let mut recorded = 0;
    for sweep in 0..total_sweeps {
        for i in 0..fg.n {
            for (s, logit) in logits.iter_mut().enumerate() {
                let mut l = 0.0;
                for &(a, stride) in &per_var[i] {
                    let f = &fg.factors[a];
                    let base = f.index_of(&x, fg.k);
                    let idx = (base as isize
                        + (s as isize - x[i] as isize) * stride as isize)
                        as usize;
                    l += f.log_table[idx];
                }
                *logit = l;
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &l) in probs.iter_mut().zip(logits.iter()) {
                *p = (l - m).exp();
                z += *p;
            }
            let u: f64 = rng.gen::<f64>() * z;
            let mut acc = 0.0;
            let mut pick = fg.k - 1;
            for (s, &p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = s;
                    break;
                }
            }
            x[i] = pick;
        }
        if sweep >= burn_in && (sweep - burn_in).is_multiple_of(thin) && recorded < count {
            samples.push(x.clone());
            recorded += 1;
        }
    }
    Ok(samples)
}

/// Average negative log likelihood of a dataset under the exact model:
/// mean(log Z − log p̃(x)).
pub fn nll_exact(fg: &FactorGraph, samples: &[Vec<usize>]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::contract("empty dataset"));
    }
    let log_z = exact_log_z(fg)?;
    let mean_score: f64 =
        samples.iter().map(|x| fg.log_score(x)).sum::<f64>() / samples.len() as f64;
    Ok(log_z - mean_score)
}
