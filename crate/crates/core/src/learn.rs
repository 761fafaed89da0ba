//! Maximum-likelihood learning of pairwise binary models with a pluggable
//! estimate of the log partition function.
//!
//! The negative log-likelihood of a dataset splits into log Z(θ) minus the
//! mean unnormalized log-score, so its gradient in the natural parameters is
//! a difference of moments: E_model[s_i s_j] − E_data[s_i s_j] per coupling
//! and E_model[s_i] − E_data[s_i] per field. Every backend supplies the two
//! ingredients — a log Ẑ and the model moments — in its own way: exact
//! enumeration, mean-field or belief-propagation beliefs, generalized BP
//! region beliefs, or the region network's descended beliefs. Learning then
//! alternates: the network backend takes a fixed number of optimizer steps
//! on its own parameters between consecutive model updates (warm-starting
//! from the previous state), while the other backends re-solve at every
//! step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::HashMap;

use crate::classic::{loopy_bp, mean_field, InferenceResult};
use crate::error::{Error, Result};
use crate::exact::{exact_inference, exact_log_z, PairMarginal};
use crate::gbp::{build_message_sets, gbp_run, RegionMessageStore};
use crate::model::{
    serialize_model, spin, states_of_spins, FactorGraph, PairwiseMRF,
};
use crate::regiongraph::{region_graph_for_model, BeliefTable, RegionGraph};
use crate::renn::{
    build_renn_model, model_beliefs, renn_objective, train_epoch, RennConfig, RennModel,
};
use crate::tensor::Adam;

/// Largest node count for which the per-epoch exact log Z column is filled
/// in: 2^20 states enumerate in well under a second, so the oracle check
/// stays a negligible fraction of an epoch.
const ORACLE_EVAL_MAX_VARS: usize = 20;

/// Inference engine supplying log Ẑ and model moments during learning.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backend {
    /// Brute-force enumeration: exact log Z and exact moments.
    Exact,
    /// Naive mean field.
    MeanField,
    /// Loopy belief propagation with undamped updates.
    LoopyBp,
    /// Loopy belief propagation with damped message updates.
    DampedBp,
    /// Generalized belief propagation on the model's default region graph,
    /// with messages warm-started across model updates.
    Gbp,
    /// Region-network free-energy minimization, trained incrementally
    /// across model updates.
    Renn,
}

impl Backend {
    /// Parses the command-line spelling of a backend.
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "exact" => Ok(Self::Exact),
            "mf" => Ok(Self::MeanField),
            "lbp" => Ok(Self::LoopyBp),
            "dbp" => Ok(Self::DampedBp),
            "gbp" => Ok(Self::Gbp),
            "renn" => Ok(Self::Renn),
            other => Err(Error::contract(format!(
                "unknown backend '{other}'; expected exact, mf, lbp, dbp, gbp, or renn"
            ))),
        }
    }

    /// The command-line spelling.
    pub fn name(self) -> &'static str {
        match self {
            Self::Exact => "exact",
            Self::MeanField => "mf",
            Self::LoopyBp => "lbp",
            Self::DampedBp => "dbp",
            Self::Gbp => "gbp",
            Self::Renn => "renn",
        }
    }
}

/// Settings for one learning run.
#[derive(Clone, Debug)]
pub struct LearnConfig {
    /// Step size of the gradient updates on the model parameters.
    pub outer_lr: f64,
    /// Optimizer steps the network backend takes on its own parameters
    /// between consecutive model updates; ignored by other backends.
    pub inner_steps: usize,
    /// Passes over the training set.
    pub epochs: usize,
    /// Samples per model update; `None` uses the whole training set, which
    /// is the intended regime at the dataset sizes this crate targets.
    pub batch_size: Option<usize>,
    /// Which engine supplies log Ẑ and model moments.
    pub backend: Backend,
    /// Seeds the random initialization of the learned parameters.
    pub seed: u64,
    /// Message damping for the damped-BP and generalized-BP backends.
    pub damping: f64,
    /// Iteration cap per solve for the fixed-point backends.
    pub max_iters: usize,
    /// Convergence tolerance per solve for the fixed-point backends.
    pub tol: f64,
    /// Network shape and training hyperparameters for the network backend;
    /// its epoch cap and stopping tolerance are unused here because the
    /// alternation schedule fixes the step count.
    pub renn: RennConfig,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            outer_lr: 0.1,
            inner_steps: 20,
            epochs: 50,
            batch_size: None,
            backend: Backend::Exact,
            seed: 0,
            damping: 0.5,
            max_iters: 1000,
            tol: 1e-6,
            renn: RennConfig::default(),
        }
    }
}

impl LearnConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.outer_lr.is_finite() || self.outer_lr <= 0.0 {
            return Err(Error::contract(format!(
                "outer learning rate must be positive and finite, got {}",
                self.outer_lr
            )));
        }
        if self.epochs == 0 {
            return Err(Error::contract("epoch count must be positive"));
        }
        if self.max_iters == 0 {
            return Err(Error::contract("iteration cap must be positive"));
        }
        if !(0.0..1.0).contains(&self.damping) {
            return Err(Error::contract(format!(
                "damping must lie in [0, 1), got {}",
                self.damping
            )));
        }
        if self.batch_size == Some(0) {
            return Err(Error::contract("batch size must be positive"));
        }
        if self.backend == Backend::Renn {
            if self.inner_steps == 0 {
                return Err(Error::contract(
                    "the network backend needs at least one inner step per model update",
                ));
            }
            self.renn.validate()?;
        }
        Ok(())
    }
}

/// First and second spin moments aligned with a model's parameter layout:
/// `node[i]` estimates E[s_i] and `edge[e]` estimates E[s_i s_j] for the
/// model's e-th edge.
#[derive(Clone, Debug)]
pub struct Moments {
    pub node: Vec<f64>,
    pub edge: Vec<f64>,
}

/// Empirical spin moments of a dataset of ±1 rows.
pub fn data_moments(model: &PairwiseMRF, samples: &[Vec<i8>]) -> Result<Moments> {
    if samples.is_empty() {
        return Err(Error::contract("empty dataset"));
    }
    validate_spins(model.n, samples)?;
    let mut node = vec![0.0; model.n];
    let mut edge = vec![0.0; model.edges.len()];
    for row in samples {
        for (i, &s) in row.iter().enumerate() {
            node[i] += f64::from(s);
        }
        for (e, ed) in model.edges.iter().enumerate() {
            edge[e] += f64::from(row[ed.i]) * f64::from(row[ed.j]);
        }
    }
    let scale = 1.0 / samples.len() as f64;
    for v in &mut node {
        *v *= scale;
    }
    for v in &mut edge {
        *v *= scale;
    }
    Ok(Moments { node, edge })
}

/// Spin moments read off per-variable and per-edge belief tables, in the
/// model's parameter layout. The pairwise tables must line up with the
/// model's canonical edge order.
fn moments_from_tables(
    model: &PairwiseMRF,
    node_tables: &[Vec<f64>],
    pair_tables: &[PairMarginal],
) -> Result<Moments> {
    if node_tables.len() != model.n || pair_tables.len() != model.edges.len() {
        return Err(Error::contract(format!(
            "{} node and {} pair beliefs supplied for a model with {} nodes and {} edges",
            node_tables.len(),
            pair_tables.len(),
            model.n,
            model.edges.len()
        )));
    }
    let node = node_tables.iter().map(|t| t[1] - t[0]).collect();
    let mut edge = Vec::with_capacity(model.edges.len());
    for (pair, ed) in pair_tables.iter().zip(&model.edges) {
        let (lo, hi) = (pair.i.min(pair.j), pair.i.max(pair.j));
        if (lo, hi) != (ed.i, ed.j) {
            return Err(Error::contract(format!(
                "pairwise belief ({}, {}) does not match edge ({}, {})",
                pair.i, pair.j, ed.i, ed.j
            )));
        }
        // The spin product is +1 on the diagonal and −1 off it, regardless
        // of the table's variable order.
        let t = &pair.table;
        edge.push(t[0] + t[3] - t[1] - t[2]);
    }
    Ok(Moments { node, edge })
}

/// Counting-number-weighted spin moments of a full region belief set.
///
/// Every factor is attached to each region whose scope contains it, and the
/// counting numbers of those regions sum to one, so the weighted sum is a
/// convex mixture of per-region moment estimates — and it equals the
/// gradient of −F (the negated region free energy of `beliefs`) with respect
/// to the corresponding coupling or field.
pub fn region_moments(
    model: &PairwiseMRF,
    rg: &RegionGraph,
    fg: &FactorGraph,
    beliefs: &[BeliefTable],
) -> Result<Moments> {
    if fg.k != 2 {
        return Err(Error::contract("spin moments need binary variables"));
    }
    if beliefs.len() != rg.len() {
        return Err(Error::contract(format!(
            "{} beliefs supplied for {} regions",
            beliefs.len(),
            rg.len()
        )));
    }
    let edge_index: HashMap<(usize, usize), usize> = model
        .edges
        .iter()
        .enumerate()
        .map(|(e, ed)| ((ed.i, ed.j), e))
        .collect();
    let mut node = vec![0.0; model.n];
    let mut edge = vec![0.0; model.edges.len()];
    for region in rg.regions() {
        if region.counting_number == 0 {
            continue;
        }
        let c = region.counting_number as f64;
        let b = &beliefs[region.id];
        for &fid in &region.factors {
            let f = &fg.factors[fid];
            if f.unary {
                node[f.scope[0]] += c * table_spin_moment(b, &[f.scope[0]])?;
            } else {
                let (lo, hi) = (f.scope[0].min(f.scope[1]), f.scope[0].max(f.scope[1]));
                let e = *edge_index.get(&(lo, hi)).ok_or_else(|| {
                    Error::contract(format!(
                        "factor over ({lo}, {hi}) has no matching model edge"
                    ))
                })?;
                edge[e] += c * table_spin_moment(b, &f.scope)?;
            }
        }
    }
    Ok(Moments { node, edge })
}

/// Expectation of the product of spins of `vars` under a belief table.
fn table_spin_moment(b: &BeliefTable, vars: &[usize]) -> Result<f64> {
    let len = b.scope.len();
    let mut strides = Vec::with_capacity(vars.len());
    for &v in vars {
        let pos = b.scope.iter().position(|&s| s == v).ok_or_else(|| {
            Error::contract(format!("variable {v} outside belief scope"))
        })?;
        strides.push(b.k.pow((len - 1 - pos) as u32));
    }
    let mut m = 0.0;
    for (t, &p) in b.table.iter().enumerate() {
        let mut product = 1.0;
        for &stride in &strides {
            product *= spin((t / stride) % b.k);
        }
        m += p * product;
    }
    Ok(m)
}

/// Mean negative log-likelihood of a dataset of state rows under the model,
/// using a supplied estimate of log Z: mean over samples of
/// (log Ẑ − log p̃(x)).
pub fn nll_eval(fg: &FactorGraph, samples: &[Vec<usize>], log_z_estimate: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::contract("empty dataset"));
    }
    let mean_score: f64 =
        samples.iter().map(|x| fg.log_score(x)).sum::<f64>() / samples.len() as f64;
    Ok(log_z_estimate - mean_score)
}

/// One backend solve: an estimate of log Z plus model moments under the
/// current parameters.
struct Estimate {
    log_z_hat: f64,
    moments: Moments,
}

/// Persistent backend state across model updates.
enum Engine {
    Exact,
    MeanField,
    LoopyBp { damping: f64 },
    Gbp { rg: RegionGraph, store: RegionMessageStore },
    Renn { rg: RegionGraph, net: RennModel, opt: Adam },
}

impl Engine {
    fn new(structure: &PairwiseMRF, fg: &FactorGraph, config: &LearnConfig) -> Result<Self> {
        Ok(match config.backend {
            Backend::Exact => Self::Exact,
            Backend::MeanField => Self::MeanField,
            Backend::LoopyBp => Self::LoopyBp { damping: 0.0 },
            Backend::DampedBp => Self::LoopyBp { damping: config.damping },
            Backend::Gbp => {
                let rg = region_graph_for_model(structure, false)?;
                let store = build_message_sets(&rg);
                Self::Gbp { rg, store }
            }
            Backend::Renn => {
                let rg = region_graph_for_model(structure, false)?;
                let net = build_renn_model(&rg, fg, &config.renn)?;
                let opt = Adam::new(config.renn.learning_rate);
                Self::Renn { rg, net, opt }
            }
        })
    }

    /// Solves for log Ẑ and moments at the current parameters. The network
    /// backend first trains its own parameters for `inner_steps` optimizer
    /// steps, warm-starting from wherever the previous call left them; the
    /// generalized-BP backend likewise reuses its previous messages.
    fn estimate(
        &mut self,
        model: &PairwiseMRF,
        fg: &FactorGraph,
        config: &LearnConfig,
    ) -> Result<Estimate> {
        match self {
            Self::Exact => {
                let res = exact_inference(fg)?;
                Ok(Estimate {
                    log_z_hat: res.log_z,
                    moments: moments_from_tables(model, &res.node_marginals, &res.pair_marginals)?,
                })
            }
            Self::MeanField => {
                let res = mean_field(fg, config.max_iters, config.tol)?;
                estimate_from_result(model, &res)
            }
            Self::LoopyBp { damping } => {
                let res = loopy_bp(fg, config.max_iters, config.tol, *damping)?;
                estimate_from_result(model, &res)
            }
            Self::Gbp { rg, store } => {
                let res = gbp_run(rg, fg, store, config.max_iters, config.tol, config.damping)?;
                estimate_from_result(model, &res)
            }
            Self::Renn { rg, net, opt } => {
                for _ in 0..config.inner_steps {
                    train_epoch(net, rg, fg, config.renn.lambda, opt)?;
                }
                let beliefs = model_beliefs(net, rg)?;
                let free_energy = renn_objective(rg, fg, &beliefs, 0.0)?;
                Ok(Estimate {
                    log_z_hat: -free_energy,
                    moments: region_moments(model, rg, fg, &beliefs)?,
                })
            }
        }
    }
}

fn estimate_from_result(model: &PairwiseMRF, res: &InferenceResult) -> Result<Estimate> {
    Ok(Estimate {
        log_z_hat: -res.free_energy,
        moments: moments_from_tables(model, &res.node_beliefs, &res.pair_beliefs)?,
    })
}

/// Likelihood trace entry recorded after each pass over the training set.
#[derive(Clone, Debug)]
pub struct EpochRecord {
    /// 1-based epoch index.
    pub epoch: usize,
    /// Training NLL with the backend's own log Ẑ.
    pub train_nll: f64,
    /// Test NLL with the backend's own log Ẑ.
    pub test_nll: f64,
    /// Test NLL re-evaluated with the brute-force log Z, filled in when the
    /// state space is small enough to enumerate once per epoch. Separating
    /// the two columns splits learning quality from partition-estimate bias.
    pub test_nll_exact: Option<f64>,
}

/// A learned model together with its per-epoch likelihood trace.
#[derive(Clone, Debug)]
pub struct LearnOutcome {
    pub model: PairwiseMRF,
    pub trace: Vec<EpochRecord>,
}

/// Fits fields and couplings to a dataset by gradient descent on the
/// negative log-likelihood, with log Z supplied by the configured backend.
///
/// The structure argument contributes only its node count and edge set;
/// learned parameters start from small seeded random values. Each model
/// update moves every coupling and field against the moment gap
/// E_model − E_data, with model moments re-estimated at the current
/// parameters. After each pass over the training data the current model is
/// scored on both datasets with the backend's own log Ẑ — and against the
/// enumerated log Z when the model is small enough — yielding one
/// [`EpochRecord`] per epoch.
pub fn learn_mrf(
    structure: &PairwiseMRF,
    train: &[Vec<i8>],
    test: &[Vec<i8>],
    config: &LearnConfig,
) -> Result<LearnOutcome> {
    config.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::contract("training and test datasets must be nonempty"));
    }
    validate_spins(structure.n, train)?;
    validate_spins(structure.n, test)?;

    // Small random starting parameters, drawn fields-then-couplings.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut draw = || 0.1 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
    let h = (0..structure.n).map(|_| draw()).collect();
    let edges = structure
        .edges
        .iter()
        .map(|e| crate::model::Edge { i: e.i, j: e.j, coupling: draw() })
        .collect();
    let mut model = PairwiseMRF::new(structure.n, h, edges)?;

    let train_states: Vec<Vec<usize>> = train.iter().map(|r| states_of_spins(r)).collect();
    let test_states: Vec<Vec<usize>> = test.iter().map(|r| states_of_spins(r)).collect();

    let batch = config.batch_size.unwrap_or(train.len()).min(train.len());
    let batch_moments: Vec<Moments> = train
        .chunks(batch)
        .map(|chunk| data_moments(&model, chunk))
        .collect::<Result<_>>()?;

    let oracle_column = structure.n <= ORACLE_EVAL_MAX_VARS;
    let mut engine = Engine::new(&model, &model.to_factor_graph(), config)?;
    let mut trace = Vec::with_capacity(config.epochs);
    // The evaluation solve at the end of an epoch happens at the same
    // parameters the next epoch's first update needs, so it is carried over
    // instead of being recomputed.
    let mut carried: Option<Estimate> = None;

    for epoch in 1..=config.epochs {
        for dm in &batch_moments {
            let fg = model.to_factor_graph();
            let est = match carried.take() {
                Some(e) => e,
                None => engine
                    .estimate(&model, &fg, config)
                    .map_err(|e| with_epoch(e, epoch))?,
            };
            for (e, edge) in model.edges.iter_mut().enumerate() {
                edge.coupling -= config.outer_lr * (est.moments.edge[e] - dm.edge[e]);
            }
            for (i, field) in model.h.iter_mut().enumerate() {
                *field -= config.outer_lr * (est.moments.node[i] - dm.node[i]);
            }
        }
        let fg = model.to_factor_graph();
        let est = engine
            .estimate(&model, &fg, config)
            .map_err(|e| with_epoch(e, epoch))?;
        let train_nll = nll_eval(&fg, &train_states, est.log_z_hat)?;
        let test_nll = nll_eval(&fg, &test_states, est.log_z_hat)?;
        let test_nll_exact = if oracle_column {
            let log_z = exact_log_z(&fg).map_err(|e| with_epoch(e, epoch))?;
            Some(nll_eval(&fg, &test_states, log_z)?)
        } else {
            None
        };
        trace.push(EpochRecord { epoch, train_nll, test_nll, test_nll_exact });
        carried = Some(est);
    }

    Ok(LearnOutcome { model, trace })
}

/// Serializes a learned model plus its likelihood trace. The trace rides in
/// trailing comment lines, so the checkpoint parses back as an ordinary
/// model file.
pub fn write_checkpoint(model: &PairwiseMRF, trace: &[EpochRecord]) -> String {
    let mut out = serialize_model(model);
    for r in trace {
        out.push_str(&format!("# epoch {} nll {}\n", r.epoch, r.test_nll));
    }
    out
}

fn validate_spins(n: usize, samples: &[Vec<i8>]) -> Result<()> {
    for (idx, row) in samples.iter().enumerate() {
        if row.len() != n {
            return Err(Error::contract(format!(
                "sample {idx} has {} entries for {n} nodes",
                row.len()
            )));
        }
        if let Some(&bad) = row.iter().find(|&&s| s != 1 && s != -1) {
            return Err(Error::contract(format!(
                "sample {idx} contains {bad}; spins must be ±1"
            )));
        }
    }
    Ok(())
}

fn with_epoch(err: Error, epoch: usize) -> Error {
    match err {
        Error::Contract(m) => Error::Contract(format!("epoch {epoch}: {m}")),
        Error::NumericFault { context } => {
            Error::numeric(format!("epoch {epoch}: {context}"))
        }
        Error::Domain(m) => Error::Domain(format!("epoch {epoch}: {m}")),
        Error::Structure(m) => Error::Structure(format!("epoch {epoch}: {m}")),
        other => other,
    }
}
