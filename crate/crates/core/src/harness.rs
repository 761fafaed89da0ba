//! Experiment orchestration: random-instance sweeps over topologies, field
//! strengths, seeds, and methods, scored against the brute-force oracle and
//! emitted as CSV.
//!
//! One model is generated per (topology, γ, seed) cell and every method runs
//! on that same instance. Each run becomes one CSV row; per-cell aggregate
//! rows (mean and standard deviation over seeds) follow the run rows. A
//! failed run is recorded as a row with an error status and the sweep
//! continues.

use std::time::Instant;

use crate::classic::{loopy_bp, mean_field, InferenceResult};
use crate::error::{Error, Result};
use crate::exact::{exact_inference, ExactResult};
use crate::gbp::{build_message_sets, gbp_run};
use crate::model::{random_ising, PairwiseMRF, Topology};
use crate::regiongraph::{bethe_region_graph, region_graph_for_model};
use crate::renn::{renn_infer, RennConfig};

/// Inference methods addressable from the command line and sweep configs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    MeanField,
    LoopyBp,
    DampedBp,
    Gbp,
    Renn,
    /// Region-network minimization on the pairwise (Bethe) region graph
    /// instead of the default construction.
    RennBethe,
    Exact,
}

impl Method {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "mf" => Ok(Self::MeanField),
            "lbp" => Ok(Self::LoopyBp),
            "dbp" => Ok(Self::DampedBp),
            "gbp" => Ok(Self::Gbp),
            "renn" => Ok(Self::Renn),
            "renn-bethe" => Ok(Self::RennBethe),
            "exact" => Ok(Self::Exact),
            other => Err(Error::contract(format!(
                "unknown method '{other}'; expected mf, lbp, dbp, gbp, renn, renn-bethe, or exact"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::MeanField => "mf",
            Self::LoopyBp => "lbp",
            Self::DampedBp => "dbp",
            Self::Gbp => "gbp",
            Self::Renn => "renn",
            Self::RennBethe => "renn-bethe",
            Self::Exact => "exact",
        }
    }
}

/// Knobs shared by every method dispatch.
#[derive(Clone, Debug)]
pub struct RunSettings {
    /// Message damping for damped BP and generalized BP.
    pub damping: f64,
    /// Sweep cap for the fixed-point methods.
    pub max_iters: usize,
    /// Stopping tolerance for the fixed-point methods.
    pub tol: f64,
    /// Region-network hyperparameters (both region-graph variants).
    pub renn: RennConfig,
    /// Grids only: add the perimeter cycle as an extra root region.
    pub infinite_face: bool,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            damping: 0.5,
            max_iters: 1000,
            tol: 1e-6,
            renn: RennConfig::default(),
            infinite_face: false,
        }
    }
}

impl RunSettings {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.damping) {
            return Err(Error::contract(format!(
                "damping must lie in [0, 1), got {}",
                self.damping
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::contract("iteration cap must be positive"));
        }
        if !self.tol.is_finite() || self.tol <= 0.0 {
            return Err(Error::contract(format!(
                "tolerance must be positive and finite, got {}",
                self.tol
            )));
        }
        self.renn.validate()
    }
}

/// Runs one method on one model, building whatever region graph the method
/// needs: grids get face regions (optionally with the perimeter), complete
/// graphs the star cycle basis, other structures the general construction,
/// and `renn-bethe` the pairwise graph.
pub fn run_method(
    model: &PairwiseMRF,
    method: Method,
    settings: &RunSettings,
) -> Result<InferenceResult> {
    settings.validate()?;
    let fg = model.to_factor_graph();
    match method {
        Method::Exact => {
            let start = Instant::now();
            let res = exact_inference(&fg)?;
            Ok(InferenceResult {
                node_beliefs: res.node_marginals,
                pair_beliefs: res.pair_marginals,
                free_energy: -res.log_z,
                iterations: 0,
                converged: true,
                runtime_ms: start.elapsed().as_secs_f64() * 1e3,
            })
        }
        Method::MeanField => mean_field(&fg, settings.max_iters, settings.tol),
        Method::LoopyBp => loopy_bp(&fg, settings.max_iters, settings.tol, 0.0),
        Method::DampedBp => loopy_bp(&fg, settings.max_iters, settings.tol, settings.damping),
        Method::Gbp => {
            let rg = region_graph_for_model(model, settings.infinite_face)?;
            let mut store = build_message_sets(&rg);
            gbp_run(
                &rg,
                &fg,
                &mut store,
                settings.max_iters,
                settings.tol,
                settings.damping,
            )
        }
        Method::Renn => {
            let rg = region_graph_for_model(model, settings.infinite_face)?;
            renn_infer(&fg, &rg, &settings.renn)
        }
        Method::RennBethe => {
            let rg = bethe_region_graph(&fg)?;
            renn_infer(&fg, &rg, &settings.renn)
        }
    }
}

/// Quality of one inference run against the exact oracle.
#[derive(Clone, Copy, Debug)]
pub struct Metrics {
    /// Mean absolute difference over every univariate and pairwise marginal
    /// entry, concatenated in a fixed order.
    pub l1_error: f64,
    /// Pearson correlation over the same concatenated entry vectors;
    /// reported as 0 when undefined.
    pub pearson_rho: f64,
    /// True when either entry vector had zero variance, leaving the
    /// correlation undefined.
    pub degenerate_rho: bool,
    /// |log Ẑ − log Z|, with log Ẑ read as the negated free energy.
    pub logz_error: f64,
}

/// Scores estimated marginals and free energy against the oracle.
///
/// The estimate must cover exactly the oracle's marginals: one table per
/// variable and one per pairwise factor, in the same order.
pub fn compute_metrics(estimated: &InferenceResult, oracle: &ExactResult) -> Result<Metrics> {
    if estimated.node_beliefs.len() != oracle.node_marginals.len()
        || estimated.pair_beliefs.len() != oracle.pair_marginals.len()
    {
        return Err(Error::contract(format!(
            "estimate covers {} node and {} pair tables; oracle has {} and {}",
            estimated.node_beliefs.len(),
            estimated.pair_beliefs.len(),
            oracle.node_marginals.len(),
            oracle.pair_marginals.len()
        )));
    }
    let mut est = Vec::new();
    let mut truth = Vec::new();
    for (a, b) in estimated.node_beliefs.iter().zip(&oracle.node_marginals) {
        if a.len() != b.len() {
            return Err(Error::contract("node belief cardinality mismatch"));
        }
        est.extend_from_slice(a);
        truth.extend_from_slice(b);
    }
    for (a, b) in estimated.pair_beliefs.iter().zip(&oracle.pair_marginals) {
        if (a.i, a.j) != (b.i, b.j) || a.table.len() != b.table.len() {
            return Err(Error::contract(format!(
                "pairwise belief over ({}, {}) does not match oracle pair ({}, {})",
                a.i, a.j, b.i, b.j
            )));
        }
        est.extend_from_slice(&a.table);
        truth.extend_from_slice(&b.table);
    }
    let l1_error =
        est.iter().zip(&truth).map(|(a, b)| (a - b).abs()).sum::<f64>() / est.len() as f64;
    let (pearson_rho, degenerate_rho) = pearson(&est, &truth);
    let logz_error = ((-estimated.free_energy) - oracle.log_z).abs();
    Ok(Metrics { l1_error, pearson_rho, degenerate_rho, logz_error })
}

/// Pearson correlation plus a degeneracy flag; a zero-variance side makes
/// the correlation undefined and yields (0, true).
fn pearson(a: &[f64], b: &[f64]) -> (f64, bool) {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let dx = x - ma;
        let dy = y - mb;
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return (0.0, true);
    }
    ((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0), false)
}

/// A parsed sweep description: the instance grid and shared method knobs.
#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub topologies: Vec<Topology>,
    pub gammas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub settings: RunSettings,
}

/// Parses the line-oriented `key = value` sweep format.
///
/// Required keys: `topologies`, `gammas`, `seeds`, `methods` — each a
/// whitespace-separated list. Seeds also accept `lo..hi` (half-open) range
/// tokens. Optional keys override [`RunSettings`]: `damping`, `max_iters`,
/// `tol`, `lambda`, `lr`, `renn_max_epochs`, `renn_tol`, `infinite_face`.
/// `#` starts a comment; blank lines are skipped; unknown keys are errors.
pub fn parse_sweep_config(text: &str) -> Result<SweepConfig> {
    let mut topologies: Vec<Topology> = Vec::new();
    let mut gammas: Vec<f64> = Vec::new();
    let mut seeds: Vec<u64> = Vec::new();
    let mut methods: Vec<Method> = Vec::new();
    let mut settings = RunSettings::default();

    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let err = |message: String| Error::Parse { line: lineno, message };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err("expected 'key = value'".into()))?;
        let (key, value) = (key.trim(), value.trim());
        if value.is_empty() {
            return Err(err(format!("empty value for '{key}'")));
        }
        match key {
            "topologies" => {
                for token in value.split_whitespace() {
                    topologies.push(
                        parse_topology(token).map_err(|e| err(e.to_string()))?,
                    );
                }
            }
            "gammas" => {
                for token in value.split_whitespace() {
                    let g: f64 = token
                        .parse()
                        .map_err(|_| err(format!("bad gamma '{token}'")))?;
                    if !g.is_finite() || g < 0.0 {
                        return Err(err(format!("gamma must be ≥ 0, got {token}")));
                    }
                    gammas.push(g);
                }
            }
            "seeds" => {
                for token in value.split_whitespace() {
                    if let Some((lo, hi)) = token.split_once("..") {
                        let lo: u64 =
                            lo.parse().map_err(|_| err(format!("bad seed range '{token}'")))?;
                        let hi: u64 =
                            hi.parse().map_err(|_| err(format!("bad seed range '{token}'")))?;
                        if lo >= hi {
                            return Err(err(format!("empty seed range '{token}'")));
                        }
                        seeds.extend(lo..hi);
                    } else {
                        seeds.push(
                            token.parse().map_err(|_| err(format!("bad seed '{token}'")))?,
                        );
                    }
                }
            }
            "methods" => {
                for token in value.split_whitespace() {
                    methods.push(Method::parse(token).map_err(|e| err(e.to_string()))?);
                }
            }
            "damping" => settings.damping = parse_num(value, key, lineno)?,
            "max_iters" => settings.max_iters = parse_num(value, key, lineno)?,
            "tol" => settings.tol = parse_num(value, key, lineno)?,
            "lambda" => settings.renn.lambda = parse_num(value, key, lineno)?,
            "lr" => settings.renn.learning_rate = parse_num(value, key, lineno)?,
            "renn_max_epochs" => settings.renn.max_epochs = parse_num(value, key, lineno)?,
            "renn_tol" => settings.renn.tol = parse_num(value, key, lineno)?,
            "infinite_face" => {
                settings.infinite_face = match value {
                    "true" => true,
                    "false" => false,
                    other => return Err(err(format!("expected true or false, got '{other}'"))),
                }
            }
            other => return Err(err(format!("unknown key '{other}'"))),
        }
    }

    if topologies.is_empty() || gammas.is_empty() || seeds.is_empty() || methods.is_empty() {
        return Err(Error::contract(
            "sweep config needs nonempty topologies, gammas, seeds, and methods",
        ));
    }
    settings.validate()?;
    Ok(SweepConfig { topologies, gammas, seeds, methods, settings })
}

fn parse_num<T: std::str::FromStr>(value: &str, key: &str, lineno: usize) -> Result<T> {
    value.parse().map_err(|_| Error::Parse {
        line: lineno,
        message: format!("bad value '{value}' for '{key}'"),
    })
}

/// Parses a topology token: `grid:R,C` (or the comma-free label form
/// `grid:RxC`) and `complete:N`.
pub fn parse_topology(token: &str) -> Result<Topology> {
    if let Some(rest) = token.strip_prefix("grid:") {
        let (r, c) = rest.split_once(',').or_else(|| rest.split_once('x')).ok_or_else(|| {
            Error::contract(format!("grid topology must be grid:R,C, got '{token}'"))
        })?;
        let rows: usize = r
            .parse()
            .map_err(|_| Error::contract(format!("bad grid rows in '{token}'")))?;
        let cols: usize = c
            .parse()
            .map_err(|_| Error::contract(format!("bad grid cols in '{token}'")))?;
        if rows == 0 || cols == 0 {
            return Err(Error::contract("grid dimensions must be positive"));
        }
        Ok(Topology::Grid { rows, cols })
    } else if let Some(rest) = token.strip_prefix("complete:") {
        let n: usize = rest
            .parse()
            .map_err(|_| Error::contract(format!("bad node count in '{token}'")))?;
        if n < 2 {
            return Err(Error::contract("complete graphs need at least 2 nodes"));
        }
        Ok(Topology::Complete { n })
    } else {
        Err(Error::contract(format!(
            "unknown topology '{token}'; expected grid:R,C or complete:N"
        )))
    }
}

/// The comma-free token form of a topology, safe inside a CSV field; the
/// parser accepts it back.
pub fn topology_label(t: &Topology) -> String {
    match t {
        Topology::Grid { rows, cols } => format!("grid:{rows}x{cols}"),
        Topology::Complete { n } => format!("complete:{n}"),
        Topology::Custom => "custom".to_string(),
    }
}

/// One CSV row: a single run when `seed` is a number, or a per-cell
/// aggregate when `seed` is `mean` or `std`. Metric fields are `None` (empty
/// in the CSV) for failed runs.
#[derive(Clone, Debug)]
pub struct BenchRow {
    pub method: String,
    pub topology: String,
    pub n: usize,
    pub gamma: f64,
    pub seed: String,
    pub l1_error: Option<f64>,
    pub pearson_rho: Option<f64>,
    pub logz_error: Option<f64>,
    pub free_energy: Option<f64>,
    pub runtime_ms: Option<f64>,
    /// 1/0 for single runs; mean or spread of that indicator in aggregates.
    pub converged: Option<f64>,
    /// `ok`, `aggregate`, or a sanitized error description.
    pub status: String,
}

/// Runs the full sweep: every method on every generated instance, then
/// per-cell aggregates. Instance generation or oracle failures abort the
/// sweep (the config promised oracle capacity); individual method failures
/// become error rows.
pub fn run_benchmark(config: &SweepConfig) -> Result<Vec<BenchRow>> {
    run_benchmark_with(config, |_| {})
}

/// Like [`run_benchmark`], calling `on_row` as each run row finishes (the
/// trailing aggregate rows are appended without callbacks).
pub fn run_benchmark_with(
    config: &SweepConfig,
    mut on_row: impl FnMut(&BenchRow),
) -> Result<Vec<BenchRow>> {
    config.settings.validate()?;
    let mut rows = Vec::new();
    for topology in &config.topologies {
        for &gamma in &config.gammas {
            for &seed in &config.seeds {
                let model = random_ising(*topology, gamma, seed)?;
                let oracle = exact_inference(&model.to_factor_graph())?;
                for &method in &config.methods {
                    let run = run_method(&model, method, &config.settings);
                    rows.push(run_row(method, topology, &model, gamma, seed, run, &oracle));
                    on_row(rows.last().expect("row just pushed"));
                }
            }
        }
    }
    let aggregates = aggregate_rows(config, &rows);
    rows.extend(aggregates);
    Ok(rows)
}

fn run_row(
    method: Method,
    topology: &Topology,
    model: &PairwiseMRF,
    gamma: f64,
    seed: u64,
    run: Result<InferenceResult>,
    oracle: &ExactResult,
) -> BenchRow {
    let base = BenchRow {
        method: method.name().to_string(),
        topology: topology_label(topology),
        n: model.n,
        gamma,
        seed: seed.to_string(),
        l1_error: None,
        pearson_rho: None,
        logz_error: None,
        free_energy: None,
        runtime_ms: None,
        converged: None,
        status: String::new(),
    };
    let scored = run.and_then(|res| Ok((compute_metrics(&res, oracle)?, res)));
    match scored {
        Ok((m, res)) => BenchRow {
            l1_error: Some(m.l1_error),
            pearson_rho: Some(m.pearson_rho),
            logz_error: Some(m.logz_error),
            free_energy: Some(res.free_energy),
            runtime_ms: Some(res.runtime_ms),
            converged: Some(if res.converged { 1.0 } else { 0.0 }),
            status: "ok".to_string(),
            ..base
        },
        Err(e) => BenchRow { status: sanitize(&format!("error: {e}")), ..base },
    }
}

/// Mean and sample-standard-deviation rows per (topology, gamma, method)
/// cell, aggregated over that cell's ok runs in config order.
pub fn aggregate_rows(config: &SweepConfig, rows: &[BenchRow]) -> Vec<BenchRow> {
    let mut out = Vec::new();
    for topology in &config.topologies {
        let label = topology_label(topology);
        for &gamma in &config.gammas {
            for &method in &config.methods {
                let cell: Vec<&BenchRow> = rows
                    .iter()
                    .filter(|r| {
                        r.status == "ok"
                            && r.method == method.name()
                            && r.topology == label
                            && r.gamma == gamma
                    })
                    .collect();
                let n = cell.first().map_or(0, |r| r.n);
                for (kind, stat) in
                    [("mean", mean as fn(&[f64]) -> f64), ("std", sample_std)]
                {
                    let pick = |f: fn(&BenchRow) -> Option<f64>| -> Option<f64> {
                        let vals: Vec<f64> = cell.iter().filter_map(|r| f(r)).collect();
                        (vals.len() == cell.len() && !vals.is_empty())
                            .then(|| stat(&vals))
                    };
                    out.push(BenchRow {
                        method: method.name().to_string(),
                        topology: label.clone(),
                        n,
                        gamma,
                        seed: kind.to_string(),
                        l1_error: pick(|r| r.l1_error),
                        pearson_rho: pick(|r| r.pearson_rho),
                        logz_error: pick(|r| r.logz_error),
                        free_energy: pick(|r| r.free_energy),
                        runtime_ms: pick(|r| r.runtime_ms),
                        converged: pick(|r| r.converged),
                        status: "aggregate".to_string(),
                    });
                }
            }
        }
    }
    out
}

fn mean(vals: &[f64]) -> f64 {
    vals.iter().sum::<f64>() / vals.len() as f64
}

/// Sample standard deviation (n − 1 denominator); 0 for a single value.
fn sample_std(vals: &[f64]) -> f64 {
    if vals.len() < 2 {
        return 0.0;
    }
    let m = mean(vals);
    (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (vals.len() - 1) as f64).sqrt()
}

/// Renders rows as CSV with a fixed header. Failed metric fields are empty.
pub fn render_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(
        "method,topology,n,gamma,seed,l1_error,pearson_rho,logz_error,free_energy,runtime_ms,converged,status\n",
    );
    for r in rows {
        let field = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.method,
            r.topology,
            r.n,
            r.gamma,
            r.seed,
            field(r.l1_error),
            field(r.pearson_rho),
            field(r.logz_error),
            field(r.free_energy),
            field(r.runtime_ms),
            field(r.converged),
            r.status,
        ));
    }
    out
}

fn sanitize(s: &str) -> String {
    s.replace(',', ";").replace('\n', " ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::PairMarginal;
    use crate::model::Edge;
    use approx::assert_abs_diff_eq;

    fn single_edge(coupling: f64) -> PairwiseMRF {
        PairwiseMRF::new(2, vec![0.0, 0.0], vec![Edge { i: 0, j: 1, coupling }]).unwrap()
    }

    #[test]
    fn method_names_round_trip() {
        for name in ["mf", "lbp", "dbp", "gbp", "renn", "renn-bethe", "exact"] {
            assert_eq!(Method::parse(name).unwrap().name(), name);
        }
        assert!(Method::parse("bp").is_err());
    }

    #[test]
    fn exact_estimate_scores_perfectly() {
        let model = single_edge(1.3);
        let run = run_method(&model, Method::Exact, &RunSettings::default()).unwrap();
        let oracle = exact_inference(&model.to_factor_graph()).unwrap();
        let m = compute_metrics(&run, &oracle).unwrap();
        assert_abs_diff_eq!(m.l1_error, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.pearson_rho, 1.0, epsilon = 1e-12);
        assert!(!m.degenerate_rho);
        assert_abs_diff_eq!(m.logz_error, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn uniform_estimate_on_a_strong_edge_matches_the_closed_form() {
        let model = single_edge(2.0);
        let oracle = exact_inference(&model.to_factor_graph()).unwrap();
        let estimated = InferenceResult {
            node_beliefs: vec![vec![0.5, 0.5]; 2],
            pair_beliefs: vec![PairMarginal { i: 0, j: 1, table: vec![0.25; 4] }],
            free_energy: -2.0 * (2.0_f64).ln(),
            iterations: 0,
            converged: true,
            runtime_ms: 0.0,
        };
        let m = compute_metrics(&estimated, &oracle).unwrap();
        // Two spins coupled by J share a symmetric joint with diagonal mass
        // e^J / (2e^J + 2e^-J) per entry, so only the four pairwise entries
        // miss; both univariate marginals really are uniform.
        let z = 2.0 * (2.0_f64).exp() + 2.0 * (-2.0_f64).exp();
        let diag = (2.0_f64).exp() / z;
        let off = (-2.0_f64).exp() / z;
        let expected = (2.0 * (0.25 - diag).abs() + 2.0 * (0.25 - off).abs()) / 8.0;
        assert_abs_diff_eq!(m.l1_error, expected, epsilon = 1e-12);
    }

    #[test]
    fn constant_estimate_reports_degenerate_correlation() {
        let model = PairwiseMRF::new(1, vec![0.4], vec![]).unwrap();
        let oracle = exact_inference(&model.to_factor_graph()).unwrap();
        let estimated = InferenceResult {
            node_beliefs: vec![vec![0.5, 0.5]],
            pair_beliefs: vec![],
            free_energy: -(2.0_f64).ln(),
            iterations: 0,
            converged: true,
            runtime_ms: 0.0,
        };
        let m = compute_metrics(&estimated, &oracle).unwrap();
        assert_eq!(m.pearson_rho, 0.0);
        assert!(m.degenerate_rho);
    }

    #[test]
    fn coverage_gaps_are_contract_violations() {
        let model = single_edge(0.5);
        let oracle = exact_inference(&model.to_factor_graph()).unwrap();
        let missing_pair = InferenceResult {
            node_beliefs: vec![vec![0.5, 0.5]; 2],
            pair_beliefs: vec![],
            free_energy: 0.0,
            iterations: 0,
            converged: true,
            runtime_ms: 0.0,
        };
        assert!(compute_metrics(&missing_pair, &oracle).is_err());
    }

    #[test]
    fn topology_tokens_round_trip() {
        let grid = parse_topology("grid:3,4").unwrap();
        assert_eq!(grid, Topology::Grid { rows: 3, cols: 4 });
        assert_eq!(topology_label(&grid), "grid:3x4");
        assert_eq!(parse_topology("grid:3x4").unwrap(), grid);
        assert_eq!(topology_label(&parse_topology("complete:9").unwrap()), "complete:9");
        assert!(parse_topology("ring:5").is_err());
        assert!(parse_topology("grid:5").is_err());
        assert!(parse_topology("complete:1").is_err());
    }

    #[test]
    fn sweep_config_parses_lists_ranges_and_overrides() {
        let text = "\
# instance grid
topologies = grid:3,3 complete:5
gammas = 0.1 1.0
seeds = 0..3 7
methods = mf lbp renn
damping = 0.3
lambda = 2.5
renn_max_epochs = 50
infinite_face = true
";
        let cfg = parse_sweep_config(text).unwrap();
        assert_eq!(cfg.topologies.len(), 2);
        assert_eq!(cfg.gammas, vec![0.1, 1.0]);
        assert_eq!(cfg.seeds, vec![0, 1, 2, 7]);
        assert_eq!(cfg.methods.len(), 3);
        assert_eq!(cfg.settings.damping, 0.3);
        assert_eq!(cfg.settings.renn.lambda, 2.5);
        assert_eq!(cfg.settings.renn.max_epochs, 50);
        assert!(cfg.settings.infinite_face);
    }

    #[test]
    fn sweep_config_rejects_unknown_keys_and_incomplete_grids() {
        assert!(matches!(
            parse_sweep_config("topologies = grid:3,3\nwidgets = 4"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(parse_sweep_config("topologies = grid:3,3\ngammas = 0.1\nseeds = 0..2").is_err());
        assert!(matches!(
            parse_sweep_config("seeds = 5..5"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn benchmark_emits_run_and_aggregate_rows_deterministically() {
        let text = "\
topologies = grid:2,2
gammas = 0.1 1.0
seeds = 0..2
methods = mf lbp
";
        let cfg = parse_sweep_config(text).unwrap();
        let rows = run_benchmark(&cfg).unwrap();
        // 1 topology × 2 gammas × 2 seeds × 2 methods runs, plus mean+std
        // aggregates for each of the 4 cells.
        assert_eq!(rows.len(), 8 + 8);
        assert!(rows[..8].iter().all(|r| r.status == "ok"));
        assert!(rows[8..].iter().all(|r| r.status == "aggregate"));

        let strip_runtime = |csv: &str| -> String {
            csv.lines()
                .map(|line| {
                    let mut cols: Vec<&str> = line.split(',').collect();
                    cols.remove(9);
                    cols.join(",")
                })
                .collect::<Vec<_>>()
                .join("\n")
        };
        let again = run_benchmark(&cfg).unwrap();
        assert_eq!(
            strip_runtime(&render_csv(&rows)),
            strip_runtime(&render_csv(&again))
        );
    }

    #[test]
    fn aggregates_recompute_from_their_rows() {
        let text = "\
topologies = complete:4
gammas = 0.5
seeds = 0..5
methods = mf
";
        let cfg = parse_sweep_config(text).unwrap();
        let rows = run_benchmark(&cfg).unwrap();
        let runs: Vec<&BenchRow> = rows.iter().filter(|r| r.status == "ok").collect();
        assert_eq!(runs.len(), 5);
        let l1: Vec<f64> = runs.iter().map(|r| r.l1_error.unwrap()).collect();
        let mean_row = rows.iter().find(|r| r.seed == "mean").unwrap();
        let std_row = rows.iter().find(|r| r.seed == "std").unwrap();
        assert_abs_diff_eq!(mean_row.l1_error.unwrap(), mean(&l1), epsilon = 1e-12);
        assert_abs_diff_eq!(std_row.l1_error.unwrap(), sample_std(&l1), epsilon = 1e-12);
    }

    #[test]
    fn failed_runs_become_error_rows() {
        let model = single_edge(1.0);
        let oracle = exact_inference(&model.to_factor_graph()).unwrap();
        let row = run_row(
            Method::Gbp,
            &model.topology.clone(),
            &model,
            0.1,
            0,
            Err(Error::numeric("synthetic failure, with a comma")),
            &oracle,
        );
        assert!(row.status.starts_with("error: "));
        assert!(!row.status.contains(','));
        assert!(row.l1_error.is_none());
        assert!(row.converged.is_none());
    }

    #[test]
    fn csv_layout_is_stable() {
        let text = "\
topologies = grid:2,2
gammas = 0.1
seeds = 3
methods = exact
";
        let cfg = parse_sweep_config(text).unwrap();
        let csv = render_csv(&run_benchmark(&cfg).unwrap());
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "method,topology,n,gamma,seed,l1_error,pearson_rho,logz_error,free_energy,runtime_ms,converged,status"
        );
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(first.len(), 12);
        assert_eq!(&first[..5], &["exact", "grid:2x2", "4", "0.1", "3"]);
        assert_eq!(first[11], "ok");
    }

    #[test]
    fn every_method_runs_on_a_small_grid() {
        let model = random_ising(Topology::Grid { rows: 2, cols: 2 }, 0.1, 0).unwrap();
        let oracle = exact_inference(&model.to_factor_graph()).unwrap();
        let mut settings = RunSettings::default();
        settings.renn.max_epochs = 60;
        for method in [
            Method::MeanField,
            Method::LoopyBp,
            Method::DampedBp,
            Method::Gbp,
            Method::Renn,
            Method::RennBethe,
            Method::Exact,
        ] {
            let res = run_method(&model, method, &settings)
                .unwrap_or_else(|e| panic!("{} failed: {e}", method.name()));
            let m = compute_metrics(&res, &oracle).unwrap();
            assert!(m.l1_error.is_finite(), "{} produced junk", method.name());
            assert!(m.logz_error >= 0.0);
        }
    }
}
