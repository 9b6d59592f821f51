//! Fitting scaling-law constants to observed training runs.
//!
//! The fit minimizes the sum of Huber losses of log-loss residuals. Local
//! searches (L-BFGS) start from points sampled out of an initialization grid;
//! the lowest objective wins, ties going to the lowest start index so serial
//! and parallel execution agree bitwise.

mod lbfgs;
mod objective;
mod polish;

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::law::{DenseLawParams, ScalingLawParams, MAX_EXPONENT};

pub use lbfgs::{minimize, LbfgsOptions, Minimum};
pub use objective::{huber, PENALTY};

use objective::{
    dense_from_vector, dense_to_vector, huber_objective, moe_from_vector, moe_to_vector, prepare, Dense,
    Moe, Prepared, ResidualModel,
};

/// One observed training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingRun {
    /// Dense-equivalent parameter count, embeddings excluded.
    pub n_dense: f64,
    pub d_tokens: f64,
    pub experts: f64,
    pub val_loss: f64,
}

impl TrainingRun {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if ok(self.n_dense) && ok(self.d_tokens) && ok(self.val_loss) && self.experts >= 1.0 {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid training run {self:?}")))
        }
    }
}

/// Initialization grid. Coefficients are given as natural logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub log_coef_n: Vec<f64>,
    pub log_coef_e: Vec<f64>,
    pub log_coef_d: Vec<f64>,
    pub interaction: Vec<f64>,
    pub irreducible: Vec<f64>,
    /// Starting saturation anchors, shared by every start.
    pub e_start: f64,
    pub e_max: f64,
}

fn steps(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n).map(|i| lo + step * i as f64).collect()
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            alpha: steps(0.0, 2.0, 0.5),
            beta: steps(0.0, 2.0, 0.5),
            gamma: steps(0.0, 2.0, 0.5),
            log_coef_n: steps(0.0, 25.0, 5.0),
            log_coef_e: steps(0.0, 25.0, 5.0),
            log_coef_d: steps(0.0, 25.0, 5.0),
            interaction: steps(0.0, 25.0, 5.0),
            irreducible: steps(-1.0, 1.0, 0.5),
            e_start: 1.5,
            e_max: 64.0,
        }
    }
}

impl GridSpec {
    fn moe_axes(&self) -> [&[f64]; 8] {
        [
            &self.alpha,
            &self.beta,
            &self.gamma,
            &self.log_coef_n,
            &self.log_coef_e,
            &self.log_coef_d,
            &self.interaction,
            &self.irreducible,
        ]
    }

    /// Dense axes reuse the N-exponent, D-exponent, N/D coefficient and floor grids.
    fn dense_axes(&self) -> [&[f64]; 5] {
        [
            &self.alpha,
            &self.gamma,
            &self.log_coef_n,
            &self.log_coef_d,
            &self.irreducible,
        ]
    }

    pub fn moe_size(&self) -> usize {
        self.moe_axes().iter().map(|a| a.len()).product()
    }

    pub fn dense_size(&self) -> usize {
        self.dense_axes().iter().map(|a| a.len()).product()
    }
}

fn decode<const K: usize>(axes: &[&[f64]; K], mut index: usize) -> [f64; K] {
    let mut out = [0.0; K];
    for k in (0..K).rev() {
        let len = axes[k].len();
        out[k] = axes[k][index % len];
        index /= len;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub huber_delta: f64,
    pub grid: GridSpec,
    /// Number of grid points sampled as starts.
    pub max_starts: usize,
    /// Run every grid point regardless of `max_starts`.
    pub full_grid: bool,
    pub rng_seed: u64,
    /// Relative objective change that ends a local search.
    pub convergence_tol: f64,
    pub max_iterations: usize,
    /// Fraction of runs held out for evaluation (0 disables the split).
    pub holdout_fraction: f64,
    /// Number of best local-search results passed to Levenberg–Marquardt refinement.
    pub refine_top: usize,
    pub refine_iterations: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            huber_delta: 1e-3,
            grid: GridSpec::default(),
            max_starts: 512,
            full_grid: false,
            rng_seed: 0,
            convergence_tol: 1e-9,
            max_iterations: 1000,
            holdout_fraction: 0.2,
            refine_top: 4,
            refine_iterations: 500,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.huber_delta > 0.0) {
            return Err(Error::InvalidArgument("huber_delta must be positive".into()));
        }
        if self.max_starts < 1 {
            return Err(Error::InvalidArgument("max_starts must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::InvalidArgument("holdout_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn lbfgs(&self) -> LbfgsOptions {
        LbfgsOptions {
            max_iterations: self.max_iterations,
            f_tol: self.convergence_tol,
            ..LbfgsOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartDiagnostics {
    /// Index into the initialization grid (or into the explicit start list).
    pub index: usize,
    /// Starting point in natural units.
    pub initial: Vec<f64>,
    pub final_objective: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Refined by Levenberg–Marquardt after the local search.
    pub refined: bool,
    /// Result left the admissible parameter domain and was not eligible.
    pub out_of_domain: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub best_params: ScalingLawParams,
    /// Final Huber objective on the training split.
    pub objective: f64,
    /// In-sample RMSLE on the training split.
    pub rmsle: f64,
    pub holdout_rmsle: Option<f64>,
    /// RMSLE over every supplied run.
    pub rmsle_all: f64,
    pub train_runs: usize,
    pub holdout_runs: usize,
    pub starts_run: usize,
    pub grid_size: usize,
    /// How coefficient grid values map to coefficients ("log": coef = exp(value)).
    pub coef_grid_interpretation: String,
    pub warnings: Vec<String>,
    pub starts: Vec<StartDiagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseFitReport {
    pub best_params: DenseLawParams,
    pub objective: f64,
    pub rmsle: f64,
    pub holdout_rmsle: Option<f64>,
    pub rmsle_all: f64,
    pub train_runs: usize,
    pub holdout_runs: usize,
    pub starts_run: usize,
    pub grid_size: usize,
    pub coef_grid_interpretation: String,
    pub warnings: Vec<String>,
    pub starts: Vec<StartDiagnostics>,
}

/// Sum of Huber losses of `log L̂ - log L` over `runs`.
///
/// Returns [`PENALTY`] instead of an error where the loss bracket is
/// non-positive, so a local search can recover.
pub fn objective(params: &ScalingLawParams, runs: &[TrainingRun], config: &FitConfig) -> f64 {
    let mut total = 0.0;
    for run in runs {
        match params.predict_log_loss(run.n_dense, run.d_tokens, run.experts) {
            Ok(log_pred) => total += huber(log_pred - run.val_loss.ln(), config.huber_delta),
            Err(_) => return PENALTY,
        }
    }
    total
}

/// Root mean squared log error of `params` over `runs`.
pub fn rmsle(params: &ScalingLawParams, runs: &[TrainingRun]) -> Result<f64> {
    if runs.is_empty() {
        return Err(Error::NoRuns);
    }
    let mut sum = 0.0;
    for run in runs {
        let r = params.predict_log_loss(run.n_dense, run.d_tokens, run.experts)? - run.val_loss.ln();
        sum += r * r;
    }
    Ok((sum / runs.len() as f64).sqrt())
}

pub fn rmsle_dense(params: &DenseLawParams, runs: &[TrainingRun]) -> Result<f64> {
    if runs.is_empty() {
        return Err(Error::NoRuns);
    }
    let mut sum = 0.0;
    for run in runs {
        let r = params.predict_loss(run.n_dense, run.d_tokens)?.ln() - run.val_loss.ln();
        sum += r * r;
    }
    Ok((sum / runs.len() as f64).sqrt())
}

/// Sorts runs into a canonical order so results do not depend on input order.
fn canonical(runs: &[TrainingRun]) -> Vec<TrainingRun> {
    let mut out = runs.to_vec();
    out.sort_by(|a, b| {
        a.n_dense
            .total_cmp(&b.n_dense)
            .then(a.d_tokens.total_cmp(&b.d_tokens))
            .then(a.experts.total_cmp(&b.experts))
            .then(a.val_loss.total_cmp(&b.val_loss))
    });
    out
}

/// Deterministic train/holdout split of canonically ordered runs.
pub fn split_runs(runs: &[TrainingRun], holdout_fraction: f64, seed: u64) -> (Vec<TrainingRun>, Vec<TrainingRun>) {
    let runs = canonical(runs);
    let holdout = (runs.len() as f64 * holdout_fraction).floor() as usize;
    if holdout == 0 || runs.len() - holdout < 2 {
        return (runs, Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: BTreeSet<usize> = rand::seq::index::sample(&mut rng, runs.len(), holdout).into_iter().collect();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, run) in runs.into_iter().enumerate() {
        if chosen.contains(&i) {
            test.push(run);
        } else {
            train.push(run);
        }
    }
    (train, test)
}

fn distinct(values: impl Iterator<Item = f64>) -> usize {
    values.map(f64::to_bits).collect::<BTreeSet<_>>().len()
}

fn design_warnings(runs: &[TrainingRun], with_experts: bool) -> Vec<String> {
    let mut warnings = Vec::new();
    if runs.len() < 10 {
        warnings.push(format!("only {} run(s); at least 10 recommended", runs.len()));
    }
    let mut degenerate = Vec::new();
    if distinct(runs.iter().map(|r| r.n_dense)) < 2 {
        degenerate.push("n_dense");
    }
    if distinct(runs.iter().map(|r| r.d_tokens)) < 2 {
        degenerate.push("d_tokens");
    }
    if with_experts && distinct(runs.iter().map(|r| r.experts)) < 2 {
        degenerate.push("experts");
    }
    if !degenerate.is_empty() {
        warnings.push(format!(
            "design is not identifiable along: {} (fewer than 2 distinct values)",
            degenerate.join(", ")
        ));
    }
    warnings
}

fn sample_grid(size: usize, config: &FitConfig) -> Vec<usize> {
    if config.full_grid || config.max_starts >= size {
        return (0..size).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut picked = rand::seq::index::sample(&mut rng, size, config.max_starts).into_vec();
    picked.sort_unstable();
    picked
}

fn moe_in_domain(p: &ScalingLawParams) -> bool {
    p.validate().is_ok()
}

fn dense_in_domain(p: &DenseLawParams) -> bool {
    p.validate().is_ok() && p.alpha <= MAX_EXPONENT && p.beta <= MAX_EXPONENT
}

struct Start {
    index: usize,
    initial: Vec<f64>,
    x0: Vec<f64>,
}

struct Outcome<P> {
    params: P,
    x: Vec<f64>,
    diag: StartDiagnostics,
}

struct FitCore<P> {
    best: P,
    objective: f64,
    train: Vec<TrainingRun>,
    holdout: Vec<TrainingRun>,
    warnings: Vec<String>,
    starts: Vec<StartDiagnostics>,
}

fn eligible<P>(o: &Outcome<P>) -> bool {
    !o.diag.out_of_domain && o.diag.final_objective < PENALTY
}

/// Orders by objective, then by start index.
fn rank<P>(a: &Outcome<P>, b: &Outcome<P>) -> std::cmp::Ordering {
    a.diag
        .final_objective
        .total_cmp(&b.diag.final_objective)
        .then(a.diag.index.cmp(&b.diag.index))
}

fn prepare_fit(runs: &[TrainingRun], config: &FitConfig) -> Result<(Vec<TrainingRun>, Vec<TrainingRun>)> {
    config.validate()?;
    if runs.is_empty() {
        return Err(Error::NoRuns);
    }
    for run in runs {
        run.validate()?;
    }
    Ok(split_runs(runs, config.holdout_fraction, config.rng_seed))
}

/// Local search from every start, refinement of the best few, then selection.
fn run_fit<M, P>(
    runs: &[TrainingRun],
    config: &FitConfig,
    starts: Vec<Start>,
    with_experts: bool,
    to_params: fn(&[f64]) -> P,
    in_domain: fn(&P) -> bool,
) -> Result<FitCore<P>>
where
    M: ResidualModel,
    P: Copy + Send + Sync,
{
    let (train, holdout) = prepare_fit(runs, config)?;
    let mut warnings = design_warnings(&train, with_experts);
    let prepared: Vec<Prepared> = prepare(&train);
    let delta = config.huber_delta;
    let opts = config.lbfgs();

    let mut outcomes: Vec<Outcome<P>> = starts
        .into_par_iter()
        .map(|start| {
            let m = minimize(|x, g| huber_objective::<M>(x, &prepared, delta, g), &start.x0, &opts);
            let params = to_params(&m.x);
            Outcome {
                params,
                diag: StartDiagnostics {
                    index: start.index,
                    initial: start.initial,
                    final_objective: m.value,
                    converged: m.converged && m.value < PENALTY,
                    iterations: m.iterations,
                    refined: false,
                    out_of_domain: !in_domain(&params),
                },
                x: m.x,
            }
        })
        .collect();

    let mut order: Vec<usize> = (0..outcomes.len()).filter(|&i| eligible(&outcomes[i])).collect();
    order.sort_by(|&a, &b| rank(&outcomes[a], &outcomes[b]));
    order.truncate(config.refine_top);
    let refined: Vec<(usize, polish::Refined)> = order
        .into_par_iter()
        .map(|i| {
            let r = polish::refine::<M>(&outcomes[i].x, &prepared, delta, config.refine_iterations, config.convergence_tol);
            (i, r)
        })
        .collect();
    for (i, r) in refined {
        let params = to_params(&r.x);
        if r.value < outcomes[i].diag.final_objective && in_domain(&params) {
            let o = &mut outcomes[i];
            o.params = params;
            o.x = r.x;
            o.diag.final_objective = r.value;
            o.diag.converged = r.converged;
            o.diag.iterations += r.iterations;
            o.diag.refined = true;
        }
    }

    let best = outcomes
        .iter()
        .filter(|o| eligible(o))
        .min_by(|a, b| rank(a, b))
        .ok_or(Error::AllStartsDiverged { starts: outcomes.len() })?;
    if !best.diag.converged {
        warnings.push(format!("best start {} did not meet the convergence tolerance", best.diag.index));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(FitCore {
        best: best.params,
        objective: best.diag.final_objective,
        train,
        holdout,
        warnings,
        starts: outcomes.into_iter().map(|o| o.diag).collect(),
    })
}

fn moe_grid_starts(config: &FitConfig) -> Vec<Start> {
    let axes = config.grid.moe_axes();
    sample_grid(config.grid.moe_size(), config)
        .into_iter()
        .map(|index| {
            let g = decode(&axes, index);
            // Grid order is alpha, beta, gamma, a, b, c, d, f.
            let x0 = vec![
                g[3],
                g[4],
                g[5],
                g[7],
                g[0],
                g[1],
                g[2],
                g[6],
                (config.grid.e_start - 1.0).ln(),
                (config.grid.e_max - config.grid.e_start).ln(),
            ];
            Start {
                index,
                initial: g.to_vec(),
                x0,
            }
        })
        .collect()
}

fn moe_report(runs: &[TrainingRun], core: FitCore<ScalingLawParams>, grid_size: usize) -> Result<FitReport> {
    let holdout_rmsle = if core.holdout.is_empty() {
        None
    } else {
        Some(rmsle(&core.best, &core.holdout)?)
    };
    Ok(FitReport {
        best_params: core.best,
        objective: core.objective,
        rmsle: rmsle(&core.best, &core.train)?,
        holdout_rmsle,
        rmsle_all: rmsle(&core.best, &canonical(runs))?,
        train_runs: core.train.len(),
        holdout_runs: core.holdout.len(),
        starts_run: core.starts.len(),
        grid_size,
        coef_grid_interpretation: "log".to_string(),
        warnings: core.warnings,
        starts: core.starts,
    })
}

/// Fits the MoE law from grid-sampled starts.
pub fn fit_moe(runs: &[TrainingRun], config: &FitConfig) -> Result<FitReport> {
    let starts = moe_grid_starts(config);
    let core = run_fit::<Moe, _>(runs, config, starts, true, moe_from_vector, moe_in_domain)?;
    moe_report(runs, core, config.grid.moe_size())
}

/// Fits the MoE law from explicit starting parameters.
pub fn fit_moe_from_starts(
    runs: &[TrainingRun],
    config: &FitConfig,
    starts: &[ScalingLawParams],
) -> Result<FitReport> {
    let starts = starts
        .iter()
        .enumerate()
        .map(|(index, p)| {
            let v = moe_to_vector(p).to_vec();
            Start {
                index,
                initial: v.clone(),
                x0: v,
            }
        })
        .collect();
    let core = run_fit::<Moe, _>(runs, config, starts, true, moe_from_vector, moe_in_domain)?;
    moe_report(runs, core, 0)
}

fn dense_report(runs: &[TrainingRun], core: FitCore<DenseLawParams>, grid_size: usize) -> Result<DenseFitReport> {
    let holdout_rmsle = if core.holdout.is_empty() {
        None
    } else {
        Some(rmsle_dense(&core.best, &core.holdout)?)
    };
    Ok(DenseFitReport {
        best_params: core.best,
        objective: core.objective,
        rmsle: rmsle_dense(&core.best, &core.train)?,
        holdout_rmsle,
        rmsle_all: rmsle_dense(&core.best, &canonical(runs))?,
        train_runs: core.train.len(),
        holdout_runs: core.holdout.len(),
        starts_run: core.starts.len(),
        grid_size,
        coef_grid_interpretation: "log".to_string(),
        warnings: core.warnings,
        starts: core.starts,
    })
}

fn check_dense_runs(runs: &[TrainingRun]) -> Result<()> {
    if runs.iter().any(|r| r.experts != 1.0) {
        return Err(Error::InvalidArgument("dense fit requires experts = 1 for every run".into()));
    }
    Ok(())
}

/// Fits the dense law to runs with a single expert.
pub fn fit_dense(runs: &[TrainingRun], config: &FitConfig) -> Result<DenseFitReport> {
    check_dense_runs(runs)?;
    let axes = config.grid.dense_axes();
    let starts = sample_grid(config.grid.dense_size(), config)
        .into_iter()
        .map(|index| {
            // Grid order is alpha, beta, a, b, l0.
            let g = decode(&axes, index);
            Start {
                index,
                initial: g.to_vec(),
                x0: vec![g[2], g[3], g[4], g[0], g[1]],
            }
        })
        .collect();
    let core = run_fit::<Dense, _>(runs, config, starts, false, dense_from_vector, dense_in_domain)?;
    dense_report(runs, core, config.grid.dense_size())
}

pub fn fit_dense_from_starts(
    runs: &[TrainingRun],
    config: &FitConfig,
    starts: &[DenseLawParams],
) -> Result<DenseFitReport> {
    check_dense_runs(runs)?;
    let starts = starts
        .iter()
        .enumerate()
        .map(|(index, p)| {
            let v = dense_to_vector(p).to_vec();
            Start {
                index,
                initial: v.clone(),
                x0: v,
            }
        })
        .collect();
    let core = run_fit::<Dense, _>(runs, config, starts, false, dense_from_vector, dense_in_domain)?;
    dense_report(runs, core, 0)
}
