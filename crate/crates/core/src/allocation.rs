//! Training-budget allocation under loss and inference-cost objectives.
//!
//! Every allocation spends the budget exactly: `D = budget / (6·N_act)`.
//! Sizes are searched in `ln N`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, ErrorKind, Result};
use crate::inference::{CostModel, ServingPoint};
use crate::law::{ArchitectureConvention, DenseLawParams, ScalingLawParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Termination width of golden-section and bisection searches, in `ln N`
    /// (equivalently, relative size).
    pub rel_tol: f64,
    pub n_min: f64,
    pub n_max: f64,
    pub expert_candidates: Vec<u32>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-6,
            n_min: 1e5,
            n_max: 1e13,
            expert_candidates: vec![1, 4, 8, 16, 32],
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.rel_tol < 1.0) {
            return Err(Error::InvalidArgument(format!("rel_tol must lie in (0, 1), got {}", self.rel_tol)));
        }
        if !(self.n_min >= 1.0 && self.n_min < self.n_max && self.n_max.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "need 1 <= n_min < n_max, got [{}, {}]",
                self.n_min, self.n_max
            )));
        }
        if self.expert_candidates.iter().any(|&e| e == 0) {
            return Err(Error::InvalidArgument("expert candidates must be >= 1".into()));
        }
        Ok(())
    }
}

/// Coarse scan resolution used to bracket searches.
const SCAN_POINTS: usize = 64;
/// Points on each loss-vs-cost curve of a sweep.
pub const CURVE_POINTS: usize = 64;
pub const CURVE_RATIO_RANGE: (f64, f64) = (0.05, 1.5);

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossOptimal {
    pub n_dense: f64,
    pub d_tokens: f64,
    pub loss: f64,
}

/// A recommended configuration with its training and serving figures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AllocationResult {
    pub budget_flops: f64,
    pub n_dense: f64,
    pub d_tokens: f64,
    pub experts: f64,
    pub predicted_loss: f64,
    pub training_flops: f64,
    /// Size relative to the loss-optimal size at the same budget and expert count.
    pub overtrain_ratio: f64,
    pub cost_per_token: Option<f64>,
    pub best_gpus: Option<u32>,
    pub batch: Option<f64>,
    pub batch_floor: Option<f64>,
    pub extrapolated: bool,
}

impl AllocationResult {
    fn new(
        budget: f64,
        n: f64,
        experts: f64,
        n_opt: f64,
        params: &ScalingLawParams,
        arch: &ArchitectureConvention,
        serving: Option<&ServingPoint>,
    ) -> Result<Self> {
        let d = arch.tokens_for_budget(budget, n, experts);
        Ok(Self {
            budget_flops: budget,
            n_dense: n,
            d_tokens: d,
            experts,
            predicted_loss: params.predict_loss(n, d, experts)?,
            training_flops: arch.training_flops(n, d, experts),
            overtrain_ratio: n / n_opt,
            cost_per_token: serving.map(|s| s.cost_per_token),
            best_gpus: serving.map(|s| s.gpus),
            batch: serving.map(|s| s.batch),
            batch_floor: serving.map(|s| s.batch.floor()),
            extrapolated: serving.is_some_and(|s| s.extrapolated),
        })
    }
}

fn check_budget(budget: f64) -> Result<()> {
    if budget > 0.0 && budget.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("budget must be positive, got {budget}")))
    }
}

fn check_experts(experts: f64) -> Result<()> {
    if experts >= 1.0 && experts.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("expert count must be >= 1, got {experts}")))
    }
}

/// Closed-form loss-optimal `(N, D)` of the dense law under `6·N·D = budget`.
pub fn dense_optimal(budget_flops: f64, params: &DenseLawParams) -> Result<(f64, f64)> {
    check_budget(budget_flops)?;
    params.validate()?;
    let (a, b) = (params.alpha, params.beta);
    let g = (a * params.coef_n / (b * params.coef_d)).powf(1.0 / (a + b));
    let c6 = budget_flops / 6.0;
    let n = g * c6.powf(b / (a + b));
    // D from the constraint keeps 6·N·D = budget to rounding.
    Ok((n, c6 / n))
}

fn log_loss_on_budget<'a>(
    budget: f64,
    experts: f64,
    params: &'a ScalingLawParams,
    arch: &ArchitectureConvention,
) -> impl Fn(f64) -> Result<f64> + 'a {
    let arch = *arch;
    move |ln_n: f64| {
        let n = ln_n.exp();
        params.predict_log_loss(n, arch.tokens_for_budget(budget, n, experts), experts)
    }
}

fn scan(lo: f64, hi: f64) -> Vec<f64> {
    (0..SCAN_POINTS)
        .map(|i| {
            if i == SCAN_POINTS - 1 {
                hi
            } else {
                lo + (hi - lo) * i as f64 / (SCAN_POINTS - 1) as f64
            }
        })
        .collect()
}

/// Loss-minimizing size for a fixed budget and expert count.
pub fn moe_loss_optimal(
    budget_flops: f64,
    experts: f64,
    params: &ScalingLawParams,
    arch: &ArchitectureConvention,
    search: &SearchConfig,
) -> Result<LossOptimal> {
    check_budget(budget_flops)?;
    check_experts(experts)?;
    params.validate()?;
    arch.validate()?;
    search.validate()?;
    let f = log_loss_on_budget(budget_flops, experts, params, arch);
    let (x_min, x_max) = (search.n_min.ln(), search.n_max.ln());
    let xs = scan(x_min, x_max);
    let mut i_best = 0;
    let mut f_best = f64::INFINITY;
    for (i, &x) in xs.iter().enumerate() {
        let v = f(x)?;
        if v < f_best {
            f_best = v;
            i_best = i;
        }
    }
    let mut lo = xs[i_best.saturating_sub(1)];
    let mut hi = xs[(i_best + 1).min(SCAN_POINTS - 1)];
    let mut best = (xs[i_best], f_best);

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    while hi - lo > search.rel_tol {
        if fc <= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = f(c)?;
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = f(d)?;
        }
    }
    for (x, v) in [(c, fc), (d, fd)] {
        if v < best.1 || (v == best.1 && x < best.0) {
            best = (x, v);
        }
    }

    let edge = 2.0 * search.rel_tol;
    if best.0 - x_min <= edge {
        return Err(Error::SearchBoundsTooTight {
            endpoint: "lower",
            n: search.n_min,
        });
    }
    if x_max - best.0 <= edge {
        return Err(Error::SearchBoundsTooTight {
            endpoint: "upper",
            n: search.n_max,
        });
    }
    let n = best.0.exp();
    let d_tokens = arch.tokens_for_budget(budget_flops, n, experts);
    Ok(LossOptimal {
        n_dense: n,
        d_tokens,
        loss: params.predict_loss(n, d_tokens, experts)?,
    })
}

/// The loss-optimal configuration with its cheapest serving cost. A model
/// that fits on no GPU count is reported without a cost.
pub fn loss_optimal_allocation(
    budget_flops: f64,
    experts: f64,
    params: &ScalingLawParams,
    cost: &CostModel<'_>,
    search: &SearchConfig,
) -> Result<AllocationResult> {
    let opt = moe_loss_optimal(budget_flops, experts, params, cost.arch, search)?;
    let serving = match cost.min_cost_over_gpus(opt.n_dense, experts) {
        Ok(p) => Some(p),
        Err(e) if e.kind() == ErrorKind::Infeasible => None,
        Err(e) => return Err(e),
    };
    AllocationResult::new(budget_flops, opt.n_dense, experts, opt.n_dense, params, cost.arch, serving.as_ref())
}

/// Bounded loss: the cheapest `E_prime` model reaching the loss-optimal
/// `E_base` loss at the same budget.
pub fn min_cost_for_bounded_loss(
    budget_flops: f64,
    e_base: f64,
    e_prime: f64,
    params: &ScalingLawParams,
    cost: &CostModel<'_>,
    search: &SearchConfig,
) -> Result<AllocationResult> {
    let target = moe_loss_optimal(budget_flops, e_base, params, cost.arch, search)?.loss;
    min_cost_for_loss_bound(budget_flops, e_prime, target, params, cost, search)
}

/// Smallest `N` on the under-trained branch whose loss meets `target_loss`.
pub fn min_cost_for_loss_bound(
    budget_flops: f64,
    experts: f64,
    target_loss: f64,
    params: &ScalingLawParams,
    cost: &CostModel<'_>,
    search: &SearchConfig,
) -> Result<AllocationResult> {
    let arch = cost.arch;
    let opt = moe_loss_optimal(budget_flops, experts, params, arch, search)?;
    if opt.loss > target_loss {
        return Err(Error::QualityBoundUnreachable {
            target_loss,
            best_loss: opt.loss,
            gap: opt.loss - target_loss,
        });
    }
    let n = if opt.loss == target_loss {
        opt.n_dense
    } else {
        let f = log_loss_on_budget(budget_flops, experts, params, arch);
        let ln_target = target_loss.ln();
        let xs = scan(search.n_min.ln(), opt.n_dense.ln());
        let fs = xs.iter().map(|&x| f(x)).collect::<Result<Vec<_>>>()?;
        for k in 1..fs.len() {
            if fs[k] > fs[k - 1] + 1e-12 * fs[k - 1].abs().max(1.0) {
                return Err(Error::NonMonotoneBranch { n: xs[k].exp() });
            }
        }
        if fs[0] <= ln_target {
            return Err(Error::SearchBoundsTooTight {
                endpoint: "lower",
                n: search.n_min,
            });
        }
        let j = fs.iter().position(|&v| v <= ln_target).unwrap_or(fs.len() - 1);
        let (mut lo, mut hi) = (xs[j - 1], xs[j]);
        while hi - lo > search.rel_tol {
            let mid = 0.5 * (lo + hi);
            if f(mid)? <= ln_target {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi.exp()
    };
    let serving = cost.min_cost_over_gpus(n, experts)?;
    AllocationResult::new(budget_flops, n, experts, opt.n_dense, params, arch, Some(&serving))
}

/// Bounded cost: the lowest-loss `E_prime` model no more expensive to serve
/// than the loss-optimal `E_base` model at the same budget.
pub fn min_loss_for_bounded_cost(
    budget_flops: f64,
    e_base: f64,
    e_prime: f64,
    params: &ScalingLawParams,
    cost: &CostModel<'_>,
    search: &SearchConfig,
) -> Result<AllocationResult> {
    let base = moe_loss_optimal(budget_flops, e_base, params, cost.arch, search)?;
    let bound = cost.min_cost_over_gpus(base.n_dense, e_base)?.cost_per_token;
    min_loss_for_cost_bound(budget_flops, e_prime, bound, params, cost, search)
}

/// Largest `N` up to the loss-optimal size whose cheapest serving cost stays
/// within `bound`.
pub fn min_loss_for_cost_bound(
    budget_flops: f64,
    experts: f64,
    bound: f64,
    params: &ScalingLawParams,
    cost: &CostModel<'_>,
    search: &SearchConfig,
) -> Result<AllocationResult> {
    if !(bound > 0.0) {
        return Err(Error::InvalidArgument(format!("cost bound must be positive, got {bound}")));
    }
    let arch = cost.arch;
    let opt = moe_loss_optimal(budget_flops, experts, params, arch, search)?;
    let price = |ln_n: f64| -> Result<Option<ServingPoint>> {
        match cost.min_cost_over_gpus(ln_n.exp(), experts) {
            Ok(p) => Ok(Some(p)),
            Err(e @ (Error::InvalidArgument(_) | Error::InvalidParams(_))) => Err(e),
            Err(_) => Ok(None),
        }
    };
    let within = |p: &Option<ServingPoint>| p.is_some_and(|p| p.cost_per_token <= bound);

    let x_opt = opt.n_dense.ln();
    let at_opt = price(x_opt)?;
    let (x, serving) = if within(&at_opt) {
        (x_opt, at_opt.unwrap())
    } else {
        let xs = scan(search.n_min.ln(), x_opt);
        let mut cheapest = f64::INFINITY;
        let mut last_ok = None;
        for (i, &x) in xs.iter().enumerate() {
            let p = price(x)?;
            if let Some(p) = &p {
                cheapest = cheapest.min(p.cost_per_token);
            }
            if within(&p) {
                last_ok = Some((i, p.unwrap()));
            }
        }
        let Some((i, mut best)) = last_ok else {
            return Err(Error::CostBoundUnreachable {
                bound,
                best_cost: cheapest,
            });
        };
        let (mut lo, mut hi) = (xs[i], xs[i + 1]);
        while hi - lo > search.rel_tol {
            let mid = 0.5 * (lo + hi);
            let p = price(mid)?;
            if within(&p) {
                lo = mid;
                best = p.unwrap();
            } else {
                hi = mid;
            }
        }
        (lo, best)
    };
    AllocationResult::new(budget_flops, x.exp(), experts, opt.n_dense, params, arch, Some(&serving))
}

/// Budget multiplier that lets `E_prime` match the loss-optimal `E_base`
/// loss. No inference inputs are involved.
pub fn flops_ratio_to_match(
    budget_base: f64,
    e_base: f64,
    e_prime: f64,
    params: &ScalingLawParams,
    arch: &ArchitectureConvention,
    search: &SearchConfig,
) -> Result<f64> {
    let target = moe_loss_optimal(budget_base, e_base, params, arch, search)?.loss;
    let gap = |ln_b: f64| -> Result<f64> {
        Ok(moe_loss_optimal(ln_b.exp(), e_prime, params, arch, search)?.loss - target)
    };
    let x0 = budget_base.ln();
    if gap(x0)? == 0.0 {
        return Ok(1.0);
    }
    let step = 10f64.ln();
    let (mut lo, mut hi) = (x0, x0);
    if gap(x0)? > 0.0 {
        // E_prime is worse here: more budget is needed.
        loop {
            hi += step;
            if hi - x0 > 6.0 * step {
                return Err(Error::NotBracketed("budget search for matching loss".into()));
            }
            if gap(hi)? <= 0.0 {
                break;
            }
            lo = hi;
        }
    } else {
        loop {
            lo -= step;
            if x0 - lo > 6.0 * step {
                return Err(Error::NotBracketed("budget search for matching loss".into()));
            }
            if gap(lo)? > 0.0 {
                break;
            }
            hi = lo;
        }
    }
    while hi - lo > search.rel_tol {
        let mid = 0.5 * (lo + hi);
        if gap(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((0.5 * (lo + hi) - x0).exp())
}

/// One row of a frontier sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub budget_flops: f64,
    pub experts: u32,
    /// `optimal` for the loss-optimal row, `curve` for the size sweep.
    pub kind: &'static str,
    pub point: usize,
    pub n_dense: f64,
    pub d_tokens: f64,
    pub predicted_loss: f64,
    pub training_flops: f64,
    pub overtrain_ratio: f64,
    pub cost_per_token: Option<f64>,
    pub best_gpus: Option<u32>,
    pub batch: Option<f64>,
    pub batch_floor: Option<f64>,
    pub extrapolated: bool,
    /// `ok`, or the reason the row is incomplete.
    pub status: String,
}

fn sweep_row(budget: f64, experts: u32, kind: &'static str, point: usize, ratio: f64) -> SweepRow {
    SweepRow {
        budget_flops: budget,
        experts,
        kind,
        point,
        n_dense: f64::NAN,
        d_tokens: f64::NAN,
        predicted_loss: f64::NAN,
        training_flops: f64::NAN,
        overtrain_ratio: ratio,
        cost_per_token: None,
        best_gpus: None,
        batch: None,
        batch_floor: None,
        extrapolated: false,
        status: "ok".into(),
    }
}

pub fn curve_ratios() -> Vec<f64> {
    let (a, b) = (CURVE_RATIO_RANGE.0.ln(), CURVE_RATIO_RANGE.1.ln());
    (0..CURVE_POINTS)
        .map(|k| match k {
            0 => CURVE_RATIO_RANGE.0,
            k if k == CURVE_POINTS - 1 => CURVE_RATIO_RANGE.1,
            k => (a + (b - a) * k as f64 / (CURVE_POINTS - 1) as f64).exp(),
        })
        .collect()
}

fn sweep_block(
    budget: f64,
    experts: u32,
    params: &ScalingLawParams,
    cost: &CostModel<'_>,
    search: &SearchConfig,
) -> Vec<SweepRow> {
    let e = f64::from(experts);
    let ratios = curve_ratios();
    let opt = match moe_loss_optimal(budget, e, params, cost.arch, search) {
        Ok(o) => o,
        Err(err) => {
            let status = format!("failed: {err}");
            let mut rows = vec![sweep_row(budget, experts, "optimal", 0, 1.0)];
            rows.extend(ratios.iter().enumerate().map(|(k, &r)| sweep_row(budget, experts, "curve", k, r)));
            rows.iter_mut().for_each(|r| r.status = status.clone());
            return rows;
        }
    };
    let fill = |kind: &'static str, point: usize, ratio: f64| {
        let mut row = sweep_row(budget, experts, kind, point, ratio);
        let n = opt.n_dense * ratio;
        let d = cost.arch.tokens_for_budget(budget, n, e);
        row.n_dense = n;
        row.d_tokens = d;
        row.training_flops = cost.arch.training_flops(n, d, e);
        match params.predict_loss(n, d, e) {
            Ok(l) => row.predicted_loss = l,
            Err(err) => {
                row.status = format!("failed: {err}");
                return row;
            }
        }
        match cost.min_cost_over_gpus(n, e) {
            Ok(p) => {
                row.cost_per_token = Some(p.cost_per_token);
                row.best_gpus = Some(p.gpus);
                row.batch = Some(p.batch);
                row.batch_floor = Some(p.batch.floor());
                row.extrapolated = p.extrapolated;
            }
            Err(err) => row.status = format!("unservable: {err}"),
        }
        row
    };
    let mut rows = vec![fill("optimal", 0, 1.0)];
    rows[0].n_dense = opt.n_dense;
    rows.extend(ratios.iter().enumerate().map(|(k, &r)| fill("curve", k, r)));
    rows
}

/// For each budget and expert count: the loss-optimal row followed by a
/// loss-vs-cost curve over log-spaced sizes in `[0.05, 1.5]·N_opt`.
/// Failures are recorded in the row status; the sweep itself never fails.
pub fn frontier_sweep(
    budgets: &[f64],
    experts: &[u32],
    params: &ScalingLawParams,
    cost: &CostModel<'_>,
    search: &SearchConfig,
) -> Vec<SweepRow> {
    let cells: Vec<(f64, u32)> = budgets
        .iter()
        .flat_map(|&b| experts.iter().map(move |&e| (b, e)))
        .collect();
    cells
        .into_par_iter()
        .map(|(b, e)| sweep_block(b, e, params, cost, search))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{GeometryFit, HardwareConfig, LatencyProfile};
    use crate::synth::{dense_lagrange_oracle, grid_argmin_loss, reference_params, synth_profile, AffineProfileModel, ProfileGrid};

    fn profile() -> LatencyProfile {
        synth_profile(&AffineProfileModel::reference(), &ProfileGrid::default()).unwrap()
    }

    struct Env {
        hw: HardwareConfig,
        geom: GeometryFit,
        prof: LatencyProfile,
        arch: ArchitectureConvention,
    }

    impl Env {
        fn new() -> Self {
            Self {
                hw: HardwareConfig::default(),
                geom: GeometryFit::reference(),
                prof: profile(),
                arch: ArchitectureConvention::default(),
            }
        }
        fn cost(&self) -> CostModel<'_> {
            CostModel::new(&self.hw, &self.geom, &self.prof, &self.arch).unwrap()
        }
    }

    #[test]
    fn dense_symmetric_and_hand_case() {
        let sym = DenseLawParams {
            l0: 1.0,
            coef_n: 2.0,
            coef_d: 2.0,
            alpha: 0.3,
            beta: 0.3,
        };
        let (n, d) = dense_optimal(6e18, &sym).unwrap();
        assert!((n / 1e9 - 1.0).abs() < 1e-12 && (d / 1e9 - 1.0).abs() < 1e-12);

        let p = DenseLawParams {
            l0: 0.0,
            coef_n: 2.0,
            coef_d: 3.0,
            alpha: 0.5,
            beta: 1.0,
        };
        let (n, d) = dense_optimal(6e6, &p).unwrap();
        assert!((n - 4807.498567691362).abs() < 1e-9, "{n}");
        assert!((d - 208.0083823051904).abs() < 1e-9, "{d}");
        assert!((6.0 * n * d / 6e6 - 1.0).abs() < 1e-15);
        assert!(dense_optimal(-1.0, &p).is_err());
        assert!(dense_optimal(1.0, &DenseLawParams { alpha: 0.0, ..p }).is_err());
    }

    #[test]
    fn dense_matches_oracle_and_first_order_conditions() {
        let p = DenseLawParams {
            l0: 1.69,
            coef_n: 406.4,
            coef_d: 410.7,
            alpha: 0.34,
            beta: 0.28,
        };
        let budget = 1e21;
        let (n, d) = dense_optimal(budget, &p).unwrap();
        let (on, od) = dense_lagrange_oracle(budget, &p).unwrap();
        assert!(((n - on) / on).abs() < 1e-9 && ((d - od) / od).abs() < 1e-9);
        let lambda = p.alpha * p.coef_n * n.powf(-p.alpha - 1.0) / (6.0 * d);
        let rhs = 6.0 * lambda * n;
        let lhs = p.beta * p.coef_d * d.powf(-p.beta - 1.0);
        assert!(((lhs - rhs) / rhs).abs() < 1e-8);
    }

    #[test]
    fn moe_optimum_agrees_with_dense_closed_form() {
        let dense = DenseLawParams {
            l0: 1.69,
            coef_n: 406.4,
            coef_d: 410.7,
            alpha: 0.34,
            beta: 0.28,
        };
        let arch = ArchitectureConvention::default();
        for budget in [1e18, 1e20, 1e22] {
            let (n, _) = dense_optimal(budget, &dense).unwrap();
            let o = moe_loss_optimal(budget, 1.0, &dense.as_moe(), &arch, &SearchConfig::default()).unwrap();
            assert!(((o.n_dense - n) / n).abs() < 1e-3, "{budget}: {} vs {n}", o.n_dense);
        }
    }

    #[test]
    fn moe_optimum_matches_grid_oracle() {
        let p = reference_params();
        let arch = ArchitectureConvention::default();
        let s = SearchConfig::default();
        let grid = 1000;
        let cell = (s.n_max / s.n_min).ln() / (grid - 1) as f64;
        for e in [1.0, 4.0, 16.0] {
            for budget in [1e19, 1e21, 1e23] {
                let o = moe_loss_optimal(budget, e, &p, &arch, &s).unwrap();
                let (gn, gl) = grid_argmin_loss(budget, e, &p, &arch, (s.n_min, s.n_max), grid).unwrap();
                assert!((o.n_dense / gn).ln().abs() <= cell, "{e} {budget}");
                assert!(o.loss <= gl);
                assert!((o.d_tokens * 6.0 * arch.activated_params(o.n_dense, e) / budget - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn symmetric_exponents_scale_with_square_root() {
        let mut p = reference_params();
        p.gamma = p.alpha;
        p.interaction = 0.0;
        p.coef_e = 1e-30;
        let arch = ArchitectureConvention::default();
        let s = SearchConfig::default();
        let a = moe_loss_optimal(1e20, 8.0, &p, &arch, &s).unwrap();
        let b = moe_loss_optimal(1e22, 8.0, &p, &arch, &s).unwrap();
        assert!((b.n_dense / a.n_dense / 10.0 - 1.0).abs() < 1e-5);
    }

    #[test]
    fn tight_bounds_are_reported() {
        let p = reference_params();
        let arch = ArchitectureConvention::default();
        let s = SearchConfig {
            n_max: 1e6,
            ..SearchConfig::default()
        };
        assert!(matches!(
            moe_loss_optimal(1e21, 4.0, &p, &arch, &s),
            Err(Error::SearchBoundsTooTight { endpoint: "upper", .. })
        ));
        let s = SearchConfig {
            n_min: 1e12,
            ..SearchConfig::default()
        };
        assert!(matches!(
            moe_loss_optimal(1e21, 4.0, &p, &arch, &s),
            Err(Error::SearchBoundsTooTight { endpoint: "lower", .. })
        ));
    }

    #[test]
    fn algorithms_are_fixed_points_at_equal_experts() {
        let env = Env::new();
        let cost = env.cost();
        let p = reference_params();
        let s = SearchConfig::default();
        let budget = 1e21;
        let base = loss_optimal_allocation(budget, 4.0, &p, &cost, &s).unwrap();
        let a1 = min_cost_for_bounded_loss(budget, 4.0, 4.0, &p, &cost, &s).unwrap();
        let a2 = min_loss_for_bounded_cost(budget, 4.0, 4.0, &p, &cost, &s).unwrap();
        let c = base.cost_per_token.unwrap();
        assert!((a1.cost_per_token.unwrap() / c - 1.0).abs() <= 10.0 * s.rel_tol);
        assert!((a1.overtrain_ratio - 1.0).abs() <= s.rel_tol);
        assert!((a2.predicted_loss / base.predicted_loss - 1.0).abs() <= 10.0 * s.rel_tol);
    }

    #[test]
    fn more_experts_are_cheaper_at_equal_quality() {
        let env = Env::new();
        let cost = env.cost();
        let p = reference_params();
        let s = SearchConfig::default();
        let budget = 1e21;
        let base = loss_optimal_allocation(budget, 4.0, &p, &cost, &s).unwrap();
        for e in [8.0, 16.0] {
            let r = min_cost_for_bounded_loss(budget, 4.0, e, &p, &cost, &s).unwrap();
            assert!(r.cost_per_token.unwrap() < base.cost_per_token.unwrap(), "{e}");
            assert!(r.overtrain_ratio < 1.0);
            assert!((r.predicted_loss / base.predicted_loss - 1.0).abs() <= 10.0 * s.rel_tol);
            assert!((r.training_flops / budget - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unreachable_bounds() {
        let env = Env::new();
        let cost = env.cost();
        let p = reference_params();
        let s = SearchConfig::default();
        // A single expert cannot reach the 16-expert optimum.
        assert!(matches!(
            min_cost_for_bounded_loss(1e21, 16.0, 1.0, &p, &cost, &s),
            Err(Error::QualityBoundUnreachable { .. })
        ));
        assert!(matches!(
            min_loss_for_cost_bound(1e21, 16.0, 1e-15, &p, &cost, &s),
            Err(Error::CostBoundUnreachable { .. })
        ));
    }

    #[test]
    fn duality_and_relaxation() {
        let env = Env::new();
        let cost = env.cost();
        let p = reference_params();
        let s = SearchConfig::default();
        let budget = 1e21;
        let target = moe_loss_optimal(budget, 4.0, &p, &env.arch, &s).unwrap().loss;
        let a1 = min_cost_for_bounded_loss(budget, 4.0, 16.0, &p, &cost, &s).unwrap();
        let a2 = min_loss_for_cost_bound(budget, 16.0, a1.cost_per_token.unwrap(), &p, &cost, &s).unwrap();
        assert!(a2.predicted_loss <= target * (1.0 + 1e-4));
        assert!(a2.cost_per_token.unwrap() <= a1.cost_per_token.unwrap());
        let relaxed = min_loss_for_cost_bound(budget, 16.0, 1.5 * a1.cost_per_token.unwrap(), &p, &cost, &s).unwrap();
        assert!(relaxed.predicted_loss <= a2.predicted_loss);
    }

    #[test]
    fn flops_ratio() {
        let p = reference_params();
        let arch = ArchitectureConvention::default();
        let s = SearchConfig::default();
        let same = flops_ratio_to_match(1e21, 4.0, 4.0, &p, &arch, &s).unwrap();
        assert!((same - 1.0).abs() <= s.rel_tol);
        let r = flops_ratio_to_match(1e21, 4.0, 16.0, &p, &arch, &s).unwrap();
        assert!(r < 1.0);
        let back = flops_ratio_to_match(1e21 * r, 16.0, 4.0, &p, &arch, &s).unwrap();
        assert!((r * back - 1.0).abs() < 1e-5);
    }

    #[test]
    fn sweep_shape_and_budget_equality() {
        let env = Env::new();
        let cost = env.cost();
        let p = reference_params();
        let s = SearchConfig::default();
        let rows = frontier_sweep(&[1e20, 1e21], &[1, 4, 16], &p, &cost, &s);
        assert_eq!(rows.len(), 2 * 3 * (1 + CURVE_POINTS));
        for r in &rows {
            assert_eq!(r.status, "ok", "{r:?}");
            assert!((r.training_flops / r.budget_flops - 1.0).abs() < 1e-6);
        }
        for block in rows.chunks(1 + CURVE_POINTS) {
            let opt = &block[0];
            let curve_min = block[1..].iter().map(|r| r.predicted_loss).fold(f64::INFINITY, f64::min);
            assert!(opt.predicted_loss <= curve_min);
            let spacing = (CURVE_RATIO_RANGE.1 / CURVE_RATIO_RANGE.0).ln() / (CURVE_POINTS - 1) as f64;
            let near = moe_loss_optimal(opt.budget_flops, opt.experts as f64, &p, &env.arch, &s).unwrap();
            let at = |r: f64| {
                let n = near.n_dense * r;
                p.predict_loss(n, env.arch.tokens_for_budget(opt.budget_flops, n, opt.experts as f64), opt.experts as f64)
                    .unwrap()
            };
            assert!(curve_min <= at(spacing.exp()).max(at((-spacing).exp())));
        }
        // More experts never lose at a fixed budget.
        for budget_rows in rows.chunks(3 * (1 + CURVE_POINTS)) {
            let opts: Vec<f64> = budget_rows.iter().filter(|r| r.kind == "optimal").map(|r| r.predicted_loss).collect();
            assert!(opts.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn sweep_flags_failures_without_aborting() {
        let env = Env::new();
        let cost = env.cost();
        let p = reference_params();
        let s = SearchConfig {
            n_max: 1e7,
            ..SearchConfig::default()
        };
        let rows = frontier_sweep(&[1e23], &[4], &p, &cost, &s);
        assert_eq!(rows.len(), 1 + CURVE_POINTS);
        assert!(rows.iter().all(|r| r.status.starts_with("failed")));
    }
}
