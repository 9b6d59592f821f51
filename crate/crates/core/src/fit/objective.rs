//! Huber objective in log-loss space over an unconstrained parameter vector.
//!
//! MoE vector layout: `[ln coef_N, ln coef_E, ln coef_D, irreducible, alpha,
//! beta, gamma, interaction, u, v]` with `e_start = 1 + e^u` and
//! `e_max = e_start + e^v`. Dense layout: `[ln coef_N, ln coef_D, l0, alpha, beta]`.

use crate::law::{DenseLawParams, ScalingLawParams};

use super::TrainingRun;

/// Objective value reported for points where the loss bracket is non-positive.
pub const PENALTY: f64 = 1e30;

pub const MOE_DIM: usize = 10;
pub const DENSE_DIM: usize = 5;

pub fn huber(residual: f64, delta: f64) -> f64 {
    let a = residual.abs();
    if a <= delta {
        0.5 * residual * residual
    } else {
        delta * (a - 0.5 * delta)
    }
}

pub(crate) fn huber_slope(residual: f64, delta: f64) -> f64 {
    residual.clamp(-delta, delta)
}

/// Per-run quantities that do not depend on the parameters.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Prepared {
    ln_n: f64,
    ln_d: f64,
    experts: f64,
    ln_loss: f64,
}

pub(crate) fn prepare(runs: &[TrainingRun]) -> Vec<Prepared> {
    runs.iter()
        .map(|r| Prepared {
            ln_n: r.n_dense.ln(),
            ln_d: r.d_tokens.ln(),
            experts: r.experts,
            ln_loss: r.val_loss.ln(),
        })
        .collect()
}

/// A model whose log-loss residual and its gradient can be evaluated per run.
pub(crate) trait ResidualModel: Sync {
    const DIM: usize;
    /// Parameter-only quantities, computed once per evaluation.
    type State;

    fn state(x: &[f64]) -> Self::State;

    /// Residual `log L̂ - log L` for one run, with its gradient written into
    /// `jac`. `None` when the loss bracket is non-positive.
    fn residual(state: &Self::State, run: &Prepared, jac: &mut [f64]) -> Option<f64>;
}

pub(crate) struct Moe;
pub(crate) struct Dense;

pub(crate) struct MoeState {
    a: f64,
    b: f64,
    c: f64,
    f: f64,
    alpha: f64,
    beta: f64,
    gamma: f64,
    d: f64,
    eu: f64,
    ev: f64,
    s: f64,
    m: f64,
}

impl ResidualModel for Moe {
    const DIM: usize = MOE_DIM;
    type State = MoeState;

    fn state(x: &[f64]) -> MoeState {
        let (eu, ev) = (x[8].exp(), x[9].exp());
        let s = 1.0 + eu;
        MoeState {
            a: x[0].exp(),
            b: x[1].exp(),
            c: x[2].exp(),
            f: x[3],
            alpha: x[4],
            beta: x[5],
            gamma: x[6],
            d: x[7],
            eu,
            ev,
            s,
            m: s + ev,
        }
    }

    fn residual(st: &MoeState, run: &Prepared, jac: &mut [f64]) -> Option<f64> {
        let (e_hat, de_ds, de_dm) = e_hat_with_partials(run.experts, st.s, st.m);
        let ln_e = e_hat.ln();
        let ta = st.a * (-st.alpha * run.ln_n).exp();
        let tb = st.b * (-st.beta * ln_e).exp();
        let tc = st.c * (-st.gamma * run.ln_d).exp();
        let bracket = ta + tb + tc + st.f;
        if !(bracket > 0.0 && bracket.is_finite()) {
            return None;
        }
        let inv = 1.0 / bracket;
        jac[0] = inv * ta;
        jac[1] = inv * tb;
        jac[2] = inv * tc;
        jac[3] = inv;
        jac[4] = -inv * ta * run.ln_n;
        jac[5] = -inv * tb * ln_e;
        jac[6] = -inv * tc * run.ln_d;
        jac[7] = run.ln_n * ln_e;
        // d(log L̂)/dÊ, chained through e_start = 1 + e^u and e_max = e_start + e^v.
        let dl_de = (-st.beta * tb * inv + st.d * run.ln_n) / e_hat;
        jac[8] = dl_de * (de_ds + de_dm) * st.eu;
        jac[9] = dl_de * de_dm * st.ev;
        Some(bracket.ln() + st.d * run.ln_n * ln_e - run.ln_loss)
    }
}

pub(crate) struct DenseState {
    a: f64,
    b: f64,
    l0: f64,
    alpha: f64,
    beta: f64,
}

impl ResidualModel for Dense {
    const DIM: usize = DENSE_DIM;
    type State = DenseState;

    fn state(x: &[f64]) -> DenseState {
        DenseState {
            a: x[0].exp(),
            b: x[1].exp(),
            l0: x[2],
            alpha: x[3],
            beta: x[4],
        }
    }

    fn residual(st: &DenseState, run: &Prepared, jac: &mut [f64]) -> Option<f64> {
        let ta = st.a * (-st.alpha * run.ln_n).exp();
        let tb = st.b * (-st.beta * run.ln_d).exp();
        let loss = st.l0 + ta + tb;
        if !(loss > 0.0 && loss.is_finite()) {
            return None;
        }
        let inv = 1.0 / loss;
        jac[0] = inv * ta;
        jac[1] = inv * tb;
        jac[2] = inv;
        jac[3] = -inv * ta * run.ln_n;
        jac[4] = -inv * tb * run.ln_d;
        Some(loss.ln() - run.ln_loss)
    }
}

/// Huber objective of model `M`; writes the gradient into `grad`.
/// Returns [`PENALTY`] with a zero gradient where any bracket is non-positive.
pub(crate) fn huber_objective<M: ResidualModel>(x: &[f64], runs: &[Prepared], delta: f64, grad: &mut [f64]) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let st = M::state(x);
    let mut jac = [0.0; MOE_DIM];
    let jac = &mut jac[..M::DIM];
    let mut total = 0.0;
    for run in runs {
        let Some(r) = M::residual(&st, run, jac) else {
            grad.iter_mut().for_each(|g| *g = 0.0);
            return PENALTY;
        };
        total += huber(r, delta);
        let w = huber_slope(r, delta);
        grad.iter_mut().zip(jac.iter()).for_each(|(g, j)| *g += w * j);
    }
    if total.is_finite() {
        total
    } else {
        grad.iter_mut().for_each(|g| *g = 0.0);
        PENALTY
    }
}

pub fn moe_to_vector(p: &ScalingLawParams) -> [f64; MOE_DIM] {
    [
        p.coef_n.ln(),
        p.coef_e.ln(),
        p.coef_d.ln(),
        p.irreducible,
        p.alpha,
        p.beta,
        p.gamma,
        p.interaction,
        (p.e_start - 1.0).ln(),
        (p.e_max - p.e_start).ln(),
    ]
}

pub fn moe_from_vector(x: &[f64]) -> ScalingLawParams {
    let e_start = 1.0 + x[8].exp();
    ScalingLawParams {
        coef_n: x[0].exp(),
        coef_e: x[1].exp(),
        coef_d: x[2].exp(),
        irreducible: x[3],
        alpha: x[4],
        beta: x[5],
        gamma: x[6],
        interaction: x[7],
        e_start,
        e_max: e_start + x[9].exp(),
    }
}

pub fn dense_to_vector(p: &DenseLawParams) -> [f64; DENSE_DIM] {
    [p.coef_n.ln(), p.coef_d.ln(), p.l0, p.alpha, p.beta]
}

pub fn dense_from_vector(x: &[f64]) -> DenseLawParams {
    DenseLawParams {
        coef_n: x[0].exp(),
        coef_d: x[1].exp(),
        l0: x[2],
        alpha: x[3],
        beta: x[4],
    }
}

/// Saturation transform and its partials with respect to `(e_start, e_max)`.
fn e_hat_with_partials(experts: f64, s: f64, m: f64) -> (f64, f64, f64) {
    let x = experts - 1.0;
    let spread = m - s;
    let p = x * spread + s * m;
    let q = x * spread + m * m;
    let q2 = q * q;
    let e_hat = if x == 0.0 { s } else { m * p / q };
    let d_s = m * ((m - x) * q + x * p) / q2;
    let d_m = p / q + m * ((x + s) * q - p * (x + 2.0 * m)) / q2;
    (e_hat, d_s, d_m)
}
