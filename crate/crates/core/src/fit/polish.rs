//! Levenberg–Marquardt refinement of a Huber fit.
//!
//! Each step solves the iteratively-reweighted Gauss–Newton system
//! `(JᵀWJ + λ·diag(JᵀWJ)) s = -Jᵀψ(r)` with Huber weights
//! `w = min(1, δ/|r|)`. Steps are accepted only when the Huber objective
//! decreases, so refinement never worsens its starting point.

use super::objective::{huber_objective, huber_slope, Prepared, ResidualModel, PENALTY};

#[derive(Debug, Clone)]
pub(crate) struct Refined {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

const LAMBDA_MAX: f64 = 1e16;
const STALL_LIMIT: usize = 3;

pub(crate) fn refine<M: ResidualModel>(
    x0: &[f64],
    runs: &[Prepared],
    delta: f64,
    max_iterations: usize,
    tol: f64,
) -> Refined {
    let dim = M::DIM;
    let mut scratch = vec![0.0; dim];
    let mut x = x0.to_vec();
    let mut value = huber_objective::<M>(&x, runs, delta, &mut scratch);
    if value >= PENALTY {
        return Refined {
            x,
            value,
            iterations: 0,
            converged: false,
        };
    }

    let mut lambda = 1e-3;
    let mut jac = vec![0.0; dim];
    let mut grad = vec![0.0; dim];
    let mut hess = vec![0.0; dim * dim];
    let mut system = vec![0.0; dim * dim];
    let mut step = vec![0.0; dim];
    let mut trial = vec![0.0; dim];
    let mut stalls = 0;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < max_iterations {
        if value == 0.0 {
            converged = true;
            break;
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        hess.iter_mut().for_each(|h| *h = 0.0);
        let st = M::state(&x);
        for run in runs {
            let Some(r) = M::residual(&st, run, &mut jac) else {
                // Unreachable for an accepted point; bail out conservatively.
                return Refined {
                    x,
                    value,
                    iterations,
                    converged: false,
                };
            };
            let psi = huber_slope(r, delta);
            let w = if r.abs() <= delta { 1.0 } else { delta / r.abs() };
            for i in 0..dim {
                grad[i] += psi * jac[i];
                let wi = w * jac[i];
                for j in 0..=i {
                    hess[i * dim + j] += wi * jac[j];
                }
            }
        }
        for i in 0..dim {
            for j in 0..i {
                hess[j * dim + i] = hess[i * dim + j];
            }
        }
        let max_diag = (0..dim).map(|i| hess[i * dim + i]).fold(0.0f64, f64::max);
        if max_diag == 0.0 || grad.iter().all(|g| *g == 0.0) {
            converged = true;
            break;
        }

        let mut accepted = None;
        while lambda <= LAMBDA_MAX {
            system.copy_from_slice(&hess);
            for i in 0..dim {
                let d = hess[i * dim + i].max(1e-12 * max_diag);
                system[i * dim + i] += lambda * d;
            }
            step.iter_mut().zip(&grad).for_each(|(s, g)| *s = -g);
            if cholesky_solve(&mut system, &mut step, dim) {
                trial.iter_mut().zip(x.iter().zip(&step)).for_each(|(t, (xi, si))| *t = xi + si);
                let v = huber_objective::<M>(&trial, runs, delta, &mut scratch);
                if v < value {
                    accepted = Some(v);
                    lambda = (lambda / 3.0).max(1e-15);
                    break;
                }
            }
            lambda *= 4.0;
        }
        iterations += 1;

        let Some(v) = accepted else {
            converged = true;
            break;
        };
        let rel = (value - v) / value;
        std::mem::swap(&mut x, &mut trial);
        value = v;
        if rel <= tol {
            stalls += 1;
            if stalls >= STALL_LIMIT {
                converged = true;
                break;
            }
        } else {
            stalls = 0;
        }
    }

    Refined {
        x,
        value,
        iterations,
        converged,
    }
}

/// In-place Cholesky solve of the dense SPD system `a · x = b` (row-major
/// `n × n`). Returns `false` if `a` is not numerically positive definite.
fn cholesky_solve(a: &mut [f64], b: &mut [f64], n: usize) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i * n + k] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= a[k * n + i] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
    true
}
