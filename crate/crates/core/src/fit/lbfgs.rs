//! Limited-memory BFGS with a strong-Wolfe line search.
//!
//! The objective is supplied as a closure that returns the function value and
//! writes the gradient into its second argument. Non-finite values are treated
//! as "too large", so an objective may signal an infeasible region with a big
//! finite penalty or with `f64::INFINITY` and the line search backs off.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy)]
pub struct LbfgsOptions {
    /// Number of correction pairs kept.
    pub memory: usize,
    pub max_iterations: usize,
    /// Relative change in objective below which the search stops.
    pub f_tol: f64,
    /// Infinity norm of the gradient below which the search stops.
    pub g_tol: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iterations: 1000,
            f_tol: 1e-9,
            g_tol: 1e-14,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;
const MAX_LINE_EVALS: usize = 40;

struct Counter<F> {
    f: F,
    evaluations: usize,
}

impl<F: FnMut(&[f64], &mut [f64]) -> f64> Counter<F> {
    fn eval(&mut self, x: &[f64], g: &mut [f64]) -> f64 {
        self.evaluations += 1;
        let v = (self.f)(x, g);
        if v.is_finite() && g.iter().all(|gi| gi.is_finite()) {
            v
        } else {
            f64::INFINITY
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Minimizes `f` from `x0`.
pub fn minimize<F>(f: F, x0: &[f64], opts: &LbfgsOptions) -> Minimum
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut obj = Counter { f, evaluations: 0 };
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut fx = obj.eval(&x, &mut g);
    if !fx.is_finite() {
        return Minimum {
            x,
            value: fx,
            iterations: 0,
            evaluations: obj.evaluations,
            converged: false,
        };
    }

    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut dir = vec![0.0; n];
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut alpha_buf = vec![0.0; opts.memory];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        if inf_norm(&g) <= opts.g_tol {
            converged = true;
            break;
        }

        // Two-loop recursion for dir = -H g.
        dir.iter_mut().zip(&g).for_each(|(d, gi)| *d = -gi);
        for (i, (s, y, rho)) in history.iter().enumerate().rev() {
            let a = rho * dot(s, &dir);
            alpha_buf[i] = a;
            dir.iter_mut().zip(y).for_each(|(d, yi)| *d -= a * yi);
        }
        if let Some((s, y, _)) = history.back() {
            let gamma = dot(s, y) / dot(y, y);
            dir.iter_mut().for_each(|d| *d *= gamma);
        }
        for (i, (s, y, rho)) in history.iter().enumerate() {
            let b = rho * dot(y, &dir);
            let a = alpha_buf[i];
            dir.iter_mut().zip(s).for_each(|(d, si)| *d += (a - b) * si);
        }

        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            history.clear();
            dir.iter_mut().zip(&g).for_each(|(d, gi)| *d = -gi);
            slope = dot(&g, &dir);
        }
        let initial_step = if history.is_empty() {
            (1.0 / inf_norm(&g)).min(1.0)
        } else {
            1.0
        };

        let step = line_search(
            &mut obj, &x, fx, slope, &dir, initial_step, &mut x_new, &mut g_new,
        );
        let Some(f_new) = step else {
            if !history.is_empty() {
                // Retry along steepest descent before giving up.
                history.clear();
                continue;
            }
            converged = inf_norm(&g) <= opts.g_tol.max(1e-8 * (1.0 + fx.abs()));
            break;
        };
        iterations += 1;

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-300 {
            if history.len() == opts.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }

        let f_old = fx;
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        fx = f_new;

        let scale = f_old.abs().max(fx.abs());
        if (f_old - fx).abs() <= opts.f_tol * scale || fx == 0.0 {
            converged = true;
            break;
        }
    }

    Minimum {
        x,
        value: fx,
        iterations,
        evaluations: obj.evaluations,
        converged,
    }
}

/// Strong-Wolfe line search (bracketing + zoom). Returns the accepted value
/// with the point and gradient written to `x_out`, `g_out`.
#[allow(clippy::too_many_arguments)]
fn line_search<F>(
    obj: &mut Counter<F>,
    x: &[f64],
    f0: f64,
    slope0: f64,
    dir: &[f64],
    initial_step: f64,
    x_out: &mut [f64],
    g_out: &mut [f64],
) -> Option<f64>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let mut eval = |obj: &mut Counter<F>, a: f64, x_out: &mut [f64], g_out: &mut [f64]| -> (f64, f64) {
        x_out
            .iter_mut()
            .zip(x.iter().zip(dir))
            .for_each(|(xo, (xi, di))| *xo = xi + a * di);
        let v = obj.eval(x_out, g_out);
        let d = if v.is_finite() { dot(g_out, dir) } else { f64::NAN };
        (v, d)
    };

    let mut a_prev = 0.0;
    let mut f_prev = f0;
    let mut d_prev = slope0;
    let mut a = initial_step;
    let mut evals = 0;

    loop {
        let (fa, da) = eval(obj, a, x_out, g_out);
        evals += 1;
        if !fa.is_finite() || fa > f0 + C1 * a * slope0 || (evals > 1 && fa >= f_prev) {
            return zoom(obj, &mut eval, f0, slope0, (a_prev, f_prev, d_prev), (a, fa, da), evals, x_out, g_out);
        }
        if da.abs() <= -C2 * slope0 {
            return Some(fa);
        }
        if da >= 0.0 {
            return zoom(obj, &mut eval, f0, slope0, (a, fa, da), (a_prev, f_prev, d_prev), evals, x_out, g_out);
        }
        if evals >= MAX_LINE_EVALS {
            // Sufficient decrease holds; accept even without the curvature condition.
            return Some(fa);
        }
        a_prev = a;
        f_prev = fa;
        d_prev = da;
        a *= 2.0;
    }
}

#[allow(clippy::too_many_arguments)]
fn zoom<F, E>(
    obj: &mut Counter<F>,
    eval: &mut E,
    f0: f64,
    slope0: f64,
    mut lo: (f64, f64, f64),
    mut hi: (f64, f64, f64),
    mut evals: usize,
    x_out: &mut [f64],
    g_out: &mut [f64],
) -> Option<f64>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
    E: FnMut(&mut Counter<F>, f64, &mut [f64], &mut [f64]) -> (f64, f64),
{
    while evals < MAX_LINE_EVALS {
        let a = interpolate(lo, hi);
        let (fa, da) = eval(obj, a, x_out, g_out);
        evals += 1;
        if !fa.is_finite() || fa > f0 + C1 * a * slope0 || fa >= lo.1 {
            hi = (a, fa, da);
        } else {
            if da.abs() <= -C2 * slope0 {
                return Some(fa);
            }
            if da * (hi.0 - lo.0) >= 0.0 {
                hi = lo;
            }
            lo = (a, fa, da);
        }
        if (hi.0 - lo.0).abs() <= 1e-16 * lo.0.abs().max(1e-300) {
            break;
        }
    }
    // Fall back to the best sufficient-decrease point found, if any.
    if lo.0 > 0.0 && lo.1 < f0 {
        let (fa, _) = eval(obj, lo.0, x_out, g_out);
        return Some(fa);
    }
    None
}

/// Cubic interpolation of the step inside `[lo, hi]`, safeguarded to the
/// interior; falls back to bisection.
fn interpolate(lo: (f64, f64, f64), hi: (f64, f64, f64)) -> f64 {
    let (a0, f0, d0) = lo;
    let (a1, f1, d1) = hi;
    let mid = 0.5 * (a0 + a1);
    if !(f1.is_finite() && d1.is_finite()) {
        return mid;
    }
    let d_1 = d0 + d1 - 3.0 * (f0 - f1) / (a0 - a1);
    let disc = d_1 * d_1 - d0 * d1;
    if disc < 0.0 {
        return mid;
    }
    let d_2 = (a1 - a0).signum() * disc.sqrt();
    let a = a1 - (a1 - a0) * (d1 + d_2 - d_1) / (d1 - d0 + 2.0 * d_2);
    let (left, right) = if a0 < a1 { (a0, a1) } else { (a1, a0) };
    let margin = 0.1 * (right - left);
    if a.is_finite() && a > left + margin && a < right - margin {
        a
    } else {
        mid
    }
}
