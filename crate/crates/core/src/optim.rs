//! Derivative-free minimization and damped Newton root finding.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NelderMeadOptions {
    /// Iterations per restart.
    pub max_iter: usize,
    /// Simplex size tolerance (infinity norm).
    pub xtol: f64,
    pub initial_step: f64,
    pub max_restarts: usize,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self { max_iter: 2000, xtol: 1e-9, initial_step: 0.1, max_restarts: 20 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub fx: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Nelder-Mead with restarts from the incumbent until a restart no longer improves it.
/// Non-finite objective values are treated as `+∞`.
pub fn nelder_mead(f: impl Fn(&[f64]) -> f64, x0: &[f64], opts: &NelderMeadOptions) -> NelderMeadResult {
    let eval = |x: &[f64]| {
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let mut best = x0.to_vec();
    let mut fbest = eval(&best);
    let mut total = 0;
    let mut converged = false;
    let mut step = opts.initial_step;
    for _ in 0..=opts.max_restarts {
        let (x, fx, it, ok) = nelder_mead_once(&eval, &best, step, opts);
        total += it;
        let improved = fbest - fx;
        if fx <= fbest {
            best = x;
            fbest = fx;
        }
        converged = ok;
        if ok && improved.abs() <= 1e-15 * (1.0 + fbest.abs()) {
            break;
        }
        step = (step * 0.5).max(opts.xtol * 1e3);
    }
    NelderMeadResult { x: best, fx: fbest, iterations: total, converged }
}

fn nelder_mead_once(
    f: &impl Fn(&[f64]) -> f64,
    x0: &[f64],
    step: f64,
    opts: &NelderMeadOptions,
) -> (Vec<f64>, f64, usize, bool) {
    let n = x0.len();
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += if x[i].abs() > 1.0 { step * x[i].abs() } else { step };
        simplex.push(x);
    }
    let mut fs: Vec<f64> = simplex.iter().map(|x| f(x)).collect();
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    for it in 0..opts.max_iter {
        let mut idx: Vec<usize> = (0..=n).collect();
        idx.sort_by(|&a, &b| fs[a].total_cmp(&fs[b]));
        simplex = idx.iter().map(|&i| simplex[i].clone()).collect();
        fs = idx.iter().map(|&i| fs[i]).collect();

        let size = simplex[1..]
            .iter()
            .map(|x| x.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if size < opts.xtol {
            return (simplex[0].clone(), fs[0], it, true);
        }

        let centroid: Vec<f64> = (0..n).map(|k| simplex[..n].iter().map(|x| x[k]).sum::<f64>() / n as f64).collect();
        let along = |t: f64| -> Vec<f64> { (0..n).map(|k| centroid[k] + t * (simplex[n][k] - centroid[k])).collect() };
        let xr = along(-alpha);
        let fr = f(&xr);
        if fr < fs[0] {
            let xe = along(-gamma);
            let fe = f(&xe);
            if fe < fr {
                simplex[n] = xe;
                fs[n] = fe;
            } else {
                simplex[n] = xr;
                fs[n] = fr;
            }
        } else if fr < fs[n - 1] {
            simplex[n] = xr;
            fs[n] = fr;
        } else {
            let (xc, fc) = if fr < fs[n] {
                let xc = along(-rho);
                let fc = f(&xc);
                (xc, fc)
            } else {
                let xc = along(rho);
                let fc = f(&xc);
                (xc, fc)
            };
            if fc < fs[n].min(fr) {
                simplex[n] = xc;
                fs[n] = fc;
            } else {
                for i in 1..=n {
                    let xi: Vec<f64> = (0..n).map(|k| simplex[0][k] + sigma * (simplex[i][k] - simplex[0][k])).collect();
                    fs[i] = f(&xi);
                    simplex[i] = xi;
                }
            }
        }
    }
    let best = (0..=n).min_by(|&a, &b| fs[a].total_cmp(&fs[b])).expect("nonempty simplex");
    (simplex[best].clone(), fs[best], opts.max_iter, false)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RootOptions {
    /// Absolute tolerance on the residual norm.
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Relative finite-difference step: `h_j = fd_step · (1 + |x_j|)`.
    pub fd_step: f64,
}

impl Default for RootOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 100, max_halvings: 20, fd_step: 1e-5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootResult {
    pub x: Vec<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
    pub history: Vec<f64>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Central finite-difference Jacobian, row-major `m × n`.
pub fn fd_jacobian(f: &impl Fn(&[f64]) -> Result<Vec<f64>>, x: &[f64], rel_step: f64) -> Result<Vec<f64>> {
    let n = x.len();
    let mut cols = Vec::with_capacity(n);
    for j in 0..n {
        let h = rel_step * (1.0 + x[j].abs());
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += h;
        xm[j] -= h;
        let fp = f(&xp)?;
        let fm = f(&xm)?;
        cols.push(fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect::<Vec<f64>>());
    }
    let m = cols.first().map_or(0, |c| c.len());
    let mut jac = vec![0.0; m * n];
    for (j, col) in cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            jac[i * n + j] = *v;
        }
    }
    Ok(jac)
}

/// Solve the square system `A x = b`; `None` if `A` is numerically singular.
pub fn solve(a: &[f64], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let m = DMatrix::from_row_slice(n, n, a);
    let lu = m.lu();
    let x = lu.solve(&DVector::from_column_slice(b))?;
    if x.iter().all(|v| v.is_finite()) {
        Some(x.iter().copied().collect())
    } else {
        None
    }
}

/// Damped Newton iteration for `F(x) = 0` with step halving on the residual norm.
/// `jac` returns a row-major Jacobian; pass `None` to use finite differences.
pub fn newton_root(
    f: impl Fn(&[f64]) -> Result<Vec<f64>>,
    jac: Option<&dyn Fn(&[f64]) -> Result<Vec<f64>>>,
    x0: &[f64],
    opts: &RootOptions,
) -> Result<RootResult> {
    let mut x = x0.to_vec();
    let mut fx = f(&x)?;
    let mut r = norm(&fx);
    let mut history = vec![r];
    for it in 0..opts.max_iter {
        if r <= opts.tol {
            return Ok(RootResult { x, residual_norm: r, iterations: it, history });
        }
        let j = match jac {
            Some(jf) => jf(&x)?,
            None => fd_jacobian(&f, &x, opts.fd_step)?,
        };
        let step = solve(&j, &fx).ok_or_else(|| Error::Solver {
            msg: "singular Jacobian".into(),
            iterations: it,
            residual: r,
            residual_trace: history.clone(),
        })?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..=opts.max_halvings {
            let cand: Vec<f64> = x.iter().zip(&step).map(|(a, s)| a - t * s).collect();
            if let Ok(fc) = f(&cand) {
                let rc = norm(&fc);
                if rc.is_finite() && rc < r {
                    x = cand;
                    fx = fc;
                    r = rc;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        history.push(r);
        if !accepted {
            if r <= opts.tol * 1e2 {
                return Ok(RootResult { x, residual_norm: r, iterations: it + 1, history });
            }
            return Err(Error::Solver {
                msg: "no step decreased the residual".into(),
                iterations: it + 1,
                residual: r,
                residual_trace: history,
            });
        }
    }
    if r <= opts.tol {
        let iterations = opts.max_iter;
        return Ok(RootResult { x, residual_norm: r, iterations, history });
    }
    Err(Error::Solver { msg: "iteration limit reached".into(), iterations: opts.max_iter, residual: r, residual_trace: history })
}

/// Regularized Newton minimization of `obj` given its gradient `grad`.
///
/// The Hessian is the symmetrized Jacobian of `grad` (analytic if `hess` is given,
/// finite differences otherwise). Each step solves `(H + λI) s = -∇` and is accepted
/// only if the objective decreases; `λ` shrinks after a success and grows after a
/// failure, so the iteration moves from Newton towards gradient descent where the
/// Hessian is indefinite or singular. Convergence is declared on the gradient norm.
pub fn newton_minimize(
    obj: impl Fn(&[f64]) -> Result<f64>,
    grad: impl Fn(&[f64]) -> Result<Vec<f64>>,
    hess: Option<&dyn Fn(&[f64]) -> Result<Vec<f64>>>,
    x0: &[f64],
    opts: &RootOptions,
) -> Result<RootResult> {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut fx = obj(&x)?;
    let mut g = grad(&x)?;
    let mut r = norm(&g);
    let mut history = vec![r];
    let mut lambda = 0.0f64;
    let mut stalls = 0;
    for it in 0..opts.max_iter {
        if r <= opts.tol {
            return Ok(RootResult { x, residual_norm: r, iterations: it, history });
        }
        let mut h = match hess {
            Some(hf) => hf(&x)?,
            None => fd_jacobian(&grad, &x, opts.fd_step)?,
        };
        for i in 0..n {
            for j in 0..i {
                let s = 0.5 * (h[i * n + j] + h[j * n + i]);
                h[i * n + j] = s;
                h[j * n + i] = s;
            }
        }
        let scale = (0..n).map(|i| h[i * n + i].abs()).fold(0.0, f64::max).max(1e-12);
        let mut accepted = false;
        for _ in 0..=2 * opts.max_halvings {
            let mut a = h.clone();
            for i in 0..n {
                a[i * n + i] += lambda * scale;
            }
            let step = DMatrix::from_row_slice(n, n, &a)
                .cholesky()
                .map(|c| c.solve(&DVector::from_column_slice(&g)));
            if let Some(step) = step {
                let cand: Vec<f64> = x.iter().zip(step.iter()).map(|(a, s)| a - s).collect();
                if let Ok(fc) = obj(&cand) {
                    if fc.is_finite() && fc <= fx {
                        let gc = grad(&cand)?;
                        let rc = norm(&gc);
                        if fc < fx || rc < r {
                            x = cand;
                            fx = fc;
                            g = gc;
                            r = rc;
                            lambda = if lambda < 1e-8 { 0.0 } else { lambda / 10.0 };
                            accepted = true;
                            break;
                        }
                    }
                }
            }
            lambda = if lambda == 0.0 { 1e-6 } else { lambda * 10.0 };
        }
        history.push(r);
        if !accepted {
            stalls += 1;
            if r <= opts.tol * 1e2 || stalls > 2 {
                if r <= opts.tol * 1e2 {
                    return Ok(RootResult { x, residual_norm: r, iterations: it + 1, history });
                }
                return Err(Error::Solver {
                    msg: "no step decreased the objective".into(),
                    iterations: it + 1,
                    residual: r,
                    residual_trace: history,
                });
            }
        }
    }
    if r <= opts.tol {
        return Ok(RootResult { x, residual_norm: r, iterations: opts.max_iter, history });
    }
    Err(Error::Solver { msg: "iteration limit reached".into(), iterations: opts.max_iter, residual: r, residual_trace: history })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nelder_mead_rosenbrock() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let r = nelder_mead(f, &[-1.2, 1.0], &NelderMeadOptions::default());
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6, "{:?}", r);
    }

    #[test]
    fn newton_solves_nonlinear_system() {
        let f = |x: &[f64]| -> Result<Vec<f64>> { Ok(vec![x[0] * x[0] + x[1] - 3.0, x[0] - x[1] * x[1] + 1.0]) };
        let r = newton_root(f, None, &[1.0, 1.0], &RootOptions::default()).unwrap();
        assert!(r.residual_norm < 1e-10);
        assert!((r.x[0] * r.x[0] + r.x[1] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn newton_reports_failure_with_trace() {
        let f = |x: &[f64]| -> Result<Vec<f64>> { Ok(vec![x[0] * x[0] + 1.0]) };
        match newton_root(f, None, &[0.5], &RootOptions::default()) {
            Err(Error::Solver { residual_trace, .. }) => assert!(!residual_trace.is_empty()),
            other => panic!("expected solver error, got {other:?}"),
        }
    }
}
