//! Projection of a counterfactual density onto a model family.
//!
//! The projection parameter solves the moment condition `m(β) = 0`. Its
//! one-step estimator solves `m̂(β) + P_n φ̂_a(γ̂_f(Y; β)) = 0` on each
//! cross-fitting split; split estimates are averaged and influence values
//! are pooled for the sandwich covariance.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{EvalGrid, ObservationTable};
use crate::distances::{DistanceSpec, Q_FLOOR};
use crate::eif::{gamma_transform, phi_a, CorrectionWeights, InfluenceValues, Transform};
use crate::error::{Error, Result};
use crate::models::{basis_covariance, clip_to_density, CosineBasis, ModelSpec};
use crate::nuisance::{CrossFit, FoldNuisance};
use crate::optim::{fd_jacobian, newton_minimize, newton_root, solve, RootOptions, RootResult};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959963984540054;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMethod {
    /// Closed form for the L2 projection onto the cosine series.
    ClosedForm,
    /// Newton moment matching for the KL projection onto the exponential family.
    MomentMatching,
    /// Damped Newton with a finite-difference Jacobian.
    DampedNewton,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct SolverOptions {
    pub root: RootOptions,
    /// Use the damped Newton solver even when a closed form exists.
    pub force_generic: bool,
    /// Starting point override; defaults to [`ModelSpec::default_start`].
    pub start: Option<Vec<f64>>,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub method: SolverMethod,
    pub iterations: usize,
    /// Residual norm of the estimating equation at the solution.
    pub residual_norm: f64,
    /// Residual norm of the estimating equation at `β = 0` (or the start).
    pub initial_residual: f64,
    pub residual_history: Vec<f64>,
}

/// Estimated projection parameter with sandwich inference.
#[derive(Debug, Clone, Serialize)]
pub struct ProjectionEstimate {
    pub model: ModelSpec,
    pub distance: DistanceSpec,
    pub level: i64,
    pub n: usize,
    pub beta_hat: Vec<f64>,
    /// Row-major `p × p`, already divided by `n`.
    pub covariance: Vec<f64>,
    pub wald_ci: Vec<(f64, f64)>,
    /// `clip_to_density(g(·; β̂))` on the grid.
    pub fitted_density: Vec<f64>,
    /// Per split, in fold order.
    pub solver_reports: Vec<SolverReport>,
    /// `∂m̂/∂β` at `β̂`, row-major `p × p`.
    pub jacobian: Vec<f64>,
    #[serde(skip)]
    pub influence: InfluenceValues,
}

impl ProjectionEstimate {
    pub fn se(&self) -> Vec<f64> {
        let p = self.beta_hat.len();
        (0..p).map(|j| self.covariance[j * p + j].max(0.0).sqrt()).collect()
    }

    /// Largest split residual of the estimating equation.
    pub fn residual_norm(&self) -> f64 {
        self.solver_reports.iter().map(|r| r.residual_norm).fold(0.0, f64::max)
    }
}

fn check_density(p: &[f64], grid: &EvalGrid, distance: &DistanceSpec) -> Result<()> {
    if p.len() != grid.len() {
        return Err(Error::LengthMismatch { expected: grid.len(), got: p.len() });
    }
    if let Some(j) = p.iter().position(|v| !v.is_finite()) {
        return Err(Error::Domain { distance: distance.name().into(), index: Some(j), msg: "non-finite density".into() });
    }
    Ok(())
}

/// `m(β) = ∫ ∂g/∂β · {f(p_a, g) + g f2(p_a, g)} dy` by quadrature.
pub fn moment(distance: &DistanceSpec, model: &ModelSpec, beta: &[f64], p_a: &[f64], grid: &EvalGrid) -> Result<Vec<f64>> {
    check_density(p_a, grid, distance)?;
    let bound = model.at(beta, grid)?;
    let (g, dg) = bound.tabulate(grid);
    let p = model.beta_dim();
    let mut out = vec![0.0; p];
    for (j, w) in grid.weights().iter().enumerate() {
        let s = w * distance.moment_factor(p_a[j], g[j]);
        for c in 0..p {
            out[c] += s * dg[j * p + c];
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain { distance: distance.name().into(), index: None, msg: "non-finite moment".into() });
    }
    Ok(out)
}

/// [`moment`] evaluated at the plug-in marginal `p̂_a`.
pub fn moment_plugin(distance: &DistanceSpec, model: &ModelSpec, beta: &[f64], p_hat: &[f64], grid: &EvalGrid) -> Result<Vec<f64>> {
    moment(distance, model, beta, p_hat, grid)
}

fn gram(basis: &CosineBasis, grid: &EvalGrid) -> Vec<f64> {
    let d = basis.dim;
    let tab = basis.tabulate(grid);
    let mut out = vec![0.0; d * d];
    for (j, w) in grid.weights().iter().enumerate() {
        let row = &tab[j * d..(j + 1) * d];
        for a in 0..d {
            for b in 0..d {
                out[a * d + b] += w * row[a] * row[b];
            }
        }
    }
    out
}

/// `∂m/∂β`, analytic for L2-series (`2 × Gram`) and KL-exponential family (`Cov_g b`).
pub fn moment_jacobian(distance: &DistanceSpec, model: &ModelSpec, beta: &[f64], p_a: &[f64], grid: &EvalGrid, fd_step: f64) -> Result<Vec<f64>> {
    match (distance, model) {
        (DistanceSpec::L2Sq, ModelSpec::TruncatedSeries { dim }) => {
            Ok(gram(&CosineBasis::new(*dim), grid).into_iter().map(|v| 2.0 * v).collect())
        }
        (DistanceSpec::Kl, ModelSpec::ExponentialFamily { dim }) => Ok(basis_covariance(*dim, beta, grid)?.1),
        _ => fd_jacobian(&|b: &[f64]| moment(distance, model, b, p_a, grid), beta, fd_step),
    }
}

/// Root of the population moment condition `m(β) = 0` for a known density.
///
/// `m` is the gradient of [`projection_objective`], so the root is found by
/// regularized Newton minimization of that objective, which stays well behaved
/// where the moment Jacobian is singular or indefinite. Iterates are kept inside
/// the region where `g` is a valid density for the non-L2 distances.
pub fn solve_moment(
    distance: &DistanceSpec,
    model: &ModelSpec,
    p_a: &[f64],
    grid: &EvalGrid,
    start: &[f64],
    opts: &RootOptions,
) -> Result<RootResult> {
    // Outside L2 the objective is only meaningful where g stays above the floor.
    let obj = |b: &[f64]| {
        if !matches!(distance, DistanceSpec::L2Sq) {
            let g = model.at(b, grid)?.values_on(grid);
            if g.iter().any(|&v| v <= Q_FLOOR) {
                return Ok(f64::INFINITY);
            }
        }
        projection_objective(distance, model, b, p_a, grid)
    };
    let f = |b: &[f64]| moment(distance, model, b, p_a, grid);
    let analytic = matches!(
        (distance, model),
        (DistanceSpec::L2Sq, ModelSpec::TruncatedSeries { .. }) | (DistanceSpec::Kl, ModelSpec::ExponentialFamily { .. })
    );
    let jac = |b: &[f64]| moment_jacobian(distance, model, b, p_a, grid, opts.fd_step);
    let r0 = norm(&f(start)?);
    let opts = RootOptions { tol: opts.tol * (1.0 + r0), ..*opts };
    if analytic {
        newton_minimize(obj, f, Some(&jac), start, &opts)
    } else {
        newton_minimize(obj, f, None, start, &opts)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// One cross-fitting split: nuisances on evaluation rows plus cached weights.
struct Split<'a> {
    table: &'a ObservationTable,
    nuis: &'a FoldNuisance,
    weights: CorrectionWeights,
}

impl<'a> Split<'a> {
    fn new(table: &'a ObservationTable, nuis: &'a FoldNuisance) -> Self {
        Self { table, nuis, weights: CorrectionWeights::new(table, nuis) }
    }

    fn gamma(&self, distance: &DistanceSpec, model: &ModelSpec, beta: &[f64], grid: &EvalGrid) -> Result<Transform> {
        let bound = model.at(beta, grid)?;
        gamma_transform(distance, &bound, &self.nuis.marginal, grid, self.table, &self.nuis.rows)
    }

    /// `m̂(β) + P_n φ̂_a(γ̂_f(Y; β))`.
    fn equation(&self, distance: &DistanceSpec, model: &ModelSpec, beta: &[f64], grid: &EvalGrid) -> Result<Vec<f64>> {
        let mut m = moment(distance, model, beta, &self.nuis.marginal, grid)?;
        let gamma = self.gamma(distance, model, beta, grid)?;
        let corr = self.weights.correction(gamma.dim, &gamma.row_values, &gamma.grid_values, grid);
        m.iter_mut().zip(&corr).for_each(|(a, b)| *a += b);
        Ok(m)
    }

    /// The doubly robust estimate of `E{b(Y^a)}`.
    fn basis_mean(&self, basis: &CosineBasis, grid: &EvalGrid) -> Result<InfluenceValues> {
        let h = Transform::from_fn(basis.dim, grid, self.table, &self.nuis.rows, |y, o| basis.eval_into(y, o))?;
        phi_a(self.table, self.nuis, &h, grid)
    }
}

fn solve_split(
    distance: &DistanceSpec,
    model: &ModelSpec,
    split: &Split<'_>,
    grid: &EvalGrid,
    opts: &SolverOptions,
) -> Result<(Vec<f64>, SolverReport)> {
    let start: Vec<f64> = opts.start.clone().unwrap_or_else(|| model.default_start());
    let eq = |b: &[f64]| split.equation(distance, model, b, grid);
    let initial_residual = norm(&eq(&start)?);

    if !opts.force_generic {
        match (distance, model) {
            (DistanceSpec::L2Sq, ModelSpec::TruncatedSeries { dim }) => {
                let basis = CosineBasis::new(*dim);
                let tau = split.basis_mean(&basis, grid)?.estimate;
                let beta = solve(&gram(&basis, grid), &tau)
                    .ok_or_else(|| Error::Rank("basis Gram matrix is singular on this grid".into()))?;
                let residual = norm(&eq(&beta)?);
                return Ok((
                    beta,
                    SolverReport {
                        method: SolverMethod::ClosedForm,
                        iterations: 0,
                        residual_norm: residual,
                        initial_residual,
                        residual_history: vec![initial_residual, residual],
                    },
                ));
            }
            (DistanceSpec::Kl, ModelSpec::ExponentialFamily { dim }) => {
                let basis = CosineBasis::new(*dim);
                let tau = split.basis_mean(&basis, grid)?.estimate;
                let (beta, iterations, history) = match_moments(*dim, &tau, grid, &start, &opts.root)?;
                let residual = norm(&eq(&beta)?);
                return Ok((
                    beta,
                    SolverReport {
                        method: SolverMethod::MomentMatching,
                        iterations,
                        residual_norm: residual,
                        initial_residual,
                        residual_history: history,
                    },
                ));
            }
            _ => {}
        }
    }

    // Warm start at the plug-in projection of the fold's marginal density estimate,
    // which lies inside the feasible region when it exists.
    let start = match opts.start {
        Some(_) => start,
        None => solve_moment(distance, model, &split.nuis.marginal, grid, &start, &RootOptions { tol: 1e-8, ..opts.root })
            .map(|r| r.x)
            .unwrap_or(start),
    };
    let root_opts = RootOptions { tol: opts.root.tol * (1.0 + initial_residual), ..opts.root };
    let r = newton_root(eq, None, &start, &root_opts)?;
    Ok((
        r.x,
        SolverReport {
            method: SolverMethod::DampedNewton,
            iterations: r.iterations,
            residual_norm: r.residual_norm,
            initial_residual,
            residual_history: r.history,
        },
    ))
}

/// Solve `E_g b = τ` for the cosine exponential family by damped Newton on the
/// convex dual `C(β) − βᵀτ`.
pub fn match_moments(dim: usize, tau: &[f64], grid: &EvalGrid, start: &[f64], opts: &RootOptions) -> Result<(Vec<f64>, usize, Vec<f64>)> {
    let bound = 2f64.sqrt();
    if let Some(j) = tau.iter().position(|t| !t.is_finite() || t.abs() >= bound) {
        return Err(Error::InfeasibleMoment(format!(
            "target moment {j} equals {:.4}, outside the attainable range (-{bound:.4}, {bound:.4})",
            tau[j]
        )));
    }
    let dual = |b: &[f64]| -> Result<f64> {
        let (c, _) = crate::models::log_partition(&ModelSpec::ExponentialFamily { dim }, b, grid)?;
        Ok(c - b.iter().zip(tau).map(|(x, t)| x * t).sum::<f64>())
    };
    let mut beta = start.to_vec();
    let mut obj = dual(&beta)?;
    let mut history = Vec::new();
    for it in 0..opts.max_iter {
        let (mean, cov) = basis_covariance(dim, &beta, grid)?;
        let grad: Vec<f64> = mean.iter().zip(tau).map(|(m, t)| m - t).collect();
        let gn = norm(&grad);
        history.push(gn);
        if gn < opts.tol {
            return Ok((beta, it, history));
        }
        let step = solve(&cov, &grad).ok_or_else(|| Error::Rank("basis covariance is singular".into()))?;
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..=opts.max_halvings {
            let cand: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b - t * s).collect();
            if let Ok(o) = dual(&cand) {
                if o <= obj {
                    beta = cand;
                    obj = o;
                    moved = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if norm(&beta) > 200.0 {
            return Err(Error::InfeasibleMoment(format!(
                "parameter diverged (|beta| = {:.1}); the target lies outside the model's mean set",
                norm(&beta)
            )));
        }
        if !moved {
            if gn < opts.tol * 1e2 {
                return Ok((beta, it + 1, history));
            }
            return Err(Error::Solver { msg: "moment matching stalled".into(), iterations: it + 1, residual: gn, residual_trace: history });
        }
    }
    let (mean, _) = basis_covariance(dim, &beta, grid)?;
    let gn = norm(&mean.iter().zip(tau).map(|(m, t)| m - t).collect::<Vec<_>>());
    if gn < opts.tol * 1e2 {
        return Ok((beta, opts.max_iter, history));
    }
    Err(Error::Solver { msg: "moment matching hit the iteration limit".into(), iterations: opts.max_iter, residual: gn, residual_trace: history })
}

fn sandwich(jacobian: &[f64], cov: &[f64], p: usize, n: usize) -> Result<Vec<f64>> {
    let v = DMatrix::from_row_slice(p, p, jacobian);
    let sv = v.clone().svd(false, false).singular_values;
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let smin = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if !(smax > 0.0) || smin <= 1e-12 * smax {
        return Err(Error::Rank(format!(
            "derivative of the moment condition is singular (condition {:.2e}); reduce the model dimension",
            smax / smin.max(f64::MIN_POSITIVE)
        )));
    }
    let vinv = v.try_inverse().ok_or_else(|| Error::Rank("moment derivative is not invertible; reduce the model dimension".into()))?;
    let s = DMatrix::from_row_slice(p, p, cov);
    let out = &vinv * s * vinv.transpose() / n as f64;
    let out = (&out + out.transpose()) * 0.5;
    Ok(out.transpose().iter().copied().collect())
}

fn wald(beta: &[f64], cov: &[f64]) -> Vec<(f64, f64)> {
    let p = beta.len();
    (0..p)
        .map(|j| {
            let se = cov[j * p + j].max(0.0).sqrt();
            (beta[j] - Z_95 * se, beta[j] + Z_95 * se)
        })
        .collect()
}

/// Influence values of `β̂` on one split: `φ̂_a(γ̂_f(Y; β))`.
fn split_influence(distance: &DistanceSpec, model: &ModelSpec, beta: &[f64], split: &Split<'_>, grid: &EvalGrid) -> Result<InfluenceValues> {
    let gamma = split.gamma(distance, model, beta, grid)?;
    phi_a(split.table, split.nuis, &gamma, grid)
}

/// Sandwich covariance `V̂⁻¹ Ĉov{φ̂_a(γ̂_f)} V̂⁻ᵀ / n` on a single split.
pub fn sandwich_cov(
    distance: &DistanceSpec,
    model: &ModelSpec,
    beta_hat: &[f64],
    table: &ObservationTable,
    nuis: &FoldNuisance,
    grid: &EvalGrid,
) -> Result<Vec<f64>> {
    let split = Split::new(table, nuis);
    let infl = split_influence(distance, model, beta_hat, &split, grid)?;
    let jac = moment_jacobian(distance, model, beta_hat, &nuis.marginal, grid, RootOptions::default().fd_step)?;
    sandwich(&jac, &infl.covariance, model.beta_dim(), infl.n())
}

/// One-step projection estimate from a single split.
pub fn solve_onestep(
    distance: &DistanceSpec,
    model: &ModelSpec,
    table: &ObservationTable,
    nuis: &FoldNuisance,
    grid: &EvalGrid,
    opts: &SolverOptions,
) -> Result<ProjectionEstimate> {
    assemble(distance, model, table, &[nuis], grid, opts)
}

/// Cross-fitted one-step projection estimate for `level`.
pub fn crossfit_projection(
    distance: &DistanceSpec,
    model: &ModelSpec,
    level: i64,
    table: &ObservationTable,
    crossfit: &CrossFit,
    grid: &EvalGrid,
    opts: &SolverOptions,
) -> Result<ProjectionEstimate> {
    let parts = (0..crossfit.n_folds()).map(|k| crossfit.nuisance(k, level)).collect::<Result<Vec<_>>>()?;
    assemble(distance, model, table, &parts, grid, opts)
}

fn assemble(
    distance: &DistanceSpec,
    model: &ModelSpec,
    table: &ObservationTable,
    parts: &[&FoldNuisance],
    grid: &EvalGrid,
    opts: &SolverOptions,
) -> Result<ProjectionEstimate> {
    let level = parts.first().ok_or_else(|| Error::EmptyData("no splits".into()))?.level;
    if !table.treatment().contains(&level) {
        return Err(Error::MissingLevel(level));
    }
    let p = model.beta_dim();
    let splits: Vec<Split<'_>> = parts.iter().map(|n| Split::new(table, n)).collect();
    let n: usize = parts.iter().map(|n| n.len()).sum();
    let mut beta = vec![0.0; p];
    let mut reports = Vec::with_capacity(splits.len());
    for split in &splits {
        let (b, report) = solve_split(distance, model, split, grid, opts)?;
        let w = split.nuis.len() as f64 / n as f64;
        beta.iter_mut().zip(&b).for_each(|(acc, v)| *acc += w * v);
        reports.push(report);
    }
    let mut jacobian = vec![0.0; p * p];
    let mut influences = Vec::with_capacity(splits.len());
    for split in &splits {
        let w = split.nuis.len() as f64 / n as f64;
        let jac = moment_jacobian(distance, model, &beta, &split.nuis.marginal, grid, opts.root.fd_step)?;
        jacobian.iter_mut().zip(&jac).for_each(|(acc, v)| *acc += w * v);
        influences.push(split_influence(distance, model, &beta, split, grid)?);
    }
    let influence = InfluenceValues::pool(&influences)?;
    let covariance = sandwich(&jacobian, &influence.covariance, p, n)?;
    let wald_ci = wald(&beta, &covariance);
    let fitted_density = clip_to_density(&model.at(&beta, grid)?.values_on(grid), grid)?;
    Ok(ProjectionEstimate {
        model: *model,
        distance: *distance,
        level,
        n,
        beta_hat: beta,
        covariance,
        wald_ci,
        fitted_density,
        solver_reports: reports,
        jacobian,
        influence,
    })
}

/// Population objective whose stationary points solve the moment condition.
pub fn projection_objective(distance: &DistanceSpec, model: &ModelSpec, beta: &[f64], p_a: &[f64], grid: &EvalGrid) -> Result<f64> {
    let g = model.at(beta, grid)?.values_on(grid);
    Ok(grid.weights().iter().zip(p_a.iter().zip(&g)).map(|(w, (&p, &q))| w * distance.objective_integrand(p, q)).sum())
}
