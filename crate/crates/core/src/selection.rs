//! Cross-validated model selection by pseudo-L2 risk, and linear aggregation
//! of candidate densities.

use serde::Serialize;

use crate::data::{make_folds, EvalGrid, FoldPlan, ObservationTable};
use crate::distances::DistanceSpec;
use crate::eif::{phi_a, Transform};
use crate::error::{Error, Result};
use crate::models::{clip_to_density, ModelSpec};
use crate::nuisance::{CrossFit, FoldNuisance, NuisanceConfig, NuisanceFit};
use crate::projection::{crossfit_projection, SolverOptions};

/// A pseudo-risk value with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RiskEstimate {
    pub risk: f64,
    pub se: f64,
}

/// Per-row summands of the pseudo-risk on every split, and the risk itself.
fn pseudo_terms(table: &ObservationTable, splits: &[&FoldNuisance], g: &[f64], grid: &EvalGrid) -> Result<(f64, Vec<f64>)> {
    let sq = grid.inner(g, g);
    let mut n = 0;
    let mut risk = 0.0;
    let mut values = Vec::new();
    for nuis in splits {
        let h = Transform::from_grid(1, g.to_vec(), grid, table, &nuis.rows)?;
        let phi = phi_a(table, nuis, &h, grid)?;
        risk += nuis.len() as f64 * (sq - 2.0 * phi.estimate[0]);
        n += nuis.len();
        values.extend(phi.values.iter().map(|v| -2.0 * v));
    }
    Ok((risk / n as f64, values))
}

/// `Δ̂*(g) = −2 P_n[1(A=a)/π̂ {g(Y) − ∫g η̂} + ∫g η̂] + ∫g²` over the given splits.
pub fn pseudo_l2_risk(table: &ObservationTable, splits: &[&FoldNuisance], g: &[f64], grid: &EvalGrid) -> Result<RiskEstimate> {
    if splits.is_empty() {
        return Err(Error::EmptyData("no splits".into()));
    }
    if g.len() != grid.len() {
        return Err(Error::LengthMismatch { expected: grid.len(), got: g.len() });
    }
    if let Some(j) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::Domain { distance: "l2".into(), index: Some(j), msg: "candidate density is not finite".into() });
    }
    let (risk, values) = pseudo_terms(table, splits, g, grid)?;
    let n = values.len() as f64;
    let var = values.iter().map(|v| v * v).sum::<f64>() / n;
    Ok(RiskEstimate { risk, se: (var / n).sqrt() })
}

/// A candidate density: a parametric model to be fitted, or a fixed density on the grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Candidate {
    Model(ModelSpec),
    Fixed { label: String, density: Vec<f64> },
}

impl Candidate {
    pub fn label(&self) -> String {
        match self {
            Candidate::Model(m) => m.to_string(),
            Candidate::Fixed { label, .. } => label.clone(),
        }
    }

    /// Parameter dimension; fixed candidates count as 0.
    pub fn dim(&self) -> usize {
        match self {
            Candidate::Model(m) => m.beta_dim(),
            Candidate::Fixed { .. } => 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SelectionOptions {
    /// Folds used inside each training split to fit the candidates.
    pub inner_folds: usize,
    pub solver: SolverOptions,
    /// Distance the model candidates are projected under.
    pub distance: DistanceSpec,
}

impl Default for SelectionOptions {
    fn default() -> Self {
        Self { inner_folds: 2, solver: SolverOptions::default(), distance: DistanceSpec::L2Sq }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RiskTable {
    pub labels: Vec<String>,
    pub dims: Vec<usize>,
    /// Pseudo-risk averaged over fold roles; `NaN` for infeasible candidates.
    pub risk: Vec<f64>,
    pub se: Vec<f64>,
    pub chosen: usize,
    pub infeasible: Vec<bool>,
    /// `per_fold[k][c]`: risk of candidate `c` when fold `k` is held out.
    pub per_fold: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

/// Candidate densities fitted on `train` rows by an inner cross-fit.
fn fit_candidates(
    table: &ObservationTable,
    train: &[usize],
    level: i64,
    candidates: &[Candidate],
    grid: &EvalGrid,
    config: &NuisanceConfig,
    opts: &SelectionOptions,
    seed: u64,
) -> Result<(Vec<Option<Vec<f64>>>, Vec<String>)> {
    let needs_fit = candidates.iter().any(|c| matches!(c, Candidate::Model(_)));
    let inner = if needs_fit {
        let plan = make_folds(train.len(), opts.inner_folds, seed)?;
        Some(CrossFit::fit(table, train, &plan, &[level], config, grid)?)
    } else {
        None
    };
    let mut warnings = inner.as_ref().map(|c| c.warnings.clone()).unwrap_or_default();
    let mut out = Vec::with_capacity(candidates.len());
    for c in candidates {
        match c {
            Candidate::Fixed { density, .. } => out.push(Some(density.clone())),
            Candidate::Model(m) => {
                let cf = inner.as_ref().expect("inner cross-fit exists when a model candidate is present");
                match crossfit_projection(&opts.distance, m, level, table, cf, grid, &opts.solver) {
                    Ok(est) => out.push(Some(est.fitted_density)),
                    Err(e) => {
                        warnings.push(format!("candidate {m} could not be fitted: {e}"));
                        out.push(None);
                    }
                }
            }
        }
    }
    Ok((out, warnings))
}

/// Index of the smallest risk; exact ties go to the smaller dimension, then the earlier candidate.
fn argmin_with_tiebreak(risk: &[f64], dims: &[usize]) -> Option<usize> {
    (0..risk.len()).filter(|&c| risk[c].is_finite()).min_by(|&a, &b| risk[a].total_cmp(&risk[b]).then(dims[a].cmp(&dims[b])).then(a.cmp(&b)))
}

/// Pick the candidate with the smallest cross-validated pseudo-L2 risk.
///
/// For each fold of `plan`, candidates are fitted on the remaining folds and
/// scored on the held-out fold with nuisances trained on the remaining folds.
pub fn select_model(
    table: &ObservationTable,
    plan: &FoldPlan,
    level: i64,
    candidates: &[Candidate],
    grid: &EvalGrid,
    config: &NuisanceConfig,
    opts: &SelectionOptions,
) -> Result<RiskTable> {
    if candidates.is_empty() {
        return Err(Error::InvalidParameter("at least one candidate is required".into()));
    }
    if plan.n != table.n() {
        return Err(Error::LengthMismatch { expected: table.n(), got: plan.n });
    }
    table.require_level(level)?;
    let c_len = candidates.len();
    let mut per_fold = Vec::with_capacity(plan.k_folds);
    let mut pooled: Vec<Vec<f64>> = vec![Vec::new(); c_len];
    let mut infeasible = vec![false; c_len];
    let mut warnings = Vec::new();
    for k in 0..plan.k_folds {
        let train = plan.complement(k);
        let test = plan.fold(k);
        let seed = plan.seed.wrapping_add(1 + k as u64);
        let (fitted, w) = fit_candidates(table, &train, level, candidates, grid, config, opts, seed)?;
        warnings.extend(w.into_iter().map(|s| format!("fold {k}: {s}")));
        let nuis = NuisanceFit::fit(table, &train, level, config, grid)?.evaluate(table, &test, grid)?;
        let mut row = vec![f64::NAN; c_len];
        for (c, g) in fitted.iter().enumerate() {
            match g {
                Some(g) => {
                    let (r, values) = pseudo_terms(table, &[&nuis], g, grid)?;
                    row[c] = r;
                    pooled[c].extend(values);
                }
                None => infeasible[c] = true,
            }
        }
        per_fold.push(row);
    }
    let sizes = plan.fold_sizes();
    let labels: Vec<String> = candidates.iter().map(Candidate::label).collect();
    let dims: Vec<usize> = candidates.iter().map(Candidate::dim).collect();
    let mut risk = vec![f64::NAN; c_len];
    let mut se = vec![f64::NAN; c_len];
    for c in 0..c_len {
        if infeasible[c] {
            continue;
        }
        risk[c] = per_fold.iter().zip(&sizes).map(|(r, &s)| r[c] * s as f64).sum::<f64>() / plan.n as f64;
        let n = pooled[c].len() as f64;
        se[c] = (pooled[c].iter().map(|v| v * v).sum::<f64>() / n / n).sqrt();
    }
    let chosen = argmin_with_tiebreak(&risk, &dims).ok_or_else(|| Error::DegenerateModel("no candidate could be fitted".into()))?;
    Ok(RiskTable { labels, dims, risk, se, chosen, infeasible, per_fold, warnings })
}

#[derive(Debug, Clone, Serialize)]
pub struct AggregateEstimate {
    pub labels: Vec<String>,
    /// Candidate weights averaged over fold roles.
    pub weights: Vec<f64>,
    pub weights_per_role: Vec<Vec<f64>>,
    /// Aggregate after projection onto densities; integrates to 1.
    pub density: Vec<f64>,
    /// Aggregate before clipping, averaged over roles.
    pub raw_density: Vec<f64>,
    /// Candidates dropped as linearly dependent, per role.
    pub dropped: Vec<Vec<usize>>,
    /// Held-out fold per role.
    pub test_folds: Vec<usize>,
    pub seed: u64,
    pub warnings: Vec<String>,
}

/// Modified Gram-Schmidt on the grid inner product. Returns orthonormal
/// vectors, the kept candidate indices, and `R` (`kept × kept`, upper
/// triangular, row-major) with `g_kept[j] = Σ_i R[i][j] e_i`.
pub(crate) fn gram_schmidt(vectors: &[Vec<f64>], grid: &EvalGrid, drop_tol: f64) -> (Vec<Vec<f64>>, Vec<usize>, Vec<f64>, Vec<usize>) {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    let mut coef: Vec<Vec<f64>> = Vec::new();
    for (idx, v) in vectors.iter().enumerate() {
        let original = grid.inner(v, v).sqrt();
        let mut u = v.clone();
        let mut c = Vec::with_capacity(basis.len() + 1);
        for e in &basis {
            let r = grid.inner(&u, e);
            u.iter_mut().zip(e).for_each(|(a, b)| *a -= r * b);
            c.push(r);
        }
        let norm = grid.inner(&u, &u).sqrt();
        if original == 0.0 || norm <= drop_tol * original {
            dropped.push(idx);
            continue;
        }
        u.iter_mut().for_each(|a| *a /= norm);
        c.push(norm);
        basis.push(u);
        kept.push(idx);
        coef.push(c);
    }
    let r_len = kept.len();
    let mut r = vec![0.0; r_len * r_len];
    for (j, c) in coef.iter().enumerate() {
        for (i, v) in c.iter().enumerate() {
            r[i * r_len + j] = *v;
        }
    }
    (basis, kept, r, dropped)
}

/// Linear aggregation of candidate densities.
///
/// For each role, fold `k` of `plan` is the test split and the rest is the
/// training split: candidates and nuisances are fitted on the training split,
/// the span of the candidates is orthonormalized, and the L2 projection onto
/// that span is estimated in closed form on the test split. With `swap` every
/// fold takes the test role and the results are averaged; otherwise only fold 0.
#[allow(clippy::too_many_arguments)]
pub fn aggregate_linear(
    table: &ObservationTable,
    plan: &FoldPlan,
    level: i64,
    candidates: &[Candidate],
    grid: &EvalGrid,
    config: &NuisanceConfig,
    opts: &SelectionOptions,
    swap: bool,
) -> Result<AggregateEstimate> {
    if candidates.is_empty() {
        return Err(Error::InvalidParameter("at least one candidate is required".into()));
    }
    if opts.distance != DistanceSpec::L2Sq {
        return Err(Error::InvalidParameter("linear aggregation is only defined for the L2 distance".into()));
    }
    if plan.n != table.n() {
        return Err(Error::LengthMismatch { expected: table.n(), got: plan.n });
    }
    table.require_level(level)?;
    let roles: Vec<usize> = if swap { (0..plan.k_folds).collect() } else { vec![0] };
    let c_len = candidates.len();
    let g = grid.len();
    let mut weights_per_role = Vec::with_capacity(roles.len());
    let mut raw = vec![0.0; g];
    let mut dropped_all = Vec::new();
    let mut warnings = Vec::new();
    for &k in &roles {
        let train = plan.complement(k);
        let test = plan.fold(k);
        let seed = plan.seed.wrapping_add(1 + k as u64);
        let (fitted, w) = fit_candidates(table, &train, level, candidates, grid, config, opts, seed)?;
        warnings.extend(w.into_iter().map(|s| format!("role {k}: {s}")));
        let available: Vec<usize> = (0..c_len).filter(|&c| fitted[c].is_some()).collect();
        let vectors: Vec<Vec<f64>> = available.iter().map(|&c| fitted[c].clone().expect("filtered")).collect();
        let (basis, kept, r, dropped) = gram_schmidt(&vectors, grid, 1e-8);
        let mut role_dropped: Vec<usize> = dropped.iter().map(|&j| available[j]).collect();
        role_dropped.extend((0..c_len).filter(|c| fitted[*c].is_none()));
        role_dropped.sort_unstable();
        dropped_all.push(role_dropped);

        let nuis = NuisanceFit::fit(table, &train, level, config, grid)?.evaluate(table, &test, grid)?;
        let b_len = basis.len();
        let mut grid_values = vec![0.0; g * b_len];
        for (i, e) in basis.iter().enumerate() {
            for j in 0..g {
                grid_values[j * b_len + i] = e[j];
            }
        }
        let h = Transform::from_grid(b_len, grid_values, grid, table, &nuis.rows)?;
        let theta = phi_a(table, &nuis, &h, grid)?.estimate;

        // Solve R w = θ by back substitution.
        let mut wk = vec![0.0; b_len];
        for i in (0..b_len).rev() {
            let s: f64 = (i + 1..b_len).map(|j| r[i * b_len + j] * wk[j]).sum();
            wk[i] = (theta[i] - s) / r[i * b_len + i];
        }
        let mut weights = vec![0.0; c_len];
        for (pos, &j) in kept.iter().enumerate() {
            weights[available[j]] = wk[pos];
        }
        for (i, e) in basis.iter().enumerate() {
            raw.iter_mut().zip(e).for_each(|(a, b)| *a += theta[i] * b / roles.len() as f64);
        }
        weights_per_role.push(weights);
    }
    let weights = (0..c_len).map(|c| weights_per_role.iter().map(|w| w[c]).sum::<f64>() / roles.len() as f64).collect();
    let density = clip_to_density(&raw, grid)?;
    Ok(AggregateEstimate {
        labels: candidates.iter().map(Candidate::label).collect(),
        weights,
        weights_per_role,
        density,
        raw_density: raw,
        dropped: dropped_all,
        test_folds: roles,
        seed: plan.seed,
        warnings,
    })
}
