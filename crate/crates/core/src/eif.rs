//! Influence-function building blocks.
//!
//! For a transform `h`, the uncentered influence term of `E{E(h(Y) | X, A = a)}` is
//!
//! ```text
//! 1(A = a)/π̂_a(X) · {h(Y) − ĥ(X)} + ĥ(X),   ĥ(x) = ∫ h(y) η̂_a(y | x) dy.
//! ```
//!
//! Its sample mean is the one-step estimate; the plug-in part is `P_n ĥ(X)` and
//! the difference is the first-order bias correction. [`phi_a`] returns all
//! three, plus the per-row values centered at the one-step estimate.

use crate::data::{EvalGrid, ObservationTable};
use crate::distances::DistanceSpec;
use crate::error::{Error, Result};
use crate::models::BoundModel;
use crate::nuisance::FoldNuisance;

/// A vector-valued function `h: [0, 1] → ℝ^m` known on the grid and at the evaluation outcomes.
#[derive(Debug, Clone)]
pub struct Transform {
    pub dim: usize,
    /// `h(y_j)`, row-major `G × m`.
    pub grid_values: Vec<f64>,
    /// `h(Y_i)` for the evaluation rows, row-major `rows × m`.
    pub row_values: Vec<f64>,
}

impl Transform {
    pub fn new(dim: usize, grid_values: Vec<f64>, row_values: Vec<f64>) -> Result<Self> {
        if !grid_values.len().is_multiple_of(dim) || !row_values.len().is_multiple_of(dim) {
            return Err(Error::LengthMismatch { expected: dim, got: grid_values.len() % dim });
        }
        if let Some(j) = grid_values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain {
                distance: "transform".into(),
                index: Some(j / dim),
                msg: "non-finite value on the grid".into(),
            });
        }
        if row_values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain { distance: "transform".into(), index: None, msg: "non-finite value at an outcome".into() });
        }
        Ok(Self { dim, grid_values, row_values })
    }

    /// Tabulate on the grid and interpolate linearly at the outcomes of `rows`.
    pub fn from_grid(dim: usize, grid_values: Vec<f64>, grid: &EvalGrid, table: &ObservationTable, rows: &[usize]) -> Result<Self> {
        if grid_values.len() != grid.len() * dim {
            return Err(Error::LengthMismatch { expected: grid.len() * dim, got: grid_values.len() });
        }
        let mut row_values = vec![0.0; rows.len() * dim];
        for (r, &i) in rows.iter().enumerate() {
            let (j, t) = grid.locate(table.y(i));
            for c in 0..dim {
                row_values[r * dim + c] = grid_values[j * dim + c] * (1.0 - t) + grid_values[(j + 1) * dim + c] * t;
            }
        }
        Self::new(dim, grid_values, row_values)
    }

    /// Evaluate a closed-form function on the grid and exactly at the outcomes.
    pub fn from_fn(
        dim: usize,
        grid: &EvalGrid,
        table: &ObservationTable,
        rows: &[usize],
        f: impl Fn(f64, &mut [f64]),
    ) -> Result<Self> {
        let mut grid_values = vec![0.0; grid.len() * dim];
        for (j, &y) in grid.points().iter().enumerate() {
            f(y, &mut grid_values[j * dim..(j + 1) * dim]);
        }
        let mut row_values = vec![0.0; rows.len() * dim];
        for (r, &i) in rows.iter().enumerate() {
            f(table.y(i), &mut row_values[r * dim..(r + 1) * dim]);
        }
        Self::new(dim, grid_values, row_values)
    }

    /// A scalar transform known only on the grid.
    pub fn scalar(values: Vec<f64>, grid: &EvalGrid, table: &ObservationTable, rows: &[usize]) -> Result<Self> {
        Self::from_grid(1, values, grid, table, rows)
    }
}

/// Evaluated influence terms for one transform on one set of evaluation rows.
#[derive(Debug, Clone)]
pub struct InfluenceValues {
    pub dim: usize,
    /// Per-row influence values centered at the one-step estimate, row-major `n × m`.
    pub values: Vec<f64>,
    /// Sample mean of [`Self::values`]; zero up to rounding.
    pub mean: Vec<f64>,
    /// Empirical covariance of the per-row values (divisor `n`), row-major `m × m`.
    pub covariance: Vec<f64>,
    /// `P_n ĥ(X)`.
    pub plugin: Vec<f64>,
    /// `P_n[1(A = a)/π̂ · {h(Y) − ĥ(X)}]`, the one-step correction.
    pub correction: Vec<f64>,
    /// `plugin + correction`.
    pub estimate: Vec<f64>,
}

impl InfluenceValues {
    /// Build from uncentered per-row terms; returns the centered summary.
    pub fn from_terms(dim: usize, terms: Vec<f64>, plugin: Vec<f64>) -> Self {
        let n = terms.len() / dim;
        let mut estimate = vec![0.0; dim];
        for r in 0..n {
            for c in 0..dim {
                estimate[c] += terms[r * dim + c];
            }
        }
        estimate.iter_mut().for_each(|v| *v /= n as f64);
        let mut values = terms;
        for r in 0..n {
            for c in 0..dim {
                values[r * dim + c] -= estimate[c];
            }
        }
        let mut mean = vec![0.0; dim];
        let mut covariance = vec![0.0; dim * dim];
        for r in 0..n {
            let row = &values[r * dim..(r + 1) * dim];
            for a in 0..dim {
                mean[a] += row[a] / n as f64;
                for b in 0..dim {
                    covariance[a * dim + b] += row[a] * row[b] / n as f64;
                }
            }
        }
        let correction = estimate.iter().zip(&plugin).map(|(e, p)| e - p).collect();
        Self { dim, values, mean, covariance, plugin, correction, estimate }
    }

    pub fn n(&self) -> usize {
        self.values.len() / self.dim
    }

    /// Concatenate per-row values from several splits and recompute the covariance.
    /// Plug-in, correction and estimate are averaged with weights proportional to split size.
    pub fn pool(parts: &[InfluenceValues]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::EmptyData("no influence values to pool".into()))?;
        let dim = first.dim;
        let total: usize = parts.iter().map(|p| p.n()).sum();
        let mut values = Vec::with_capacity(total * dim);
        let mut plugin = vec![0.0; dim];
        let mut correction = vec![0.0; dim];
        for p in parts {
            if p.dim != dim {
                return Err(Error::LengthMismatch { expected: dim, got: p.dim });
            }
            values.extend_from_slice(&p.values);
            let w = p.n() as f64 / total as f64;
            for c in 0..dim {
                plugin[c] += w * p.plugin[c];
                correction[c] += w * p.correction[c];
            }
        }
        let mut mean = vec![0.0; dim];
        let mut covariance = vec![0.0; dim * dim];
        for r in 0..total {
            let row = &values[r * dim..(r + 1) * dim];
            for a in 0..dim {
                mean[a] += row[a] / total as f64;
                for b in 0..dim {
                    covariance[a * dim + b] += row[a] * row[b] / total as f64;
                }
            }
        }
        let estimate = plugin.iter().zip(&correction).map(|(p, c)| p + c).collect();
        Ok(Self { dim, values, mean, covariance, plugin, correction, estimate })
    }
}

fn check_rows(nuis: &FoldNuisance, h: &Transform, grid: &EvalGrid) -> Result<()> {
    if h.row_values.len() != nuis.len() * h.dim {
        return Err(Error::LengthMismatch { expected: nuis.len() * h.dim, got: h.row_values.len() });
    }
    if h.grid_values.len() != grid.len() * h.dim || nuis.grid_len() != grid.len() {
        return Err(Error::LengthMismatch { expected: grid.len() * h.dim, got: h.grid_values.len() });
    }
    Ok(())
}

/// Influence terms of `E{E(h(Y) | X, A = a)}` on the evaluation rows of `nuis`.
pub fn phi_a(table: &ObservationTable, nuis: &FoldNuisance, h: &Transform, grid: &EvalGrid) -> Result<InfluenceValues> {
    check_rows(nuis, h, grid)?;
    let m = h.dim;
    let n = nuis.len();
    let w = grid.weights();
    let mut terms = vec![0.0; n * m];
    let mut plugin = vec![0.0; m];
    let mut hc = vec![0.0; m];
    for (r, &i) in nuis.rows.iter().enumerate() {
        hc.iter_mut().for_each(|v| *v = 0.0);
        for (j, e) in nuis.eta_row(r).iter().enumerate() {
            let we = w[j] * e;
            for c in 0..m {
                hc[c] += we * h.grid_values[j * m + c];
            }
        }
        let ipw = if table.a(i) == nuis.level { 1.0 / nuis.propensity[r] } else { 0.0 };
        for c in 0..m {
            terms[r * m + c] = ipw * (h.row_values[r * m + c] - hc[c]) + hc[c];
            plugin[c] += hc[c] / n as f64;
        }
    }
    Ok(InfluenceValues::from_terms(m, terms, plugin))
}

/// Precomputed weights for fast evaluation of the one-step correction
/// `P_n[IPW · h(Y)] − Σ_j w_j h(y_j) q̂_j` with `q̂_j = P_n[IPW · η̂(y_j | X)]`.
#[derive(Debug, Clone)]
pub struct CorrectionWeights {
    pub ipw: Vec<f64>,
    pub q: Vec<f64>,
}

impl CorrectionWeights {
    pub fn new(table: &ObservationTable, nuis: &FoldNuisance) -> Self {
        let n = nuis.len() as f64;
        let g = nuis.grid_len();
        let ipw: Vec<f64> = nuis
            .rows
            .iter()
            .zip(&nuis.propensity)
            .map(|(&i, &p)| if table.a(i) == nuis.level { 1.0 / p } else { 0.0 })
            .collect();
        let mut q = vec![0.0; g];
        for (r, &v) in ipw.iter().enumerate() {
            if v != 0.0 {
                for (qj, e) in q.iter_mut().zip(nuis.eta_row(r)) {
                    *qj += v * e / n;
                }
            }
        }
        Self { ipw, q }
    }

    /// The correction `P_n[IPW · {h(Y) − ĥ(X)}]` for a transform given row and grid values.
    pub fn correction(&self, dim: usize, row_values: &[f64], grid_values: &[f64], grid: &EvalGrid) -> Vec<f64> {
        let n = self.ipw.len() as f64;
        let mut out = vec![0.0; dim];
        for (r, &v) in self.ipw.iter().enumerate() {
            if v != 0.0 {
                for c in 0..dim {
                    out[c] += v * row_values[r * dim + c] / n;
                }
            }
        }
        for (j, (w, q)) in grid.weights().iter().zip(&self.q).enumerate() {
            for c in 0..dim {
                out[c] -= w * q * grid_values[j * dim + c];
            }
        }
        out
    }
}

/// `γ_f(y; β) = ∂g/∂β · {f1(p, g) + g f21(p, g)}` at given points.
pub fn gamma_at(distance: &DistanceSpec, model: &BoundModel, ys: &[f64], p_values: &[f64]) -> Result<Vec<f64>> {
    if ys.len() != p_values.len() {
        return Err(Error::LengthMismatch { expected: ys.len(), got: p_values.len() });
    }
    let (values, mut grads) = model.evaluate_at(ys);
    let p = model.dim();
    for (j, (&g, &pv)) in values.iter().zip(p_values).enumerate() {
        let factor = distance.gamma_factor(pv, g);
        if !factor.is_finite() {
            return Err(Error::Domain {
                distance: distance.name().into(),
                index: Some(j),
                msg: format!("influence factor is not finite (p={pv}, g={g})"),
            });
        }
        grads[j * p..(j + 1) * p].iter_mut().for_each(|v| *v *= factor);
    }
    Ok(grads)
}

/// `γ_f` tabulated on the grid, row-major `G × p`.
pub fn gamma_f(distance: &DistanceSpec, model: &BoundModel, p_a: &[f64], grid: &EvalGrid) -> Result<Vec<f64>> {
    if p_a.len() != grid.len() {
        return Err(Error::LengthMismatch { expected: grid.len(), got: p_a.len() });
    }
    gamma_at(distance, model, grid.points(), p_a)
}

/// `γ_f` on the grid and at the outcomes of `rows`, with `p̂` interpolated at the outcomes.
pub fn gamma_transform(
    distance: &DistanceSpec,
    model: &BoundModel,
    p_a: &[f64],
    grid: &EvalGrid,
    table: &ObservationTable,
    rows: &[usize],
) -> Result<Transform> {
    let grid_values = gamma_f(distance, model, p_a, grid)?;
    let ys: Vec<f64> = rows.iter().map(|&i| table.y(i)).collect();
    let ps: Vec<f64> = ys.iter().map(|&y| grid.interpolate(p_a, y)).collect();
    let row_values = gamma_at(distance, model, &ys, &ps)?;
    Transform::new(model.dim(), grid_values, row_values)
}

fn finite_or_domain(distance: &DistanceSpec, v: Vec<f64>) -> Result<Vec<f64>> {
    if let Some(j) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::Domain { distance: distance.name().into(), index: Some(j), msg: "non-finite influence weight".into() });
    }
    Ok(v)
}

/// `(λ1, λ0)` on the grid: `λ1 = p0 f1(p1, p0)`, `λ0 = f(p1, p0) + p0 f2(p1, p0)`.
pub fn lambdas(distance: &DistanceSpec, p1: &[f64], p0: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if p1.len() != p0.len() {
        return Err(Error::LengthMismatch { expected: p1.len(), got: p0.len() });
    }
    let (l1, l0): (Vec<f64>, Vec<f64>) = match distance {
        DistanceSpec::L2Sq => p1.iter().zip(p0).map(|(a, b)| (2.0 * (a - b), -2.0 * (a - b))).unzip(),
        _ => p1
            .iter()
            .zip(p0)
            .map(|(&a, &b)| {
                let (a, b) = DistanceSpec::clamp(a, b);
                (b * distance.f1_raw(a, b), distance.f_raw(a, b) + b * distance.f2_raw(a, b))
            })
            .unzip(),
    };
    Ok((finite_or_domain(distance, l1)?, finite_or_domain(distance, l0)?))
}

/// `g f1(p_a, g)` on the grid: the influence weight of `D_f(p_a, g)` for fixed `g`.
pub fn lambda_fixed_g(distance: &DistanceSpec, p_a: &[f64], g: &[f64]) -> Result<Vec<f64>> {
    if p_a.len() != g.len() {
        return Err(Error::LengthMismatch { expected: p_a.len(), got: g.len() });
    }
    let v = match distance {
        DistanceSpec::L2Sq => p_a.iter().zip(g).map(|(p, q)| 2.0 * (p - q)).collect(),
        _ => p_a
            .iter()
            .zip(g)
            .map(|(&p, &q)| {
                let (p, q) = DistanceSpec::clamp(p, q);
                q * distance.f1_raw(p, q)
            })
            .collect(),
    };
    finite_or_domain(distance, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_grid, QuadratureRule};
    use crate::models::ModelSpec;
    use std::f64::consts::{PI, SQRT_2};

    fn fixture(grid: &EvalGrid) -> (ObservationTable, FoldNuisance) {
        let n = 7;
        let y: Vec<f64> = (0..n).map(|i| (i as f64 + 0.3) / n as f64).collect();
        let a = vec![1, 0, 1, 1, 0, 1, 0];
        let t = ObservationTable::from_unit((0..n).map(|i| i as f64).collect(), 1, a, y).unwrap();
        let g = grid.len();
        let mut eta = Vec::new();
        for i in 0..n {
            let s = 0.2 * (i as f64 / n as f64 - 0.5);
            let mut row = grid.tabulate(|y| 1.0 + s * SQRT_2 * (PI * y).cos());
            let mass = grid.integrate(&row);
            row.iter_mut().for_each(|v| *v /= mass);
            eta.extend(row);
        }
        let pi = (0..n).map(|i| 0.3 + 0.05 * i as f64).collect();
        let nuis = FoldNuisance::from_parts(1, (0..n).collect(), pi, eta, g).unwrap();
        (t, nuis)
    }

    #[test]
    fn constants_have_zero_influence() {
        let grid = make_grid(64, QuadratureRule::Trapezoid).unwrap();
        let (t, nuis) = fixture(&grid);
        let h = Transform::scalar(vec![3.5; 64], &grid, &t, &nuis.rows).unwrap();
        let phi = phi_a(&t, &nuis, &h, &grid).unwrap();
        assert!(phi.values.iter().all(|v| v.abs() < 1e-12));
        assert!((phi.estimate[0] - 3.5).abs() < 1e-12);
    }

    #[test]
    fn full_treatment_reduces_to_centered_outcomes() {
        let grid = make_grid(64, QuadratureRule::Trapezoid).unwrap();
        let (t0, nuis0) = fixture(&grid);
        let n = t0.n();
        let t = ObservationTable::from_unit(t0.covariates().to_vec(), 1, vec![1; n], t0.outcome().to_vec()).unwrap();
        let nuis = FoldNuisance::from_parts(1, nuis0.rows.clone(), vec![1.0; n], nuis0.eta.clone(), 64).unwrap();
        let h = Transform::from_fn(1, &grid, &t, &nuis.rows, |y, o| o[0] = y * y).unwrap();
        let phi = phi_a(&t, &nuis, &h, &grid).unwrap();
        let mean: f64 = t.outcome().iter().map(|y| y * y).sum::<f64>() / n as f64;
        for (r, y) in t.outcome().iter().enumerate() {
            assert!((phi.values[r] - (y * y - mean)).abs() < 1e-12);
        }
    }

    #[test]
    fn values_are_centered_and_correction_matches_fast_path() {
        let grid = make_grid(64, QuadratureRule::Trapezoid).unwrap();
        let (t, nuis) = fixture(&grid);
        let b = crate::models::CosineBasis::new(3);
        let h = Transform::from_fn(3, &grid, &t, &nuis.rows, |y, o| b.eval_into(y, o)).unwrap();
        let phi = phi_a(&t, &nuis, &h, &grid).unwrap();
        assert!(phi.mean.iter().all(|m| m.abs() < 1e-12));
        let cw = CorrectionWeights::new(&t, &nuis);
        let fast = cw.correction(3, &h.row_values, &h.grid_values, &grid);
        for c in 0..3 {
            assert!((fast[c] - phi.correction[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn gamma_examples() {
        let grid = make_grid(128, QuadratureRule::Trapezoid).unwrap();
        let series = ModelSpec::TruncatedSeries { dim: 2 }.at(&[0.2, -0.1], &grid).unwrap();
        let p1 = vec![1.0; 128];
        let p2 = grid.tabulate(|y| 0.5 + y);
        let a = gamma_f(&DistanceSpec::L2Sq, &series, &p1, &grid).unwrap();
        let b = gamma_f(&DistanceSpec::L2Sq, &series, &p2, &grid).unwrap();
        assert_eq!(a, b);
        let (_, dg) = series.tabulate(&grid);
        for (x, d) in a.iter().zip(&dg) {
            assert_eq!(*x, -2.0 * d);
        }
        let ef = ModelSpec::ExponentialFamily { dim: 2 }.at(&[0.2, -0.1], &grid).unwrap();
        let k1 = gamma_f(&DistanceSpec::Kl, &ef, &p1, &grid).unwrap();
        let k2 = gamma_f(&DistanceSpec::Kl, &ef, &p2, &grid).unwrap();
        assert_eq!(k1, k2);
        let (g, dg) = ef.tabulate(&grid);
        for j in 0..128 {
            for c in 0..2 {
                assert!((k1[j * 2 + c] + dg[j * 2 + c] / g[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lambda_examples() {
        let grid = make_grid(64, QuadratureRule::Trapezoid).unwrap();
        let p1 = grid.tabulate(|y| 1.0 + 0.5 * SQRT_2 * (PI * y).cos());
        let p0 = vec![1.0; 64];
        let (l1, l0) = lambdas(&DistanceSpec::L2Sq, &p1, &p0).unwrap();
        for j in 0..64 {
            assert_eq!(l1[j], -l0[j]);
            assert!((l1[j] - 2.0 * (p1[j] - p0[j])).abs() < 1e-15);
        }
        let (k1, k0) = lambdas(&DistanceSpec::Kl, &p1, &p0).unwrap();
        for j in 0..64 {
            assert!((k1[j] - ((p1[j] / p0[j]).ln() + 1.0)).abs() < 1e-12);
            assert!((k0[j] + p1[j] / p0[j]).abs() < 1e-12);
        }
        let (z1, z0) = lambdas(&DistanceSpec::L2Sq, &p0, &p0).unwrap();
        assert!(z1.iter().chain(&z0).all(|&v| v == 0.0));

        let fixed = lambda_fixed_g(&DistanceSpec::L2Sq, &p0, &p1).unwrap();
        assert!((fixed[0] + SQRT_2).abs() < 1e-12);
        let same = lambda_fixed_g(&DistanceSpec::L2Sq, &p1, &p1).unwrap();
        assert!(same.iter().all(|&v| v == 0.0));
        let kl = lambda_fixed_g(&DistanceSpec::Kl, &p1, &p1).unwrap();
        assert!(kl.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn non_finite_transform_rejected() {
        let grid = make_grid(16, QuadratureRule::Trapezoid).unwrap();
        let mut v = vec![0.0; 16];
        v[5] = f64::INFINITY;
        let t = ObservationTable::from_unit(vec![0.0], 1, vec![1], vec![0.5]).unwrap();
        assert!(matches!(Transform::scalar(v, &grid, &t, &[0]), Err(Error::Domain { index: Some(5), .. })));
    }
}
