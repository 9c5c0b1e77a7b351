//! Density effects `ψ_f = D_f(p_1, p_0)` and fixed-candidate distances.

use serde::Serialize;

use crate::data::{EvalGrid, ObservationTable};
use crate::distances::{divergence_unchecked, DistanceSpec, Q_FLOOR};
use crate::eif::{lambda_fixed_g, lambdas, phi_a, InfluenceValues, Transform};
use crate::error::{Error, Result};
use crate::nuisance::{CrossFit, FoldNuisance};
use crate::projection::Z_95;

#[derive(Debug, Clone, Serialize)]
pub struct EffectEstimate {
    pub psi_hat: f64,
    pub se: f64,
    pub ci_wald: (f64, f64),
    /// Uses `max(se, 1/√n)`.
    pub ci_conservative: (f64, f64),
    pub distance: DistanceSpec,
    /// `(level1, level0)`; for a fixed candidate both entries are the estimated level.
    pub levels: (i64, i64),
    /// Set when `|ψ̂| < 2/√n`; the Wald interval is then unreliable.
    pub near_null: bool,
    /// Density floor applied before evaluating `f`, if any.
    pub floor: Option<f64>,
    pub plugin: f64,
    pub correction: f64,
    pub n: usize,
    /// Centered per-row influence values, in split order.
    #[serde(skip)]
    pub influence: Vec<f64>,
}

impl EffectEstimate {
    fn assemble(distance: DistanceSpec, levels: (i64, i64), floor: Option<f64>, splits: Vec<(f64, f64, Vec<f64>)>) -> Self {
        let n: usize = splits.iter().map(|s| s.2.len()).sum();
        let (mut plugin, mut correction) = (0.0, 0.0);
        let mut influence = Vec::with_capacity(n);
        for (p, c, values) in splits {
            let w = values.len() as f64 / n as f64;
            plugin += w * p;
            correction += w * c;
            influence.extend(values);
        }
        let psi_hat = plugin + correction;
        let var = influence.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let se = (var / n as f64).sqrt();
        let root_n = (n as f64).sqrt();
        let wide = se.max(1.0 / root_n);
        Self {
            psi_hat,
            se,
            ci_wald: (psi_hat - Z_95 * se, psi_hat + Z_95 * se),
            ci_conservative: (psi_hat - Z_95 * wide, psi_hat + Z_95 * wide),
            distance,
            levels,
            near_null: psi_hat.abs() < 2.0 / root_n,
            floor,
            plugin,
            correction,
            n,
            influence,
        }
    }
}

fn floor_of(distance: &DistanceSpec) -> Option<f64> {
    match distance {
        DistanceSpec::L2Sq => None,
        _ => Some(Q_FLOOR),
    }
}

fn floored(p: &[f64], floor: Option<f64>) -> Vec<f64> {
    match floor {
        Some(f) => p.iter().map(|v| v.max(f)).collect(),
        None => p.to_vec(),
    }
}

fn check_pair(n1: &FoldNuisance, n0: &FoldNuisance, grid: &EvalGrid) -> Result<()> {
    if n1.rows != n0.rows {
        return Err(Error::InvalidParameter("nuisances for the two levels must share evaluation rows".into()));
    }
    if n1.grid_len() != grid.len() || n0.grid_len() != grid.len() {
        return Err(Error::LengthMismatch { expected: grid.len(), got: n1.grid_len() });
    }
    Ok(())
}

fn check_levels(table: &ObservationTable, levels: &[i64]) -> Result<()> {
    for &a in levels {
        if !table.treatment().contains(&a) {
            return Err(Error::MissingLevel(a));
        }
    }
    Ok(())
}

fn sum_values(a: &InfluenceValues, b: &InfluenceValues) -> Vec<f64> {
    a.values.iter().zip(&b.values).map(|(x, y)| x + y).collect()
}

/// One-step estimate of `D_f(p_1, p_0)`. Each pair holds the level-1 and
/// level-0 nuisances of one cross-fitting split.
pub fn effect_onestep(
    distance: &DistanceSpec,
    table: &ObservationTable,
    splits: &[(&FoldNuisance, &FoldNuisance)],
    grid: &EvalGrid,
) -> Result<EffectEstimate> {
    let (first1, first0) = splits.first().ok_or_else(|| Error::EmptyData("no splits".into()))?;
    let levels = (first1.level, first0.level);
    check_levels(table, &[levels.0, levels.1])?;
    let floor = floor_of(distance);
    let mut parts = Vec::with_capacity(splits.len());
    for (n1, n0) in splits {
        check_pair(n1, n0, grid)?;
        let p1 = floored(&n1.marginal, floor);
        let p0 = floored(&n0.marginal, floor);
        let plugin = divergence_unchecked(distance, &p1, &p0, grid);
        let (l1, l0) = lambdas(distance, &p1, &p0)?;
        let t1 = Transform::from_grid(1, l1, grid, table, &n1.rows)?;
        let t0 = Transform::from_grid(1, l0, grid, table, &n0.rows)?;
        let phi1 = phi_a(table, n1, &t1, grid)?;
        let phi0 = phi_a(table, n0, &t0, grid)?;
        parts.push((plugin, phi1.correction[0] + phi0.correction[0], sum_values(&phi1, &phi0)));
    }
    Ok(EffectEstimate::assemble(*distance, levels, floor, parts))
}

/// L2 density effect written with the signed weight `1(A=1)/π̂_1 − 1(A=0)/π̂_0`:
/// `2 P_n[w {Δ̂(Y) − ∫Δ̂ η̂_A} + ∫Δ̂ η̂_1 − ∫Δ̂ η̂_0] − ∫Δ̂²` with `Δ̂ = p̂_1 − p̂_0`.
pub fn effect_l2_direct(table: &ObservationTable, splits: &[(&FoldNuisance, &FoldNuisance)], grid: &EvalGrid) -> Result<EffectEstimate> {
    let (first1, first0) = splits.first().ok_or_else(|| Error::EmptyData("no splits".into()))?;
    let levels = (first1.level, first0.level);
    check_levels(table, &[levels.0, levels.1])?;
    let w = grid.weights();
    let mut parts = Vec::with_capacity(splits.len());
    for (n1, n0) in splits {
        check_pair(n1, n0, grid)?;
        let delta: Vec<f64> = n1.marginal.iter().zip(&n0.marginal).map(|(a, b)| a - b).collect();
        let sq = grid.inner(&delta, &delta);
        let m = n1.len();
        let mut terms = Vec::with_capacity(m);
        for (r, &i) in n1.rows.iter().enumerate() {
            let c1: f64 = n1.eta_row(r).iter().zip(&delta).zip(w).map(|((e, d), w)| w * e * d).sum();
            let c0: f64 = n0.eta_row(r).iter().zip(&delta).zip(w).map(|((e, d), w)| w * e * d).sum();
            let a = table.a(i);
            let (signed, centre) = if a == n1.level {
                (1.0 / n1.propensity[r], c1)
            } else if a == n0.level {
                (-1.0 / n0.propensity[r], c0)
            } else {
                (0.0, 0.0)
            };
            let d_y = grid.interpolate(&delta, table.y(i));
            terms.push(2.0 * (signed * (d_y - centre) + c1 - c0) - sq);
        }
        let psi = terms.iter().sum::<f64>() / m as f64;
        let values = terms.iter().map(|t| t - psi).collect();
        parts.push((sq, psi - sq, values));
    }
    Ok(EffectEstimate::assemble(DistanceSpec::L2Sq, levels, None, parts))
}

/// One-step estimate of `D_f(p_a, g)` for a fixed candidate density `g` on the grid.
pub fn effect_fixed_candidate(
    distance: &DistanceSpec,
    table: &ObservationTable,
    splits: &[&FoldNuisance],
    g: &[f64],
    grid: &EvalGrid,
) -> Result<EffectEstimate> {
    let first = splits.first().ok_or_else(|| Error::EmptyData("no splits".into()))?;
    check_levels(table, &[first.level])?;
    if g.len() != grid.len() {
        return Err(Error::LengthMismatch { expected: grid.len(), got: g.len() });
    }
    if let Some(j) = g.iter().position(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Domain { distance: distance.name().into(), index: Some(j), msg: "candidate density must be finite and nonnegative".into() });
    }
    let floor = floor_of(distance);
    let g = floored(g, floor);
    let mut parts = Vec::with_capacity(splits.len());
    for nuis in splits {
        let p = floored(&nuis.marginal, floor);
        let plugin = divergence_unchecked(distance, &p, &g, grid);
        let lambda = lambda_fixed_g(distance, &p, &g)?;
        let t = Transform::from_grid(1, lambda, grid, table, &nuis.rows)?;
        let phi = phi_a(table, nuis, &t, grid)?;
        parts.push((plugin, phi.correction[0], phi.values));
    }
    Ok(EffectEstimate::assemble(*distance, (first.level, first.level), floor, parts))
}

fn pairs(crossfit: &CrossFit, level1: i64, level0: i64) -> Result<Vec<(&FoldNuisance, &FoldNuisance)>> {
    (0..crossfit.n_folds()).map(|k| Ok((crossfit.nuisance(k, level1)?, crossfit.nuisance(k, level0)?))).collect()
}

/// Cross-fitted [`effect_onestep`].
pub fn crossfit_effect(
    distance: &DistanceSpec,
    table: &ObservationTable,
    crossfit: &CrossFit,
    level1: i64,
    level0: i64,
    grid: &EvalGrid,
) -> Result<EffectEstimate> {
    effect_onestep(distance, table, &pairs(crossfit, level1, level0)?, grid)
}

/// Cross-fitted [`effect_l2_direct`].
pub fn crossfit_effect_l2_direct(table: &ObservationTable, crossfit: &CrossFit, level1: i64, level0: i64, grid: &EvalGrid) -> Result<EffectEstimate> {
    effect_l2_direct(table, &pairs(crossfit, level1, level0)?, grid)
}

/// Cross-fitted [`effect_fixed_candidate`].
pub fn crossfit_fixed_candidate(
    distance: &DistanceSpec,
    table: &ObservationTable,
    crossfit: &CrossFit,
    level: i64,
    g: &[f64],
    grid: &EvalGrid,
) -> Result<EffectEstimate> {
    let parts = (0..crossfit.n_folds()).map(|k| crossfit.nuisance(k, level)).collect::<Result<Vec<_>>>()?;
    effect_fixed_candidate(distance, table, &parts, g, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_grid, QuadratureRule};

    fn curve(grid: &EvalGrid, f: impl Fn(f64) -> f64) -> Vec<f64> {
        let mut c = grid.tabulate(f);
        let mass = grid.integrate(&c);
        c.iter_mut().for_each(|v| *v /= mass);
        c
    }

    /// Four rows with π̂ ≡ 0.5; level 1 uses η̂ = 2y, level 0 uses η̂ = uniform.
    fn four_rows(grid: &EvalGrid) -> (ObservationTable, FoldNuisance, FoldNuisance) {
        let t = ObservationTable::from_unit(vec![0.1, 0.4, 0.6, 0.9], 1, vec![1, 0, 1, 0], vec![0.25, 0.5, 0.75, 0.5]).unwrap();
        let tri = curve(grid, |y| 2.0 * y);
        let uni = curve(grid, |_| 1.0);
        let rows = vec![0, 1, 2, 3];
        let n1 = FoldNuisance::from_parts(1, rows.clone(), vec![0.5; 4], tri.repeat(4), grid.len()).unwrap();
        let n0 = FoldNuisance::from_parts(0, rows, vec![0.5; 4], uni.repeat(4), grid.len()).unwrap();
        (t, n1, n0)
    }

    #[test]
    fn l2_hand_fixture() {
        let grid = make_grid(1025, QuadratureRule::Trapezoid).unwrap();
        let (t, n1, n0) = four_rows(&grid);
        let e = effect_onestep(&DistanceSpec::L2Sq, &t, &[(&n1, &n0)], &grid).unwrap();
        // Δ = 2y − 1, ∫Δ² = 1/3, ∫Δ·2y = 1/3, ∫Δ·1 = 0.
        // Row terms 2[w(Δ(Y) − c_A) + 1/3] − 1/3 with w = ±2:
        // row 0: 2[2(−0.5 − 1/3) + 1/3] − 1/3 = −3; row 1: 2[−2(0 − 0) + 1/3] − 1/3 = 1/3;
        // row 2: 2[2(0.5 − 1/3) + 1/3] − 1/3 = 1; row 3: 1/3.
        let expect = (-3.0 + 1.0 / 3.0 + 1.0 + 1.0 / 3.0) / 4.0;
        assert!((e.psi_hat - expect).abs() < 1e-5, "{} vs {expect}", e.psi_hat);
        assert!((e.plugin - 1.0 / 3.0).abs() < 1e-5);
        let d = effect_l2_direct(&t, &[(&n1, &n0)], &grid).unwrap();
        assert!((d.psi_hat - e.psi_hat).abs() < 1e-12);
        for (a, b) in d.influence.iter().zip(&e.influence) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_fits_give_zero() {
        let grid = make_grid(64, QuadratureRule::Trapezoid).unwrap();
        let (t, n1, _) = four_rows(&grid);
        for d in DistanceSpec::all() {
            let e = effect_onestep(&d, &t, &[(&n1, &n1)], &grid).unwrap();
            assert!(e.psi_hat.abs() < 1e-12, "{d}: {}", e.psi_hat);
            assert!(e.plugin.abs() < 1e-12);
            assert!(e.influence.iter().all(|v| v.abs() < 1e-12));
            assert!(e.near_null);
        }
        let d = effect_l2_direct(&t, &[(&n1, &n1)], &grid).unwrap();
        assert!(d.psi_hat.abs() < 1e-12);
    }

    #[test]
    fn conservative_interval_contains_wald() {
        let grid = make_grid(64, QuadratureRule::Trapezoid).unwrap();
        let (t, n1, n0) = four_rows(&grid);
        for d in DistanceSpec::all() {
            let e = effect_onestep(&d, &t, &[(&n1, &n0)], &grid).unwrap();
            assert!(e.se >= 0.0);
            assert!(e.ci_conservative.0 <= e.ci_wald.0 && e.ci_conservative.1 >= e.ci_wald.1);
            assert_eq!(e.floor.is_some(), d != DistanceSpec::L2Sq);
        }
    }

    #[test]
    fn fixed_candidate_at_plugin_is_zero() {
        let grid = make_grid(64, QuadratureRule::Trapezoid).unwrap();
        let (t, n1, _) = four_rows(&grid);
        let e = effect_fixed_candidate(&DistanceSpec::L2Sq, &t, &[&n1], &n1.marginal.clone(), &grid).unwrap();
        assert!(e.plugin.abs() < 1e-14);
        assert!(e.correction.abs() < 1e-12);
        let kl = effect_fixed_candidate(&DistanceSpec::Kl, &t, &[&n1], &n1.marginal.clone(), &grid).unwrap();
        assert!(kl.plugin.abs() < 1e-12);
    }

    #[test]
    fn missing_level_is_reported() {
        let grid = make_grid(64, QuadratureRule::Trapezoid).unwrap();
        let (t, n1, n0) = four_rows(&grid);
        let mut n2 = n0.clone();
        n2.level = 2;
        assert!(matches!(effect_onestep(&DistanceSpec::L2Sq, &t, &[(&n1, &n2)], &grid), Err(Error::MissingLevel(2))));
    }
}
