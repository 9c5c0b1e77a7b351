//! Observation tables, CSV ingestion, quadrature grids and fold plans.

use std::collections::BTreeSet;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Treatment label given to rows whose outcome is missing after recoding.
pub const MISSING_LEVEL: i64 = -1;

/// Min-max map between original outcome units and `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RescaleParams {
    pub y_min: f64,
    pub y_max: f64,
}

impl RescaleParams {
    pub const UNIT: RescaleParams = RescaleParams { y_min: 0.0, y_max: 1.0 };

    pub fn rescale(&self, y: f64) -> f64 {
        (y - self.y_min) / (self.y_max - self.y_min)
    }

    pub fn unrescale(&self, u: f64) -> f64 {
        self.y_min + u * (self.y_max - self.y_min)
    }

    /// Jacobian factor turning a density on `[0, 1]` into one on the original scale.
    pub fn density_scale(&self) -> f64 {
        1.0 / (self.y_max - self.y_min)
    }
}

/// The i.i.d. sample `(X, A, Y)` with outcomes on `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ObservationTable {
    covariates: Vec<f64>,
    d: usize,
    treatment: Vec<i64>,
    outcome: Vec<f64>,
    observed: Vec<bool>,
    rescale: RescaleParams,
}

impl ObservationTable {
    /// Build a table from outcomes already on `[0, 1]`.
    pub fn from_unit(
        covariates: Vec<f64>,
        d: usize,
        treatment: Vec<i64>,
        outcome: Vec<f64>,
    ) -> Result<Self> {
        let n = treatment.len();
        let observed = vec![true; n];
        Self::from_parts(covariates, d, treatment, outcome, observed, RescaleParams::UNIT)
    }

    /// Build a table from raw outcomes, min-max rescaling them onto `[0, 1]`.
    pub fn from_raw(
        covariates: Vec<f64>,
        d: usize,
        treatment: Vec<i64>,
        raw_outcome: Vec<f64>,
    ) -> Result<Self> {
        let observed = vec![true; raw_outcome.len()];
        let (outcome, rescale) = rescale_outcomes(&raw_outcome, &observed)?;
        Self::from_parts(covariates, d, treatment, outcome, observed, rescale)
    }

    pub fn from_parts(
        covariates: Vec<f64>,
        d: usize,
        treatment: Vec<i64>,
        outcome: Vec<f64>,
        observed: Vec<bool>,
        rescale: RescaleParams,
    ) -> Result<Self> {
        let n = treatment.len();
        if n == 0 {
            return Err(Error::EmptyData("no rows".into()));
        }
        if d == 0 {
            return Err(Error::Schema("at least one covariate is required".into()));
        }
        if covariates.len() != n * d {
            return Err(Error::LengthMismatch { expected: n * d, got: covariates.len() });
        }
        if outcome.len() != n {
            return Err(Error::LengthMismatch { expected: n, got: outcome.len() });
        }
        if observed.len() != n {
            return Err(Error::LengthMismatch { expected: n, got: observed.len() });
        }
        if let Some(i) = covariates.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parse {
                row: i / d,
                column: format!("x{}", i % d),
                msg: "non-finite covariate".into(),
            });
        }
        for (i, &y) in outcome.iter().enumerate() {
            if !y.is_finite() || !(-1e-12..=1.0 + 1e-12).contains(&y) {
                return Err(Error::Parse {
                    row: i,
                    column: "y".into(),
                    msg: format!("outcome {y} is outside [0, 1]"),
                });
            }
        }
        let outcome = outcome.into_iter().map(|y| y.clamp(0.0, 1.0)).collect();
        Ok(Self { covariates, d, treatment, outcome, observed, rescale })
    }

    pub fn n(&self) -> usize {
        self.treatment.len()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.covariates[i * self.d..(i + 1) * self.d]
    }

    pub fn covariates(&self) -> &[f64] {
        &self.covariates
    }

    pub fn a(&self, i: usize) -> i64 {
        self.treatment[i]
    }

    pub fn treatment(&self) -> &[i64] {
        &self.treatment
    }

    pub fn y(&self, i: usize) -> f64 {
        self.outcome[i]
    }

    pub fn outcome(&self) -> &[f64] {
        &self.outcome
    }

    pub fn is_observed(&self, i: usize) -> bool {
        self.observed[i]
    }

    pub fn rescale_params(&self) -> RescaleParams {
        self.rescale
    }

    /// Outcomes mapped back to original units.
    pub fn original_outcomes(&self) -> Vec<f64> {
        self.outcome.iter().map(|&u| self.rescale.unrescale(u)).collect()
    }

    /// Sorted distinct treatment labels.
    pub fn levels(&self) -> Vec<i64> {
        self.treatment.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn level_count(&self, a: i64) -> usize {
        self.treatment.iter().filter(|&&t| t == a).count()
    }

    /// Fails with a missing-level error unless some row carries label `a`.
    pub fn require_level(&self, a: i64) -> Result<()> {
        if self.level_count(a) == 0 {
            Err(Error::MissingLevel(a))
        } else {
            Ok(())
        }
    }
}

fn rescale_outcomes(raw: &[f64], observed: &[bool]) -> Result<(Vec<f64>, RescaleParams)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (&y, &ok) in raw.iter().zip(observed) {
        if ok {
            if !y.is_finite() {
                return Err(Error::Parse { row: 0, column: "y".into(), msg: "non-finite outcome".into() });
            }
            lo = lo.min(y);
            hi = hi.max(y);
        }
    }
    if !lo.is_finite() {
        return Err(Error::EmptyData("no observed outcomes".into()));
    }
    if hi <= lo {
        return Err(Error::DegenerateOutcome(lo));
    }
    let params = RescaleParams { y_min: lo, y_max: hi };
    let out = raw
        .iter()
        .zip(observed)
        .map(|(&y, &ok)| if ok { params.rescale(y).clamp(0.0, 1.0) } else { 0.0 })
        .collect();
    Ok((out, params))
}

/// Replace the treatment of unobserved rows by [`MISSING_LEVEL`] and zero their outcome.
pub fn recode_missingness(table: &ObservationTable, observed_flag: &[bool]) -> Result<ObservationTable> {
    let n = table.n();
    if observed_flag.len() != n {
        return Err(Error::LengthMismatch { expected: n, got: observed_flag.len() });
    }
    let mut out = table.clone();
    for i in 0..n {
        let ok = observed_flag[i] && table.observed[i];
        if !ok {
            out.treatment[i] = MISSING_LEVEL;
            out.outcome[i] = 0.0;
        }
        out.observed[i] = ok;
    }
    Ok(out)
}

/// Column names for the covariates, the treatment and the outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub x_cols: Vec<String>,
    pub a_col: String,
    pub y_col: String,
}

pub fn load_csv(path: &Path, schema: &CsvSchema, missing_code: Option<&str>) -> Result<ObservationTable> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema, missing_code)
}

/// Parse CSV content. Rows whose outcome equals `missing_code` are kept and recoded as missing.
pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema, missing_code: Option<&str>) -> Result<ObservationTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column `{name}` not found")))
    };
    if schema.x_cols.is_empty() {
        return Err(Error::Schema("at least one covariate column is required".into()));
    }
    let x_idx = schema.x_cols.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
    let a_idx = find(&schema.a_col)?;
    let y_idx = find(&schema.y_col)?;

    let d = x_idx.len();
    let mut covariates = Vec::new();
    let mut treatment = Vec::new();
    let mut raw_y = Vec::new();
    let mut observed = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for (&j, name) in x_idx.iter().zip(&schema.x_cols) {
            covariates.push(parse_number(rec.get(j).unwrap_or(""), row, name)?);
        }
        let a_raw = parse_number(rec.get(a_idx).unwrap_or(""), row, &schema.a_col)?;
        if a_raw.fract() != 0.0 {
            return Err(Error::Parse {
                row,
                column: schema.a_col.clone(),
                msg: format!("treatment `{a_raw}` is not an integer label"),
            });
        }
        treatment.push(a_raw as i64);
        let y_field = rec.get(y_idx).unwrap_or("");
        if missing_code.is_some_and(|m| m == y_field) {
            raw_y.push(0.0);
            observed.push(false);
        } else {
            raw_y.push(parse_number(y_field, row, &schema.y_col)?);
            observed.push(true);
        }
    }
    if treatment.is_empty() {
        return Err(Error::EmptyData("csv has a header but no data rows".into()));
    }
    let (outcome, rescale) = rescale_outcomes(&raw_y, &observed)?;
    let n = treatment.len();
    let table = ObservationTable::from_parts(covariates, d, treatment, outcome, vec![true; n], rescale)?;
    recode_missingness(&table, &observed)
}

fn parse_number(field: &str, row: usize, column: &str) -> Result<f64> {
    let v: f64 = field.parse().map_err(|_| Error::Parse {
        row,
        column: column.to_string(),
        msg: format!("`{field}` is not numeric"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse { row, column: column.to_string(), msg: "non-finite value".into() });
    }
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadratureRule {
    Trapezoid,
    GaussLegendre,
}

impl std::str::FromStr for QuadratureRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trapezoid" => Ok(Self::Trapezoid),
            "gauss_legendre" | "gauss-legendre" | "gl" => Ok(Self::GaussLegendre),
            other => Err(Error::InvalidParameter(format!("unknown quadrature rule `{other}`"))),
        }
    }
}

/// Quadrature nodes and weights on `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalGrid {
    points: Vec<f64>,
    weights: Vec<f64>,
    rule: QuadratureRule,
}

pub fn make_grid(g: usize, rule: QuadratureRule) -> Result<EvalGrid> {
    if g < 8 {
        return Err(Error::GridTooCoarse(g));
    }
    let (points, weights) = match rule {
        QuadratureRule::Trapezoid => {
            let h = 1.0 / (g - 1) as f64;
            let points = (0..g).map(|j| j as f64 * h).collect();
            let mut weights = vec![h; g];
            weights[0] = h / 2.0;
            weights[g - 1] = h / 2.0;
            (points, weights)
        }
        QuadratureRule::GaussLegendre => {
            let (x, w) = gauss_legendre(g);
            (x.iter().map(|v| 0.5 * (v + 1.0)).collect(), w.iter().map(|v| 0.5 * v).collect())
        }
    };
    Ok(EvalGrid { points, weights, rule })
}

/// Gauss-Legendre nodes (ascending) and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, 0.0);
            for k in 0..n {
                let p2 = p1;
                p1 = p0;
                p0 = ((2 * k + 1) as f64 * z * p1 - k as f64 * p2) / (k + 1) as f64;
            }
            dp = n as f64 * (z * p0 - p1) / (z * z - 1.0);
            let dz = p0 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

impl EvalGrid {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn rule(&self) -> QuadratureRule {
        self.rule
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.len());
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }

    pub fn integrate_fn(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.points.iter().zip(&self.weights).map(|(&y, w)| w * f(y)).sum()
    }

    pub fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        self.weights.iter().zip(a.iter().zip(b)).map(|(w, (x, y))| w * x * y).sum()
    }

    pub fn tabulate(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.points.iter().map(|&y| f(y)).collect()
    }

    /// Left bracketing index and interpolation weight for `y`, clamped to the grid span.
    pub fn locate(&self, y: f64) -> (usize, f64) {
        let g = self.len();
        let pts = &self.points;
        if y <= pts[0] {
            return (0, 0.0);
        }
        if y >= pts[g - 1] {
            return (g - 2, 1.0);
        }
        let j = match self.rule {
            QuadratureRule::Trapezoid => ((y * (g - 1) as f64).floor() as usize).min(g - 2),
            QuadratureRule::GaussLegendre => pts.partition_point(|&p| p <= y) - 1,
        };
        let t = (y - pts[j]) / (pts[j + 1] - pts[j]);
        (j, t.clamp(0.0, 1.0))
    }

    /// Piecewise-linear interpolation of grid values at `y`.
    pub fn interpolate(&self, values: &[f64], y: f64) -> f64 {
        let (j, t) = self.locate(y);
        values[j] * (1.0 - t) + values[j + 1] * t
    }
}

/// Random partition of `0..n` into `k` folds of near-equal size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n: usize,
    pub k_folds: usize,
    pub assignment: Vec<usize>,
    pub seed: u64,
}

pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 || n < k {
        return Err(Error::InfeasibleFolds { n, k });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![0; n];
    for (pos, &i) in perm.iter().enumerate() {
        assignment[i] = pos % k;
    }
    Ok(FoldPlan { n, k_folds: k, assignment, seed })
}

impl FoldPlan {
    /// Positions assigned to fold `k`, ascending.
    pub fn fold(&self, k: usize) -> Vec<usize> {
        (0..self.n).filter(|&i| self.assignment[i] == k).collect()
    }

    /// Positions outside fold `k`, ascending.
    pub fn complement(&self, k: usize) -> Vec<usize> {
        (0..self.n).filter(|&i| self.assignment[i] != k).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k_folds];
        for &f in &self.assignment {
            sizes[f] += 1;
        }
        sizes
    }
}
