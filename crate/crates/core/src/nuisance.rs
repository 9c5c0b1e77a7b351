//! Propensity scores, conditional outcome densities and cross-fitting.
//!
//! Learners implement [`PropensityLearner`] or [`CondDensityLearner`]: they are
//! fitted on a set of training rows and return an immutable predictor. The
//! shipped learners are multinomial logistic regression, k-nearest-neighbour
//! class frequencies, Nadaraya-Watson and k-nearest-neighbour regression of a
//! Gaussian outcome kernel, and a covariate-free marginal kernel density.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{make_folds, EvalGrid, FoldPlan, ObservationTable};
use crate::error::{Error, Result};
use crate::kdtree::KdTree;

/// Default lower bound on propensity scores.
pub const DEFAULT_CLIP_EPS: f64 = 0.01;
/// Minimum number of training rows at a level for a conditional density fit.
pub const MIN_DENSITY_ROWS: usize = 20;

/// A fitted propensity score for one treatment level.
pub trait PropensityModel: Send + Sync + fmt::Debug {
    /// Clipped estimate of `P(A = level | X = x)`.
    fn predict(&self, x: &[f64]) -> f64;

    fn warning(&self) -> Option<String> {
        None
    }
}

/// A fitted conditional outcome density for one treatment level.
pub trait CondDensityModel: Send + Sync + fmt::Debug {
    /// Write `η̂(y_j | x)` for every grid point into `out`.
    fn tabulate(&self, x: &[f64], out: &mut [f64]);
}

pub trait PropensityLearner: Send + Sync + fmt::Debug {
    fn fit(&self, table: &ObservationTable, rows: &[usize], level: i64, clip_eps: f64)
        -> Result<Arc<dyn PropensityModel>>;
}

pub trait CondDensityLearner: Send + Sync + fmt::Debug {
    fn fit(&self, table: &ObservationTable, rows: &[usize], level: i64, grid: &EvalGrid)
        -> Result<Arc<dyn CondDensityModel>>;
}

/// Raise every probability below `eps` to `eps` and rescale the rest so the vector still sums to one.
pub fn clip_probabilities(p: &mut [f64], eps: f64) {
    let l = p.len();
    if l == 0 {
        return;
    }
    let eps = eps.min(1.0 / l as f64);
    let mut fixed = vec![false; l];
    loop {
        let n_fixed = fixed.iter().filter(|&&f| f).count();
        let free_mass: f64 = p.iter().zip(&fixed).filter(|(_, &f)| !f).map(|(v, _)| v.max(0.0)).sum();
        let target = 1.0 - eps * n_fixed as f64;
        let mut changed = false;
        for i in 0..l {
            if fixed[i] {
                p[i] = eps;
            } else {
                p[i] = if free_mass > 0.0 {
                    p[i].max(0.0) * target / free_mass
                } else {
                    target / (l - n_fixed) as f64
                };
            }
        }
        for i in 0..l {
            if !fixed[i] && p[i] < eps {
                fixed[i] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
}

fn training_labels(table: &ObservationTable, rows: &[usize], level: i64) -> Result<Vec<i64>> {
    let mut labels: Vec<i64> = rows.iter().map(|&i| table.a(i)).collect();
    labels.sort_unstable();
    labels.dedup();
    if !labels.contains(&level) {
        return Err(Error::MissingLevel(level));
    }
    if labels.len() < 2 {
        return Err(Error::InsufficientData { level, have: rows.len(), need: rows.len() + 1 });
    }
    Ok(labels)
}

/// Per-coordinate centering and scaling computed on training rows.
#[derive(Debug, Clone)]
struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(table: &ObservationTable, rows: &[usize]) -> Self {
        let d = table.dim();
        let m = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for &i in rows {
            for (k, v) in table.x(i).iter().enumerate() {
                mean[k] += v / m;
            }
        }
        let mut var = vec![0.0; d];
        for &i in rows {
            for (k, v) in table.x(i).iter().enumerate() {
                var[k] += (v - mean[k]).powi(2) / (m - 1.0).max(1.0);
            }
        }
        let scale = var.iter().map(|&v| if v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
        Self { mean, scale }
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for k in 0..x.len() {
            out[k] = (x[k] - self.mean[k]) / self.scale[k];
        }
    }

    fn matrix(&self, table: &ObservationTable, rows: &[usize]) -> Vec<f64> {
        let d = table.dim();
        let mut out = vec![0.0; rows.len() * d];
        for (r, &i) in rows.iter().enumerate() {
            self.apply(table.x(i), &mut out[r * d..(r + 1) * d]);
        }
        out
    }
}

/// Shipped propensity learners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum PropensityMethod {
    /// Multinomial logistic regression fitted by Newton-IRLS.
    Logistic,
    /// Class frequencies among the `k` nearest training rows (default `⌈√m⌉`).
    Knn { k: Option<usize> },
    /// A fixed probability, ignoring covariates.
    Constant { value: f64 },
}

impl std::str::FromStr for PropensityMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidParameter(format!("unknown propensity method `{s}`"));
        let (head, arg) = s.split_once(':').unwrap_or((s, ""));
        match head {
            "logistic" => Ok(Self::Logistic),
            "knn" => {
                if arg.is_empty() {
                    Ok(Self::Knn { k: None })
                } else {
                    let v = arg.strip_prefix("k=").ok_or_else(bad)?.parse().map_err(|_| bad())?;
                    Ok(Self::Knn { k: Some(v) })
                }
            }
            "constant" => {
                let v: f64 = arg.strip_prefix("p=").unwrap_or(arg).parse().map_err(|_| bad())?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(bad());
                }
                Ok(Self::Constant { value: v })
            }
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for PropensityMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Logistic => write!(f, "logistic"),
            Self::Knn { k: None } => write!(f, "knn"),
            Self::Knn { k: Some(k) } => write!(f, "knn:k={k}"),
            Self::Constant { value } => write!(f, "constant:p={value}"),
        }
    }
}

impl PropensityLearner for PropensityMethod {
    fn fit(&self, table: &ObservationTable, rows: &[usize], level: i64, clip_eps: f64)
        -> Result<Arc<dyn PropensityModel>> {
        Ok(match *self {
            Self::Logistic => Arc::new(fit_logistic(table, rows, level, clip_eps)?),
            Self::Knn { k } => Arc::new(fit_knn_propensity(table, rows, level, clip_eps, k)?),
            Self::Constant { value } => {
                training_labels(table, rows, level)?;
                let mut p = [value, 1.0 - value];
                clip_probabilities(&mut p, clip_eps);
                Arc::new(ConstantPropensity { value: p[0] })
            }
        })
    }
}

/// Fit a propensity model for `level` on `rows`.
pub fn fit_propensity(
    table: &ObservationTable,
    rows: &[usize],
    level: i64,
    method: &dyn PropensityLearner,
    clip_eps: f64,
) -> Result<Arc<dyn PropensityModel>> {
    if !(0.0..0.5).contains(&clip_eps) {
        return Err(Error::InvalidParameter(format!("clip_eps must lie in [0, 0.5), got {clip_eps}")));
    }
    method.fit(table, rows, level, clip_eps)
}

#[derive(Debug, Clone)]
pub struct ConstantPropensity {
    pub value: f64,
}

impl PropensityModel for ConstantPropensity {
    fn predict(&self, _x: &[f64]) -> f64 {
        self.value
    }
}

/// Multinomial logistic regression on standardized covariates.
#[derive(Debug, Clone)]
pub struct LogisticPropensity {
    labels: Vec<i64>,
    target: usize,
    standardizer: Standardizer,
    // Row c-1 holds the coefficients (intercept first) of class c against class 0.
    coef: Vec<Vec<f64>>,
    clip_eps: f64,
    pub iterations: usize,
    pub converged: bool,
    warning: Option<String>,
}

impl LogisticPropensity {
    fn class_probs(&self, z: &[f64]) -> Vec<f64> {
        let mut eta = vec![0.0; self.labels.len()];
        for (c, beta) in self.coef.iter().enumerate() {
            eta[c + 1] = beta[0] + beta[1..].iter().zip(z).map(|(b, v)| b * v).sum::<f64>();
        }
        softmax(&eta)
    }
}

fn softmax(eta: &[f64]) -> Vec<f64> {
    let m = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = eta.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl PropensityModel for LogisticPropensity {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut z = vec![0.0; x.len()];
        self.standardizer.apply(x, &mut z);
        let mut p = self.class_probs(&z);
        clip_probabilities(&mut p, self.clip_eps);
        p[self.target]
    }

    fn warning(&self) -> Option<String> {
        self.warning.clone()
    }
}

fn fit_logistic(table: &ObservationTable, rows: &[usize], level: i64, clip_eps: f64) -> Result<LogisticPropensity> {
    let labels = training_labels(table, rows, level)?;
    let l = labels.len();
    let d = table.dim();
    let q = d + 1;
    let dim = (l - 1) * q;
    let standardizer = Standardizer::fit(table, rows);
    let z = standardizer.matrix(table, rows);
    let m = rows.len();
    let y: Vec<usize> = rows.iter().map(|&i| labels.binary_search(&table.a(i)).expect("label present")).collect();
    let ridge = 1e-8 * m as f64;

    let design = |r: usize, j: usize| if j == 0 { 1.0 } else { z[r * d + j - 1] };
    let probs_at = |theta: &DVector<f64>, r: usize| -> Vec<f64> {
        let mut eta = vec![0.0; l];
        for c in 1..l {
            eta[c] = (0..q).map(|j| theta[(c - 1) * q + j] * design(r, j)).sum();
        }
        softmax(&eta)
    };
    let objective = |theta: &DVector<f64>| -> f64 {
        let mut ll = 0.0;
        for r in 0..m {
            ll += probs_at(theta, r)[y[r]].max(1e-300).ln();
        }
        let pen: f64 = (0..dim).filter(|i| i % q != 0).map(|i| theta[i] * theta[i]).sum();
        ll / m as f64 - 0.5 * ridge * pen / m as f64
    };

    let mut theta = DVector::<f64>::zeros(dim);
    let mut iterations = 0;
    let mut converged = false;
    let mut obj = objective(&theta);
    for it in 0..100 {
        iterations = it + 1;
        let mut grad = DVector::<f64>::zeros(dim);
        let mut hess = DMatrix::<f64>::zeros(dim, dim);
        for r in 0..m {
            let p = probs_at(&theta, r);
            for c in 1..l {
                let resid = if y[r] == c { 1.0 } else { 0.0 } - p[c];
                for j in 0..q {
                    grad[(c - 1) * q + j] += resid * design(r, j);
                }
                for c2 in 1..l {
                    let w = p[c] * (if c == c2 { 1.0 } else { 0.0 } - p[c2]);
                    for j in 0..q {
                        for k in 0..q {
                            hess[((c - 1) * q + j, (c2 - 1) * q + k)] += w * design(r, j) * design(r, k);
                        }
                    }
                }
            }
        }
        for i in 0..dim {
            if i % q != 0 {
                grad[i] -= ridge * theta[i];
                hess[(i, i)] += ridge;
            }
            hess[(i, i)] += 1e-12 * m as f64;
        }
        grad /= m as f64;
        hess /= m as f64;
        if grad.norm() < 1e-8 {
            converged = true;
            break;
        }
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => grad.clone(),
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = &theta + &step * t;
            let o = objective(&cand);
            if o >= obj - 1e-15 {
                theta = cand;
                obj = o;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }

    let mut max_eta: f64 = 0.0;
    let mut all_correct = true;
    for r in 0..m {
        let p = probs_at(&theta, r);
        let best = (0..l).max_by(|&a, &b| p[a].total_cmp(&p[b])).expect("nonempty");
        all_correct &= best == y[r];
        for c in 1..l {
            let e: f64 = (0..q).map(|j| theta[(c - 1) * q + j] * design(r, j)).sum();
            max_eta = max_eta.max(e.abs());
        }
    }
    let warning = if all_correct && max_eta > 10.0 {
        Some("separation detected: logistic coefficients diverge, probabilities clipped".to_string())
    } else if !converged {
        Some(format!("logistic fit stopped after {iterations} iterations without convergence"))
    } else {
        None
    };
    let coef = (1..l).map(|c| (0..q).map(|j| theta[(c - 1) * q + j]).collect()).collect();
    let target = labels.binary_search(&level).expect("level present");
    Ok(LogisticPropensity { labels, target, standardizer, coef, clip_eps, iterations, converged, warning })
}

/// Class frequencies among nearest training rows.
#[derive(Debug, Clone)]
pub struct KnnPropensity {
    tree: KdTree,
    labels: Vec<usize>,
    n_labels: usize,
    target: usize,
    k: usize,
    standardizer: Standardizer,
    clip_eps: f64,
}

impl PropensityModel for KnnPropensity {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut z = vec![0.0; x.len()];
        self.standardizer.apply(x, &mut z);
        let mut counts = vec![0.0; self.n_labels];
        let nb = self.tree.nearest(&z, self.k);
        for &i in &nb {
            counts[self.labels[i]] += 1.0 / nb.len() as f64;
        }
        clip_probabilities(&mut counts, self.clip_eps);
        counts[self.target]
    }
}

fn fit_knn_propensity(
    table: &ObservationTable,
    rows: &[usize],
    level: i64,
    clip_eps: f64,
    k: Option<usize>,
) -> Result<KnnPropensity> {
    let labels = training_labels(table, rows, level)?;
    let standardizer = Standardizer::fit(table, rows);
    let tree = KdTree::new(standardizer.matrix(table, rows), table.dim());
    let k = k.unwrap_or_else(|| (rows.len() as f64).sqrt().ceil() as usize).clamp(1, rows.len());
    Ok(KnnPropensity {
        tree,
        labels: rows.iter().map(|&i| labels.binary_search(&table.a(i)).expect("label")).collect(),
        n_labels: labels.len(),
        target: labels.binary_search(&level).expect("level"),
        k,
        standardizer,
        clip_eps,
    })
}

/// Outcome bandwidth rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Bandwidth {
    Silverman,
    Fixed { h: f64 },
}

/// Treatment of kernel mass falling outside `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Plain Gaussian kernel, renormalized on the grid.
    None,
    /// Reflect the kernel about both endpoints.
    Reflect,
}

/// How the outcome kernel is regressed on covariates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "regressor", rename_all = "snake_case")]
pub enum Regressor {
    /// Gaussian product kernel in standardized covariates, bandwidth `m^{-1/(d+4)}`.
    NadarayaWatson,
    /// Average over the `k` nearest training rows (default `⌈√m⌉`).
    Knn { k: Option<usize> },
    /// Ignore covariates: the marginal kernel density of the level.
    Marginal,
}

impl std::str::FromStr for Regressor {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidParameter(format!("unknown density regressor `{s}`"));
        let (head, arg) = s.split_once(':').unwrap_or((s, ""));
        match head {
            "nw" | "nadaraya_watson" | "nadaraya-watson" => Ok(Self::NadarayaWatson),
            "knn" => {
                if arg.is_empty() {
                    Ok(Self::Knn { k: None })
                } else {
                    let v = arg.strip_prefix("k=").ok_or_else(bad)?.parse().map_err(|_| bad())?;
                    Ok(Self::Knn { k: Some(v) })
                }
            }
            "marginal" => Ok(Self::Marginal),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for Regressor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NadarayaWatson => write!(f, "nw"),
            Self::Knn { k: None } => write!(f, "knn"),
            Self::Knn { k: Some(k) } => write!(f, "knn:k={k}"),
            Self::Marginal => write!(f, "marginal"),
        }
    }
}

impl std::str::FromStr for Bandwidth {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "silverman" {
            return Ok(Self::Silverman);
        }
        match s.parse::<f64>() {
            Ok(h) if h > 0.0 && h.is_finite() => Ok(Self::Fixed { h }),
            _ => Err(Error::InvalidParameter(format!("bandwidth must be `silverman` or a positive number, got `{s}`"))),
        }
    }
}

impl fmt::Display for Bandwidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Silverman => write!(f, "silverman"),
            Self::Fixed { h } => write!(f, "{h}"),
        }
    }
}

/// Kernel-regression conditional density learner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CondDensityMethod {
    pub regressor: Regressor,
    pub bandwidth: Bandwidth,
    pub boundary: Boundary,
}

impl Default for CondDensityMethod {
    fn default() -> Self {
        Self { regressor: Regressor::Knn { k: None }, bandwidth: Bandwidth::Silverman, boundary: Boundary::Reflect }
    }
}

impl CondDensityLearner for CondDensityMethod {
    fn fit(&self, table: &ObservationTable, rows: &[usize], level: i64, grid: &EvalGrid)
        -> Result<Arc<dyn CondDensityModel>> {
        fit_cond_density(table, rows, level, grid, self.bandwidth, self.regressor, self.boundary)
    }
}

/// Silverman's rule `0.9 · min(sd, IQR/1.34) · m^{-1/5}`.
pub fn silverman_bandwidth(ys: &[f64]) -> f64 {
    let m = ys.len() as f64;
    let mean = ys.iter().sum::<f64>() / m;
    let sd = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0)).sqrt();
    let mut sorted = ys.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let mut lo = sd.min(iqr / 1.34);
    if lo <= 0.0 {
        lo = sd;
    }
    if lo <= 0.0 {
        lo = ys[0].abs();
    }
    if lo <= 0.0 {
        lo = 1.0;
    }
    0.9 * lo * m.powf(-0.2)
}

/// Linear-interpolation sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn kernel_curves(ys: &[f64], h: f64, boundary: Boundary, grid: &EvalGrid) -> Vec<f64> {
    let g = grid.len();
    let mut out = vec![0.0; ys.len() * g];
    for (i, &yi) in ys.iter().enumerate() {
        for (v, &y) in out[i * g..(i + 1) * g].iter_mut().zip(grid.points()) {
            *v = kernel_at(y, yi, h, boundary);
        }
    }
    out
}

fn kernel_at(y: f64, yi: f64, h: f64, boundary: Boundary) -> f64 {
    let k = |c: f64| {
        let z = (y - c) / h;
        (-0.5 * z * z).exp()
    };
    let raw = match boundary {
        Boundary::None => k(yi),
        Boundary::Reflect => k(yi) + k(-yi) + k(2.0 - yi),
    };
    raw / (h * (2.0 * std::f64::consts::PI).sqrt())
}

/// Multipliers of `m^{-1/(d+4)}` searched for the Nadaraya-Watson covariate bandwidth.
const NW_BANDWIDTH_MULTIPLIERS: [f64; 6] = [0.5, 1.0, 2.0, 4.0, 8.0, 16.0];
/// Rows used to score each candidate bandwidth.
const NW_CV_ROWS: usize = 300;

/// Leave-one-out L2 cross-validation of the covariate bandwidth:
/// minimizes the mean of `∫η̂₋ᵢ(y|Xᵢ)² dy − 2η̂₋ᵢ(Yᵢ|Xᵢ)` over a subsample of rows.
fn nw_cv_bandwidth(points: &[f64], d: usize, ys: &[f64], curves: &[f64], grid: &EvalGrid, h: f64, boundary: Boundary) -> f64 {
    let m = ys.len();
    let g = grid.len();
    let base = (m as f64).powf(-1.0 / (d as f64 + 4.0));
    let stride = m.div_ceil(NW_CV_ROWS).max(1);
    let eval: Vec<usize> = (0..m).step_by(stride).collect();
    let mut best = (f64::INFINITY, base);
    let mut curve = vec![0.0; g];
    for mult in NW_BANDWIDTH_MULTIPLIERS {
        let bw = base * mult;
        let mut score = 0.0;
        for &i in &eval {
            curve.iter_mut().for_each(|v| *v = 0.0);
            let (mut total, mut at_yi) = (0.0, 0.0);
            for k in 0..m {
                if k == i {
                    continue;
                }
                let dist2: f64 = (0..d).map(|c| ((points[i * d + c] - points[k * d + c]) / bw).powi(2)).sum();
                let w = (-0.5 * dist2).exp();
                if w < 1e-12 {
                    continue;
                }
                total += w;
                at_yi += w * kernel_at(ys[i], ys[k], h, boundary);
                for (o, c) in curve.iter_mut().zip(&curves[k * g..(k + 1) * g]) {
                    *o += w * c;
                }
            }
            if total <= 0.0 {
                score = f64::INFINITY;
                break;
            }
            let sq: f64 = curve.iter().zip(grid.weights()).map(|(v, w)| w * v * v).sum::<f64>() / (total * total);
            score += sq - 2.0 * at_yi / total;
        }
        if score < best.0 {
            best = (score, bw);
        }
    }
    best.1
}

fn normalize_on_grid(curve: &mut [f64], grid: &EvalGrid) {
    curve.iter_mut().for_each(|v| *v = v.max(0.0));
    let mass = grid.integrate(curve);
    if mass > 0.0 {
        curve.iter_mut().for_each(|v| *v /= mass);
    } else {
        curve.iter_mut().for_each(|v| *v = 1.0);
    }
}

/// Fit `η̂_a(· | x)` on the grid from training rows with `A = level`.
pub fn fit_cond_density(
    table: &ObservationTable,
    rows: &[usize],
    level: i64,
    grid: &EvalGrid,
    bandwidth: Bandwidth,
    regressor: Regressor,
    boundary: Boundary,
) -> Result<Arc<dyn CondDensityModel>> {
    let at: Vec<usize> = rows.iter().copied().filter(|&i| table.a(i) == level).collect();
    if at.len() < MIN_DENSITY_ROWS {
        return Err(Error::InsufficientData { level, have: at.len(), need: MIN_DENSITY_ROWS });
    }
    let ys: Vec<f64> = at.iter().map(|&i| table.y(i)).collect();
    let h = match bandwidth {
        Bandwidth::Silverman => silverman_bandwidth(&ys),
        Bandwidth::Fixed { h } => h,
    };
    let curves = kernel_curves(&ys, h, boundary, grid);
    let g = grid.len();
    let m = at.len();
    Ok(match regressor {
        Regressor::Marginal => {
            let mut avg = vec![0.0; g];
            for i in 0..m {
                for (a, c) in avg.iter_mut().zip(&curves[i * g..(i + 1) * g]) {
                    *a += c / m as f64;
                }
            }
            normalize_on_grid(&mut avg, grid);
            Arc::new(MarginalDensity { curve: avg, bandwidth: h })
        }
        Regressor::NadarayaWatson => {
            let standardizer = Standardizer::fit(table, &at);
            let d = table.dim();
            let points = standardizer.matrix(table, &at);
            let x_bandwidth = nw_cv_bandwidth(&points, d, &ys, &curves, grid, h, boundary);
            Arc::new(NadarayaWatsonDensity {
                points,
                standardizer,
                curves,
                grid_len: g,
                x_bandwidth,
                bandwidth: h,
                weights: grid.weights().to_vec(),
            })
        }
        Regressor::Knn { k } => {
            let standardizer = Standardizer::fit(table, &at);
            let k = k.unwrap_or_else(|| (m as f64).sqrt().ceil() as usize).clamp(1, m);
            Arc::new(KnnDensity {
                tree: KdTree::new(standardizer.matrix(table, &at), table.dim()),
                standardizer,
                curves,
                grid_len: g,
                k,
                bandwidth: h,
                weights: grid.weights().to_vec(),
            })
        }
    })
}

#[derive(Debug, Clone)]
pub struct MarginalDensity {
    curve: Vec<f64>,
    pub bandwidth: f64,
}

impl CondDensityModel for MarginalDensity {
    fn tabulate(&self, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.curve);
    }
}

fn renormalize(out: &mut [f64], weights: &[f64]) {
    out.iter_mut().for_each(|v| *v = v.max(0.0));
    let mass: f64 = out.iter().zip(weights).map(|(v, w)| v * w).sum();
    if mass > 0.0 {
        out.iter_mut().for_each(|v| *v /= mass);
    }
}

#[derive(Debug, Clone)]
pub struct NadarayaWatsonDensity {
    points: Vec<f64>,
    standardizer: Standardizer,
    curves: Vec<f64>,
    grid_len: usize,
    pub x_bandwidth: f64,
    pub bandwidth: f64,
    weights: Vec<f64>,
}

impl CondDensityModel for NadarayaWatsonDensity {
    fn tabulate(&self, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        let mut z = vec![0.0; d];
        self.standardizer.apply(x, &mut z);
        let m = self.points.len() / d;
        let logw: Vec<f64> = (0..m)
            .map(|i| {
                -0.5 * (0..d).map(|k| ((z[k] - self.points[i * d + k]) / self.x_bandwidth).powi(2)).sum::<f64>()
            })
            .collect();
        let top = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        out.iter_mut().for_each(|v| *v = 0.0);
        let g = self.grid_len;
        let mut total = 0.0;
        for (i, lw) in logw.iter().enumerate() {
            let w = (lw - top).exp();
            if w < 1e-16 {
                continue;
            }
            total += w;
            for (o, c) in out.iter_mut().zip(&self.curves[i * g..(i + 1) * g]) {
                *o += w * c;
            }
        }
        out.iter_mut().for_each(|v| *v /= total);
        renormalize(out, &self.weights);
    }
}

#[derive(Debug, Clone)]
pub struct KnnDensity {
    tree: KdTree,
    standardizer: Standardizer,
    curves: Vec<f64>,
    grid_len: usize,
    k: usize,
    pub bandwidth: f64,
    weights: Vec<f64>,
}

impl CondDensityModel for KnnDensity {
    fn tabulate(&self, x: &[f64], out: &mut [f64]) {
        let mut z = vec![0.0; x.len()];
        self.standardizer.apply(x, &mut z);
        let nb = self.tree.nearest(&z, self.k);
        out.iter_mut().for_each(|v| *v = 0.0);
        let g = self.grid_len;
        for &i in &nb {
            for (o, c) in out.iter_mut().zip(&self.curves[i * g..(i + 1) * g]) {
                *o += c;
            }
        }
        renormalize(out, &self.weights);
    }
}

/// Learners and clipping level used for every nuisance fit.
#[derive(Debug, Clone)]
pub struct NuisanceConfig {
    pub propensity: Arc<dyn PropensityLearner>,
    pub cond_density: Arc<dyn CondDensityLearner>,
    pub clip_eps: f64,
}

impl NuisanceConfig {
    pub fn new(
        propensity: impl PropensityLearner + 'static,
        cond_density: impl CondDensityLearner + 'static,
        clip_eps: f64,
    ) -> Self {
        Self { propensity: Arc::new(propensity), cond_density: Arc::new(cond_density), clip_eps }
    }
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        Self::new(PropensityMethod::Logistic, CondDensityMethod::default(), DEFAULT_CLIP_EPS)
    }
}

/// Fitted nuisances for one treatment level, with the rows they were trained on.
#[derive(Debug, Clone)]
pub struct NuisanceFit {
    pub level: i64,
    pub propensity: Arc<dyn PropensityModel>,
    pub cond_density: Arc<dyn CondDensityModel>,
    /// Sorted training row indices.
    pub trained_rows: Vec<usize>,
}

impl NuisanceFit {
    pub fn fit(
        table: &ObservationTable,
        train_rows: &[usize],
        level: i64,
        config: &NuisanceConfig,
        grid: &EvalGrid,
    ) -> Result<Self> {
        let propensity = fit_propensity(table, train_rows, level, config.propensity.as_ref(), config.clip_eps)?;
        let cond_density = config.cond_density.fit(table, train_rows, level, grid)?;
        let mut trained_rows = train_rows.to_vec();
        trained_rows.sort_unstable();
        Ok(Self { level, propensity, cond_density, trained_rows })
    }

    /// Tabulate the nuisances on evaluation rows disjoint from the training rows.
    pub fn evaluate(&self, table: &ObservationTable, eval_rows: &[usize], grid: &EvalGrid) -> Result<FoldNuisance> {
        let overlap = eval_rows.iter().filter(|i| self.trained_rows.binary_search(i).is_ok()).count();
        if overlap > 0 {
            return Err(Error::CrossFitViolation(overlap));
        }
        let g = grid.len();
        let mut eta = vec![0.0; eval_rows.len() * g];
        let mut propensity = Vec::with_capacity(eval_rows.len());
        for (r, &i) in eval_rows.iter().enumerate() {
            self.cond_density.tabulate(table.x(i), &mut eta[r * g..(r + 1) * g]);
            propensity.push(self.propensity.predict(table.x(i)));
        }
        let marginal = average_rows(&eta, g);
        Ok(FoldNuisance { level: self.level, rows: eval_rows.to_vec(), propensity, eta, marginal, grid_len: g })
    }
}

fn average_rows(eta: &[f64], g: usize) -> Vec<f64> {
    let n = eta.len() / g;
    let mut out = vec![0.0; g];
    for r in 0..n {
        for (o, v) in out.iter_mut().zip(&eta[r * g..(r + 1) * g]) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= n as f64);
    out
}

/// `p̂_a(y_j)`: the average of `η̂_a(y_j | X_i)` over evaluation rows.
pub fn plugin_marginal(fit: &NuisanceFit, table: &ObservationTable, eval_rows: &[usize], grid: &EvalGrid) -> Result<Vec<f64>> {
    Ok(fit.evaluate(table, eval_rows, grid)?.marginal)
}

/// Nuisances tabulated on one set of evaluation rows.
#[derive(Debug, Clone)]
pub struct FoldNuisance {
    pub level: i64,
    pub rows: Vec<usize>,
    /// `π̂_a(X_i)` per evaluation row.
    pub propensity: Vec<f64>,
    /// `η̂_a(y_j | X_i)`, row-major `rows × G`.
    pub eta: Vec<f64>,
    /// Plug-in marginal `p̂_a` on the grid.
    pub marginal: Vec<f64>,
    grid_len: usize,
}

impl FoldNuisance {
    /// Assemble from precomputed tables.
    pub fn from_parts(level: i64, rows: Vec<usize>, propensity: Vec<f64>, eta: Vec<f64>, grid_len: usize) -> Result<Self> {
        if propensity.len() != rows.len() {
            return Err(Error::LengthMismatch { expected: rows.len(), got: propensity.len() });
        }
        if eta.len() != rows.len() * grid_len {
            return Err(Error::LengthMismatch { expected: rows.len() * grid_len, got: eta.len() });
        }
        if rows.is_empty() {
            return Err(Error::EmptyData("no evaluation rows".into()));
        }
        let marginal = average_rows(&eta, grid_len);
        Ok(Self { level, rows, propensity, eta, marginal, grid_len })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn eta_row(&self, r: usize) -> &[f64] {
        &self.eta[r * self.grid_len..(r + 1) * self.grid_len]
    }

    pub fn grid_len(&self) -> usize {
        self.grid_len
    }
}

/// Cross-fitted nuisances: for every fold, fits on the other folds evaluated on this one.
#[derive(Debug, Clone)]
pub struct CrossFit {
    pub plan: FoldPlan,
    pub levels: Vec<i64>,
    parts: Vec<Vec<FoldNuisance>>,
    pub warnings: Vec<String>,
}

impl CrossFit {
    /// Cross-fit over all rows of `table` with a fresh fold plan.
    pub fn fit_all(
        table: &ObservationTable,
        k_folds: usize,
        seed: u64,
        levels: &[i64],
        config: &NuisanceConfig,
        grid: &EvalGrid,
    ) -> Result<Self> {
        let rows: Vec<usize> = (0..table.n()).collect();
        let plan = make_folds(rows.len(), k_folds, seed)?;
        Self::fit(table, &rows, &plan, levels, config, grid)
    }

    /// Cross-fit over `rows`; `plan` assigns folds to positions in `rows`.
    pub fn fit(
        table: &ObservationTable,
        rows: &[usize],
        plan: &FoldPlan,
        levels: &[i64],
        config: &NuisanceConfig,
        grid: &EvalGrid,
    ) -> Result<Self> {
        Self::fit_with(table, rows, plan, levels, grid, |train, level| {
            NuisanceFit::fit(table, train, level, config, grid)
        })
    }

    /// Cross-fit with a custom fitting closure `(train_rows, level) -> NuisanceFit`.
    pub fn fit_with(
        table: &ObservationTable,
        rows: &[usize],
        plan: &FoldPlan,
        levels: &[i64],
        grid: &EvalGrid,
        fitter: impl Fn(&[usize], i64) -> Result<NuisanceFit>,
    ) -> Result<Self> {
        if plan.n != rows.len() {
            return Err(Error::LengthMismatch { expected: rows.len(), got: plan.n });
        }
        for &a in levels {
            if !rows.iter().any(|&i| table.a(i) == a) {
                return Err(Error::MissingLevel(a));
            }
        }
        let mut parts = Vec::with_capacity(plan.k_folds);
        let mut warnings = Vec::new();
        for k in 0..plan.k_folds {
            let eval: Vec<usize> = plan.fold(k).into_iter().map(|p| rows[p]).collect();
            let train: Vec<usize> = plan.complement(k).into_iter().map(|p| rows[p]).collect();
            let mut per_level = Vec::with_capacity(levels.len());
            for &a in levels {
                let fit = fitter(&train, a)?;
                if let Some(w) = fit.propensity.warning() {
                    warnings.push(format!("fold {k}, level {a}: {w}"));
                }
                per_level.push(fit.evaluate(table, &eval, grid)?);
            }
            parts.push(per_level);
        }
        Ok(Self { plan: plan.clone(), levels: levels.to_vec(), parts, warnings })
    }

    pub fn n_folds(&self) -> usize {
        self.parts.len()
    }

    pub fn nuisance(&self, fold: usize, level: i64) -> Result<&FoldNuisance> {
        let idx = self.levels.iter().position(|&a| a == level).ok_or(Error::MissingLevel(level))?;
        Ok(&self.parts[fold][idx])
    }

    /// Fold-size weighted average of the per-fold plug-in marginals.
    pub fn marginal(&self, level: i64) -> Result<Vec<f64>> {
        let mut out: Vec<f64> = Vec::new();
        let mut total = 0.0;
        for k in 0..self.n_folds() {
            let f = self.nuisance(k, level)?;
            let w = f.len() as f64;
            if out.is_empty() {
                out = vec![0.0; f.marginal.len()];
            }
            for (o, v) in out.iter_mut().zip(&f.marginal) {
                *o += w * v;
            }
            total += w;
        }
        out.iter_mut().for_each(|v| *v /= total);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_grid, QuadratureRule};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn clipping_examples() {
        let mut p = [0.001, 0.999];
        clip_probabilities(&mut p, 0.01);
        assert!((p[0] - 0.01).abs() < 1e-15 && (p[1] - 0.99).abs() < 1e-15);
        let mut q = [0.0, 0.005, 0.995];
        clip_probabilities(&mut q, 0.01);
        assert!(q.iter().all(|&v| v >= 0.01));
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn silverman_fixture() {
        let ys = [0.05, 0.12, 0.2, 0.31, 0.33, 0.4, 0.52, 0.6, 0.77, 0.9];
        // Hand computation: mean 0.42, sd 0.27077..., quartiles 0.2275 / 0.58, IQR/1.34 = 0.26306.
        let mean: f64 = ys.iter().sum::<f64>() / 10.0;
        let sd = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / 9.0).sqrt();
        let iqr = (0.58 - 0.2275) / 1.34;
        let want = 0.9 * sd.min(iqr) * 10f64.powf(-0.2);
        assert!((silverman_bandwidth(&ys) - want).abs() < 1e-12);
        assert!(iqr < sd);
    }

    #[test]
    fn randomized_logistic_is_flat() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 2000;
        let x: Vec<f64> = (0..2 * n).map(|_| rng.random::<f64>()).collect();
        let a: Vec<i64> = (0..n).map(|_| i64::from(rng.random::<f64>() < 0.5)).collect();
        let t = ObservationTable::from_unit(x, 2, a, vec![0.5; n]).unwrap();
        let rows: Vec<usize> = (0..n).collect();
        let m = fit_propensity(&t, &rows, 1, &PropensityMethod::Logistic, 0.01).unwrap();
        for _ in 0..100 {
            let q = [rng.random::<f64>(), rng.random::<f64>()];
            let p = m.predict(&q);
            assert!((0.45..=0.55).contains(&p), "{p}");
        }
    }

    #[test]
    fn separation_warns_and_clips() {
        let n = 200;
        let x: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let a: Vec<i64> = x.iter().map(|&v| i64::from(v > 0.5)).collect();
        let t = ObservationTable::from_unit(x, 1, a, vec![0.5; n]).unwrap();
        let rows: Vec<usize> = (0..n).collect();
        let m = fit_propensity(&t, &rows, 1, &PropensityMethod::Logistic, 0.01).unwrap();
        assert!(m.warning().is_some());
        assert!((m.predict(&[0.01]) - 0.01).abs() < 1e-9);
        assert!((m.predict(&[0.99]) - 0.99).abs() < 1e-9);
    }

    #[test]
    fn constant_x_nw_equals_marginal_kde() {
        let grid = make_grid(64, QuadratureRule::Trapezoid).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 60;
        let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let t = ObservationTable::from_unit(vec![0.3; n], 1, vec![1; n], y).unwrap();
        let rows: Vec<usize> = (0..n).collect();
        let nw = fit_cond_density(&t, &rows, 1, &grid, Bandwidth::Silverman, Regressor::NadarayaWatson, Boundary::None).unwrap();
        let mg = fit_cond_density(&t, &rows, 1, &grid, Bandwidth::Silverman, Regressor::Marginal, Boundary::None).unwrap();
        let mut a = vec![0.0; 64];
        let mut b = vec![0.0; 64];
        nw.tabulate(&[0.3], &mut a);
        mg.tabulate(&[0.3], &mut b);
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_outcome_density_is_flat() {
        let grid = make_grid(128, QuadratureRule::Trapezoid).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 5000;
        let x: Vec<f64> = (0..2 * n).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let t = ObservationTable::from_unit(x, 2, vec![1; n], y).unwrap();
        let rows: Vec<usize> = (0..n).collect();
        let method = CondDensityMethod { regressor: Regressor::NadarayaWatson, ..Default::default() };
        let fit = method.fit(&t, &rows, 1, &grid).unwrap();
        let mut out = vec![0.0; 128];
        for q in [[0.2, 0.7], [0.5, 0.5], [0.8, 0.1]] {
            fit.tabulate(&q, &mut out);
            for (j, &y) in grid.points().iter().enumerate() {
                if (0.1..=0.9).contains(&y) {
                    assert!((out[j] - 1.0).abs() < 0.15, "y={y} eta={}", out[j]);
                }
            }
        }
    }

    #[test]
    fn insufficient_rows() {
        let grid = make_grid(16, QuadratureRule::Trapezoid).unwrap();
        let t = ObservationTable::from_unit(vec![0.0; 10], 1, vec![1; 10], vec![0.5; 10]).unwrap();
        let rows: Vec<usize> = (0..10).collect();
        let err = fit_cond_density(&t, &rows, 1, &grid, Bandwidth::Silverman, Regressor::Marginal, Boundary::None);
        assert!(matches!(err, Err(Error::InsufficientData { level: 1, have: 10, .. })));
    }

    #[test]
    fn overlap_is_a_crossfit_violation() {
        let grid = make_grid(16, QuadratureRule::Trapezoid).unwrap();
        let n = 60;
        let a: Vec<i64> = (0..n).map(|i| (i % 2) as i64).collect();
        let y: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let t = ObservationTable::from_unit(vec![0.1; n], 1, a, y).unwrap();
        let cfg = NuisanceConfig::new(
            PropensityMethod::Constant { value: 0.5 },
            CondDensityMethod { regressor: Regressor::Marginal, ..Default::default() },
            0.01,
        );
        let train: Vec<usize> = (0..50).collect();
        let fit = NuisanceFit::fit(&t, &train, 1, &cfg, &grid).unwrap();
        assert!(matches!(fit.evaluate(&t, &[3, 4, 55], &grid), Err(Error::CrossFitViolation(2))));
        assert!(fit.evaluate(&t, &[50, 55], &grid).is_ok());
    }

    #[test]
    fn plugin_is_average_of_curves() {
        let grid = make_grid(33, QuadratureRule::Trapezoid).unwrap();
        let uni = vec![1.0; 33];
        let tri = grid.tabulate(|y| 2.0 * y);
        let mut eta = uni.clone();
        eta.extend_from_slice(&tri);
        let f = FoldNuisance::from_parts(1, vec![0, 1], vec![0.5, 0.5], eta, 33).unwrap();
        for (j, &y) in grid.points().iter().enumerate() {
            assert!((f.marginal[j] - (1.0 + 2.0 * y) / 2.0).abs() < 1e-15);
        }
    }
}
