//! Synthetic data-generating processes with known truth, brute-force oracles,
//! second-order remainder checks and the Monte-Carlo harness.

use std::f64::consts::{PI, SQRT_2};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal as NormalSampler};
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{gauss_legendre, make_grid, EvalGrid, ObservationTable, QuadratureRule};
use crate::distances::{divergence_unchecked, DistanceSpec};
use crate::effects::crossfit_effect;
use crate::eif::{gamma_f, lambdas};
use crate::error::{Error, Result};
use crate::models::{log_partition, CosineBasis, ModelSpec};
use crate::nuisance::{
    CondDensityLearner, CondDensityMethod, CondDensityModel, CrossFit, NuisanceConfig, NuisanceFit, PropensityLearner,
    PropensityMethod, PropensityModel, DEFAULT_CLIP_EPS,
};
use crate::optim::{nelder_mead, solve, NelderMeadOptions, RootOptions};
use crate::projection::{crossfit_projection, moment, moment_jacobian, projection_objective, solve_moment, SolverOptions, Z_95};

/// Grid size used for population truths.
pub const TRUTH_GRID: usize = 2048;
/// Gauss-Legendre nodes per covariate used to integrate over `X ~ U[0,1]²`.
pub const COVARIATE_NODES: usize = 32;

fn expit(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `P(A = 1 | X = x)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum PropensityLaw {
    Constant { p1: f64 },
    Logistic { intercept: f64, coef: [f64; 2] },
}

impl PropensityLaw {
    pub fn treated(&self, x: &[f64]) -> f64 {
        match self {
            PropensityLaw::Constant { p1 } => *p1,
            PropensityLaw::Logistic { intercept, coef } => expit(intercept + coef[0] * x[0] + coef[1] * x[1]),
        }
    }
}

/// Mean `intercept + coef·x + shift·a` of a truncated normal component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearMean {
    pub intercept: f64,
    pub coef: [f64; 2],
    pub shift: f64,
}

impl LinearMean {
    fn at(&self, x: &[f64], a: i64) -> f64 {
        self.intercept + self.coef[0] * x[0] + self.coef[1] * x[1] + self.shift * a as f64
    }
}

/// Law of `Y | X, A` on `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum OutcomeLaw {
    /// Normal truncated to `[0, 1]`.
    TruncNormal { mean: LinearMean, sigma: f64 },
    /// Two truncated normals; the first has weight `w0 + w1 x₁`.
    Mixture { first: LinearMean, second: LinearMean, weight: [f64; 2], sigma: f64 },
    /// Treated: `1 + (c0 + c1 (x₁ − ½)) √2 cos(πy)`; control: `1 + c2 (x₂ − ½) √2 cos(2πy)`.
    Cosine { c: [f64; 3] },
    /// Covariate-free exponential family in the cosine basis, one parameter per level.
    ExpFam { treated: Vec<f64>, control: Vec<f64> },
}

fn tn_density(y: f64, mu: f64, sigma: f64) -> f64 {
    let std = Normal::standard();
    let mass = std.cdf((1.0 - mu) / sigma) - std.cdf(-mu / sigma);
    let z = (y - mu) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * PI).sqrt() * mass)
}

fn tn_sample(mu: f64, sigma: f64, rng: &mut impl Rng) -> f64 {
    let std = Normal::standard();
    let lo = std.cdf(-mu / sigma);
    let hi = std.cdf((1.0 - mu) / sigma);
    let u = lo + (hi - lo) * rng.random::<f64>();
    (mu + sigma * std.inverse_cdf(u.clamp(1e-300, 1.0 - 1e-16))).clamp(0.0, 1.0)
}

/// A synthetic DGP with `X ~ U[0,1]²`, binary treatment and outcome on `[0, 1]`.
#[derive(Debug, Clone, Serialize)]
pub struct SyntheticDgp {
    pub name: String,
    pub description: String,
    pub propensity: PropensityLaw,
    pub outcome: OutcomeLaw,
    /// Log-normalizers of the exponential-family outcome laws, `(control, treated)`.
    #[serde(skip)]
    log_norm: [f64; 2],
    /// Upper bound on `η_a(y | x)` used for rejection sampling, `(control, treated)`.
    #[serde(skip)]
    envelope: [f64; 2],
}

impl SyntheticDgp {
    pub fn new(name: &str, description: &str, propensity: PropensityLaw, outcome: OutcomeLaw) -> Result<Self> {
        let mut dgp = Self {
            name: name.into(),
            description: description.into(),
            propensity,
            outcome,
            log_norm: [0.0; 2],
            envelope: [f64::INFINITY; 2],
        };
        match &dgp.outcome {
            OutcomeLaw::Cosine { c } => {
                dgp.envelope = [1.0 + (0.5 * c[2]).abs() * SQRT_2, 1.0 + (c[0].abs() + 0.5 * c[1].abs()) * SQRT_2];
            }
            OutcomeLaw::ExpFam { treated, control } => {
                let fine = make_grid(TRUTH_GRID, QuadratureRule::Trapezoid)?;
                for (slot, beta) in [(0, control), (1, treated)] {
                    let spec = ModelSpec::ExponentialFamily { dim: beta.len() };
                    dgp.log_norm[slot] = log_partition(&spec, beta, &fine)?.0;
                    let peak = spec.at(beta, &fine)?.values_on(&fine).into_iter().fold(0.0, f64::max);
                    dgp.envelope[slot] = 1.05 * peak;
                }
            }
            _ => {}
        }
        Ok(dgp)
    }

    pub fn dim(&self) -> usize {
        2
    }

    /// `π_a(x)` for `a ∈ {0, 1}`.
    pub fn propensity(&self, x: &[f64], a: i64) -> f64 {
        let p1 = self.propensity.treated(x);
        if a == 1 {
            p1
        } else {
            1.0 - p1
        }
    }

    /// `η_a(y | x)`.
    pub fn cond_density(&self, y: f64, x: &[f64], a: i64) -> f64 {
        match &self.outcome {
            OutcomeLaw::TruncNormal { mean, sigma } => tn_density(y, mean.at(x, a), *sigma),
            OutcomeLaw::Mixture { first, second, weight, sigma } => {
                let w = weight[0] + weight[1] * x[0];
                w * tn_density(y, first.at(x, a), *sigma) + (1.0 - w) * tn_density(y, second.at(x, a), *sigma)
            }
            OutcomeLaw::Cosine { c } => {
                if a == 1 {
                    1.0 + (c[0] + c[1] * (x[0] - 0.5)) * SQRT_2 * (PI * y).cos()
                } else {
                    1.0 + c[2] * (x[1] - 0.5) * SQRT_2 * (2.0 * PI * y).cos()
                }
            }
            OutcomeLaw::ExpFam { treated, control } => {
                let (beta, slot) = if a == 1 { (treated, 1) } else { (control, 0) };
                let b = CosineBasis::new(beta.len()).eval(y);
                (beta.iter().zip(&b).map(|(u, v)| u * v).sum::<f64>() - self.log_norm[slot]).exp()
            }
        }
    }

    /// `η_a(· | x)` on the grid, normalized by the grid's quadrature.
    pub fn tabulate_cond(&self, x: &[f64], a: i64, grid: &EvalGrid, out: &mut [f64]) {
        for (o, &y) in out.iter_mut().zip(grid.points()) {
            *o = self.cond_density(y, x, a);
        }
        let mass = grid.integrate(out);
        out.iter_mut().for_each(|v| *v /= mass);
    }

    pub fn sample_outcome(&self, x: &[f64], a: i64, rng: &mut impl Rng) -> f64 {
        match &self.outcome {
            OutcomeLaw::TruncNormal { mean, sigma } => tn_sample(mean.at(x, a), *sigma, rng),
            OutcomeLaw::Mixture { first, second, weight, sigma } => {
                let w = weight[0] + weight[1] * x[0];
                let m = if rng.random::<f64>() < w { first } else { second };
                tn_sample(m.at(x, a), *sigma, rng)
            }
            _ => {
                let bound = self.envelope[a.clamp(0, 1) as usize];
                loop {
                    let y: f64 = rng.random();
                    if rng.random::<f64>() * bound <= self.cond_density(y, x, a) {
                        return y;
                    }
                }
            }
        }
    }

    /// Draw `n` observations.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<ObservationTable> {
        let mut x = Vec::with_capacity(2 * n);
        let mut a = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let xi = [rng.random::<f64>(), rng.random::<f64>()];
            let ai = i64::from(rng.random::<f64>() < self.propensity.treated(&xi));
            y.push(self.sample_outcome(&xi, ai, rng));
            x.extend_from_slice(&xi);
            a.push(ai);
        }
        ObservationTable::from_unit(x, 2, a, y)
    }

    /// Tensor Gauss-Legendre nodes and weights for `X ~ U[0,1]²`.
    pub fn covariate_quadrature(nodes: usize) -> (Vec<[f64; 2]>, Vec<f64>) {
        let (t, w) = gauss_legendre(nodes);
        let t: Vec<f64> = t.iter().map(|v| 0.5 * (v + 1.0)).collect();
        let w: Vec<f64> = w.iter().map(|v| 0.5 * v).collect();
        let mut xs = Vec::with_capacity(nodes * nodes);
        let mut ws = Vec::with_capacity(nodes * nodes);
        for i in 0..nodes {
            for j in 0..nodes {
                xs.push([t[i], t[j]]);
                ws.push(w[i] * w[j]);
            }
        }
        (xs, ws)
    }

    /// `p_a(y) = ∫ η_a(y | x) dx` on the grid.
    pub fn true_marginal(&self, a: i64, grid: &EvalGrid) -> Vec<f64> {
        let (xs, ws) = Self::covariate_quadrature(COVARIATE_NODES);
        let mut out = vec![0.0; grid.len()];
        let mut row = vec![0.0; grid.len()];
        for (x, w) in xs.iter().zip(&ws) {
            self.tabulate_cond(x, a, grid, &mut row);
            out.iter_mut().zip(&row).for_each(|(o, v)| *o += w * v);
        }
        out
    }

    /// `D_f(p_1, p_0)` on a fine trapezoid grid.
    pub fn true_effect(&self, distance: &DistanceSpec) -> Result<f64> {
        let fine = make_grid(TRUTH_GRID, QuadratureRule::Trapezoid)?;
        Ok(divergence_unchecked(distance, &self.true_marginal(1, &fine), &self.true_marginal(0, &fine), &fine))
    }

    /// Smallest `π_a(x)` over a covariate lattice.
    pub fn min_propensity(&self) -> f64 {
        let mut lo = f64::INFINITY;
        for i in 0..=50 {
            for j in 0..=50 {
                let x = [i as f64 / 50.0, j as f64 / 50.0];
                lo = lo.min(self.propensity(&x, 1)).min(self.propensity(&x, 0));
            }
        }
        lo
    }
}

/// The shipped DGPs.
///
/// * `D1` randomized, mean-shifted truncated normals.
/// * `D2` confounded truncated normals.
/// * `D3` confounded with identical outcome laws (null effect).
/// * `D4` confounded two-component truncated mixture.
/// * `D5` cosine treated density with `ψ_L2 = 0.25`; the control marginal is uniform.
/// * `D6` covariate-free exponential-family outcomes.
pub fn dgp_library() -> Vec<SyntheticDgp> {
    let confounded = PropensityLaw::Logistic { intercept: 0.2, coef: [1.0, -1.0] };
    let tn = |intercept, c0, c1, shift| LinearMean { intercept, coef: [c0, c1], shift };
    let list = [
        (
            "D1",
            "randomized: pi_1 = 0.5, truncated normal with mean 0.3 + 0.25 x1 + 0.15 a, sd 0.15",
            PropensityLaw::Constant { p1: 0.5 },
            OutcomeLaw::TruncNormal { mean: tn(0.3, 0.25, 0.0, 0.15), sigma: 0.15 },
        ),
        (
            "D2",
            "confounded: pi_1 = expit(x1 - x2 + 0.2), truncated normal with mean 0.25 + 0.3 x1 + 0.1 x2 + 0.15 a, sd 0.15",
            confounded.clone(),
            OutcomeLaw::TruncNormal { mean: tn(0.25, 0.3, 0.1, 0.15), sigma: 0.15 },
        ),
        (
            "D3",
            "null: pi_1 = expit(x1 - x2 + 0.2), truncated normal with mean 0.3 + 0.3 x1 + 0.1 x2 for both levels, sd 0.15",
            confounded.clone(),
            OutcomeLaw::TruncNormal { mean: tn(0.3, 0.3, 0.1, 0.0), sigma: 0.15 },
        ),
        (
            "D4",
            "mixture: pi_1 = expit(x1 - x2 + 0.2), weight 0.35 + 0.3 x1 on N(0.25 + 0.1 x1 + 0.05 a) and N(0.7 + 0.1 x2 - 0.1 a), sd 0.08, truncated",
            confounded,
            OutcomeLaw::Mixture {
                first: tn(0.25, 0.1, 0.0, 0.05),
                second: tn(0.7, 0.0, 0.1, -0.1),
                weight: [0.35, 0.3],
                sigma: 0.08,
            },
        ),
        (
            "D5",
            "cosine effect: pi_1 = expit(0.5 (x1 - x2)), p_1 = 1 + 0.5 sqrt2 cos(pi y), p_0 uniform, L2 effect 0.25",
            PropensityLaw::Logistic { intercept: 0.0, coef: [0.5, -0.5] },
            OutcomeLaw::Cosine { c: [0.5, 0.3, 0.3] },
        ),
        (
            "D6",
            "exponential family: pi_1 = expit(x1 - x2 + 0.2), Y | A=1 ~ g(0.5, -0.3), Y | A=0 ~ g(0.2, 0.1) in the cosine family",
            PropensityLaw::Logistic { intercept: 0.2, coef: [1.0, -1.0] },
            OutcomeLaw::ExpFam { treated: vec![0.5, -0.3], control: vec![0.2, 0.1] },
        ),
    ];
    list.into_iter()
        .map(|(n, d, p, o)| SyntheticDgp::new(n, d, p, o).expect("library DGPs are well formed"))
        .collect()
}

/// Look up a library DGP by name (case-insensitive).
pub fn dgp(name: &str) -> Result<SyntheticDgp> {
    dgp_library()
        .into_iter()
        .find(|d| d.name.eq_ignore_ascii_case(name))
        .ok_or_else(|| Error::InvalidParameter(format!("unknown DGP `{name}` (expected one of D1..D6)")))
}

/// Nuisance learner that ignores the data and returns the DGP's true nuisances.
#[derive(Debug, Clone)]
pub struct TrueNuisance(pub Arc<SyntheticDgp>);

#[derive(Debug)]
struct TruePropensityModel {
    dgp: Arc<SyntheticDgp>,
    level: i64,
    clip_eps: f64,
}

impl PropensityModel for TruePropensityModel {
    fn predict(&self, x: &[f64]) -> f64 {
        self.dgp.propensity(x, self.level).clamp(self.clip_eps, 1.0 - self.clip_eps)
    }
}

#[derive(Debug)]
struct TrueCondDensityModel {
    dgp: Arc<SyntheticDgp>,
    level: i64,
    grid: EvalGrid,
}

impl CondDensityModel for TrueCondDensityModel {
    fn tabulate(&self, x: &[f64], out: &mut [f64]) {
        self.dgp.tabulate_cond(x, self.level, &self.grid, out);
    }
}

impl PropensityLearner for TrueNuisance {
    fn fit(&self, _table: &ObservationTable, _rows: &[usize], level: i64, clip_eps: f64) -> Result<Arc<dyn PropensityModel>> {
        Ok(Arc::new(TruePropensityModel { dgp: self.0.clone(), level, clip_eps }))
    }
}

impl CondDensityLearner for TrueNuisance {
    fn fit(&self, _table: &ObservationTable, _rows: &[usize], level: i64, grid: &EvalGrid) -> Result<Arc<dyn CondDensityModel>> {
        Ok(Arc::new(TrueCondDensityModel { dgp: self.0.clone(), level, grid: grid.clone() }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMethod {
    ClosedForm,
    NelderMead,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleResult {
    pub beta_star: Vec<f64>,
    pub method: OracleMethod,
    /// `D_f(p_a, g(·; β*))`.
    pub divergence: f64,
    /// `‖m(β*)‖`.
    pub moment_norm: f64,
    /// Every start's `(β, objective)`, in start order.
    pub minima: Vec<(Vec<f64>, f64)>,
    pub warnings: Vec<String>,
}

/// Population projection of a known density `p_a` (tabulated on `grid`).
///
/// L2 onto the cosine series uses `β* = ∫ b p_a`; everything else minimizes
/// the divergence by Nelder-Mead from five jittered starts.
pub fn oracle_projection_density(
    p_a: &[f64],
    model: &ModelSpec,
    distance: &DistanceSpec,
    grid: &EvalGrid,
    opts: &NelderMeadOptions,
    seed: u64,
) -> Result<OracleResult> {
    let moment_norm = |b: &[f64]| -> Result<f64> { Ok(moment(distance, model, b, p_a, grid)?.iter().map(|v| v * v).sum::<f64>().sqrt()) };
    let div = |b: &[f64]| -> Result<f64> { Ok(divergence_unchecked(distance, p_a, &model.at(b, grid)?.values_on(grid), grid)) };
    if let (DistanceSpec::L2Sq, ModelSpec::TruncatedSeries { dim }) = (distance, model) {
        let basis = CosineBasis::new(*dim);
        let tab = basis.tabulate(grid);
        let beta: Vec<f64> = (0..*dim)
            .map(|c| grid.weights().iter().enumerate().map(|(j, w)| w * tab[j * dim + c] * p_a[j]).sum())
            .collect();
        return Ok(OracleResult {
            divergence: div(&beta)?,
            moment_norm: moment_norm(&beta)?,
            minima: vec![],
            method: OracleMethod::ClosedForm,
            warnings: vec![],
            beta_star: beta,
        });
    }
    let start = model.default_start();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = NormalSampler::new(0.0, 0.25).expect("valid sd");
    let objective = |b: &[f64]| projection_objective(distance, model, b, p_a, grid).unwrap_or(f64::INFINITY);
    let mut minima = Vec::with_capacity(5);
    for s in 0..5 {
        let x0: Vec<f64> = if s == 0 { start.clone() } else { start.iter().map(|v| v + jitter.sample(&mut rng)).collect() };
        let r = nelder_mead(objective, &x0, opts);
        minima.push((r.x, r.fx));
    }
    let best = (0..minima.len()).min_by(|&a, &b| minima[a].1.total_cmp(&minima[b].1)).expect("five starts");
    let mut warnings = Vec::new();
    let spread = minima.iter().map(|m| (m.1 - minima[best].1).abs()).fold(0.0, f64::max);
    if spread > 1e-3 {
        warnings.push(format!("starts disagree by {spread:.2e} in the objective; the divergence may be multimodal"));
    }
    let beta = minima[best].0.clone();
    let norm = moment_norm(&beta)?;
    if norm > 1e-6 {
        warnings.push(format!("moment condition at the minimizer has norm {norm:.2e}"));
    }
    Ok(OracleResult { divergence: div(&beta)?, moment_norm: norm, minima, method: OracleMethod::NelderMead, warnings, beta_star: beta })
}

/// Population projection of `p_a` for a library DGP, on the fine truth grid.
pub fn oracle_projection(dgp: &SyntheticDgp, level: i64, model: &ModelSpec, distance: &DistanceSpec) -> Result<OracleResult> {
    let fine = make_grid(TRUTH_GRID, QuadratureRule::Trapezoid)?;
    let p_a = dgp.true_marginal(level, &fine);
    oracle_projection_density(&p_a, model, distance, &fine, &NelderMeadOptions::default(), 20_240_601)
}

/// Smooth nuisance perturbation directions for remainder checks:
/// `π̄_1 = π_1 + ε u(x)` and `η̄_a ∝ η_a exp{ε v(x, y)}`.
#[derive(Debug, Clone, Copy)]
pub struct Perturbation {
    pub u: fn(&[f64]) -> f64,
    pub v: fn(&[f64], f64) -> f64,
}

impl Default for Perturbation {
    fn default() -> Self {
        Self { u: |x| 0.5 * (x[0] - 0.5), v: |x, y| (x[0] - 0.25) * (PI * y).cos() + 0.5 * y }
    }
}

/// True and perturbed nuisances on covariate quadrature nodes.
struct NodeTables {
    weights: Vec<f64>,
    /// `(π_a, π̄_a)` per node.
    prop: Vec<(f64, f64)>,
    eta: Vec<Vec<f64>>,
    eta_bar: Vec<Vec<f64>>,
}

fn node_tables(dgp: &SyntheticDgp, level: i64, eps: f64, pert: &Perturbation, grid: &EvalGrid, nodes: usize) -> NodeTables {
    let (xs, weights) = SyntheticDgp::covariate_quadrature(nodes);
    let sign = if level == 1 { 1.0 } else { -1.0 };
    let mut prop = Vec::with_capacity(xs.len());
    let mut eta = Vec::with_capacity(xs.len());
    let mut eta_bar = Vec::with_capacity(xs.len());
    for x in &xs {
        let p = dgp.propensity(x, level);
        prop.push((p, p + sign * eps * (pert.u)(x)));
        let mut e = vec![0.0; grid.len()];
        dgp.tabulate_cond(x, level, grid, &mut e);
        let mut eb: Vec<f64> = e.iter().zip(grid.points()).map(|(v, &y)| v * (eps * (pert.v)(x, y)).exp()).collect();
        let mass = grid.integrate(&eb);
        eb.iter_mut().for_each(|v| *v /= mass);
        eta.push(e);
        eta_bar.push(eb);
    }
    NodeTables { weights, prop, eta, eta_bar }
}

impl NodeTables {
    fn marginals(&self, g: usize) -> (Vec<f64>, Vec<f64>) {
        let mut p = vec![0.0; g];
        let mut pb = vec![0.0; g];
        for (q, w) in self.weights.iter().enumerate() {
            for j in 0..g {
                p[j] += w * self.eta[q][j];
                pb[j] += w * self.eta_bar[q][j];
            }
        }
        (p, pb)
    }

    /// `E_P[φ̄_a(h)] = Σ_q w_q (π/π̄) ∫ h (η − η̄)` for `h` tabulated `G × m`.
    fn drift(&self, h: &[f64], m: usize, grid: &EvalGrid) -> Vec<f64> {
        let mut out = vec![0.0; m];
        for (q, w) in self.weights.iter().enumerate() {
            let ratio = self.prop[q].0 / self.prop[q].1;
            for (j, gw) in grid.weights().iter().enumerate() {
                let d = gw * (self.eta[q][j] - self.eta_bar[q][j]);
                for c in 0..m {
                    out[c] += w * ratio * d * h[j * m + c];
                }
            }
        }
        out
    }
}

/// Second-order remainder `β(P̄) − β(P) + E_P{−V̄⁻¹ φ̄_a(γ̄_f)}` of the projection
/// parameter at perturbation size `eps`, by quadrature.
pub fn projection_remainder(
    dgp: &SyntheticDgp,
    level: i64,
    model: &ModelSpec,
    distance: &DistanceSpec,
    eps: f64,
    pert: &Perturbation,
    grid: &EvalGrid,
) -> Result<Vec<f64>> {
    let tables = node_tables(dgp, level, eps, pert, grid, 16);
    let (p, pb) = tables.marginals(grid.len());
    let opts = RootOptions { tol: 1e-13, ..RootOptions::default() };
    let start = model.default_start();
    let beta = solve_moment(distance, model, &p, grid, &start, &opts)?.x;
    let beta_bar = solve_moment(distance, model, &pb, grid, &beta, &opts)?.x;
    let v_bar = moment_jacobian(distance, model, &beta_bar, &pb, grid, 1e-6)?;
    let bound = model.at(&beta_bar, grid)?;
    let gamma = gamma_f(distance, &bound, &pb, grid)?;
    let s = tables.drift(&gamma, model.beta_dim(), grid);
    let corr = solve(&v_bar, &s).ok_or_else(|| Error::Rank("moment derivative is singular".into()))?;
    Ok(beta_bar.iter().zip(&beta).zip(&corr).map(|((b, b0), c)| b - b0 - c).collect())
}

/// Population bias of the one-step effect estimator, `ψ(P̄) − ψ(P) + E_P{φ̄_1(λ̄_1) + φ̄_0(λ̄_0)}`.
pub fn effect_remainder(dgp: &SyntheticDgp, distance: &DistanceSpec, eps: f64, pert: &Perturbation, grid: &EvalGrid) -> Result<f64> {
    let t1 = node_tables(dgp, 1, eps, pert, grid, 16);
    let t0 = node_tables(dgp, 0, eps, pert, grid, 16);
    let (p1, pb1) = t1.marginals(grid.len());
    let (p0, pb0) = t0.marginals(grid.len());
    let psi = divergence_unchecked(distance, &p1, &p0, grid);
    let psi_bar = divergence_unchecked(distance, &pb1, &pb0, grid);
    let (l1, l0) = lambdas(distance, &pb1, &pb0)?;
    Ok(psi_bar - psi + t1.drift(&l1, 1, grid)[0] + t0.drift(&l0, 1, grid)[0])
}

/// Least-squares slope of `log |values|` against `log eps`.
pub fn loglog_slope(eps: &[f64], values: &[f64]) -> f64 {
    let xs: Vec<f64> = eps.iter().map(|e| e.ln()).collect();
    let ys: Vec<f64> = values.iter().map(|v| v.abs().ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// What a Monte-Carlo experiment estimates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Target {
    Projection { model: ModelSpec, distance: DistanceSpec, level: i64 },
    Effect { distance: DistanceSpec },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum PropensitySource {
    True,
    Fitted(PropensityMethod),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum DensitySource {
    True,
    Fitted(CondDensityMethod),
}

#[derive(Debug, Clone, Serialize)]
pub struct Experiment {
    pub name: String,
    pub dgp: SyntheticDgp,
    pub target: Target,
    pub propensity: PropensitySource,
    pub density: DensitySource,
    pub ns: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
    pub grid_size: usize,
    pub folds: usize,
}

impl Experiment {
    pub fn new(name: &str, dgp: SyntheticDgp, target: Target) -> Self {
        Self {
            name: name.into(),
            dgp,
            target,
            propensity: PropensitySource::Fitted(PropensityMethod::Logistic),
            density: DensitySource::Fitted(CondDensityMethod::default()),
            ns: vec![1000],
            reps: 100,
            seed: 1,
            grid_size: 128,
            folds: 5,
        }
    }

    fn config(&self) -> NuisanceConfig {
        let truth = TrueNuisance(Arc::new(self.dgp.clone()));
        let propensity: Arc<dyn PropensityLearner> = match &self.propensity {
            PropensitySource::True => Arc::new(truth.clone()),
            PropensitySource::Fitted(m) => Arc::new(*m),
        };
        let cond_density: Arc<dyn CondDensityLearner> = match &self.density {
            DensitySource::True => Arc::new(truth),
            DensitySource::Fitted(m) => Arc::new(*m),
        };
        NuisanceConfig { propensity, cond_density, clip_eps: DEFAULT_CLIP_EPS }
    }

    /// Population value of the target: `β*` or `ψ`.
    pub fn truth(&self) -> Result<Vec<f64>> {
        match &self.target {
            Target::Projection { model, distance, level } => Ok(oracle_projection(&self.dgp, *level, model, distance)?.beta_star),
            Target::Effect { distance } => Ok(vec![self.dgp.true_effect(distance)?]),
        }
    }
}

/// One replication. `estimate`, `se` and `covered` are empty when the rep failed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McRow {
    pub n: usize,
    pub rep: usize,
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    pub covered: Vec<bool>,
    /// Effects only: whether the conservative interval covers the truth.
    pub covered_conservative: Option<bool>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McSummary {
    pub n: usize,
    pub reps: usize,
    pub failures: usize,
    pub bias: Vec<f64>,
    pub rmse: Vec<f64>,
    pub median_abs_error: Vec<f64>,
    pub coverage: Vec<f64>,
    pub coverage_conservative: Option<f64>,
    pub mean_se: Vec<f64>,
}

impl McSummary {
    pub fn failure_rate(&self) -> f64 {
        self.failures as f64 / self.reps as f64
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct McResult {
    pub experiment: String,
    pub truth: Vec<f64>,
    pub rows: Vec<McRow>,
    pub summaries: Vec<McSummary>,
    /// Wall-clock seconds per row; not part of the deterministic output.
    #[serde(skip)]
    pub runtimes: Vec<f64>,
}

impl McResult {
    /// Deterministic CSV of the per-rep table.
    pub fn rows_csv(&self) -> String {
        let mut out = String::from("n,rep,component,estimate,se,truth,covered,error\n");
        for r in &self.rows {
            if let Some(e) = &r.error {
                out.push_str(&format!("{},{},,,,,,\"{}\"\n", r.n, r.rep, e.replace('"', "'")));
                continue;
            }
            for (c, ((est, se), cov)) in r.estimate.iter().zip(&r.se).zip(&r.covered).enumerate() {
                out.push_str(&format!("{},{},{},{:.17e},{:.17e},{:.17e},{},\n", r.n, r.rep, c, est, se, self.truth[c], cov));
            }
        }
        out
    }
}

/// Deterministic per-replication RNG.
pub fn rep_rng(seed: u64, n_index: usize, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((n_index as u64) << 32) | rep as u64);
    rng
}

/// Run `f` on a rayon pool capped by `CFDENS_THREADS` when set.
pub fn with_thread_cap<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    match std::env::var("CFDENS_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&t| t > 0) {
        Some(t) => match rayon::ThreadPoolBuilder::new().num_threads(t).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        None => f(),
    }
}

fn run_rep(exp: &Experiment, truth: &[f64], config: &NuisanceConfig, grid: &EvalGrid, n: usize, n_index: usize, rep: usize) -> McRow {
    let mut rng = rep_rng(exp.seed, n_index, rep);
    let outcome = (|| -> Result<(Vec<f64>, Vec<f64>, Vec<(f64, f64)>, Option<(f64, f64)>)> {
        let table = exp.dgp.sample(n, &mut rng)?;
        let fold_seed: u64 = rng.random();
        match &exp.target {
            Target::Projection { model, distance, level } => {
                let cf = CrossFit::fit_all(&table, exp.folds, fold_seed, &[*level], config, grid)?;
                let est = crossfit_projection(distance, model, *level, &table, &cf, grid, &SolverOptions::default())?;
                Ok((est.beta_hat.clone(), est.se(), est.wald_ci, None))
            }
            Target::Effect { distance } => {
                let cf = CrossFit::fit_all(&table, exp.folds, fold_seed, &[1, 0], config, grid)?;
                let est = crossfit_effect(distance, &table, &cf, 1, 0, grid)?;
                Ok((vec![est.psi_hat], vec![est.se], vec![est.ci_wald], Some(est.ci_conservative)))
            }
        }
    })();
    match outcome {
        Ok((estimate, se, ci, conservative)) => McRow {
            n,
            rep,
            covered: ci.iter().zip(truth).map(|((lo, hi), t)| lo <= t && t <= hi).collect(),
            covered_conservative: conservative.map(|(lo, hi)| lo <= truth[0] && truth[0] <= hi),
            estimate,
            se,
            error: None,
        },
        Err(e) => McRow { n, rep, estimate: vec![], se: vec![], covered: vec![], covered_conservative: None, error: Some(e.to_string()) },
    }
}

fn summarize(n: usize, rows: &[McRow], truth: &[f64]) -> McSummary {
    let ok: Vec<&McRow> = rows.iter().filter(|r| r.error.is_none()).collect();
    let p = truth.len();
    let m = ok.len().max(1) as f64;
    let mut bias = vec![0.0; p];
    let mut rmse = vec![0.0; p];
    let mut coverage = vec![0.0; p];
    let mut mean_se = vec![0.0; p];
    let mut median_abs_error = vec![f64::NAN; p];
    for c in 0..p {
        let mut abs = Vec::with_capacity(ok.len());
        for r in &ok {
            let e = r.estimate[c] - truth[c];
            bias[c] += e / m;
            rmse[c] += e * e / m;
            coverage[c] += f64::from(u8::from(r.covered[c])) / m;
            mean_se[c] += r.se[c] / m;
            abs.push(e.abs());
        }
        rmse[c] = rmse[c].sqrt();
        if !abs.is_empty() {
            abs.sort_by(f64::total_cmp);
            let k = abs.len();
            median_abs_error[c] = if k % 2 == 1 { abs[k / 2] } else { 0.5 * (abs[k / 2 - 1] + abs[k / 2]) };
        }
    }
    let cons: Vec<bool> = ok.iter().filter_map(|r| r.covered_conservative).collect();
    McSummary {
        n,
        reps: rows.len(),
        failures: rows.len() - ok.len(),
        bias,
        rmse,
        median_abs_error,
        coverage,
        coverage_conservative: (!cons.is_empty()).then(|| cons.iter().filter(|&&c| c).count() as f64 / cons.len() as f64),
        mean_se,
    }
}

/// Run a Monte-Carlo experiment. Output is a pure function of the descriptor.
pub fn mc_run(exp: &Experiment) -> Result<McResult> {
    if exp.reps < 2 {
        return Err(Error::InvalidParameter(format!("reps must be at least 2, got {}", exp.reps)));
    }
    let truth = exp.truth()?;
    let grid = make_grid(exp.grid_size, QuadratureRule::Trapezoid)?;
    let config = exp.config();
    let mut rows = Vec::new();
    let mut runtimes = Vec::new();
    let mut summaries = Vec::new();
    for (ni, &n) in exp.ns.iter().enumerate() {
        let timed: Vec<(McRow, f64)> = with_thread_cap(|| {
            (0..exp.reps)
                .into_par_iter()
                .map(|rep| {
                    let t0 = Instant::now();
                    let row = run_rep(exp, &truth, &config, &grid, n, ni, rep);
                    (row, t0.elapsed().as_secs_f64())
                })
                .collect()
        });
        let (block, times): (Vec<McRow>, Vec<f64>) = timed.into_iter().unzip();
        summaries.push(summarize(n, &block, &truth));
        rows.extend(block);
        runtimes.extend(times);
    }
    Ok(McResult { experiment: exp.name.clone(), truth, rows, summaries, runtimes })
}

/// One point of the plug-in MSE check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PluginMseRow {
    pub y: f64,
    /// Monte-Carlo `E{p̂_a(y) − p_a(y)}²`.
    pub mse: f64,
    /// Monte-Carlo `∫ E{η̂_a(y | x) − η_a(y | x)}² dP(x)`.
    pub eta_mse: f64,
    /// `∫ η_a(y | x)² dP(x)`.
    pub c: f64,
    /// `(1 + 2/n) eta_mse + 2c/n`.
    pub bound: f64,
}

/// Monte-Carlo check of the plug-in marginal's MSE bound at the grid points `ys`.
/// Each rep fits `η̂_a` on a training sample of size `n` and averages it over an
/// independent sample of `n` covariate draws.
#[allow(clippy::too_many_arguments)]
pub fn plugin_mse_check(
    dgp: &SyntheticDgp,
    level: i64,
    n: usize,
    reps: usize,
    y_index: &[usize],
    grid: &EvalGrid,
    method: &CondDensityMethod,
    seed: u64,
) -> Result<Vec<PluginMseRow>> {
    let truth = dgp.true_marginal(level, grid);
    let (xs, ws) = SyntheticDgp::covariate_quadrature(12);
    let g = grid.len();
    let true_eta: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| {
            let mut e = vec![0.0; g];
            dgp.tabulate_cond(x, level, grid, &mut e);
            e
        })
        .collect();
    let config = NuisanceConfig::new(PropensityMethod::Constant { value: 0.5 }, *method, DEFAULT_CLIP_EPS);
    let per_rep: Vec<Result<(Vec<f64>, Vec<f64>)>> = with_thread_cap(|| {
        (0..reps)
            .into_par_iter()
            .map(|rep| {
                let mut rng = rep_rng(seed, 0, rep);
                let train = dgp.sample(n, &mut rng)?;
                let eval = dgp.sample(n, &mut rng)?;
                let rows: Vec<usize> = (0..n).collect();
                let fit = NuisanceFit::fit(&train, &rows, level, &config, grid)?;
                let mut curve = vec![0.0; g];
                let mut p_hat = vec![0.0; y_index.len()];
                for i in 0..n {
                    fit.cond_density.tabulate(eval.x(i), &mut curve);
                    for (k, &j) in y_index.iter().enumerate() {
                        p_hat[k] += curve[j] / n as f64;
                    }
                }
                let sq: Vec<f64> = y_index.iter().zip(&p_hat).map(|(&j, p)| (p - truth[j]).powi(2)).collect();
                let mut eta_sq = vec![0.0; y_index.len()];
                for (x, (w, e)) in xs.iter().zip(ws.iter().zip(&true_eta)) {
                    fit.cond_density.tabulate(x, &mut curve);
                    for (k, &j) in y_index.iter().enumerate() {
                        eta_sq[k] += w * (curve[j] - e[j]).powi(2);
                    }
                }
                Ok((sq, eta_sq))
            })
            .collect()
    });
    let mut mse = vec![0.0; y_index.len()];
    let mut eta_mse = vec![0.0; y_index.len()];
    for r in per_rep {
        let (sq, eta_sq) = r?;
        for k in 0..y_index.len() {
            mse[k] += sq[k] / reps as f64;
            eta_mse[k] += eta_sq[k] / reps as f64;
        }
    }
    Ok(y_index
        .iter()
        .enumerate()
        .map(|(k, &j)| {
            let c: f64 = ws.iter().zip(&true_eta).map(|(w, e)| w * e[j] * e[j]).sum();
            let nf = n as f64;
            PluginMseRow { y: grid.points()[j], mse: mse[k], eta_mse: eta_mse[k], c, bound: (1.0 + 2.0 / nf) * eta_mse[k] + 2.0 * c / nf }
        })
        .collect())
}

/// Wald coverage helper: whether `estimate ± 1.96 se` covers `truth`.
pub fn covers(estimate: f64, se: f64, truth: f64) -> bool {
    (estimate - truth).abs() <= Z_95 * se
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn library_laws_are_valid() {
        let grid = make_grid(TRUTH_GRID, QuadratureRule::GaussLegendre).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for d in dgp_library() {
            assert!(d.min_propensity() >= 0.05, "{}", d.name);
            for _ in 0..20 {
                let x = [rng.random::<f64>(), rng.random::<f64>()];
                for a in [0, 1] {
                    let mass = grid.integrate_fn(|y| d.cond_density(y, &x, a));
                    assert!((mass - 1.0).abs() < 1e-9, "{} a={a} mass={mass}", d.name);
                }
            }
        }
    }

    #[test]
    fn d5_truth() {
        let d = dgp("D5").unwrap();
        let psi = d.true_effect(&DistanceSpec::L2Sq).unwrap();
        assert!((psi - 0.25).abs() < 1e-6, "{psi}");
        let grid = make_grid(256, QuadratureRule::Trapezoid).unwrap();
        let p0 = d.true_marginal(0, &grid);
        assert!(p0.iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn d3_is_null() {
        let d = dgp("D3").unwrap();
        assert!(d.true_effect(&DistanceSpec::L2Sq).unwrap().abs() < 1e-15);
    }

    #[test]
    fn sampler_matches_density() {
        let d = dgp("D4").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = [0.3, 0.6];
        let n = 40_000;
        let ys: Vec<f64> = (0..n).map(|_| d.sample_outcome(&x, 1, &mut rng)).collect();
        for (lo, hi) in [(0.0, 0.2), (0.2, 0.5), (0.5, 0.8), (0.8, 1.0)] {
            let emp = ys.iter().filter(|&&y| y >= lo && y < hi).count() as f64 / n as f64;
            let grid = make_grid(2048, QuadratureRule::Trapezoid).unwrap();
            let exact = grid.integrate_fn(|y| if y >= lo && y < hi { d.cond_density(y, &x, 1) } else { 0.0 });
            assert!((emp - exact).abs() < 0.01, "[{lo},{hi}) {emp} vs {exact}");
        }
    }

    #[test]
    fn expfam_oracle_recovers_generating_coefficients() {
        let d = dgp("D6").unwrap();
        let r = oracle_projection(&d, 1, &ModelSpec::ExponentialFamily { dim: 2 }, &DistanceSpec::Kl).unwrap();
        assert!((r.beta_star[0] - 0.5).abs() < 1e-5 && (r.beta_star[1] + 0.3).abs() < 1e-5, "{:?}", r.beta_star);
        assert!(r.moment_norm < 1e-6);
    }

    #[test]
    fn base_density_projects_to_zero() {
        let grid = make_grid(512, QuadratureRule::Trapezoid).unwrap();
        let u = vec![1.0; grid.len()];
        for model in [ModelSpec::TruncatedSeries { dim: 3 }, ModelSpec::ExponentialFamily { dim: 3 }] {
            for dist in [DistanceSpec::L2Sq, DistanceSpec::Hellinger] {
                let r = oracle_projection_density(&u, &model, &dist, &grid, &NelderMeadOptions::default(), 1).unwrap();
                assert!(r.beta_star.iter().all(|b| b.abs() < 1e-6), "{model} {dist}: {:?}", r.beta_star);
            }
        }
    }

    #[test]
    fn rep_streams_are_distinct_and_stable() {
        let a: u64 = rep_rng(5, 0, 1).random();
        let b: u64 = rep_rng(5, 0, 1).random();
        let c: u64 = rep_rng(5, 1, 1).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn slope_of_power_law() {
        let eps = [0.02, 0.05, 0.1, 0.2];
        let v: Vec<f64> = eps.iter().map(|e: &f64| 3.0 * e.powi(2)).collect();
        assert!((loglog_slope(&eps, &v) - 2.0).abs() < 1e-12);
    }
}
