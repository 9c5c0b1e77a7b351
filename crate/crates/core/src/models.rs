//! Parametric approximating families `g(y; β)` on `[0, 1]`.

use std::f64::consts::{PI, SQRT_2};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::EvalGrid;
use crate::error::{Error, Result};

/// Lower bound on mixture component scales.
pub const SIGMA_MIN: f64 = 1e-3;

/// Cosine basis `b_j(y) = √2 cos(π j y)`, `j = 1..=dim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CosineBasis {
    pub dim: usize,
}

impl CosineBasis {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }

    /// Fill `out[j-1] = b_j(y)` using the Chebyshev recurrence.
    pub fn eval_into(&self, y: f64, out: &mut [f64]) {
        let theta = PI * y;
        let c1 = theta.cos();
        let (mut prev, mut cur) = (1.0, c1);
        for slot in out.iter_mut().take(self.dim) {
            *slot = SQRT_2 * cur;
            let next = 2.0 * c1 * cur - prev;
            prev = cur;
            cur = next;
        }
    }

    pub fn eval(&self, y: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(y, &mut out);
        out
    }

    pub fn value(&self, j: usize, y: f64) -> f64 {
        SQRT_2 * (PI * j as f64 * y).cos()
    }

    /// Basis tabulated on the grid, row-major `G × dim`.
    pub fn tabulate(&self, grid: &EvalGrid) -> Vec<f64> {
        let mut out = vec![0.0; grid.len() * self.dim];
        for (j, &y) in grid.points().iter().enumerate() {
            self.eval_into(y, &mut out[j * self.dim..(j + 1) * self.dim]);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelSpec {
    /// `g = 1 + βᵀ b(y)`.
    TruncatedSeries { dim: usize },
    /// `g = exp(βᵀ b(y) − C(β))`.
    ExponentialFamily { dim: usize },
    /// `k`-component Gaussian mixture with softmax weights and softplus scales.
    GaussianMixture { k: usize },
}

impl ModelSpec {
    pub fn beta_dim(&self) -> usize {
        match *self {
            ModelSpec::TruncatedSeries { dim } | ModelSpec::ExponentialFamily { dim } => dim,
            ModelSpec::GaussianMixture { k } => 3 * k - 1,
        }
    }

    pub fn basis(&self) -> Option<CosineBasis> {
        match *self {
            ModelSpec::TruncatedSeries { dim } | ModelSpec::ExponentialFamily { dim } => Some(CosineBasis::new(dim)),
            ModelSpec::GaussianMixture { .. } => None,
        }
    }

    /// Canonical starting point: the base density for series and exponential
    /// families, equal-weight components spread over the unit interval for mixtures.
    pub fn default_start(&self) -> Vec<f64> {
        match *self {
            ModelSpec::GaussianMixture { k } => {
                let means: Vec<f64> = (0..k).map(|j| (j as f64 + 0.5) / k as f64).collect();
                let sigmas = vec![0.5 / k as f64; k];
                encode_mixture(&vec![1.0 / k as f64; k], &means, &sigmas)
            }
            _ => vec![0.0; self.beta_dim()],
        }
    }

    /// Evaluate the model at `beta`; the grid is used only for normalizing constants.
    pub fn at(&self, beta: &[f64], grid: &EvalGrid) -> Result<BoundModel> {
        if beta.len() != self.beta_dim() {
            return Err(Error::LengthMismatch { expected: self.beta_dim(), got: beta.len() });
        }
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::Domain { distance: "model".into(), index: None, msg: "non-finite beta".into() });
        }
        let kind = match *self {
            ModelSpec::TruncatedSeries { dim } => Bound::Series { basis: CosineBasis::new(dim) },
            ModelSpec::ExponentialFamily { dim } => {
                let basis = CosineBasis::new(dim);
                let (c, mean) = log_partition_with_basis(&basis, beta, grid)?;
                Bound::ExpFam { basis, log_partition: c, mean }
            }
            ModelSpec::GaussianMixture { k } => {
                let (weights, means, sigmas) = decode_mixture(beta, k);
                let dsigma = beta[2 * k - 1..].iter().map(|&r| sigmoid(r)).collect();
                Bound::Mixture { weights, means, sigmas, dsigma }
            }
        };
        Ok(BoundModel { beta: beta.to_vec(), kind })
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelSpec::TruncatedSeries { dim } => write!(f, "series:d={dim}"),
            ModelSpec::ExponentialFamily { dim } => write!(f, "expfam:d={dim}"),
            ModelSpec::GaussianMixture { k } => write!(f, "gmm:k={k}"),
        }
    }
}

impl FromStr for ModelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidParameter(format!("cannot parse model `{s}` (expected e.g. series:d=4, expfam:d=4, gmm:k=2)"));
        let (family, arg) = s.split_once(':').ok_or_else(bad)?;
        let (key, value) = arg.split_once('=').ok_or_else(bad)?;
        let v: usize = value.trim().parse().map_err(|_| bad())?;
        if v == 0 {
            return Err(bad());
        }
        match (family.trim(), key.trim()) {
            ("series", "d") => Ok(ModelSpec::TruncatedSeries { dim: v }),
            ("expfam", "d") => Ok(ModelSpec::ExponentialFamily { dim: v }),
            ("gmm", "k") => Ok(ModelSpec::GaussianMixture { k: v }),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone)]
enum Bound {
    Series { basis: CosineBasis },
    ExpFam { basis: CosineBasis, log_partition: f64, mean: Vec<f64> },
    Mixture { weights: Vec<f64>, means: Vec<f64>, sigmas: Vec<f64>, dsigma: Vec<f64> },
}

/// A model with its parameter fixed and normalizing constant precomputed.
#[derive(Debug, Clone)]
pub struct BoundModel {
    beta: Vec<f64>,
    kind: Bound,
}

fn normal_pdf(z: f64, sigma: f64) -> f64 {
    (-0.5 * z * z).exp() / (sigma * (2.0 * PI).sqrt())
}

impl BoundModel {
    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    pub fn log_partition(&self) -> Option<f64> {
        match self.kind {
            Bound::ExpFam { log_partition, .. } => Some(log_partition),
            _ => None,
        }
    }

    pub fn value(&self, y: f64) -> f64 {
        let mut grad = vec![0.0; self.dim()];
        self.value_grad(y, &mut grad)
    }

    pub fn grad(&self, y: f64) -> Vec<f64> {
        let mut grad = vec![0.0; self.dim()];
        self.value_grad(y, &mut grad);
        grad
    }

    /// Returns `g(y)` and writes `∂g/∂β (y)` into `grad`.
    pub fn value_grad(&self, y: f64, grad: &mut [f64]) -> f64 {
        match &self.kind {
            Bound::Series { basis } => {
                basis.eval_into(y, grad);
                1.0 + self.beta.iter().zip(grad.iter()).map(|(b, v)| b * v).sum::<f64>()
            }
            Bound::ExpFam { basis, log_partition, mean } => {
                basis.eval_into(y, grad);
                let eta: f64 = self.beta.iter().zip(grad.iter()).map(|(b, v)| b * v).sum();
                let g = (eta - log_partition).exp();
                grad.iter_mut().zip(mean).for_each(|(v, m)| *v = g * (*v - m));
                g
            }
            Bound::Mixture { weights, means, sigmas, dsigma } => {
                let k = weights.len();
                let comps: Vec<f64> =
                    (0..k).map(|j| normal_pdf((y - means[j]) / sigmas[j], sigmas[j])).collect();
                let g: f64 = weights.iter().zip(&comps).map(|(w, c)| w * c).sum();
                for l in 1..k {
                    grad[l - 1] = weights[l] * (comps[l] - g);
                }
                for j in 0..k {
                    let z = (y - means[j]) / sigmas[j];
                    let wc = weights[j] * comps[j];
                    grad[k - 1 + j] = wc * z / sigmas[j];
                    grad[2 * k - 1 + j] = wc * (z * z - 1.0) / sigmas[j] * dsigma[j];
                }
                g
            }
        }
    }

    /// Values and gradients on the grid: `(g, ∂g)` with `∂g` row-major `G × p`.
    pub fn tabulate(&self, grid: &EvalGrid) -> (Vec<f64>, Vec<f64>) {
        self.evaluate_at(grid.points())
    }

    /// Values and gradients at arbitrary points: `(g, ∂g)` with `∂g` row-major `len × p`.
    pub fn evaluate_at(&self, ys: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let p = self.dim();
        let mut values = Vec::with_capacity(ys.len());
        let mut grads = vec![0.0; ys.len() * p];
        for (i, &y) in ys.iter().enumerate() {
            values.push(self.value_grad(y, &mut grads[i * p..(i + 1) * p]));
        }
        (values, grads)
    }

    pub fn values_on(&self, grid: &EvalGrid) -> Vec<f64> {
        grid.points().iter().map(|&y| self.value(y)).collect()
    }

    /// Mixture parameters sorted by mean, if this is a mixture.
    pub fn mixture(&self) -> Option<MixtureParams> {
        match &self.kind {
            Bound::Mixture { weights, means, sigmas, .. } => {
                let mut idx: Vec<usize> = (0..weights.len()).collect();
                idx.sort_by(|&a, &b| means[a].total_cmp(&means[b]));
                Some(MixtureParams {
                    weights: idx.iter().map(|&i| weights[i]).collect(),
                    means: idx.iter().map(|&i| means[i]).collect(),
                    sigmas: idx.iter().map(|&i| sigmas[i]).collect(),
                })
            }
            _ => None,
        }
    }
}

/// `C(β) = log ∫ exp(βᵀ b)` and its gradient `E_g b`, by log-sum-exp quadrature.
pub fn log_partition(model: &ModelSpec, beta: &[f64], grid: &EvalGrid) -> Result<(f64, Vec<f64>)> {
    match model {
        ModelSpec::ExponentialFamily { dim } => {
            if beta.len() != *dim {
                return Err(Error::LengthMismatch { expected: *dim, got: beta.len() });
            }
            if beta.iter().any(|b| !b.is_finite()) {
                return Err(Error::Domain { distance: "model".into(), index: None, msg: "non-finite beta".into() });
            }
            log_partition_with_basis(&CosineBasis::new(*dim), beta, grid)
        }
        _ => Err(Error::InvalidParameter("log_partition requires an exponential family".into())),
    }
}

fn log_partition_with_basis(basis: &CosineBasis, beta: &[f64], grid: &EvalGrid) -> Result<(f64, Vec<f64>)> {
    let d = basis.dim;
    let mut b = vec![0.0; d];
    let mut etas = Vec::with_capacity(grid.len());
    let mut max_eta = f64::NEG_INFINITY;
    for &y in grid.points() {
        basis.eval_into(y, &mut b);
        let eta: f64 = beta.iter().zip(&b).map(|(x, v)| x * v).sum();
        max_eta = max_eta.max(eta);
        etas.push(eta);
    }
    let mut total = 0.0;
    let mut grad = vec![0.0; d];
    for ((&y, w), eta) in grid.points().iter().zip(grid.weights()).zip(&etas) {
        let e = w * (eta - max_eta).exp();
        total += e;
        basis.eval_into(y, &mut b);
        for (g, v) in grad.iter_mut().zip(&b) {
            *g += e * v;
        }
    }
    let c = max_eta + total.ln();
    if !c.is_finite() || total <= 0.0 {
        return Err(Error::Magnitude(format!(
            "log-partition overflow at |beta| = {:.3e}; use a smaller parameter",
            beta.iter().map(|v| v * v).sum::<f64>().sqrt()
        )));
    }
    grad.iter_mut().for_each(|g| *g /= total);
    Ok((c, grad))
}

/// Covariance of the basis under `g(·; β)`: the Jacobian of `E_g b` in `β`.
pub fn basis_covariance(dim: usize, beta: &[f64], grid: &EvalGrid) -> Result<(Vec<f64>, Vec<f64>)> {
    let basis = CosineBasis::new(dim);
    let (c, mean) = log_partition_with_basis(&basis, beta, grid)?;
    let mut cov = vec![0.0; dim * dim];
    let mut b = vec![0.0; dim];
    for (&y, w) in grid.points().iter().zip(grid.weights()) {
        basis.eval_into(y, &mut b);
        let eta: f64 = beta.iter().zip(&b).map(|(x, v)| x * v).sum();
        let wg = w * (eta - c).exp();
        for r in 0..dim {
            let dr = b[r] - mean[r];
            for s in 0..dim {
                cov[r * dim + s] += wg * dr * (b[s] - mean[s]);
            }
        }
    }
    Ok((mean, cov))
}

/// `max(g, 0)` renormalized to integrate to one on the grid.
pub fn clip_to_density(values: &[f64], grid: &EvalGrid) -> Result<Vec<f64>> {
    if values.len() != grid.len() {
        return Err(Error::LengthMismatch { expected: grid.len(), got: values.len() });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateModel("non-finite density values".into()));
    }
    let clipped: Vec<f64> = values.iter().map(|&v| v.max(0.0)).collect();
    let mass = grid.integrate(&clipped);
    if mass <= 0.0 {
        return Err(Error::DegenerateModel("no positive mass after clipping".into()));
    }
    Ok(clipped.into_iter().map(|v| v / mass).collect())
}

/// Mixture parameters on the natural scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub sigmas: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn softplus_inv(s: f64) -> f64 {
    if s > 30.0 {
        s
    } else {
        s.exp_m1().ln()
    }
}

/// Unconstrained mixture vector `[logits 2..k | means | raw scales]`.
pub fn encode_mixture(weights: &[f64], means: &[f64], sigmas: &[f64]) -> Vec<f64> {
    let k = weights.len();
    let mut beta = Vec::with_capacity(3 * k - 1);
    beta.extend(weights[1..].iter().map(|w| (w / weights[0]).ln()));
    beta.extend_from_slice(means);
    beta.extend(sigmas.iter().map(|s| softplus_inv(s - SIGMA_MIN)));
    beta
}

/// Inverse of [`encode_mixture`], in component order (unsorted).
pub fn decode_mixture(beta: &[f64], k: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut logits = vec![0.0; k];
    logits[1..].copy_from_slice(&beta[..k - 1]);
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    let weights = exps.iter().map(|e| e / total).collect();
    let means = beta[k - 1..2 * k - 1].to_vec();
    let sigmas = beta[2 * k - 1..].iter().map(|&r| SIGMA_MIN + softplus(r)).collect();
    (weights, means, sigmas)
}
