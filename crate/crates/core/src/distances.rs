//! f-divergences `D_f(p, q) = ∫ f(p, q) q dy` and the partial derivatives of `f`.
//!
//! `f1 = ∂f/∂p`, `f2 = ∂f/∂q` and `f21 = ∂²f/∂p∂q`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::data::EvalGrid;
use crate::error::{Error, Result};

/// Smallest admissible value of the reference density `q`.
pub const Q_FLOOR: f64 = 1e-8;
/// Floor applied to `p` before logarithms, ratios and square roots.
pub const P_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothKind {
    Tanh,
    Erf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistanceSpec {
    L2Sq,
    Kl,
    ChiSq,
    Hellinger,
    SmoothedTv { t: f64, smooth: SmoothKind },
}

impl DistanceSpec {
    pub fn smoothed_tv(t: f64) -> Self {
        DistanceSpec::SmoothedTv { t, smooth: SmoothKind::Tanh }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DistanceSpec::L2Sq => "L2sq",
            DistanceSpec::Kl => "KL",
            DistanceSpec::ChiSq => "ChiSq",
            DistanceSpec::Hellinger => "Hellinger",
            DistanceSpec::SmoothedTv { .. } => "SmoothedTV",
        }
    }

    /// All five kinds, with the smoothed TV at its default `t = 50`.
    pub fn all() -> [DistanceSpec; 5] {
        [
            DistanceSpec::L2Sq,
            DistanceSpec::Kl,
            DistanceSpec::ChiSq,
            DistanceSpec::Hellinger,
            DistanceSpec::smoothed_tv(50.0),
        ]
    }

    fn domain(&self, msg: impl Into<String>) -> Error {
        Error::Domain { distance: self.name().into(), index: None, msg: msg.into() }
    }

    fn check(&self, p: f64, q: f64, needs_positive_p: bool) -> Result<()> {
        if !p.is_finite() || !q.is_finite() {
            return Err(self.domain(format!("non-finite input (p={p}, q={q})")));
        }
        if q <= Q_FLOOR {
            return Err(self.domain(format!("q={q} is not above the floor {Q_FLOOR}")));
        }
        if p < 0.0 {
            return Err(self.domain(format!("p={p} is negative")));
        }
        if needs_positive_p && p <= P_FLOOR {
            return Err(self.domain(format!("p={p} is not above the floor {P_FLOOR}")));
        }
        Ok(())
    }

    fn positive_p_for_f1(&self) -> bool {
        matches!(self, DistanceSpec::Kl | DistanceSpec::Hellinger)
    }

    pub fn f(&self, p: f64, q: f64) -> Result<f64> {
        self.check(p, q, false)?;
        Ok(self.f_raw(p, q))
    }

    pub fn f1(&self, p: f64, q: f64) -> Result<f64> {
        self.check(p, q, self.positive_p_for_f1())?;
        Ok(self.f1_raw(p, q))
    }

    pub fn f2(&self, p: f64, q: f64) -> Result<f64> {
        self.check(p, q, false)?;
        Ok(self.f2_raw(p, q))
    }

    pub fn f21(&self, p: f64, q: f64) -> Result<f64> {
        self.check(p, q, self.positive_p_for_f1())?;
        Ok(self.f21_raw(p, q))
    }

    pub(crate) fn f_raw(&self, p: f64, q: f64) -> f64 {
        let r = p / q;
        match *self {
            DistanceSpec::L2Sq => (p - q) * (p - q) / q,
            DistanceSpec::Kl => {
                if p == 0.0 {
                    0.0
                } else {
                    r * r.ln()
                }
            }
            DistanceSpec::ChiSq => (r - 1.0) * (r - 1.0),
            DistanceSpec::Hellinger => (r.sqrt() - 1.0).powi(2),
            DistanceSpec::SmoothedTv { t, smooth } => nu_t(p - q, t, smooth).value / (2.0 * q),
        }
    }

    pub(crate) fn f1_raw(&self, p: f64, q: f64) -> f64 {
        match *self {
            DistanceSpec::L2Sq => 2.0 * (p / q - 1.0),
            DistanceSpec::Kl => ((p / q).ln() + 1.0) / q,
            DistanceSpec::ChiSq => 2.0 * (p - q) / (q * q),
            DistanceSpec::Hellinger => (1.0 / q.sqrt()) * (1.0 / q.sqrt() - 1.0 / p.sqrt()),
            DistanceSpec::SmoothedTv { t, smooth } => nu_t(p - q, t, smooth).d1 / (2.0 * q),
        }
    }

    pub(crate) fn f2_raw(&self, p: f64, q: f64) -> f64 {
        match *self {
            DistanceSpec::L2Sq => 1.0 - (p / q).powi(2),
            DistanceSpec::Kl => {
                if p == 0.0 {
                    0.0
                } else {
                    -(p / (q * q)) * ((p / q).ln() + 1.0)
                }
            }
            DistanceSpec::ChiSq => -(2.0 * p / q.powi(3)) * (p - q),
            DistanceSpec::Hellinger => (p.sqrt() / (q * q)) * (q.sqrt() - p.sqrt()),
            DistanceSpec::SmoothedTv { t, smooth } => {
                let nu = nu_t(p - q, t, smooth);
                -(nu.value / q + nu.d1) / (2.0 * q)
            }
        }
    }

    pub(crate) fn f21_raw(&self, p: f64, q: f64) -> f64 {
        match *self {
            DistanceSpec::L2Sq => -2.0 * p / (q * q),
            DistanceSpec::Kl => -((p / q).ln() + 2.0) / (q * q),
            DistanceSpec::ChiSq => 2.0 * (q - 2.0 * p) / q.powi(3),
            DistanceSpec::Hellinger => ((q / p).sqrt() - 2.0) / (2.0 * q * q),
            DistanceSpec::SmoothedTv { t, smooth } => {
                let nu = nu_t(p - q, t, smooth);
                -(nu.d1 / q + nu.d2) / (2.0 * q)
            }
        }
    }

    /// Clamp a (p, q) pair into the region where every derivative is defined.
    pub(crate) fn clamp(p: f64, q: f64) -> (f64, f64) {
        (p.max(P_FLOOR), q.max(Q_FLOOR))
    }

    /// `f(p, q) + q f2(p, q)`: the pointwise factor multiplying `∂g/∂β` in the moment condition.
    pub(crate) fn moment_factor(&self, p: f64, q: f64) -> f64 {
        match self {
            DistanceSpec::L2Sq => 2.0 * (q - p),
            DistanceSpec::Kl => {
                let (p, q) = Self::clamp(p, q);
                1.0 - p / q
            }
            DistanceSpec::ChiSq => {
                let (p, q) = Self::clamp(p, q);
                1.0 - (p / q).powi(2)
            }
            DistanceSpec::Hellinger => {
                let (p, q) = Self::clamp(p, q);
                1.0 - (p / q).sqrt()
            }
            DistanceSpec::SmoothedTv { t, smooth } => {
                let (p, q) = Self::clamp(p, q);
                -nu_t(p - q, *t, *smooth).d1 / 2.0
            }
        }
    }

    /// Generic `f(p, q) + q f2(p, q)` straight from the derivative table.
    pub fn moment_factor_table(&self, p: f64, q: f64) -> f64 {
        match self {
            DistanceSpec::L2Sq => self.f_raw(p, q) + q * self.f2_raw(p, q),
            _ => {
                let (p, q) = Self::clamp(p, q);
                self.f_raw(p, q) + q * self.f2_raw(p, q)
            }
        }
    }

    /// `f1(p, q) + q f21(p, q)`: the pointwise factor multiplying `∂g/∂β` in the influence function.
    pub(crate) fn gamma_factor(&self, p: f64, q: f64) -> f64 {
        match self {
            DistanceSpec::L2Sq => -2.0,
            DistanceSpec::Kl => -1.0 / q.max(Q_FLOOR),
            _ => {
                let (p, q) = Self::clamp(p, q);
                self.f1_raw(p, q) + q * self.f21_raw(p, q)
            }
        }
    }

    /// Integrand of the objective whose stationarity condition is the moment condition.
    /// Equal to [`Self::integrand`] except for KL, which adds `q - p`.
    pub(crate) fn objective_integrand(&self, p: f64, q: f64) -> f64 {
        match self {
            DistanceSpec::Kl => {
                let (pc, qc) = Self::clamp(p, q);
                self.f_raw(pc, qc) * qc + qc - pc
            }
            _ => self.integrand(p, q),
        }
    }

    /// Pointwise integrand `f(p, q) q` with floors applied.
    pub(crate) fn integrand(&self, p: f64, q: f64) -> f64 {
        match self {
            DistanceSpec::L2Sq => (p - q) * (p - q),
            _ => {
                let (p, q) = Self::clamp(p, q);
                self.f_raw(p, q) * q
            }
        }
    }
}

impl fmt::Display for DistanceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DistanceSpec::L2Sq => write!(f, "l2"),
            DistanceSpec::Kl => write!(f, "kl"),
            DistanceSpec::ChiSq => write!(f, "chisq"),
            DistanceSpec::Hellinger => write!(f, "hellinger"),
            DistanceSpec::SmoothedTv { t, smooth: SmoothKind::Tanh } => write!(f, "tv:t={t}"),
            DistanceSpec::SmoothedTv { t, smooth: SmoothKind::Erf } => write!(f, "tv:t={t},kind=erf"),
        }
    }
}

impl FromStr for DistanceSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (head, rest) = s.split_once(':').unwrap_or((s, ""));
        let bad = || Error::InvalidParameter(format!("cannot parse distance `{s}`"));
        match head.trim().to_ascii_lowercase().as_str() {
            "l2" | "l2sq" => Ok(DistanceSpec::L2Sq),
            "kl" => Ok(DistanceSpec::Kl),
            "chisq" | "chi2" => Ok(DistanceSpec::ChiSq),
            "hellinger" => Ok(DistanceSpec::Hellinger),
            "tv" => {
                let mut t: f64 = 50.0;
                let mut smooth = SmoothKind::Tanh;
                for part in rest.split(',').filter(|p| !p.trim().is_empty()) {
                    let (k, v) = part.split_once('=').ok_or_else(bad)?;
                    match k.trim() {
                        "t" => t = v.trim().parse().map_err(|_| bad())?,
                        "kind" => {
                            smooth = match v.trim() {
                                "tanh" => SmoothKind::Tanh,
                                "erf" => SmoothKind::Erf,
                                _ => return Err(bad()),
                            }
                        }
                        _ => return Err(bad()),
                    }
                }
                if !(t > 0.0 && t.is_finite()) {
                    return Err(Error::InvalidParameter(format!("tv smoothing t must be positive, got {t}")));
                }
                Ok(DistanceSpec::SmoothedTv { t, smooth })
            }
            _ => Err(bad()),
        }
    }
}

/// Value and first two derivatives of the smoothed absolute value `ν_t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nu {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
}

pub fn nu_t(y: f64, t: f64, kind: SmoothKind) -> Nu {
    let z = t * y;
    match kind {
        SmoothKind::Tanh => {
            let th = z.tanh();
            let sech2 = 1.0 - th * th;
            Nu {
                value: y * th,
                d1: th + z * sech2,
                d2: 2.0 * t * sech2 * (1.0 - z * th),
            }
        }
        SmoothKind::Erf => {
            let e = erf(z);
            let c = 2.0 * t / std::f64::consts::PI.sqrt();
            let g = (-z * z).exp();
            Nu {
                value: y * e,
                d1: e + y * c * g,
                d2: c * g * (2.0 - 2.0 * z * z),
            }
        }
    }
}

fn check_grid_inputs(spec: &DistanceSpec, p: &[f64], q: &[f64], grid: &EvalGrid) -> Result<()> {
    for v in [p.len(), q.len()] {
        if v != grid.len() {
            return Err(Error::LengthMismatch { expected: grid.len(), got: v });
        }
    }
    for (j, (&a, &b)) in p.iter().zip(q).enumerate() {
        if !a.is_finite() || !b.is_finite() || a < 0.0 || b < 0.0 {
            return Err(Error::Domain {
                distance: spec.name().into(),
                index: Some(j),
                msg: format!("densities must be finite and nonnegative (p={a}, q={b})"),
            });
        }
    }
    Ok(())
}

/// `D_f(p, q)` by quadrature; `q` is floored at [`Q_FLOOR`] and `p` at [`P_FLOOR`].
pub fn divergence(spec: &DistanceSpec, p: &[f64], q: &[f64], grid: &EvalGrid) -> Result<f64> {
    check_grid_inputs(spec, p, q, grid)?;
    Ok(divergence_unchecked(spec, p, q, grid))
}

/// Same as [`divergence`] without input validation; negative inputs are floored.
pub(crate) fn divergence_unchecked(spec: &DistanceSpec, p: &[f64], q: &[f64], grid: &EvalGrid) -> f64 {
    grid.weights()
        .iter()
        .zip(p.iter().zip(q))
        .map(|(w, (&a, &b))| w * spec.integrand(a, b))
        .sum()
}
