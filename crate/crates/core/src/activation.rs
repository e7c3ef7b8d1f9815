//! Smoothed ReLU activations and a sampling certifier for the
//! "h-smoothly approximately ReLU" conditions:
//!
//! * `φ` differentiable and `φ(0) = 0`,
//! * `|φ'| ≤ 1` and `φ'` is `1/h`-Lipschitz,
//! * `|φ'(z) z − φ(z)| ≤ h/2` everywhere.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scale applied to Swish so that its slope stays within `[-1, 1]`.
const SWISH_SCALE: f64 = 1.1;
/// Beyond this `|2z/h|` the logistic gate is saturated to 0 or 1.
const SWISH_SATURATION: f64 = 700.0;

/// Tolerance used by [`certify_h_smooth`] on each property.
pub const CERTIFY_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    /// Zero, then `z²/2h` on `[0, h]`, then `z − h/2`.
    #[serde(alias = "huberized_relu")]
    Huberized,
    /// `z / (1.1 (1 + exp(−2z/h)))`.
    #[serde(alias = "scaled_swish")]
    Swish,
}

impl std::fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ActivationKind::Huberized => f.write_str("huberized"),
            ActivationKind::Swish => f.write_str("swish"),
        }
    }
}

impl std::str::FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "huberized" | "huberized_relu" => Ok(ActivationKind::Huberized),
            "swish" | "scaled_swish" => Ok(ActivationKind::Swish),
            other => Err(Error::invalid("kind", format!("unknown activation `{other}`"))),
        }
    }
}

/// An activation with its smoothing width `h > 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Activation {
    kind: ActivationKind,
    h: f64,
}

impl Activation {
    pub fn new(kind: ActivationKind, h: f64) -> Result<Self> {
        if !(h.is_finite() && h > 0.0) {
            return Err(Error::invalid("h", format!("smoothing width must be positive and finite, got {h}")));
        }
        Ok(Self { kind, h })
    }

    pub fn huberized(h: f64) -> Result<Self> {
        Self::new(ActivationKind::Huberized, h)
    }

    pub fn swish(h: f64) -> Result<Self> {
        Self::new(ActivationKind::Swish, h)
    }

    pub fn kind(&self) -> ActivationKind {
        self.kind
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn with_h(&self, h: f64) -> Result<Self> {
        Self::new(self.kind, h)
    }

    pub fn value(&self, z: f64) -> f64 {
        let h = self.h;
        match self.kind {
            ActivationKind::Huberized => {
                if z < 0.0 {
                    0.0
                } else if z <= h {
                    z * z / (2.0 * h)
                } else {
                    z - h / 2.0
                }
            }
            ActivationKind::Swish => {
                let a = 2.0 * z / h;
                if a < -SWISH_SATURATION {
                    0.0
                } else if a > SWISH_SATURATION {
                    z / SWISH_SCALE
                } else {
                    z * sigmoid(a) / SWISH_SCALE
                }
            }
        }
    }

    pub fn deriv(&self, z: f64) -> f64 {
        let h = self.h;
        match self.kind {
            ActivationKind::Huberized => {
                if z < 0.0 {
                    0.0
                } else if z <= h {
                    z / h
                } else {
                    1.0
                }
            }
            ActivationKind::Swish => {
                let a = 2.0 * z / h;
                if a < -SWISH_SATURATION {
                    0.0
                } else if a > SWISH_SATURATION {
                    1.0 / SWISH_SCALE
                } else {
                    let s = sigmoid(a);
                    // d/dz [z σ(2z/h)] = σ + z σ(1−σ) 2/h = σ (1 + a (1−σ))
                    s * (1.0 + a * sigmoid(-a)) / SWISH_SCALE
                }
            }
        }
    }

    /// Entrywise `φ(v)`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        v.iter().map(|&z| self.value(z)).collect()
    }

    /// Entrywise `φ'(v)`.
    pub fn apply_deriv(&self, v: &[f64]) -> Vec<f64> {
        v.iter().map(|&z| self.deriv(z)).collect()
    }

    /// Points where `φ'` is not differentiable (Huberized only).
    pub fn kinks(&self) -> Vec<f64> {
        match self.kind {
            ActivationKind::Huberized => vec![0.0, self.h],
            ActivationKind::Swish => Vec::new(),
        }
    }
}

/// Overflow-safe logistic function.
pub(crate) fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// Sampling grid for [`certify_h_smooth`]: a uniform grid on
/// `[-half_width·h, half_width·h]` plus tail points at multiples of `h`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub points: usize,
    pub half_width: f64,
    pub tail_multiples: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            points: 10_000,
            half_width: 10.0,
            tail_multiples: vec![20.0, 50.0, 100.0, 349.0, 351.0, 1e3, 1e6],
        }
    }
}

impl GridSpec {
    fn sample(&self, h: f64) -> Vec<f64> {
        let lo = -self.half_width * h;
        let step = 2.0 * self.half_width * h / (self.points.max(2) - 1) as f64;
        let mut zs: Vec<f64> = (0..self.points).map(|i| lo + i as f64 * step).collect();
        for &m in &self.tail_multiples {
            zs.push(m * h);
            zs.push(-m * h);
        }
        // Branch points land exactly on the grid.
        zs.extend([0.0, h]);
        zs.sort_by(f64::total_cmp);
        zs.dedup();
        zs
    }
}

/// Worst cases found while sampling the smoothness conditions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessReport {
    pub kind: ActivationKind,
    pub h: f64,
    pub value_at_zero: f64,
    pub max_abs_deriv: f64,
    /// Largest `|φ'(b) − φ'(a)| / (b − a)` over adjacent grid points.
    pub max_lipschitz_quotient: f64,
    /// Largest `|φ'(z) z − φ(z)|`; compared against `h/2`.
    pub max_taylor_gap: f64,
    /// Largest gap between `φ'` and a central difference of `φ`, and the
    /// allowance implied by the Lipschitz bound at the difference step.
    pub max_deriv_mismatch: f64,
    pub deriv_mismatch_allowance: f64,
    pub differentiable: bool,
    pub samples_used: usize,
    pub pass: bool,
}

/// Checks the four smoothness conditions on a sampling grid.
pub fn certify_h_smooth(act: &Activation, grid: &GridSpec) -> Result<SmoothnessReport> {
    if grid.points < 2 {
        return Err(Error::invalid("grid", "need at least two grid points"));
    }
    let h = act.h();
    let zs = grid.sample(h);
    let derivs: Vec<f64> = zs.iter().map(|&z| act.deriv(z)).collect();

    let max_abs_deriv = derivs.iter().fold(0.0_f64, |m, d| m.max(d.abs()));
    let max_taylor_gap = zs
        .iter()
        .zip(&derivs)
        .map(|(&z, &d)| (d * z - act.value(z)).abs())
        .fold(0.0_f64, f64::max);
    let max_lipschitz_quotient = zs
        .windows(2)
        .zip(derivs.windows(2))
        .map(|(z, d)| (d[1] - d[0]).abs() / (z[1] - z[0]))
        .fold(0.0_f64, f64::max);

    // Differentiability: φ' should agree with a central difference of φ up
    // to the Lipschitz truncation error δ/(2h) plus rounding.
    let delta = 1e-6 * h;
    let deriv_mismatch_allowance = delta / (2.0 * h) + 1e-9;
    let max_deriv_mismatch = zs
        .iter()
        .zip(&derivs)
        .filter(|(z, _)| z.abs() <= grid.half_width * h)
        .map(|(&z, &d)| {
            let fd = (act.value(z + delta) - act.value(z - delta)) / (2.0 * delta);
            (fd - d).abs() / (1.0 + z.abs() / h)
        })
        .fold(0.0_f64, f64::max);

    let value_at_zero = act.value(0.0);
    let differentiable = max_deriv_mismatch <= deriv_mismatch_allowance;
    let pass = value_at_zero == 0.0
        && max_abs_deriv <= 1.0 + CERTIFY_TOL
        && max_lipschitz_quotient <= 1.0 / h + CERTIFY_TOL
        && max_taylor_gap <= h / 2.0 + CERTIFY_TOL;

    Ok(SmoothnessReport {
        kind: act.kind(),
        h,
        value_at_zero,
        max_abs_deriv,
        max_lipschitz_quotient,
        max_taylor_gap,
        max_deriv_mismatch,
        deriv_mismatch_allowance,
        differentiable,
        samples_used: zs.len(),
        pass,
    })
}
