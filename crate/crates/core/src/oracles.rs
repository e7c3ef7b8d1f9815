//! Slow, independent reference computations used to cross-check the fast
//! paths: central finite differences, a straight-line forward pass, a
//! compensated-sum loss and flat-vector norms.

use serde::{Deserialize, Serialize};

use crate::activation::{Activation, ActivationKind};
use crate::error::{Error, Result};
use crate::linalg::{ParamIndex, WeightStack};
use crate::network::{backprop_all, map_samples, total_loss, Dataset};

/// Relative tolerance for gradient comparisons against central differences.
pub const FD_REL_TOL: f64 = 1e-6;
/// Denominator floor in those comparisons. Central differences at the
/// default step carry about `1e-16 · J / 1e-5` of rounding noise, so
/// entries far below this floor cannot be resolved relatively.
pub const FD_ABS_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FdScheme {
    Central,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdConfig {
    pub step: f64,
    pub scheme: FdScheme,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            scheme: FdScheme::Central,
        }
    }
}

impl FdConfig {
    pub fn new(step: f64) -> Result<Self> {
        if !(1e-8..=1e-3).contains(&step) {
            return Err(Error::invalid("step", format!("must lie in [1e-8, 1e-3], got {step}")));
        }
        Ok(Self {
            step,
            scheme: FdScheme::Central,
        })
    }
}

/// Entrywise `(J(V + εe) − J(V − εe)) / 2ε`.
pub fn fd_gradient(v: &WeightStack, act: &Activation, data: &Dataset, cfg: FdConfig) -> Result<WeightStack> {
    let eps = cfg.step;
    let n = v.num_params();
    let entries = map_samples(n, 2 * v.depth() * v.width() * v.width() * data.len().max(1), |k| {
        let idx = v.param_index(k);
        let base = v.get_param(idx);
        let mut plus = v.clone();
        plus.set_param(idx, base + eps);
        let mut minus = v.clone();
        minus.set_param(idx, base - eps);
        let jp = total_loss(&plus, act, data)?.value;
        let jm = total_loss(&minus, act, data)?.value;
        Ok((jp - jm) / (2.0 * eps))
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    WeightStack::from_flat(v.width(), v.depth(), &entries)
}

/// Largest entrywise discrepancy between two stacks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    /// `max |a − b| / max(|b|, abs_floor)`.
    pub max_error: f64,
    pub location: ParamIndex,
    pub within_tolerance: bool,
}

pub fn fd_compare(a: &WeightStack, b: &WeightStack, rel_tol: f64, abs_floor: f64) -> Result<FdReport> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch("stacks differ in shape".into()));
    }
    let (fa, fb) = (a.to_flat(), b.to_flat());
    let mut max_error = 0.0;
    let mut at = 0;
    for (k, (x, y)) in fa.iter().zip(&fb).enumerate() {
        let err = (x - y).abs() / y.abs().max(abs_floor);
        if err > max_error {
            max_error = err;
            at = k;
        }
    }
    Ok(FdReport {
        max_error,
        location: a.param_index(at),
        within_tolerance: max_error <= rel_tol,
    })
}

/// Parameter entries whose perturbation by `±10·step` could move some
/// pre-activation across a kink of the Huberized activation. Entries in
/// the last hidden-to-output row never move a pre-activation.
pub fn kink_exclusions(v: &WeightStack, act: &Activation, data: &Dataset, cfg: FdConfig) -> Result<Vec<ParamIndex>> {
    if act.kind() != ActivationKind::Huberized {
        return Ok(Vec::new());
    }
    let kinks = act.kinks();
    let margin = 10.0 * cfg.step;
    let passes = backprop_all(v, act, data)?;
    let near_kink = |u: f64| kinks.iter().any(|k| (u - k).abs() < margin);
    let mut out = Vec::new();
    for k in 0..v.num_params() {
        let idx = v.param_index(k);
        if idx.layer == v.depth() {
            continue;
        }
        // A change in V_ℓ moves u_ℓ and, through it, every later layer.
        let hit = passes.iter().any(|b| {
            near_kink(b.trace.u[idx.layer][idx.row])
                || b.trace.u[idx.layer + 1..].iter().flatten().any(|&u| near_kink(u))
        });
        if hit {
            out.push(idx);
        }
    }
    Ok(out)
}

/// Forward pass written as plain loops over explicit indices.
pub fn naive_output(v: &WeightStack, act: &Activation, x: &[f64]) -> f64 {
    let p = v.width();
    let mut cur = x.to_vec();
    for m in v.hidden() {
        let mut next = vec![0.0; p];
        for (i, slot) in next.iter_mut().enumerate() {
            let mut s = 0.0;
            for (j, xj) in cur.iter().enumerate() {
                s += m.get(i, j) * xj;
            }
            *slot = act.value(s);
        }
        cur = next;
    }
    (0..p).map(|j| v.outer().get(0, j) * cur[j]).sum()
}

/// Kahan–Babuška sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Mean logistic loss via the naive forward pass and compensated summation.
pub fn naive_total_loss(v: &WeightStack, act: &Activation, data: &Dataset) -> f64 {
    let losses = data.inputs().iter().zip(data.labels()).map(|(x, &y)| {
        let z = y * naive_output(v, act, x);
        if z >= 0.0 {
            (-z).exp().ln_1p()
        } else {
            -z + z.exp().ln_1p()
        }
    });
    compensated_sum(losses) / data.len() as f64
}

/// Frobenius norm of a stack, flattened and summed with compensation.
pub fn naive_frobenius(v: &WeightStack) -> f64 {
    compensated_sum(v.to_flat().into_iter().map(|x| x * x)).sqrt()
}
