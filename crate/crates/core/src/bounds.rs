//! Closed-form step-size and smoothing constants, intermediate inequalities,
//! and a stateless monitor that checks them on consecutive trajectory states.
//!
//! Every logarithm of a loss is taken from [`LossValue::log_value`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::linalg::WeightStack;
use crate::network::{gradient, Dataset, LossValue};

impl LossValue {
    /// Builds a loss from its value, deriving the log channel.
    pub fn from_value(value: f64) -> Self {
        Self {
            value,
            log_value: value.ln(),
        }
    }
}

fn check_initial_loss(j1: LossValue) -> Result<()> {
    if !(j1.value > 0.0 && j1.log_value < 0.0) {
        return Err(Error::Precondition(format!(
            "initial loss must lie in (0, 1), got {:e}",
            j1.value
        )));
    }
    Ok(())
}

fn check_counts(p: usize, depth: usize) -> Result<()> {
    if p == 0 || depth == 0 {
        return Err(Error::invalid("p/L", "width and depth must be at least 1"));
    }
    Ok(())
}

fn depth_f(depth: usize) -> f64 {
    depth as f64
}

/// Largest admissible smoothing width:
/// `min{ L^{L/2-3} log(1/J1) / (24 √p ‖V1‖^L), 1 }`.
pub fn compute_h_max(j1: LossValue, p: usize, depth: usize, norm_v1: f64) -> Result<f64> {
    check_initial_loss(j1)?;
    check_counts(p, depth)?;
    if !(norm_v1 > 0.0) {
        return Err(Error::invalid("norm_v1", "must be positive"));
    }
    let l = depth_f(depth);
    let raw = l.powf(l / 2.0 - 3.0) * j1.log_inv() / (24.0 * (p as f64).sqrt() * norm_v1.powf(l));
    Ok(raw.min(1.0))
}

/// The two terms of the step-size cap, before taking the minimum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaTerms {
    pub smoothness: f64,
    pub curvature: f64,
}

impl AlphaTerms {
    pub fn min(&self) -> f64 {
        self.smoothness.min(self.curvature)
    }
}

/// Both terms of the step-size cap without checking `h ≤ h_max`.
pub fn alpha_max_terms(h: f64, j1: LossValue, p: usize, depth: usize, norm_v1: f64) -> AlphaTerms {
    let l = depth_f(depth);
    let smoothness =
        h / (1024.0 * (l + 1.0).powi(2) * p as f64 * j1.value * norm_v1.powf(3.0 * l + 5.0));
    let curvature = (l + 0.5) * norm_v1 * norm_v1
        / (2.0 * l * (l + 0.75).powi(2) * j1.value * j1.log_inv().powf(2.0 / l));
    AlphaTerms {
        smoothness,
        curvature,
    }
}

/// Step-size cap
/// `min{ h / (1024 (L+1)² p J1 ‖V1‖^{3L+5}), (L+½)‖V1‖² / (2L (L+¾)² J1 log^{2/L}(1/J1)) }`.
pub fn compute_alpha_max(h: f64, j1: LossValue, p: usize, depth: usize, norm_v1: f64) -> Result<f64> {
    let h_max = compute_h_max(j1, p, depth, norm_v1)?;
    if !(h > 0.0 && h <= h_max) {
        return Err(Error::Precondition(format!("need 0 < h <= h_max = {h_max:e}, got h = {h:e}")));
    }
    Ok(alpha_max_terms(h, j1, p, depth, norm_v1).min())
}

/// Rate constant `L (L+¾)² α J1 log^{2/L}(1/J1) / ((L+½) ‖V1‖²)`.
pub fn compute_q_tilde(alpha: f64, j1: LossValue, depth: usize, norm_v1: f64) -> Result<f64> {
    check_initial_loss(j1)?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid("alpha", format!("must be positive, got {alpha}")));
    }
    let l = depth_f(depth);
    Ok(l * (l + 0.75).powi(2) * alpha * j1.value * j1.log_inv().powf(2.0 / l)
        / ((l + 0.5) * norm_v1 * norm_v1))
}

/// `(L+¾) J log(1/J) / ‖V‖`.
pub fn grad_lower_bound(loss: LossValue, norm_v: f64, depth: usize) -> f64 {
    (depth_f(depth) + 0.75) * loss.value * loss.log_inv() / norm_v
}

/// `√((L+1)p) ‖V‖^{L+1} min{J, 1}`.
pub fn grad_upper_bound(loss: LossValue, norm_v: f64, p: usize, depth: usize) -> f64 {
    let l = depth_f(depth);
    ((l + 1.0) * p as f64).sqrt() * norm_v.powf(l + 1.0) * loss.value.min(1.0)
}

/// `256 (L+1) √p ‖V‖^{3L+5} J / h`.
pub fn smoothness_bound(loss: LossValue, norm_v: f64, p: usize, depth: usize, h: f64) -> f64 {
    let l = depth_f(depth);
    256.0 * (l + 1.0) * (p as f64).sqrt() * norm_v.powf(3.0 * l + 5.0) * loss.value / h
}

/// `√(L+1)`: states with loss below `2/n^{1+24L}` have larger norm.
pub fn weight_norm_floor(depth: usize) -> f64 {
    (depth_f(depth) + 1.0).sqrt()
}

/// `ln(1/n^{1+24L})`.
pub fn loss_threshold_log(n: usize, depth: usize) -> f64 {
    -(1.0 + 24.0 * depth_f(depth)) * (n as f64).ln()
}

/// `max{ ‖A‖^{L+1} / (L+1)^{(L+1)/2}, ‖A‖ }`, a bound on the product of
/// operator norms over any subset of the `L+1` layers of `A`.
pub fn product_norm_bound(norm: f64, depth: usize) -> f64 {
    let k = depth_f(depth) + 1.0;
    (norm.powf(k) / k.powf(k / 2.0)).max(norm)
}

/// `h / (1024 (L+1)² d ‖V‖^{3L+5})` with `d` the width factor (`p` or `√p`).
fn step_cap(h: f64, width_factor: f64, depth: usize, norm_v: f64) -> f64 {
    let l = depth_f(depth);
    h / (1024.0 * (l + 1.0).powi(2) * width_factor * norm_v.powf(3.0 * l + 5.0))
}

/// Inputs the closed-form constants depend on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryInputs {
    pub j1: LossValue,
    pub p: usize,
    pub depth: usize,
    pub norm_v1: f64,
    pub n: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryConstants {
    pub inputs: TheoryInputs,
    pub h_max: f64,
    pub h: f64,
    pub alpha_max: f64,
    pub alpha_terms: AlphaTerms,
    pub alpha: f64,
    pub q_tilde: f64,
    pub log_threshold: f64,
}

impl TheoryConstants {
    /// Evaluates all constants for a chosen `h` and `α`. Neither is required
    /// to be admissible; the monitor reports what follows.
    pub fn evaluate(inputs: TheoryInputs, h: f64, alpha: f64) -> Result<Self> {
        let h_max = compute_h_max(inputs.j1, inputs.p, inputs.depth, inputs.norm_v1)?;
        let alpha_terms = alpha_max_terms(h, inputs.j1, inputs.p, inputs.depth, inputs.norm_v1);
        Ok(Self {
            inputs,
            h_max,
            h,
            alpha_max: alpha_terms.min(),
            alpha_terms,
            alpha,
            q_tilde: compute_q_tilde(alpha, inputs.j1, inputs.depth, inputs.norm_v1)?,
            log_threshold: loss_threshold_log(inputs.n, inputs.depth),
        })
    }

    /// Whether the initial state lies in the small-loss regime with an
    /// admissible smoothing width.
    pub fn in_regime(&self) -> bool {
        self.inputs.j1.log_value < self.log_threshold && self.h <= self.h_max
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    #[serde(rename = "na")]
    NotApplicable,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::NotApplicable => "na",
        }
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A verdict with its signed slack (positive means satisfied).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub verdict: Verdict,
    pub slack: Option<f64>,
}

impl Check {
    pub fn na() -> Self {
        Self {
            verdict: Verdict::NotApplicable,
            slack: None,
        }
    }

    /// Pass iff `slack >= -tol`.
    fn graded(slack: f64, tol: f64) -> Self {
        let verdict = if slack >= -tol { Verdict::Pass } else { Verdict::Fail };
        Self {
            verdict,
            slack: Some(slack),
        }
    }

    fn strict(slack: f64) -> Self {
        let verdict = if slack > 0.0 { Verdict::Pass } else { Verdict::Fail };
        Self {
            verdict,
            slack: Some(slack),
        }
    }

    fn when(applicable: bool, f: impl FnOnce() -> Check) -> Self {
        if applicable {
            f()
        } else {
            Self::na()
        }
    }
}

/// Tolerances on the signed slack of each check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitorTolerances {
    /// Absolute, in log space.
    pub i1_log: f64,
    /// In units of `J_1`.
    pub i1_linear: f64,
    pub i2: f64,
    pub i3: f64,
    pub lower: f64,
    pub alignment: f64,
    pub upper: f64,
    /// In units of `J_t`.
    pub descent: f64,
}

impl Default for MonitorTolerances {
    fn default() -> Self {
        Self {
            i1_log: 1e-12,
            i1_linear: 1e-15,
            i2: 1e-12,
            i3: 1e-12,
            lower: 1e-12,
            alignment: 1e-12,
            upper: 1e-10,
            descent: 1e-12,
        }
    }
}

/// Measurements at one trajectory state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepState {
    pub t: usize,
    pub loss: LossValue,
    pub grad_norm: f64,
    pub weight_norm: f64,
    /// `−∇J(V_t)·V_t`.
    pub neg_grad_dot_weights: f64,
}

/// What the monitor needs besides the states themselves.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonitorContext {
    pub inputs: TheoryInputs,
    pub h: f64,
    pub alpha: f64,
    /// Closed-form constants; absent when the initial loss is not below 1.
    pub theory: Option<TheoryConstants>,
    /// Rate constant actually used; at most `q_tilde`.
    pub q: f64,
    /// `ln(1/n^{1+24L})`.
    pub log_threshold: f64,
    pub tolerances: MonitorTolerances,
}

impl MonitorContext {
    /// Context for a run in the small-loss theory; `q` defaults to `Q̃(α)`.
    pub fn from_constants(constants: TheoryConstants, q: Option<f64>, tolerances: MonitorTolerances) -> Self {
        Self {
            inputs: constants.inputs,
            h: constants.h,
            alpha: constants.alpha,
            theory: Some(constants),
            q: q.unwrap_or(constants.q_tilde),
            log_threshold: constants.log_threshold,
            tolerances,
        }
    }
}

/// Every bound and check evaluated at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Step index within the current phase, starting at 1.
    pub t: usize,
    /// Step index across all phases, starting at 1.
    pub step: usize,
    pub loss: LossValue,
    pub grad_norm: f64,
    pub weight_norm: f64,
    pub lower_bound: f64,
    pub upper_bound: f64,
    /// `J_1 / (Q(t−1) + 1)`; NaN without theory constants.
    pub rate_bound: f64,
    pub log_rate_bound: f64,
    pub descent_lhs: Option<f64>,
    pub descent_rhs: Option<f64>,
    pub i1: Check,
    pub i1_linear: Check,
    pub i2: Check,
    pub i3: Check,
    pub i3_sqrt_p: Check,
    pub lower: Check,
    pub alignment: Check,
    pub upper: Check,
    pub descent: Check,
    pub weight_floor: Check,
    pub phase: u8,
}

/// Names and accessors for every check, in reporting order.
pub const CHECK_NAMES: [&str; 10] = [
    "i1",
    "i1_linear",
    "i2",
    "i3",
    "i3_sqrt_p",
    "lower",
    "alignment",
    "upper",
    "descent",
    "weight_floor",
];

impl StepRecord {
    pub fn checks(&self) -> [Check; 10] {
        [
            self.i1,
            self.i1_linear,
            self.i2,
            self.i3,
            self.i3_sqrt_p,
            self.lower,
            self.alignment,
            self.upper,
            self.descent,
            self.weight_floor,
        ]
    }

    pub fn any_failure(&self) -> bool {
        self.checks().iter().any(|c| c.verdict == Verdict::Fail)
    }
}

/// Evaluates every check at `state`, and the descent inequality on the
/// transition to `next` when it is given.
pub fn monitor_transition(state: &StepState, next: Option<&StepState>, ctx: &MonitorContext) -> StepRecord {
    let tol = &ctx.tolerances;
    let inp = &ctx.inputs;
    let (p, depth) = (inp.p, inp.depth);
    let l = depth_f(depth);
    let j = state.loss;
    let norm = state.weight_norm;
    let h = ctx.h;

    let below_threshold = j.log_value < ctx.log_threshold;
    let regime = ctx.theory.is_some_and(|c| c.in_regime());
    let h_admissible = ctx.theory.is_some_and(|c| h <= c.h_max);

    let steps_before = state.t.saturating_sub(1) as f64;
    let growth = ctx.q * steps_before;
    let (rate_bound, log_rate_bound) = if ctx.theory.is_some() {
        (inp.j1.value / (1.0 + growth), inp.j1.log_value - growth.ln_1p())
    } else {
        (f64::NAN, f64::NAN)
    };

    let i1 = Check::when(regime, || Check::graded(log_rate_bound - j.log_value, tol.i1_log));
    let i1_linear = Check::when(regime, || {
        Check::graded((rate_bound - j.value) / inp.j1.value, tol.i1_linear)
    });

    let ratio_1 = inp.j1.log_inv() / inp.norm_v1.powf(l);
    let ratio_t = j.log_inv() / norm.powf(l);
    let i2_slack = (ratio_t - ratio_1) / ratio_1;
    let i2 = Check::when(regime, || Check::graded(i2_slack, tol.i2));

    let i3_slack = |width_factor: f64| {
        let cap = step_cap(h, width_factor, depth, norm);
        (cap - ctx.alpha * j.value) / cap
    };
    let i3 = Check::when(regime, || Check::graded(i3_slack(p as f64), tol.i3));
    let i3_sqrt_p = Check::when(regime, || Check::graded(i3_slack((p as f64).sqrt()), tol.i3));

    let lower_bound = grad_lower_bound(j, norm, depth);
    // Admissible h, small loss, and the norm-growth condition.
    let lower_applicable = h_admissible && below_threshold && j.value > 0.0 && i2_slack >= -tol.i2;
    let lower = Check::when(lower_applicable, || {
        Check::graded((state.grad_norm - lower_bound) / lower_bound, tol.lower)
    });
    let alignment = Check::when(lower_applicable, || {
        let rhs = norm * lower_bound;
        Check::graded((state.neg_grad_dot_weights - rhs) / rhs, tol.alignment)
    });

    let upper_bound = grad_upper_bound(j, norm, p, depth);
    let upper = Check::when(norm >= (l + 0.5).sqrt(), || {
        Check::graded((upper_bound - state.grad_norm) / upper_bound, tol.upper)
    });

    // The step-size hypothesis of the descent inequality carries √p.
    let descent_rhs = j.value - ctx.alpha * l * state.grad_norm.powi(2) / (l + 0.5);
    let descent_lhs = next.map(|n| n.loss.value);
    let descent_applicable =
        next.is_some() && h <= 1.0 && below_threshold && i3_slack((p as f64).sqrt()) >= -tol.i3;
    let descent = Check::when(descent_applicable, || {
        let lhs = descent_lhs.expect("next state present");
        Check::graded((descent_rhs - lhs) / j.value, tol.descent)
    });

    let floor_applicable = j.log_value < std::f64::consts::LN_2 + ctx.log_threshold;
    let weight_floor = Check::when(floor_applicable, || {
        let floor = weight_norm_floor(depth);
        Check::strict((norm - floor) / floor)
    });

    StepRecord {
        t: state.t,
        step: state.t,
        loss: j,
        grad_norm: state.grad_norm,
        weight_norm: norm,
        lower_bound,
        upper_bound,
        rate_bound,
        log_rate_bound,
        descent_lhs,
        descent_rhs: next.map(|_| descent_rhs),
        i1,
        i1_linear,
        i2,
        i3,
        i3_sqrt_p,
        lower,
        alignment,
        upper,
        descent,
        weight_floor,
        phase: 1,
    }
}

/// Worst slack and first violation of one check across a trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvariantVerdict {
    pub name: String,
    pub worst_slack: Option<f64>,
    pub first_violation: Option<usize>,
    pub applicable: usize,
    pub violations: usize,
}

impl InvariantVerdict {
    pub fn verdict(&self) -> Verdict {
        if self.violations > 0 {
            Verdict::Fail
        } else if self.applicable > 0 {
            Verdict::Pass
        } else {
            Verdict::NotApplicable
        }
    }
}

/// Per-check summary over a sequence of records, in [`CHECK_NAMES`] order.
pub fn summarize(records: &[StepRecord]) -> Vec<InvariantVerdict> {
    CHECK_NAMES
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let mut out = InvariantVerdict {
                name: (*name).to_string(),
                worst_slack: None,
                first_violation: None,
                applicable: 0,
                violations: 0,
            };
            for r in records {
                let c = r.checks()[k];
                if let Some(s) = c.slack {
                    out.worst_slack = Some(out.worst_slack.map_or(s, |w: f64| w.min(s)));
                }
                match c.verdict {
                    Verdict::NotApplicable => {}
                    Verdict::Pass => out.applicable += 1,
                    Verdict::Fail => {
                        out.applicable += 1;
                        out.violations += 1;
                        out.first_violation.get_or_insert(r.step);
                    }
                }
            }
            out
        })
        .collect()
}

/// Lower estimate of the local Lipschitz constant of `∇J` near `v`: the
/// largest `‖∇J(A) − ∇J(B)‖ / ‖A − B‖` over `k` seeded pairs drawn
/// uniformly from the ball of the given radius around `v`.
pub fn probe_local_lipschitz(
    v: &WeightStack,
    act: &Activation,
    data: &Dataset,
    radius: f64,
    k: usize,
    seed: u64,
) -> Result<f64> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::invalid("radius", "must be positive"));
    }
    if k < 2 {
        return Err(Error::invalid("k", "need at least two probes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = v.num_params();
    let point = |rng: &mut ChaCha8Rng| -> Result<WeightStack> {
        let dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
        let u: f64 = rand::Rng::gen(rng);
        let r = radius * u.powf(1.0 / dim as f64);
        let offset = WeightStack::from_flat(v.width(), v.depth(), &dir)?;
        v.axpy(r / norm, &offset)
    };
    let mut best = 0.0_f64;
    for _ in 0..k {
        let a = point(&mut rng)?;
        let b = point(&mut rng)?;
        let dist = a.sub(&b)?.frobenius_norm();
        if dist == 0.0 {
            return Err(Error::DuplicateProbe);
        }
        let diff = gradient(&a, act, data)?.sub(&gradient(&b, act, data)?)?.frobenius_norm();
        best = best.max(diff / dist);
    }
    Ok(best)
}
