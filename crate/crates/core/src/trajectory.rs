//! Gradient descent loops that record a [`StepRecord`] per step, and the
//! two-phase schedule: a fixed small step near initialization, then the
//! theory step size from the best phase-one iterate.

use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::bounds::{
    alpha_max_terms, compute_h_max, compute_q_tilde, loss_threshold_log, monitor_transition, summarize, InvariantVerdict,
    MonitorContext, MonitorTolerances, StepRecord, StepState, TheoryConstants, TheoryInputs,
};
use crate::error::{Error, Result};
use crate::linalg::WeightStack;
use crate::network::{evaluate, Dataset, Evaluation, LossValue};

fn state_of(t: usize, v: &WeightStack, eval: &Evaluation, step: usize) -> Result<StepState> {
    let loss = eval.loss;
    if !loss.value.is_finite() || !loss.log_value.is_finite() && loss.log_value != f64::NEG_INFINITY {
        return Err(Error::NonFinite { step, what: "loss".into() });
    }
    let grad_norm = eval.gradient.frobenius_norm();
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite { step, what: "gradient".into() });
    }
    Ok(StepState {
        t,
        loss,
        grad_norm,
        weight_norm: v.frobenius_norm(),
        neg_grad_dot_weights: -eval.gradient.dot(v)?,
    })
}

/// Output of a monitored descent loop.
#[derive(Clone, Debug)]
pub struct Segment {
    pub records: Vec<StepRecord>,
    /// Weights after the last executed step.
    pub final_weights: WeightStack,
    pub final_loss: LossValue,
    /// `max_ℓ ‖V_ℓ^{(t)} − V_ℓ^{(1)}‖` over all visited iterates.
    pub max_layer_distance: f64,
    /// Iterate with the smallest loss, earliest on ties, and its step index.
    pub best_weights: WeightStack,
    pub best_t: usize,
    pub best_loss: LossValue,
}

/// Per-segment settings of the descent loop.
#[derive(Clone, Copy, Debug)]
pub struct DescentPlan<'c> {
    pub alpha: f64,
    pub max_steps: usize,
    /// Stop before stepping once `J_t` is at or below this value.
    pub loss_floor: Option<f64>,
    /// Stop before stepping once `ln J_t` is below this value.
    pub log_loss_stop: Option<f64>,
    pub phase: u8,
    /// Offset added to the phase-local step to get the global step.
    pub step_offset: usize,
    pub ctx: &'c MonitorContext,
}

/// Plain gradient descent from `v1` with every step monitored.
pub fn monitored_descent(v1: &WeightStack, act: &Activation, data: &Dataset, plan: &DescentPlan<'_>) -> Result<Segment> {
    if !(plan.alpha > 0.0 && plan.alpha.is_finite()) {
        return Err(Error::invalid("alpha", format!("step size must be positive, got {}", plan.alpha)));
    }
    let mut v = v1.clone();
    let mut eval = evaluate(&v, act, data)?;
    let mut state = state_of(1, &v, &eval, plan.step_offset + 1)?;
    let mut records = Vec::with_capacity(plan.max_steps.min(1 << 20));
    let mut max_dist = 0.0_f64;
    let mut best = (v.clone(), 1, eval.loss);
    for t in 1..=plan.max_steps {
        if plan.loss_floor.is_some_and(|f| state.loss.value <= f) || plan.log_loss_stop.is_some_and(|s| state.loss.log_value < s) {
            break;
        }
        let step = plan.step_offset + t;
        let mut next_v = v.clone();
        next_v.axpy_in_place(-plan.alpha, &eval.gradient);
        if !next_v.is_finite() {
            return Err(Error::NonFinite { step, what: "weights".into() });
        }
        let next_eval = evaluate(&next_v, act, data)?;
        let next_state = state_of(t + 1, &next_v, &next_eval, step + 1)?;
        let mut record = monitor_transition(&state, Some(&next_state), plan.ctx);
        record.phase = plan.phase;
        record.step = step;
        records.push(record);
        max_dist = max_dist.max(next_v.max_layer_distance(v1)?);
        if next_eval.loss.value < best.2.value {
            best = (next_v.clone(), t + 1, next_eval.loss);
        }
        v = next_v;
        eval = next_eval;
        state = next_state;
    }
    Ok(Segment {
        records,
        final_loss: eval.loss,
        final_weights: v,
        max_layer_distance: max_dist,
        best_weights: best.0,
        best_t: best.1,
        best_loss: best.2,
    })
}

/// Monitor context for a run starting at `v1` with the given `h` and `α`.
/// Outside the small-loss regime (`J1 ≥ 1`) the theory part is absent.
pub fn context_for(
    v1: &WeightStack,
    j1: LossValue,
    n: usize,
    h: f64,
    alpha: f64,
    q: Option<f64>,
    tolerances: MonitorTolerances,
) -> Result<MonitorContext> {
    let inputs = TheoryInputs {
        j1,
        p: v1.width(),
        depth: v1.depth(),
        norm_v1: v1.frobenius_norm(),
        n,
    };
    let theory = if j1.log_value < 0.0 {
        let constants = TheoryConstants::evaluate(inputs, h, alpha)?;
        let q = q.unwrap_or(constants.q_tilde);
        Some((constants, q))
    } else {
        None
    };
    Ok(MonitorContext {
        inputs,
        h,
        alpha,
        theory: theory.map(|(c, _)| c),
        q: theory.map_or(0.0, |(_, q)| q),
        log_threshold: loss_threshold_log(n, v1.depth()),
        tolerances,
    })
}

/// Constants of the two-phase schedule, with the unspecified absolute
/// constants exposed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanConstants {
    /// Multiplier in the ball radius.
    pub c1: f64,
    /// Multiplier in the phase-one step `θ / (p L⁵)`.
    pub theta: f64,
    /// Failure probability in the ball radius.
    pub delta: f64,
}

impl Default for PlanConstants {
    fn default() -> Self {
        Self {
            c1: 1.0,
            theta: 1.0,
            delta: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePlan {
    pub alpha_nt: f64,
    /// Phase-one horizon from the closed form; usually astronomically large.
    pub t_formula: f64,
    /// Phase-one steps actually run.
    pub t_steps: usize,
    /// Phase-two step size; the theory cap at the phase-two start when absent.
    pub alpha_phase2: Option<f64>,
    pub h_nt: f64,
    pub rho: f64,
    pub gamma: f64,
    pub constants: PlanConstants,
    /// End phase one early once `ln J` drops below this.
    pub phase1_log_loss_stop: Option<f64>,
    pub phase2_steps: usize,
    pub phase2_loss_floor: Option<f64>,
}

/// `h_NT = (1+24L) log(n) / (6 (6p)^{(L+1)/2} L³)`.
pub fn h_nt(n: usize, p: usize, depth: usize) -> f64 {
    let l = depth as f64;
    (1.0 + 24.0 * l) * (n as f64).ln() / (6.0 * (6.0 * p as f64).powf((l + 1.0) / 2.0) * l.powi(3))
}

/// `ρ = c1/(√p γ) · [√log(n/δ) + log(6 n^{2+24L})]`.
pub fn ball_radius(n: usize, p: usize, depth: usize, gamma: f64, c: &PlanConstants) -> f64 {
    let l = depth as f64;
    let n = n as f64;
    let log_term = 6f64.ln() + (2.0 + 24.0 * l) * n.ln();
    c.c1 / ((p as f64).sqrt() * gamma) * ((n / c.delta).ln().sqrt() + log_term)
}

/// `T = ⌈3(L+1) ρ² n^{2+24L} / (2 α_NT)⌉`, as a float since it overflows
/// any integer type at realistic sizes.
pub fn phase_one_horizon(n: usize, depth: usize, rho: f64, alpha_nt: f64) -> f64 {
    let l = depth as f64;
    let log_t = (3.0 * (l + 1.0) * rho * rho / (2.0 * alpha_nt)).ln() + (2.0 + 24.0 * l) * (n as f64).ln();
    log_t.exp().ceil()
}

impl PhasePlan {
    /// Plan from the closed forms; `t_steps` is the formula horizon capped
    /// by `max_phase1_steps`.
    pub fn from_theory(n: usize, p: usize, depth: usize, gamma: f64, constants: PlanConstants, max_phase1_steps: usize) -> Result<Self> {
        if !(gamma > 0.0) {
            return Err(Error::invalid("gamma", "margin must be positive"));
        }
        if n < 2 {
            return Err(Error::invalid("n", "need at least two samples"));
        }
        let alpha_nt = constants.theta / (p as f64 * (depth as f64).powi(5));
        let rho = ball_radius(n, p, depth, gamma, &constants);
        let t_formula = phase_one_horizon(n, depth, rho, alpha_nt);
        let t_steps = if t_formula < max_phase1_steps as f64 { t_formula as usize } else { max_phase1_steps };
        Ok(Self {
            alpha_nt,
            t_formula,
            t_steps: t_steps.max(1),
            alpha_phase2: None,
            h_nt: h_nt(n, p, depth),
            rho,
            gamma,
            constants,
            phase1_log_loss_stop: None,
            phase2_steps: 0,
            phase2_loss_floor: None,
        })
    }

    fn validate(&self) -> Result<()> {
        if !(self.alpha_nt > 0.0 && self.alpha_nt.is_finite()) {
            return Err(Error::invalid("alpha_nt", "must be positive"));
        }
        if self.t_steps == 0 {
            return Err(Error::invalid("t_steps", "need at least one phase-one step"));
        }
        if let Some(a) = self.alpha_phase2 {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::invalid("alpha_phase2", "must be positive"));
            }
        }
        Ok(())
    }
}

/// Both phases of a two-phase run.
#[derive(Clone, Debug)]
pub struct TwoPhaseLog {
    pub phase1: Segment,
    pub phase2: Segment,
    /// Phase-local step at which phase two starts (the phase-one argmin).
    pub restart_t: usize,
    pub phase2_alpha: f64,
    /// Monitor context used in phase two.
    pub phase2_context: MonitorContext,
    /// Whether the phase-two step came from the theory cap.
    pub phase2_alpha_from_theory: bool,
}

impl TwoPhaseLog {
    pub fn records(&self) -> impl Iterator<Item = &StepRecord> {
        self.phase1.records.iter().chain(&self.phase2.records)
    }

    pub fn summary(&self) -> Vec<InvariantVerdict> {
        summarize(&self.records().cloned().collect::<Vec<_>>())
    }
}

/// Phase one at `α_NT` for `t_steps` steps (or until the loss stop), then
/// phase two from the best phase-one iterate at the theory step size.
pub fn two_phase_train(
    v1: &WeightStack,
    act: &Activation,
    data: &Dataset,
    plan: &PhasePlan,
    tolerances: MonitorTolerances,
) -> Result<TwoPhaseLog> {
    plan.validate()?;
    let n = data.len();
    let h = act.h();
    let j1 = evaluate(v1, act, data)?.loss;
    let ctx1 = context_for(v1, j1, n, h, plan.alpha_nt, None, tolerances)?;
    let phase1 = monitored_descent(
        v1,
        act,
        data,
        &DescentPlan {
            alpha: plan.alpha_nt,
            max_steps: plan.t_steps,
            loss_floor: None,
            log_loss_stop: plan.phase1_log_loss_stop,
            phase: 1,
            step_offset: 0,
            ctx: &ctx1,
        },
    )?;

    let start = &phase1.best_weights;
    let j_start = phase1.best_loss;
    let norm = start.frobenius_norm();
    let theory_alpha = if j_start.log_value < 0.0 {
        let h_max = compute_h_max(j_start, start.width(), start.depth(), norm)?;
        let terms = alpha_max_terms(h.min(h_max), j_start, start.width(), start.depth(), norm);
        Some(terms.min())
    } else {
        None
    };
    let (alpha2, from_theory) = match (plan.alpha_phase2, theory_alpha) {
        (Some(a), _) => (a, false),
        (None, Some(a)) if a.is_finite() && a > 0.0 => (a, true),
        _ => {
            log::warn!("phase-two start is outside the small-loss regime; keeping the phase-one step");
            (plan.alpha_nt, false)
        }
    };
    let q = if j_start.log_value < 0.0 {
        Some(compute_q_tilde(alpha2, j_start, start.depth(), norm)?)
    } else {
        None
    };
    let ctx2 = context_for(start, j_start, n, h, alpha2, q, tolerances)?;
    let phase2 = monitored_descent(
        start,
        act,
        data,
        &DescentPlan {
            alpha: alpha2,
            max_steps: plan.phase2_steps,
            loss_floor: plan.phase2_loss_floor,
            log_loss_stop: None,
            phase: 2,
            step_offset: phase1.records.len(),
            ctx: &ctx2,
        },
    )?;
    Ok(TwoPhaseLog {
        restart_t: phase1.best_t,
        phase1,
        phase2,
        phase2_alpha: alpha2,
        phase2_context: ctx2,
        phase2_alpha_from_theory: from_theory,
    })
}
