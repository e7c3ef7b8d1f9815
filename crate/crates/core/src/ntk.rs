//! The tangent (linearized) model around an initialization, margin
//! witnesses for its features, and sampled estimates of how far the
//! network strays from it inside a ball.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activation::{Activation, ActivationKind};
use crate::error::{Error, Result};
use crate::init::perturb_on_sphere;
use crate::linalg::{dot, WeightStack};
use crate::network::{
    accumulate_output_gradients, backprop, backprop_all, forward, logistic_loss, logistic_weight, mean_loss, Backprop,
    Dataset, LossValue,
};

/// `∇_V f_{V1}(x_s)` for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct NtkFeature(pub WeightStack);

impl NtkFeature {
    pub fn stack(&self) -> &WeightStack {
        &self.0
    }

    pub fn outer_block(&self) -> &[f64] {
        self.0.outer().row(0)
    }
}

pub fn ntk_features(v1: &WeightStack, act: &Activation, data: &Dataset) -> Result<Vec<NtkFeature>> {
    Ok(backprop_all(v1, act, data)?
        .iter()
        .enumerate()
        .map(|(s, b)| NtkFeature(b.to_stack(data.input(s))))
        .collect())
}

/// `F(x) = f_{V1}(x) + ∇f_{V1}(x)·D` with the per-sample passes at `V1`
/// cached; `D = V − V1` is the displacement.
pub struct TangentModel<'a> {
    v1: &'a WeightStack,
    data: &'a Dataset,
    passes: Vec<Backprop>,
}

impl<'a> TangentModel<'a> {
    pub fn new(v1: &'a WeightStack, act: &Activation, data: &'a Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self {
            v1,
            data,
            passes: backprop_all(v1, act, data)?,
        })
    }

    pub fn base(&self) -> &WeightStack {
        self.v1
    }

    pub fn outputs(&self, d: &WeightStack) -> Vec<f64> {
        self.passes
            .iter()
            .enumerate()
            .map(|(s, b)| b.trace.output + b.directional(self.data.input(s), d))
            .collect()
    }

    /// Mean logistic loss of `F` at displacement `d`.
    pub fn loss(&self, d: &WeightStack) -> LossValue {
        let losses: Vec<LossValue> = self
            .outputs(d)
            .iter()
            .zip(self.data.labels())
            .map(|(f, y)| logistic_loss(y * f))
            .collect();
        mean_loss(&losses).expect("dataset is nonempty")
    }

    pub fn loss_and_gradient(&self, d: &WeightStack) -> Result<(LossValue, WeightStack)> {
        let margins: Vec<f64> = self.outputs(d).iter().zip(self.data.labels()).map(|(f, y)| f * y).collect();
        let losses: Vec<LossValue> = margins.iter().map(|&z| logistic_loss(z)).collect();
        let n = self.data.len() as f64;
        let coeffs: Vec<f64> = margins
            .iter()
            .zip(self.data.labels())
            .map(|(&z, y)| -y * logistic_weight(z) / n)
            .collect();
        let grad = accumulate_output_gradients(&self.passes, self.data, &coeffs, self.v1.depth())?;
        Ok((mean_loss(&losses)?, grad))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WitnessConstruction {
    ClusteredExplicit,
    SubgradientEstimate,
}

/// A unit-norm direction and the margin `min_s y_s (∇f(x_s)·W) / √p` it achieves.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginWitness {
    pub w_star: WeightStack,
    pub gamma: f64,
    pub construction: WitnessConstruction,
}

/// `min_s y_s (feature_s · W) / (√p ‖W‖)`.
pub fn feature_margin(features: &[NtkFeature], labels: &[f64], w: &WeightStack) -> Result<f64> {
    let norm = w.frobenius_norm();
    let p = w.width() as f64;
    let mut worst = f64::INFINITY;
    for (f, y) in features.iter().zip(labels) {
        worst = worst.min(y * f.0.dot(w)?);
    }
    Ok(worst / (p.sqrt() * norm))
}

/// Explicit witness for two-layer Huberized networks on clustered data:
/// neurons with moderate outer weight and a pre-activation on `μ` at least
/// `4h` away from zero point along `sign(V_2,i) μ`; the outer row is zero.
pub fn margin_witness_clustered(v1: &WeightStack, act: &Activation, mu: &[f64], data: &Dataset) -> Result<MarginWitness> {
    if v1.depth() != 1 {
        return Err(Error::Precondition("explicit witness needs a single hidden layer".into()));
    }
    if act.kind() != ActivationKind::Huberized {
        return Err(Error::Precondition("explicit witness needs the Huberized activation".into()));
    }
    let p = v1.width();
    if mu.len() != p {
        return Err(Error::DimensionMismatch { expected: p, got: mu.len() });
    }
    let h = act.h();
    let h_cap = std::f64::consts::PI.sqrt() / (2.0 * p as f64);
    if h > h_cap {
        return Err(Error::Precondition(format!("need h <= sqrt(pi)/(2p) = {h_cap:e}, got {h:e}")));
    }
    let first = &v1.hidden()[0];
    let outer = v1.outer().row(0);
    let mut members = Vec::new();
    for i in 0..p {
        let a = outer[i].abs();
        if !(0.5..=2.0).contains(&a) {
            continue;
        }
        let proj = dot(first.row(i), mu);
        if proj >= 4.0 * h || -proj >= 4.0 * h {
            members.push(i);
        }
    }
    if members.is_empty() {
        return Err(Error::Degenerate("no neuron qualifies for the margin witness".into()));
    }
    let scale = 1.0 / (members.len() as f64).sqrt();
    let mut w = WeightStack::zeros(p, 1);
    for &i in &members {
        let sign = outer[i].signum();
        let row = w.layer_mut(0).row_mut(i);
        row.iter_mut().zip(mu).for_each(|(r, m)| *r = sign * m * scale);
    }
    let features = ntk_features(v1, act, data)?;
    let gamma = feature_margin(&features, data.labels(), &w)?;
    Ok(MarginWitness {
        w_star: w,
        gamma,
        construction: WitnessConstruction::ClusteredExplicit,
    })
}

/// Projected subgradient ascent of the normalized feature margin on the
/// unit sphere, started from the normalized `Σ y_s feature_s`. Returns the
/// best iterate seen; its margin is re-evaluated exactly.
pub fn margin_estimate_subgradient(features: &[NtkFeature], labels: &[f64], iters: usize, step: f64) -> Result<MarginWitness> {
    if features.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if features.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: features.len(), got: labels.len() });
    }
    if iters == 0 {
        return Err(Error::invalid("iters", "need at least one iteration"));
    }
    let shape = features[0].stack();
    let (p, depth) = (shape.width(), shape.depth());
    let flats: Vec<Vec<f64>> = features.iter().map(|f| f.0.to_flat()).collect();
    let norms: Vec<f64> = flats.iter().map(|f| dot(f, f).sqrt()).collect();
    let normalize = |w: &mut Vec<f64>| {
        let n = dot(w, w).sqrt();
        if n > 0.0 {
            w.iter_mut().for_each(|v| *v /= n);
        }
    };
    let mut w = vec![0.0; flats[0].len()];
    for (f, y) in flats.iter().zip(labels) {
        w.iter_mut().zip(f).for_each(|(a, b)| *a += y * b);
    }
    normalize(&mut w);
    if w.iter().all(|&v| v == 0.0) {
        w = flats[0].iter().map(|v| labels[0] * v).collect();
        normalize(&mut w);
    }
    let margin_of = |w: &[f64]| -> (f64, usize) {
        let mut worst = (f64::INFINITY, 0);
        for (s, (f, y)) in flats.iter().zip(labels).enumerate() {
            let m = y * dot(f, w);
            if m < worst.0 {
                worst = (m, s);
            }
        }
        worst
    };
    let mut best = w.clone();
    let mut best_margin = margin_of(&w).0;
    for k in 0..iters {
        let (_, s) = margin_of(&w);
        if norms[s] == 0.0 {
            break;
        }
        let eta = step / ((k + 1) as f64).sqrt();
        let coef = eta * labels[s] / norms[s];
        w.iter_mut().zip(&flats[s]).for_each(|(a, b)| *a += coef * b);
        normalize(&mut w);
        let m = margin_of(&w).0;
        if m > best_margin {
            best_margin = m;
            best.clone_from(&w);
        }
    }
    let w_star = WeightStack::from_flat(p, depth, &best)?;
    let gamma = feature_margin(features, labels, &w_star)?;
    Ok(MarginWitness {
        w_star,
        gamma,
        construction: WitnessConstruction::SubgradientEstimate,
    })
}

/// Projected descent over the per-layer ball of radius `rho` around `V1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NtBallConfig {
    pub rho: f64,
    pub steps: usize,
    pub step_size: f64,
}

#[derive(Clone, Debug)]
pub struct NtMinimum {
    pub v_star: WeightStack,
    pub eps_nt: f64,
    /// Objective after each accepted iteration, starting with the initial point.
    pub history: Vec<f64>,
}

/// Scales each layer of `d` back into the Frobenius ball of radius `rho`.
fn project_layers(d: &mut WeightStack, rho: f64) {
    for m in d.layers_mut() {
        let norm = m.frobenius_norm();
        if norm > rho {
            let s = if rho == 0.0 { 0.0 } else { rho / norm };
            m.as_mut_slice().iter_mut().for_each(|v| *v *= s);
        }
    }
}

pub fn nt_class_minimize(v1: &WeightStack, act: &Activation, data: &Dataset, cfg: &NtBallConfig) -> Result<NtMinimum> {
    let model = TangentModel::new(v1, act, data)?;
    let start = WeightStack::zeros(v1.width(), v1.depth());
    nt_class_minimize_from(&model, start, cfg)
}

/// As [`nt_class_minimize`], starting from the displacement `start`
/// (projected into the ball first).
pub fn nt_class_minimize_from(model: &TangentModel<'_>, mut d: WeightStack, cfg: &NtBallConfig) -> Result<NtMinimum> {
    if !(cfg.rho >= 0.0 && cfg.rho.is_finite()) {
        return Err(Error::invalid("rho", "must be nonnegative"));
    }
    if !(cfg.step_size > 0.0) {
        return Err(Error::invalid("step_size", "must be positive"));
    }
    project_layers(&mut d, cfg.rho);
    let (mut obj, mut grad) = model.loss_and_gradient(&d)?;
    let mut history = vec![obj.value];
    let mut eta = cfg.step_size;
    if cfg.rho > 0.0 {
        for _ in 0..cfg.steps {
            let mut accepted = false;
            for _ in 0..60 {
                let mut trial = d.axpy(-eta, &grad)?;
                project_layers(&mut trial, cfg.rho);
                let (trial_obj, trial_grad) = model.loss_and_gradient(&trial)?;
                if trial_obj.value <= obj.value {
                    d = trial;
                    obj = trial_obj;
                    grad = trial_grad;
                    accepted = true;
                    // Let the step recover after successful moves.
                    eta = (eta * 1.5).min(cfg.step_size);
                    break;
                }
                eta *= 0.5;
            }
            if !accepted {
                break;
            }
            history.push(obj.value);
        }
    }
    let v_star = model.base().axpy(1.0, &d)?;
    Ok(NtMinimum {
        v_star,
        eps_nt: obj.value,
        history,
    })
}

/// Runs [`nt_class_minimize`] over increasing radii, warm-starting each
/// radius from the previous minimizer so the results are nested.
pub fn nt_class_sweep(v1: &WeightStack, act: &Activation, data: &Dataset, radii: &[f64], steps: usize, step_size: f64) -> Result<Vec<NtMinimum>> {
    if radii.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("radii", "must be nondecreasing"));
    }
    let model = TangentModel::new(v1, act, data)?;
    let mut start = WeightStack::zeros(v1.width(), v1.depth());
    let mut out = Vec::with_capacity(radii.len());
    for &rho in radii {
        let m = nt_class_minimize_from(&model, start, &NtBallConfig { rho, steps, step_size })?;
        start = m.v_star.sub(v1)?;
        out.push(m);
    }
    Ok(out)
}

/// Sampled lower estimate of the worst first-order Taylor remainder
/// `|f_{V̂} − f_{Ṽ} − ∇f_{Ṽ}·(V̂ − Ṽ)|` over pairs on the per-layer sphere
/// of radius `tau` around `V1`, maximized over samples.
pub fn approx_error_sample(v1: &WeightStack, act: &Activation, data: &Dataset, tau: f64, k_pairs: usize, seed: u64) -> Result<f64> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(Error::invalid("tau", "must be nonnegative"));
    }
    if k_pairs == 0 {
        return Err(Error::invalid("k_pairs", "need at least one pair"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..k_pairs {
        let v_hat = perturb_on_sphere(v1, tau, &mut rng);
        let v_tilde = perturb_on_sphere(v1, tau, &mut rng);
        let diff = v_hat.sub(&v_tilde)?;
        for s in 0..data.len() {
            let x = data.input(s);
            let at_tilde = backprop(&v_tilde, act, x)?;
            let f_hat = forward(&v_hat, act, x)?.output;
            let remainder = f_hat - at_tilde.trace.output - at_tilde.directional(x, &diff);
            worst = worst.max(remainder.abs());
        }
    }
    Ok(worst)
}

/// Sampled lower estimate of `max_{s,ℓ} ‖∇_{V_ℓ} f_V(x_s)‖` over the ball;
/// `V1` itself is always included, and is the only point when `tau = 0`.
pub fn gamma_bound(v1: &WeightStack, act: &Activation, data: &Dataset, tau: f64, samples: usize, seed: u64) -> Result<f64> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(Error::invalid("tau", "must be nonnegative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extra = if tau == 0.0 { 0 } else { samples };
    let mut worst = 0.0_f64;
    for k in 0..=extra {
        let v = if k == 0 { v1.clone() } else { perturb_on_sphere(v1, tau, &mut rng) };
        for s in 0..data.len() {
            let b = backprop(&v, act, data.input(s))?;
            let m = b.layer_grad_norms(data.input(s)).into_iter().fold(0.0, f64::max);
            worst = worst.max(m);
        }
    }
    Ok(worst)
}

/// Quantities entering the average-loss inequality for a descent segment
/// of `T = losses.len()` steps at constant step size `alpha`.
#[derive(Clone, Copy, Debug)]
pub struct AverageLossInputs<'a> {
    /// `J(V^{(t)})` for `t = 1..=T`.
    pub losses: &'a [f64],
    pub alpha: f64,
    pub v1: &'a WeightStack,
    /// Minimizer of the tangent loss over the `rho`-ball.
    pub v_star: &'a WeightStack,
    /// `V^{(T+1)}`.
    pub v_final: &'a WeightStack,
    /// `max_ℓ ‖V_ℓ^{(t)} − V_ℓ^{(1)}‖` over the segment.
    pub max_layer_distance: f64,
    pub tau: f64,
    pub eps_nt: f64,
    /// Estimate of the approximation error over the `tau`-ball.
    pub eps_app: f64,
}

/// Outcome of the average-loss inequality
/// `(1/T) Σ J(V^{(t)}) ≤ (‖V^{(1)}−V*‖² + 2Tα ε_NT) / (Tα (3/2 − 4 ε_app))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AverageLossCheck {
    pub steps: usize,
    pub average_loss: f64,
    /// Right-hand side; NaN when `eps_app ≥ 3/8`.
    pub bound: f64,
    /// Right-hand side with `‖V^{(T+1)}−V*‖²` subtracted in the numerator.
    pub bound_with_final: f64,
    pub start_distance_sq: f64,
    pub eps_nt: f64,
    pub eps_app: f64,
    pub iterates_in_ball: bool,
    pub minimizer_in_ball: bool,
}

impl AverageLossCheck {
    /// Whether every hypothesis that can be checked holds.
    pub fn applicable(&self) -> bool {
        self.iterates_in_ball && self.minimizer_in_ball && self.eps_app < 0.375
    }

    /// The inequality's outcome, or `None` when it does not apply.
    pub fn holds(&self) -> Option<bool> {
        self.applicable().then(|| self.average_loss <= self.bound)
    }
}

pub fn average_loss_check(inp: &AverageLossInputs<'_>) -> Result<AverageLossCheck> {
    if inp.losses.is_empty() {
        return Err(Error::invalid("losses", "need at least one step"));
    }
    if !(inp.alpha > 0.0 && inp.tau >= 0.0) {
        return Err(Error::invalid("alpha/tau", "step must be positive and radius nonnegative"));
    }
    let t = inp.losses.len() as f64;
    let average_loss = inp.losses.iter().sum::<f64>() / t;
    let start = inp.v1.sub(inp.v_star)?;
    let start_distance_sq = start.dot(&start)?;
    let end = inp.v_final.sub(inp.v_star)?;
    let end_distance_sq = end.dot(&end)?;
    let denom = t * inp.alpha * (1.5 - 4.0 * inp.eps_app);
    let (bound, bound_with_final) = if inp.eps_app < 0.375 {
        let shared = 2.0 * t * inp.alpha * inp.eps_nt;
        ((start_distance_sq + shared) / denom, (start_distance_sq - end_distance_sq + shared) / denom)
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(AverageLossCheck {
        steps: inp.losses.len(),
        average_loss,
        bound,
        bound_with_final,
        start_distance_sq,
        eps_nt: inp.eps_nt,
        eps_app: inp.eps_app,
        iterates_in_ball: inp.max_layer_distance <= inp.tau,
        minimizer_in_ball: inp.v_star.max_layer_distance(inp.v1)? <= inp.tau,
    })
}
