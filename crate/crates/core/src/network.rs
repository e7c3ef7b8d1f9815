//! Deep network `f_V(x) = V_{L+1} φ(V_L ⋯ φ(V_1 x))`, the logistic loss and
//! its exact gradient by reverse accumulation.
//!
//! Per-sample passes may run on the rayon pool. Every reduction over
//! samples happens afterwards in sample order, so results do not depend on
//! the number of worker threads.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::{sigmoid, Activation};
use crate::error::{Error, Result};
use crate::linalg::{dot, vec_norm, Matrix, WeightStack};

/// Inputs whose norm is off by more than this are rescaled.
const RENORMALIZE_TOL: f64 = 1e-14;
/// Inputs whose norm is off by more than this trigger a warning.
const RENORMALIZE_WARN: f64 = 1e-6;
/// Above this margin the log-loss uses its asymptotic expansion.
const ASYMPTOTIC_MARGIN: f64 = 40.0;
/// Below this many flops a pass stays on the calling thread.
const PARALLEL_WORK: usize = 1 << 16;

/// Training samples on the unit sphere with labels in `{-1, +1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    p: usize,
    inputs: Vec<Vec<f64>>,
    labels: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    p: usize,
    samples: Vec<SampleFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleFile {
    x: Vec<f64>,
    y: i64,
}

impl Dataset {
    /// Validates shapes and labels and rescales inputs to unit norm.
    pub fn new(p: usize, inputs: Vec<Vec<f64>>, labels: Vec<f64>) -> Result<Self> {
        if p == 0 {
            return Err(Error::invalid("p", "width must be positive"));
        }
        if inputs.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.len(),
                got: labels.len(),
            });
        }
        let mut normalized = Vec::with_capacity(inputs.len());
        for (s, (mut x, &y)) in inputs.into_iter().zip(&labels).enumerate() {
            if x.len() != p {
                return Err(Error::DimensionMismatch {
                    expected: p,
                    got: x.len(),
                });
            }
            if y != 1.0 && y != -1.0 {
                return Err(Error::invalid("labels", format!("sample {s} has label {y}, expected ±1")));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("inputs", format!("sample {s} has a non-finite entry")));
            }
            let norm = vec_norm(&x);
            if norm == 0.0 {
                return Err(Error::invalid("inputs", format!("sample {s} is the zero vector")));
            }
            let dev = (norm - 1.0).abs();
            if dev > RENORMALIZE_WARN {
                log::warn!("sample {s} has norm {norm}; rescaling to the unit sphere");
            }
            if dev > RENORMALIZE_TOL {
                x.iter_mut().for_each(|v| *v /= norm);
            }
            normalized.push(x);
        }
        Ok(Self {
            p,
            inputs: normalized,
            labels,
        })
    }

    /// Parses `{"p": int, "samples": [{"x": [...], "y": ±1}]}`.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: DatasetFile = serde_json::from_str(text)?;
        let (inputs, labels) = file.samples.into_iter().map(|s| (s.x, s.y as f64)).unzip();
        Self::new(file.p, inputs, labels)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> String {
        let file = DatasetFile {
            p: self.p,
            samples: self
                .inputs
                .iter()
                .zip(&self.labels)
                .map(|(x, &y)| SampleFile { x: x.clone(), y: y as i64 })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("dataset serializes")
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn input(&self, s: usize) -> &[f64] {
        &self.inputs[s]
    }

    pub fn label(&self, s: usize) -> f64 {
        self.labels[s]
    }

    pub(crate) fn check_width(&self, v: &WeightStack) -> Result<()> {
        if v.width() != self.p {
            return Err(Error::DimensionMismatch {
                expected: v.width(),
                got: self.p,
            });
        }
        Ok(())
    }
}

/// Everything computed on the way from `x` to `f_V(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// Pre-activations `u_ℓ = V_ℓ x_{ℓ-1}`, one per hidden layer.
    pub u: Vec<Vec<f64>>,
    /// Post-activations `x_ℓ = φ(u_ℓ)`.
    pub x: Vec<Vec<f64>>,
    /// Diagonals of `Σ_ℓ = diag(φ'(u_ℓ))`.
    pub sigma: Vec<Vec<f64>>,
    pub output: f64,
}

impl ForwardTrace {
    /// The last hidden representation `x_L`.
    pub fn last_hidden(&self) -> &[f64] {
        self.x.last().expect("at least one hidden layer")
    }
}

/// A loss together with its natural logarithm, kept accurate for tiny losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub log_value: f64,
}

impl LossValue {
    /// `log(1/J)`, taken from the log channel.
    pub fn log_inv(&self) -> f64 {
        -self.log_value
    }
}

pub fn forward(v: &WeightStack, act: &Activation, x: &[f64]) -> Result<ForwardTrace> {
    if x.len() != v.width() {
        return Err(Error::DimensionMismatch {
            expected: v.width(),
            got: x.len(),
        });
    }
    let depth = v.depth();
    let mut us = Vec::with_capacity(depth);
    let mut xs: Vec<Vec<f64>> = Vec::with_capacity(depth);
    let mut sigmas = Vec::with_capacity(depth);
    for layer in v.hidden() {
        let prev = xs.last().map_or(x, Vec::as_slice);
        let u = layer.matvec(prev)?;
        xs.push(act.apply(&u));
        sigmas.push(act.apply_deriv(&u));
        us.push(u);
    }
    let output = dot(v.outer().row(0), xs.last().expect("depth >= 1"));
    Ok(ForwardTrace {
        u: us,
        x: xs,
        sigma: sigmas,
        output,
    })
}

/// A forward trace plus the backpropagated sensitivities `δ_ℓ = ∂f/∂u_ℓ`.
///
/// The gradient of `f` with respect to hidden layer `ℓ` is `δ_ℓ x_{ℓ-1}ᵀ`
/// and with respect to the outer row it is `x_Lᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Backprop {
    pub trace: ForwardTrace,
    pub deltas: Vec<Vec<f64>>,
}

pub fn backprop(v: &WeightStack, act: &Activation, x: &[f64]) -> Result<Backprop> {
    let trace = forward(v, act, x)?;
    let depth = v.depth();
    let mut deltas = vec![Vec::new(); depth];
    let mut delta: Vec<f64> = v
        .outer()
        .row(0)
        .iter()
        .zip(&trace.sigma[depth - 1])
        .map(|(w, s)| w * s)
        .collect();
    for l in (0..depth).rev() {
        if l > 0 {
            let back = v.hidden()[l].matvec_t(&delta)?;
            let next = back.iter().zip(&trace.sigma[l - 1]).map(|(b, s)| b * s).collect();
            deltas[l] = std::mem::replace(&mut delta, next);
        } else {
            deltas[0] = std::mem::take(&mut delta);
        }
    }
    Ok(Backprop { trace, deltas })
}

impl Backprop {
    /// Input to hidden layer `l` (0-based).
    fn layer_input<'a>(&'a self, x: &'a [f64], l: usize) -> &'a [f64] {
        if l == 0 {
            x
        } else {
            &self.trace.x[l - 1]
        }
    }

    /// `∇f·D` without materializing `∇f`.
    pub fn directional(&self, x: &[f64], d: &WeightStack) -> f64 {
        let mut acc = 0.0;
        for (l, (delta, dl)) in self.deltas.iter().zip(d.hidden()).enumerate() {
            let input = self.layer_input(x, l);
            acc += delta
                .iter()
                .enumerate()
                .map(|(r, dr)| dr * dot(dl.row(r), input))
                .sum::<f64>();
        }
        acc + dot(d.outer().row(0), self.trace.last_hidden())
    }

    /// `∇_V f(x)` as a stack.
    pub fn to_stack(&self, x: &[f64]) -> WeightStack {
        let mut out = WeightStack::zeros(x.len(), self.deltas.len());
        self.add_scaled_into(&mut out, x, 1.0);
        out
    }

    /// Per-layer Frobenius norms of `∇_V f(x)`: `‖δ_ℓ‖·‖x_{ℓ-1}‖` and `‖x_L‖`.
    pub fn layer_grad_norms(&self, x: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = (0..self.deltas.len())
            .map(|l| vec_norm(&self.deltas[l]) * vec_norm(self.layer_input(x, l)))
            .collect();
        out.push(vec_norm(self.trace.last_hidden()));
        out
    }

    fn add_scaled_into(&self, acc: &mut WeightStack, x: &[f64], c: f64) {
        let depth = self.deltas.len();
        for l in 0..depth {
            let input = self.layer_input(x, l);
            let m = acc.layer_mut(l);
            for (r, dr) in self.deltas[l].iter().enumerate() {
                let k = c * dr;
                if k != 0.0 {
                    m.row_mut(r).iter_mut().zip(input).for_each(|(a, xi)| *a += k * xi);
                }
            }
        }
        let last = self.trace.last_hidden();
        acc.outer_mut()
            .row_mut(0)
            .iter_mut()
            .zip(last)
            .for_each(|(a, xi)| *a += c * xi);
    }
}

/// Runs `f` over `0..n`, in parallel when the estimated work is large.
pub(crate) fn map_samples<T, F>(n: usize, work_per_sample: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if n > 1 && n.saturating_mul(work_per_sample) >= PARALLEL_WORK {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

fn pass_work(v: &WeightStack) -> usize {
    v.depth() * v.width() * v.width()
}

/// Backprop for every sample, in sample order.
pub fn backprop_all(v: &WeightStack, act: &Activation, data: &Dataset) -> Result<Vec<Backprop>> {
    data.check_width(v)?;
    map_samples(data.len(), pass_work(v), |s| backprop(v, act, data.input(s)))
        .into_iter()
        .collect()
}

/// `Σ_s coeffs[s] ∇f(x_s)`, accumulated in sample order for every entry.
pub fn accumulate_output_gradients(
    passes: &[Backprop],
    data: &Dataset,
    coeffs: &[f64],
    depth: usize,
) -> Result<WeightStack> {
    if passes.len() != data.len() || coeffs.len() != data.len() {
        return Err(Error::DimensionMismatch {
            expected: data.len(),
            got: coeffs.len().min(passes.len()),
        });
    }
    let p = data.p();
    let mut acc = WeightStack::zeros(p, depth);
    if data.len() * depth * p * p >= PARALLEL_WORK {
        // Rows are independent; within a row the sample order is fixed.
        for l in 0..depth {
            let m = acc.layer_mut(l);
            m.as_mut_slice()
                .par_chunks_mut(p)
                .enumerate()
                .for_each(|(r, row)| {
                    for (s, pass) in passes.iter().enumerate() {
                        let k = coeffs[s] * pass.deltas[l][r];
                        if k != 0.0 {
                            let input = pass.layer_input(data.input(s), l);
                            row.iter_mut().zip(input).for_each(|(a, xi)| *a += k * xi);
                        }
                    }
                });
        }
        let outer = acc.outer_mut().row_mut(0);
        for (s, pass) in passes.iter().enumerate() {
            outer
                .iter_mut()
                .zip(pass.trace.last_hidden())
                .for_each(|(a, xi)| *a += coeffs[s] * xi);
        }
    } else {
        for (s, pass) in passes.iter().enumerate() {
            pass.add_scaled_into(&mut acc, data.input(s), coeffs[s]);
        }
    }
    Ok(acc)
}

/// Logistic loss `ln(1 + exp(-z))` at margin `z = y f`.
pub fn logistic_loss(z: f64) -> LossValue {
    let value = if z >= 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    };
    let log_value = if z > ASYMPTOTIC_MARGIN {
        // ln ln(1 + e^{-z}) = -z + ln(1 - e^{-z}/2 + ...)
        -z + (-0.5 * (-z).exp()).ln_1p()
    } else {
        value.ln()
    };
    LossValue { value, log_value }
}

/// `g = 1/(1 + exp(z))` at margin `z = y f`.
pub fn logistic_weight(z: f64) -> f64 {
    sigmoid(-z)
}

pub fn sample_loss(v: &WeightStack, act: &Activation, x: &[f64], y: f64) -> Result<LossValue> {
    Ok(logistic_loss(y * forward(v, act, x)?.output))
}

pub fn g_factor(v: &WeightStack, act: &Activation, x: &[f64], y: f64) -> Result<f64> {
    Ok(logistic_weight(y * forward(v, act, x)?.output))
}

/// Mean of per-sample losses: left-to-right sum for the value, log-sum-exp
/// for the log channel.
pub fn mean_loss(per_sample: &[LossValue]) -> Result<LossValue> {
    if per_sample.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = per_sample.len() as f64;
    let sum: f64 = per_sample.iter().map(|l| l.value).sum();
    let max_log = per_sample.iter().map(|l| l.log_value).fold(f64::NEG_INFINITY, f64::max);
    let log_value = if max_log == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        let tail: f64 = per_sample.iter().map(|l| (l.log_value - max_log).exp()).sum();
        max_log + tail.ln() - n.ln()
    };
    Ok(LossValue {
        value: sum / n,
        log_value,
    })
}

pub fn total_loss(v: &WeightStack, act: &Activation, data: &Dataset) -> Result<LossValue> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    data.check_width(v)?;
    let losses = map_samples(data.len(), pass_work(v), |s| {
        forward(v, act, data.input(s)).map(|t| logistic_loss(data.label(s) * t.output))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    mean_loss(&losses)
}

/// Loss, gradient and per-sample quantities at one point.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: LossValue,
    pub sample_losses: Vec<LossValue>,
    pub outputs: Vec<f64>,
    pub g: Vec<f64>,
    pub gradient: WeightStack,
}

impl Evaluation {
    pub fn margins<'a>(&'a self, data: &'a Dataset) -> impl Iterator<Item = f64> + 'a {
        self.outputs.iter().zip(data.labels()).map(|(f, y)| f * y)
    }
}

/// Loss and `∇J = (1/n) Σ -y_s g_s ∇f(x_s)` in a single pass.
pub fn evaluate(v: &WeightStack, act: &Activation, data: &Dataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let passes = backprop_all(v, act, data)?;
    let outputs: Vec<f64> = passes.iter().map(|b| b.trace.output).collect();
    let margins: Vec<f64> = outputs.iter().zip(data.labels()).map(|(f, y)| f * y).collect();
    let sample_losses: Vec<LossValue> = margins.iter().map(|&z| logistic_loss(z)).collect();
    let g: Vec<f64> = margins.iter().map(|&z| logistic_weight(z)).collect();
    let coeffs: Vec<f64> = g.iter().zip(data.labels()).map(|(g, y)| -y * g).collect();
    let mut gradient = accumulate_output_gradients(&passes, data, &coeffs, v.depth())?;
    gradient.scale_in_place(1.0 / data.len() as f64);
    Ok(Evaluation {
        loss: mean_loss(&sample_losses)?,
        sample_losses,
        outputs,
        g,
        gradient,
    })
}

pub fn gradient(v: &WeightStack, act: &Activation, data: &Dataset) -> Result<WeightStack> {
    Ok(evaluate(v, act, data)?.gradient)
}

/// `V - alpha * grad`.
pub fn gd_step(v: &WeightStack, alpha: f64, grad: &WeightStack) -> Result<WeightStack> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::invalid("alpha", format!("step size must be positive, got {alpha}")));
    }
    v.axpy(-alpha, grad)
}

/// Upper bound `∏ ‖V_j‖_op` on `|f_V(x)|` for unit `x`.
pub fn output_lipschitz_bound(v: &WeightStack) -> Result<f64> {
    Ok(v.norms()?.per_layer_operator.iter().product())
}

/// Builds a stack from explicit hidden matrices and an outer row.
pub fn stack_from_parts(hidden: Vec<Matrix>, outer: Vec<f64>) -> Result<WeightStack> {
    let p = outer.len();
    WeightStack::new(hidden, Matrix::from_vec(1, p, outer)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar_net(v1: f64, v2: f64) -> WeightStack {
        stack_from_parts(vec![Matrix::from_vec(1, 1, vec![v1]).unwrap()], vec![v2]).unwrap()
    }

    #[test]
    fn scalar_forward_example() {
        let act = Activation::huberized(1.0).unwrap();
        let t = forward(&scalar_net(2.0, 1.0), &act, &[1.0]).unwrap();
        assert_eq!(t.u[0], vec![2.0]);
        assert_eq!(t.x[0], vec![1.5]);
        assert_eq!(t.output, 1.5);
    }

    #[test]
    fn scalar_gradient_by_hand() {
        // f = v2 φ(v1), J = ln(1 + e^{-f}), dJ/df = -g
        let act = Activation::huberized(1.0).unwrap();
        let data = Dataset::new(1, vec![vec![1.0]], vec![1.0]).unwrap();
        let grad = gradient(&scalar_net(2.0, 1.0), &act, &data).unwrap();
        let g = 1.0 / (1.0 + 1.5_f64.exp());
        assert_relative_eq!(grad.hidden()[0].get(0, 0), -g * 1.0 * 1.0, epsilon = 1e-15);
        assert_relative_eq!(grad.outer().get(0, 0), -g * 1.5, epsilon = 1e-15);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let act = Activation::swish(0.5).unwrap();
        let v = WeightStack::zeros(3, 2);
        let t = forward(&v, &act, &[0.6, 0.8, 0.0]).unwrap();
        assert_eq!(t.output, 0.0);
        assert!(t.x.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn loss_special_values() {
        assert_relative_eq!(logistic_loss(0.0).value, std::f64::consts::LN_2, epsilon = 1e-16);
        let big = logistic_loss(50.0);
        assert_relative_eq!(big.log_value, -50.0, epsilon = 1e-15);
        assert_relative_eq!(big.value, (-50.0_f64).exp(), max_relative = 1e-15);
        assert_relative_eq!(logistic_loss(-10.0).value, 10.000045398899218, max_relative = 1e-15);
        assert_eq!(logistic_weight(0.0), 0.5);
        assert_eq!(logistic_weight(1e4), 0.0);
    }

    #[test]
    fn mean_of_two() {
        let a = logistic_loss(0.3);
        let b = logistic_loss(-1.2);
        let m = mean_loss(&[a, b]).unwrap();
        assert_eq!(m.value, (a.value + b.value) / 2.0);
        assert_relative_eq!(m.log_value.exp(), m.value, max_relative = 1e-14);
    }

    #[test]
    fn empty_dataset_rejected() {
        let act = Activation::swish(1.0).unwrap();
        let data = Dataset::new(2, vec![], vec![]).unwrap();
        assert!(matches!(total_loss(&WeightStack::zeros(2, 1), &act, &data), Err(Error::EmptyDataset)));
    }

    #[test]
    fn dataset_normalizes_and_validates() {
        let d = Dataset::new(2, vec![vec![3.0, 4.0]], vec![-1.0]).unwrap();
        assert_eq!(d.input(0), &[0.6, 0.8]);
        assert!(Dataset::new(2, vec![vec![1.0, 0.0]], vec![0.0]).is_err());
        assert!(Dataset::new(2, vec![vec![1.0]], vec![1.0]).is_err());
        assert!(Dataset::new(2, vec![vec![0.0, 0.0]], vec![1.0]).is_err());
    }

    #[test]
    fn dataset_json_round_trip() {
        let d = Dataset::new(2, vec![vec![1.0, 0.0], vec![0.0, -1.0]], vec![1.0, -1.0]).unwrap();
        let back = Dataset::from_json_str(&d.to_json_string()).unwrap();
        assert_eq!(d, back);
        assert!(Dataset::from_json_str(r#"{"p":2,"samples":[{"x":[1,0],"y":2}]}"#).is_err());
    }

    #[test]
    fn gd_step_rules() {
        let v = scalar_net(1.0, 2.0);
        let g = scalar_net(0.5, -1.0);
        let next = gd_step(&v, 0.1, &g).unwrap();
        assert_eq!(next.outer().get(0, 0), 2.1);
        assert!(gd_step(&v, 0.0, &g).is_err());
        assert_eq!(gd_step(&v, 0.3, &WeightStack::zeros(1, 1)).unwrap(), v);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let act = Activation::swish(1.0).unwrap();
        assert!(forward(&WeightStack::zeros(3, 1), &act, &[1.0]).is_err());
    }
}
