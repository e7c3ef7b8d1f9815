//! Experiment configuration, small-loss initialization, and the `run`
//! driver that writes `trajectory.csv` and `summary.json`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::activation::{certify_h_smooth, Activation, ActivationKind, GridSpec};
use crate::bounds::{
    compute_h_max, compute_q_tilde, grad_upper_bound, loss_threshold_log, product_norm_bound, summarize,
    InvariantVerdict, MonitorTolerances, StepRecord, TheoryConstants, Verdict,
};
use crate::error::{Error, Result};
use crate::init::{
    gaussian_init, init_diagnostics, make_clustered_dataset, ClusteredDataSpec, DiagnosticRanges, InitDiagnostics,
    InitSpec,
};
use crate::linalg::{operator_norm, WeightStack, OP_NORM_MAX_ITERS, OP_NORM_REL_TOL};
use crate::network::{evaluate, forward, gd_step, total_loss, Dataset, LossValue};
use crate::ntk::{margin_estimate_subgradient, ntk_features};
use crate::oracles::{fd_compare, fd_gradient, FdConfig, FD_ABS_FLOOR, FD_REL_TOL};
use crate::trajectory::{
    context_for, h_nt, monitored_descent, two_phase_train, DescentPlan, PhasePlan, PlanConstants, Segment,
};

/// Column order of `trajectory.csv`.
pub const CSV_COLUMNS: [&str; 14] = [
    "t",
    "J",
    "logJ",
    "grad_norm",
    "weight_norm",
    "lower_bound",
    "upper_bound",
    "rate_bound",
    "i1",
    "i2",
    "i3",
    "descent_ok",
    "alignment_ok",
    "phase",
];

/// A number, or the string `"auto"` for a value resolved at run time.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum AutoOr {
    #[default]
    Auto,
    Value(f64),
}

impl AutoOr {
    pub fn value(&self) -> Option<f64> {
        match self {
            AutoOr::Auto => None,
            AutoOr::Value(v) => Some(*v),
        }
    }
}

impl Serialize for AutoOr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            AutoOr::Auto => s.serialize_str("auto"),
            AutoOr::Value(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for AutoOr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct Visitor;
        impl de::Visitor<'_> for Visitor {
            type Value = AutoOr;

            fn expecting(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str("a number or \"auto\"")
            }

            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<AutoOr, E> {
                if v == "auto" {
                    Ok(AutoOr::Auto)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<AutoOr, E> {
                Ok(AutoOr::Value(v))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<AutoOr, E> {
                Ok(AutoOr::Value(v as f64))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<AutoOr, E> {
                Ok(AutoOr::Value(v as f64))
            }
        }
        d.deserialize_any(Visitor)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Theorem31,
    Theorem32,
    Diagnostics,
    PropertySuite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub p: usize,
    #[serde(rename = "L")]
    pub depth: usize,
    pub activation: ActivationKind,
    #[serde(default)]
    pub h: AutoOr,
    /// Upper limit on an automatically chosen `h`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_cap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineSample {
    pub x: Vec<f64>,
    pub y: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusteredConfig {
    pub n: usize,
    pub r: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<Vec<f64>>,
    #[serde(default)]
    pub allow_wide_clusters: bool,
}

/// Exactly one of the three sources must be given.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inline: Option<Vec<InlineSample>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clustered: Option<ClusteredConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    /// Plain gradient descent steps before instrumentation starts.
    pub warmup_steps: usize,
    pub warmup_alpha: f64,
    /// Smoothing width during warmup; the run's `h` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup_h: Option<f64>,
    /// End warmup early once the loss is at or below this value.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup_target_loss: Option<f64>,
    /// Loss the outer-layer scaling aims for; `auto` is `0.5 / n^{1+24L}`.
    pub target_loss: AutoOr,
    /// Whether to scale the outer layer to reach `target_loss`.
    pub scale_outer: bool,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            warmup_steps: 0,
            warmup_alpha: 0.5,
            warmup_h: None,
            warmup_target_loss: None,
            target_loss: AutoOr::Auto,
            scale_outer: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub alpha: AutoOr,
    /// Factor applied to the resolved step size (negative controls).
    pub alpha_multiplier: f64,
    #[serde(rename = "Q")]
    pub q: AutoOr,
    pub max_steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_floor: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            alpha: AutoOr::Auto,
            alpha_multiplier: 1.0,
            q: AutoOr::Auto,
            max_steps: 1000,
            loss_floor: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub init: u64,
    pub data: u64,
    pub probes: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { init: 1, data: 2, probes: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub csv: bool,
    pub json: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("boundbench-out"),
            csv: true,
            json: true,
        }
    }
}

/// Settings of the two-phase schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhasesConfig {
    pub constants: PlanConstants,
    /// Feature margin; estimated by subgradient ascent when `auto`.
    pub gamma: AutoOr,
    pub gamma_iters: usize,
    /// Cap on phase-one steps; the closed-form horizon is always logged.
    pub phase1_max_steps: usize,
    /// End phase one once `J` drops below this; `auto` is `1/n^{1+24L}`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phase1_stop_loss: Option<AutoOr>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_nt: Option<f64>,
    pub alpha_phase2: AutoOr,
    pub phase2_steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phase2_loss_floor: Option<f64>,
}

impl Default for PhasesConfig {
    fn default() -> Self {
        Self {
            constants: PlanConstants::default(),
            gamma: AutoOr::Auto,
            gamma_iters: 2000,
            phase1_max_steps: 10_000,
            phase1_stop_loss: None,
            alpha_nt: None,
            alpha_phase2: AutoOr::Auto,
            phase2_steps: 1000,
            phase2_loss_floor: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub instances: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self { instances: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub network: NetworkConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub init: InitConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub phases: PhasesConfig,
    #[serde(default)]
    pub monitor: MonitorTolerances,
    #[serde(default)]
    pub diagnostics: DiagnosticRanges,
    #[serde(default)]
    pub suite: SuiteConfig,
}

fn config_error(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_string(),
        message: message.into(),
    }
}

/// Parses and validates a JSON run configuration. `auto` fields stay
/// unresolved until [`run`].
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        config_error(&path, e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

fn positive(path: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(config_error(path, format!("must be positive and finite, got {v}")))
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.network.p == 0 {
            return Err(config_error("network.p", "width must be at least 1"));
        }
        if self.network.depth == 0 {
            return Err(config_error("network.L", "depth must be at least 1"));
        }
        if let Some(h) = self.network.h.value() {
            positive("network.h", h)?;
        }
        if let Some(c) = self.network.h_cap {
            positive("network.h_cap", c)?;
        }
        let sources = [self.data.inline.is_some(), self.data.file.is_some(), self.data.clustered.is_some()]
            .iter()
            .filter(|b| **b)
            .count();
        if sources != 1 {
            return Err(config_error("data", "give exactly one of `inline`, `file`, `clustered`"));
        }
        if let Some(c) = &self.data.clustered {
            if c.n < 2 {
                return Err(config_error("data.clustered.n", "need at least two samples"));
            }
            if !(c.r >= 0.0 && c.r < 1.0) {
                return Err(config_error("data.clustered.r", "must lie in [0, 1)"));
            }
        }
        positive("init.warmup_alpha", self.init.warmup_alpha)?;
        if let Some(h) = self.init.warmup_h {
            positive("init.warmup_h", h)?;
        }
        if let Some(t) = self.init.target_loss.value() {
            if !(t > 0.0 && t < 1.0) {
                return Err(config_error("init.target_loss", "must lie in (0, 1)"));
            }
        }
        if let Some(a) = self.optimizer.alpha.value() {
            positive("optimizer.alpha", a)?;
        }
        positive("optimizer.alpha_multiplier", self.optimizer.alpha_multiplier)?;
        if let Some(q) = self.optimizer.q.value() {
            positive("optimizer.Q", q)?;
        }
        if let Some(a) = self.phases.alpha_nt {
            positive("phases.alpha_nt", a)?;
        }
        Ok(())
    }

    /// Canonical JSON form; reparsing it yields an identical config.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Replaces all seeds with `k`, `k+1`, `k+2`.
    pub fn override_seeds(&mut self, k: u64) {
        self.seeds = Seeds {
            init: k,
            data: k.wrapping_add(1),
            probes: k.wrapping_add(2),
        };
    }

    pub fn build_dataset(&self) -> Result<Dataset> {
        let p = self.network.p;
        if let Some(samples) = &self.data.inline {
            let (inputs, labels) = samples.iter().map(|s| (s.x.clone(), s.y as f64)).unzip();
            return Dataset::new(p, inputs, labels);
        }
        if let Some(file) = &self.data.file {
            let d = Dataset::from_json_file(file)?;
            if d.p() != p {
                return Err(config_error("data.file", format!("file has p = {}, network has p = {p}", d.p())));
            }
            return Ok(d);
        }
        let c = self.data.clustered.as_ref().expect("validated");
        make_clustered_dataset(&self.clustered_spec(c))
    }

    fn clustered_spec(&self, c: &ClusteredConfig) -> ClusteredDataSpec {
        ClusteredDataSpec {
            p: self.network.p,
            n: c.n,
            r: c.r,
            mu: c.mu.clone(),
            seed: self.seeds.data,
            allow_wide_clusters: c.allow_wide_clusters,
            resample_budget: 1000,
        }
    }

    pub fn init_spec(&self) -> InitSpec {
        InitSpec {
            p: self.network.p,
            depth: self.network.depth,
            seed: self.seeds.init,
        }
    }
}

/// Plain gradient descent; stops early at `target_loss` when given.
/// Returns the final stack and whether every sample is classified correctly.
pub fn warmup(
    v0: &WeightStack,
    act: &Activation,
    data: &Dataset,
    steps: usize,
    alpha: f64,
    target_loss: Option<f64>,
) -> Result<(WeightStack, bool)> {
    let mut v = v0.clone();
    for step in 1..=steps {
        let eval = evaluate(&v, act, data)?;
        if !eval.loss.value.is_finite() {
            return Err(Error::NonFinite { step, what: "warmup loss".into() });
        }
        if target_loss.is_some_and(|t| eval.loss.value <= t) {
            break;
        }
        v = gd_step(&v, alpha, &eval.gradient)?;
    }
    let outputs: Vec<f64> = (0..data.len())
        .map(|s| forward(&v, act, data.input(s)).map(|t| t.output * data.label(s)))
        .collect::<Result<_>>()?;
    Ok((v, outputs.iter().all(|&m| m > 0.0)))
}

/// Result of [`build_small_loss_init`].
#[derive(Clone, Debug)]
pub struct SmallLossInit {
    pub weights: WeightStack,
    pub scale: f64,
    pub loss: LossValue,
}

/// Scales the outer layer by the smallest `c ≥ 1` (to bisection accuracy)
/// that brings the loss to `ln J ≤ log_target`. Since `f` is linear in the
/// outer layer every margin scales by `c`.
pub fn build_small_loss_init(v_warm: &WeightStack, data: &Dataset, act: &Activation, log_target: f64) -> Result<SmallLossInit> {
    if !(log_target < 0.0) {
        return Err(Error::invalid("target_loss", "must lie in (0, 1)"));
    }
    for s in 0..data.len() {
        let m = data.label(s) * forward(v_warm, act, data.input(s))?.output;
        if !(m > 0.0) {
            return Err(Error::Misclassified { sample: s, margin: m });
        }
    }
    let scaled = |c: f64| -> Result<(WeightStack, LossValue)> {
        let mut v = v_warm.clone();
        *v.outer_mut() = v_warm.outer().scaled(c);
        let loss = total_loss(&v, act, data)?;
        Ok((v, loss))
    };
    let (v, loss) = scaled(1.0)?;
    if loss.log_value <= log_target {
        return Ok(SmallLossInit { weights: v, scale: 1.0, loss });
    }
    let mut lo = 1.0;
    let mut hi = 2.0;
    let mut best = scaled(hi)?;
    while best.1.log_value > log_target {
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::Infeasible("outer scaling diverged".into()));
        }
        best = scaled(hi)?;
    }
    while (hi - lo) > 1e-13 * hi {
        let mid = 0.5 * (lo + hi);
        let trial = scaled(mid)?;
        if trial.1.log_value <= log_target {
            hi = mid;
            best = trial;
        } else {
            lo = mid;
        }
    }
    Ok(SmallLossInit {
        weights: best.0,
        scale: hi,
        loss: best.1,
    })
}

/// Every automatically resolved quantity of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub n: usize,
    pub h: f64,
    pub h_iterations: usize,
    pub alpha: f64,
    pub q: Option<f64>,
    pub log_target_loss: Option<f64>,
    pub outer_scale: Option<f64>,
    pub warm_classifies_all: Option<bool>,
    pub j1: Option<LossValue>,
    pub norm_v1: f64,
    pub constants: Option<TheoryConstants>,
    pub plan: Option<PhasePlan>,
    pub phase2_alpha: Option<f64>,
    pub phase2_constants: Option<TheoryConstants>,
    pub phase2_q: Option<f64>,
    pub restart_t: Option<usize>,
    pub phase1_max_layer_distance: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyResult {
    pub name: String,
    pub cases: usize,
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub final_loss: Option<LossValue>,
    pub steps: usize,
    pub invariants: Vec<InvariantVerdict>,
    pub first_violation: Option<usize>,
    pub passed: bool,
    pub wall_time_secs: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunLog {
    pub config: RunConfig,
    pub resolved: Resolved,
    #[serde(skip)]
    pub records: Vec<StepRecord>,
    /// Index of the first record of each phase after the first.
    pub phase_boundaries: Vec<usize>,
    pub summary: RunSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<InitDiagnostics>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub properties: Vec<PropertyResult>,
}

impl RunLog {
    pub fn passed(&self) -> bool {
        self.summary.passed
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:e}")
}

/// One line per record, in [`CSV_COLUMNS`] order.
pub fn trajectory_csv(records: &[StepRecord]) -> String {
    let mut out = CSV_COLUMNS.join(",");
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.step,
            fmt_f64(r.loss.value),
            fmt_f64(r.loss.log_value),
            fmt_f64(r.grad_norm),
            fmt_f64(r.weight_norm),
            fmt_f64(r.lower_bound),
            fmt_f64(r.upper_bound),
            fmt_f64(r.rate_bound),
            r.i1.verdict,
            r.i2.verdict,
            r.i3.verdict,
            r.descent.verdict,
            r.alignment.verdict,
            r.phase
        );
    }
    out
}

fn resolve_activation(cfg: &RunConfig, h: f64) -> Result<Activation> {
    Activation::new(cfg.network.activation, h)
}

/// The initial state of a small-loss run, with `h` resolved.
#[derive(Clone, Debug)]
pub struct PreparedInit {
    pub weights: WeightStack,
    pub activation: Activation,
    pub loss: LossValue,
    pub resolved: Resolved,
}

const H_FIXED_POINT_ITERS: usize = 100;
const H_FIXED_POINT_TOL: f64 = 1e-12;

/// Warmup, outer scaling and the resolution of `h`. With `h = auto` the
/// scaling is repeated until `h = min(h_max/2, cap)` is self-consistent,
/// since `h_max` depends on the scaled stack and the stack on `h`.
pub fn prepare_small_loss_init(cfg: &RunConfig, data: &Dataset) -> Result<PreparedInit> {
    let net = &cfg.network;
    let n = data.len();
    let log_target = match cfg.init.target_loss {
        AutoOr::Auto => 0.5f64.ln() + loss_threshold_log(n, net.depth),
        AutoOr::Value(v) => v.ln(),
    };
    let cap = net.h_cap.unwrap_or(1.0);
    let warm_h = cfg.init.warmup_h.or(net.h.value()).unwrap_or(cap);
    let warm_act = resolve_activation(cfg, warm_h)?;
    let v0 = gaussian_init(&cfg.init_spec())?;
    let (v_warm, classified) = warmup(
        &v0,
        &warm_act,
        data,
        cfg.init.warmup_steps,
        cfg.init.warmup_alpha,
        cfg.init.warmup_target_loss,
    )?;
    let build = |h: f64| -> Result<(Activation, SmallLossInit)> {
        let act = resolve_activation(cfg, h)?;
        let init = if cfg.init.scale_outer {
            build_small_loss_init(&v_warm, data, &act, log_target)?
        } else {
            let loss = total_loss(&v_warm, &act, data)?;
            SmallLossInit { weights: v_warm.clone(), scale: 1.0, loss }
        };
        Ok((act, init))
    };
    let (mut act, mut init, mut iterations) = match net.h {
        AutoOr::Value(h) => {
            let (a, i) = build(h)?;
            (a, i, 0)
        }
        AutoOr::Auto => {
            let mut h = warm_h.min(cap);
            let mut state = build(h)?;
            let mut it = 0;
            loop {
                it += 1;
                let h_max = compute_h_max(state.1.loss, data.p(), net.depth, state.1.weights.frobenius_norm())?;
                let next = (h_max / 2.0).min(cap);
                if (next - h).abs() <= H_FIXED_POINT_TOL * h || it >= H_FIXED_POINT_ITERS {
                    break;
                }
                h = next;
                state = build(h)?;
            }
            (state.0, state.1, it)
        }
    };
    if iterations >= H_FIXED_POINT_ITERS {
        log::warn!("smoothing width did not settle after {iterations} rounds");
    }
    // Guard against the last rebuild drifting past h_max.
    if net.h.value().is_none() {
        let h_max = compute_h_max(init.loss, data.p(), net.depth, init.weights.frobenius_norm())?;
        if act.h() > h_max {
            let (a, i) = build(h_max / 2.0)?;
            act = a;
            init = i;
            iterations += 1;
        }
    }
    let resolved = Resolved {
        n,
        h: act.h(),
        h_iterations: iterations,
        log_target_loss: Some(log_target),
        outer_scale: Some(init.scale),
        warm_classifies_all: Some(classified),
        j1: Some(init.loss),
        norm_v1: init.weights.frobenius_norm(),
        ..Resolved::default()
    };
    Ok(PreparedInit {
        loss: init.loss,
        weights: init.weights,
        activation: act,
        resolved,
    })
}

/// Output of a small-loss run before files are written.
pub struct SmallLossRun {
    pub prepared: PreparedInit,
    pub segment: Segment,
    pub resolved: Resolved,
}

pub fn run_small_loss(cfg: &RunConfig, data: &Dataset) -> Result<SmallLossRun> {
    let prepared = prepare_small_loss_init(cfg, data)?;
    let v1 = &prepared.weights;
    let j1 = prepared.loss;
    let h = prepared.activation.h();
    let norm_v1 = v1.frobenius_norm();
    let mut resolved = prepared.resolved.clone();
    let base_alpha = match cfg.optimizer.alpha {
        AutoOr::Value(a) => a,
        AutoOr::Auto => {
            if j1.log_value >= 0.0 {
                return Err(Error::Precondition("automatic step size needs an initial loss below 1".into()));
            }
            crate::bounds::alpha_max_terms(h, j1, v1.width(), v1.depth(), norm_v1).min()
        }
    };
    let alpha = base_alpha * cfg.optimizer.alpha_multiplier;
    let q = match cfg.optimizer.q {
        AutoOr::Value(q) => Some(q),
        AutoOr::Auto if j1.log_value < 0.0 => Some(compute_q_tilde(alpha, j1, v1.depth(), norm_v1)?),
        AutoOr::Auto => None,
    };
    let ctx = context_for(v1, j1, data.len(), h, alpha, q, cfg.monitor)?;
    resolved.alpha = alpha;
    resolved.q = q;
    resolved.constants = ctx.theory;
    let segment = monitored_descent(
        v1,
        &prepared.activation,
        data,
        &DescentPlan {
            alpha,
            max_steps: cfg.optimizer.max_steps,
            loss_floor: cfg.optimizer.loss_floor,
            log_loss_stop: None,
            phase: 1,
            step_offset: 0,
            ctx: &ctx,
        },
    )?;
    Ok(SmallLossRun {
        prepared,
        segment,
        resolved,
    })
}

fn summary_of(records: &[StepRecord], final_loss: Option<LossValue>, start: Instant, extra_ok: bool) -> RunSummary {
    let invariants = summarize(records);
    let first_violation = invariants.iter().filter_map(|v| v.first_violation).min();
    let monitored_ok = invariants.iter().all(|v| v.verdict() != Verdict::Fail);
    RunSummary {
        final_loss,
        steps: records.len(),
        invariants,
        first_violation,
        passed: monitored_ok && extra_ok,
        wall_time_secs: start.elapsed().as_secs_f64(),
    }
}

fn resolve_gamma(cfg: &RunConfig, v1: &WeightStack, act: &Activation, data: &Dataset) -> Result<f64> {
    match cfg.phases.gamma {
        AutoOr::Value(g) => Ok(g),
        AutoOr::Auto => {
            let features = ntk_features(v1, act, data)?;
            let w = margin_estimate_subgradient(&features, data.labels(), cfg.phases.gamma_iters.max(1), 0.5)?;
            if !(w.gamma > 0.0) {
                return Err(Error::Degenerate(format!("feature margin estimate is {:e}", w.gamma)));
            }
            Ok(w.gamma)
        }
    }
}

fn run_two_phase(cfg: &RunConfig, data: &Dataset, start: Instant) -> Result<RunLog> {
    let net = &cfg.network;
    let n = data.len();
    let h = net.h.value().unwrap_or_else(|| h_nt(n, net.p, net.depth));
    let act = resolve_activation(cfg, h)?;
    let v1 = gaussian_init(&cfg.init_spec())?;
    let gamma = resolve_gamma(cfg, &v1, &act, data)?;
    let ph = &cfg.phases;
    let mut plan = PhasePlan::from_theory(n, net.p, net.depth, gamma, ph.constants, ph.phase1_max_steps)?;
    if let Some(a) = ph.alpha_nt {
        plan.alpha_nt = a;
    }
    plan.alpha_phase2 = ph.alpha_phase2.value();
    plan.phase1_log_loss_stop = ph.phase1_stop_loss.map(|s| match s {
        AutoOr::Auto => loss_threshold_log(n, net.depth),
        AutoOr::Value(v) => v.ln(),
    });
    plan.phase2_steps = ph.phase2_steps;
    plan.phase2_loss_floor = ph.phase2_loss_floor;
    log::info!("phase-one horizon from the closed form: {:e} steps, running {}", plan.t_formula, plan.t_steps);
    let log = two_phase_train(&v1, &act, data, &plan, cfg.monitor)?;
    let records: Vec<StepRecord> = log.records().cloned().collect();
    let resolved = Resolved {
        n,
        h,
        alpha: plan.alpha_nt,
        j1: Some(total_loss(&v1, &act, data)?),
        norm_v1: v1.frobenius_norm(),
        plan: Some(plan),
        phase2_alpha: Some(log.phase2_alpha),
        phase2_constants: log.phase2_context.theory,
        phase2_q: Some(log.phase2_context.q),
        restart_t: Some(log.restart_t),
        phase1_max_layer_distance: Some(log.phase1.max_layer_distance),
        ..Resolved::default()
    };
    let boundary = log.phase1.records.len();
    Ok(RunLog {
        summary: summary_of(&records, Some(log.phase2.final_loss), start, true),
        config: cfg.clone(),
        resolved,
        records,
        phase_boundaries: vec![boundary],
        diagnostics: None,
        properties: Vec::new(),
    })
}

fn run_diagnostics(cfg: &RunConfig, data: &Dataset, start: Instant) -> Result<RunLog> {
    let net = &cfg.network;
    let h = net.h.value().unwrap_or_else(|| h_nt(data.len(), net.p, net.depth));
    let act = resolve_activation(cfg, h)?;
    let v1 = gaussian_init(&cfg.init_spec())?;
    let diagnostics = init_diagnostics(&v1, &act, data, cfg.diagnostics)?;
    Ok(RunLog {
        config: cfg.clone(),
        resolved: Resolved {
            n: data.len(),
            h,
            norm_v1: v1.frobenius_norm(),
            ..Resolved::default()
        },
        records: Vec::new(),
        phase_boundaries: Vec::new(),
        summary: summary_of(&[], None, start, true),
        diagnostics: Some(diagnostics),
        properties: Vec::new(),
    })
}

/// Seeded spot checks of the library's invariants at the configured shape.
pub fn property_suite(cfg: &RunConfig, data: &Dataset) -> Result<Vec<PropertyResult>> {
    let net = &cfg.network;
    let h = net.h.value().unwrap_or(0.5);
    let act = resolve_activation(cfg, h)?;
    let instances = cfg.suite.instances.max(1);
    let mut out = Vec::new();

    let mut fd_worst = 0.0_f64;
    let mut upper_worst = f64::INFINITY;
    let mut upper_cases = 0;
    let mut product_worst = f64::INFINITY;
    for k in 0..instances {
        let seed = cfg.seeds.probes.wrapping_add(k as u64);
        let mut v = gaussian_init(&InitSpec { p: net.p, depth: net.depth, seed })?;
        let eval = evaluate(&v, &act, data)?;
        let fd = fd_gradient(&v, &act, data, FdConfig::default())?;
        fd_worst = fd_worst.max(fd_compare(&eval.gradient, &fd, FD_REL_TOL, FD_ABS_FLOOR)?.max_error);

        // Scale so that the norm condition of the upper bound holds.
        let floor = (net.depth as f64 + 0.5).sqrt();
        let norm = v.frobenius_norm();
        if norm < floor {
            v = v.scaled(1.01 * floor / norm);
        }
        let eval = evaluate(&v, &act, data)?;
        let norm = v.frobenius_norm();
        let ub = grad_upper_bound(eval.loss, norm, net.p, net.depth);
        upper_worst = upper_worst.min((ub - eval.gradient.frobenius_norm()) / ub);
        upper_cases += 1;

        let ops = v
            .layers()
            .map(|m| operator_norm(m, OP_NORM_REL_TOL, OP_NORM_MAX_ITERS).map(|o| o.value))
            .collect::<Result<Vec<f64>>>()?;
        let bound = product_norm_bound(norm, net.depth);
        let full: f64 = ops.iter().product();
        let single = ops.iter().copied().fold(0.0, f64::max);
        let worst_subset = full.max(single);
        product_worst = product_worst.min((bound - worst_subset) / bound);
    }
    out.push(PropertyResult {
        name: "gradient_vs_fd".into(),
        cases: instances,
        worst: fd_worst,
        tolerance: FD_REL_TOL,
        passed: fd_worst < FD_REL_TOL,
    });
    out.push(PropertyResult {
        name: "gradient_upper_bound".into(),
        cases: upper_cases,
        worst: upper_worst,
        tolerance: 1e-10,
        passed: upper_worst >= -1e-10,
    });
    out.push(PropertyResult {
        name: "product_norm_bound".into(),
        cases: instances,
        worst: product_worst,
        tolerance: 1e-10,
        passed: product_worst >= -1e-10,
    });

    let cert = certify_h_smooth(&act, &GridSpec::default())?;
    out.push(PropertyResult {
        name: "activation_certificate".into(),
        cases: cert.samples_used,
        worst: cert.max_abs_deriv.max(cert.max_lipschitz_quotient * h).max(2.0 * cert.max_taylor_gap / h),
        tolerance: 1e-9,
        passed: cert.pass,
    });

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.probes);
    let mut contraction_worst = f64::INFINITY;
    for _ in 0..instances * 100 {
        let a: Vec<f64> = (0..net.p).map(|_| 4.0 * h * (rand::Rng::gen::<f64>(&mut rng) - 0.5)).collect();
        let b: Vec<f64> = (0..net.p).map(|_| 4.0 * h * (rand::Rng::gen::<f64>(&mut rng) - 0.5)).collect();
        let d_in = crate::linalg::vec_norm(&a.iter().zip(&b).map(|(x, y)| x - y).collect::<Vec<_>>());
        let fa = act.apply(&a);
        let fb = act.apply(&b);
        let d_out = crate::linalg::vec_norm(&fa.iter().zip(&fb).map(|(x, y)| x - y).collect::<Vec<_>>());
        contraction_worst = contraction_worst.min(d_in - d_out);
    }
    out.push(PropertyResult {
        name: "contractivity".into(),
        cases: instances * 100,
        worst: contraction_worst,
        tolerance: 1e-12,
        passed: contraction_worst >= -1e-12,
    });
    Ok(out)
}

/// Executes a configuration without touching the file system.
pub fn execute(cfg: &RunConfig) -> Result<RunLog> {
    let start = Instant::now();
    cfg.validate()?;
    let data = cfg.build_dataset()?;
    match cfg.mode {
        Mode::Theorem31 => {
            let run = run_small_loss(cfg, &data)?;
            let records = run.segment.records;
            Ok(RunLog {
                summary: summary_of(&records, Some(run.segment.final_loss), start, true),
                config: cfg.clone(),
                resolved: run.resolved,
                records,
                phase_boundaries: Vec::new(),
                diagnostics: None,
                properties: Vec::new(),
            })
        }
        Mode::Theorem32 => run_two_phase(cfg, &data, start),
        Mode::Diagnostics => run_diagnostics(cfg, &data, start),
        Mode::PropertySuite => {
            let properties = property_suite(cfg, &data)?;
            let ok = properties.iter().all(|p| p.passed);
            Ok(RunLog {
                config: cfg.clone(),
                resolved: Resolved {
                    n: data.len(),
                    ..Resolved::default()
                },
                records: Vec::new(),
                phase_boundaries: Vec::new(),
                summary: summary_of(&[], None, start, ok),
                diagnostics: None,
                properties,
            })
        }
    }
}

/// Paths of the files a run wrote.
#[derive(Clone, Debug, Default)]
pub struct RunArtifacts {
    pub csv: Option<PathBuf>,
    pub json: Option<PathBuf>,
}

pub fn write_artifacts(log: &RunLog, dir: &Path) -> Result<RunArtifacts> {
    let out = &log.config.output;
    let mut artifacts = RunArtifacts::default();
    if !(out.csv || out.json) {
        return Ok(artifacts);
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if out.csv && !log.records.is_empty() {
        let path = dir.join("trajectory.csv");
        std::fs::write(&path, trajectory_csv(&log.records)).map_err(|e| Error::io(&path, e))?;
        artifacts.csv = Some(path);
    }
    if out.json {
        let path = dir.join("summary.json");
        let text = serde_json::to_string_pretty(log)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        artifacts.json = Some(path);
    }
    Ok(artifacts)
}

/// Executes a configuration and writes its artifacts to `output.dir`.
pub fn run(cfg: &RunConfig) -> Result<(RunLog, RunArtifacts)> {
    let log = execute(cfg)?;
    let artifacts = write_artifacts(&log, &cfg.output.dir)?;
    Ok((log, artifacts))
}
