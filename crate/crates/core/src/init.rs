//! Random initialization, clustered synthetic data and concentration
//! diagnostics for wide random networks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::linalg::{operator_norm, vec_norm, WeightStack, OP_NORM_MAX_ITERS};
use crate::network::{forward, map_samples, Dataset};

/// Widths below this are outside the wide regime the diagnostics assume.
pub const WIDE_REGIME_MIN_WIDTH: usize = 256;
/// Largest cluster radius allowed without an explicit override.
pub const MAX_CLUSTER_RADIUS: f64 = 1.0 / 16.0;
/// Power-iteration tolerance for the operator norms in [`init_diagnostics`].
pub const DIAGNOSTIC_OP_NORM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub p: usize,
    pub depth: usize,
    pub seed: u64,
}

impl InitSpec {
    pub fn hidden_variance(&self) -> f64 {
        2.0 / self.p as f64
    }

    pub fn outer_variance(&self) -> f64 {
        1.0
    }
}

/// Hidden entries from `N(0, 2/p)`, outer entries from `N(0, 1)`, drawn in
/// layer order from a single seeded stream.
pub fn gaussian_init(spec: &InitSpec) -> Result<WeightStack> {
    if spec.p == 0 || spec.depth == 0 {
        return Err(Error::invalid("init", "width and depth must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let hidden = Normal::new(0.0, spec.hidden_variance().sqrt()).expect("positive variance");
    let mut v = WeightStack::zeros(spec.p, spec.depth);
    for l in 0..spec.depth {
        for w in v.layer_mut(l).as_mut_slice() {
            *w = hidden.sample(&mut rng);
        }
    }
    for w in v.outer_mut().as_mut_slice() {
        *w = StandardNormal.sample(&mut rng);
    }
    Ok(v)
}

fn unit_gaussian(p: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let z: Vec<f64> = (0..p).map(|_| StandardNormal.sample(rng)).collect();
        let norm = vec_norm(&z);
        if norm > 0.0 {
            return z.into_iter().map(|v| v / norm).collect();
        }
    }
}

/// Two antipodal clusters around `±μ` on the unit sphere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusteredDataSpec {
    pub p: usize,
    pub n: usize,
    pub r: f64,
    /// Cluster direction; drawn from the seed when absent.
    #[serde(default)]
    pub mu: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
    /// Permit `r > 1/16` (logged as a warning).
    #[serde(default)]
    pub allow_wide_clusters: bool,
    #[serde(default = "default_resample_budget")]
    pub resample_budget: usize,
}

fn default_resample_budget() -> usize {
    1000
}

impl ClusteredDataSpec {
    pub fn new(p: usize, n: usize, r: f64, seed: u64) -> Self {
        Self {
            p,
            n,
            r,
            mu: None,
            seed,
            allow_wide_clusters: false,
            resample_budget: default_resample_budget(),
        }
    }

    /// The cluster direction, normalized.
    pub fn direction(&self) -> Result<Vec<f64>> {
        match &self.mu {
            Some(mu) => {
                if mu.len() != self.p {
                    return Err(Error::DimensionMismatch {
                        expected: self.p,
                        got: mu.len(),
                    });
                }
                let norm = vec_norm(mu);
                if !(norm > 0.0 && norm.is_finite()) {
                    return Err(Error::invalid("mu", "must be a nonzero finite vector"));
                }
                Ok(mu.iter().map(|v| v / norm).collect())
            }
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                Ok(unit_gaussian(self.p, &mut rng))
            }
        }
    }
}

/// Samples alternate labels `+1, −1, …`; each input is `±μ` plus a random
/// perturbation of norm at most `r`, renormalized and re-checked.
pub fn make_clustered_dataset(spec: &ClusteredDataSpec) -> Result<Dataset> {
    if spec.p == 0 {
        return Err(Error::invalid("p", "must be positive"));
    }
    if spec.n < 2 {
        return Err(Error::invalid("n", "need at least two samples so both labels appear"));
    }
    if !(spec.r >= 0.0 && spec.r < 1.0) {
        return Err(Error::invalid("r", format!("must lie in [0, 1), got {}", spec.r)));
    }
    if spec.r > MAX_CLUSTER_RADIUS {
        if !spec.allow_wide_clusters {
            return Err(Error::invalid("r", format!("exceeds 1/16 ({}); set allow_wide_clusters", spec.r)));
        }
        log::warn!("cluster radius {} exceeds 1/16", spec.r);
    }
    let mu = spec.direction()?;
    // Separate stream from the one that may have produced `mu`.
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let mut inputs = Vec::with_capacity(spec.n);
    let mut labels = Vec::with_capacity(spec.n);
    for s in 0..spec.n {
        let y = if s % 2 == 0 { 1.0 } else { -1.0 };
        let center: Vec<f64> = mu.iter().map(|m| y * m).collect();
        let x = if spec.r == 0.0 {
            center
        } else {
            let mut accepted = None;
            for _ in 0..spec.resample_budget.max(1) {
                let dir = unit_gaussian(spec.p, &mut rng);
                let radius = spec.r * rng.gen::<f64>();
                let raw: Vec<f64> = center.iter().zip(&dir).map(|(c, d)| c + radius * d).collect();
                let norm = vec_norm(&raw);
                let x: Vec<f64> = raw.iter().map(|v| v / norm).collect();
                let dist = vec_norm(&x.iter().zip(&center).map(|(a, b)| a - b).collect::<Vec<_>>());
                if dist <= spec.r {
                    accepted = Some(x);
                    break;
                }
            }
            accepted.ok_or_else(|| Error::Infeasible(format!("sample {s}: resample budget exhausted")))?
        };
        inputs.push(x);
        labels.push(y);
    }
    Dataset::new(spec.p, inputs, labels)
}

/// Ranges the diagnostics compare against.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticRanges {
    pub hidden_norm: (f64, f64),
    pub max_operator_norm: f64,
    pub outer_ratio: (f64, f64),
}

impl Default for DiagnosticRanges {
    fn default() -> Self {
        Self {
            hidden_norm: (0.9, 1.1),
            max_operator_norm: 3.5,
            outer_ratio: (0.85, 1.2),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNormStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitDiagnostics {
    pub p: usize,
    pub depth: usize,
    /// `‖x_{ℓ,s}‖` over samples, one entry per hidden layer.
    pub hidden_norms: Vec<LayerNormStats>,
    pub hidden_operator_norms: Vec<f64>,
    /// `‖V_{L+1}‖ / √p`.
    pub outer_ratio: f64,
    pub ranges: DiagnosticRanges,
    pub hidden_norms_in_range: bool,
    pub operator_norms_in_range: bool,
    pub outer_ratio_in_range: bool,
    pub wide_regime: bool,
    pub warnings: Vec<String>,
}

impl InitDiagnostics {
    pub fn all_in_range(&self) -> bool {
        self.hidden_norms_in_range && self.operator_norms_in_range && self.outer_ratio_in_range
    }
}

pub fn init_diagnostics(v1: &WeightStack, act: &Activation, data: &Dataset, ranges: DiagnosticRanges) -> Result<InitDiagnostics> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (p, depth) = (v1.width(), v1.depth());
    let traces = map_samples(data.len(), depth * p * p, |s| forward(v1, act, data.input(s)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let hidden_norms: Vec<LayerNormStats> = (0..depth)
        .map(|l| {
            let norms: Vec<f64> = traces.iter().map(|t| vec_norm(&t.x[l])).collect();
            LayerNormStats {
                min: norms.iter().copied().fold(f64::INFINITY, f64::min),
                max: norms.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                mean: norms.iter().sum::<f64>() / norms.len() as f64,
            }
        })
        .collect();
    let hidden_operator_norms = v1
        .hidden()
        .iter()
        .map(|m| operator_norm(m, DIAGNOSTIC_OP_NORM_TOL, OP_NORM_MAX_ITERS).map(|o| o.value))
        .collect::<Result<Vec<_>>>()?;
    let outer_ratio = v1.outer().frobenius_norm() / (p as f64).sqrt();

    let (lo, hi) = ranges.hidden_norm;
    let hidden_norms_in_range = hidden_norms.iter().all(|s| s.min >= lo && s.max <= hi);
    let operator_norms_in_range = hidden_operator_norms.iter().all(|&n| n <= ranges.max_operator_norm);
    let outer_ratio_in_range = outer_ratio >= ranges.outer_ratio.0 && outer_ratio <= ranges.outer_ratio.1;
    let wide_regime = p >= WIDE_REGIME_MIN_WIDTH;

    let mut warnings = Vec::new();
    if !wide_regime {
        warnings.push(format!("width {p} is below {WIDE_REGIME_MIN_WIDTH}; ranges are not expected to hold"));
    }
    for (l, s) in hidden_norms.iter().enumerate() {
        if s.min < lo || s.max > hi {
            warnings.push(format!("layer {} activations have norms in [{:.4}, {:.4}]", l + 1, s.min, s.max));
        }
    }
    for (l, n) in hidden_operator_norms.iter().enumerate() {
        if *n > ranges.max_operator_norm {
            warnings.push(format!("layer {} operator norm {n:.4} exceeds {}", l + 1, ranges.max_operator_norm));
        }
    }
    if !outer_ratio_in_range {
        warnings.push(format!("outer layer norm ratio {outer_ratio:.4} out of range"));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(InitDiagnostics {
        p,
        depth,
        hidden_norms,
        hidden_operator_norms,
        outer_ratio,
        ranges,
        hidden_norms_in_range,
        operator_norms_in_range,
        outer_ratio_in_range,
        wide_regime,
        warnings,
    })
}

/// A point on the boundary of the per-layer ball: every layer of `v1`
/// moved by a uniformly random direction of Frobenius norm `tau`.
pub fn perturb_on_sphere(v1: &WeightStack, tau: f64, rng: &mut impl Rng) -> WeightStack {
    let mut out = v1.clone();
    if tau == 0.0 {
        return out;
    }
    for m in out.layers_mut() {
        let k = m.as_slice().len();
        let dir = unit_gaussian(k, rng);
        m.as_mut_slice().iter_mut().zip(dir).for_each(|(w, d)| *w += tau * d);
    }
    out
}

/// Number of entries where `Σ_{ℓ,s}` differs between two stacks,
/// indexed `[layer][sample]`.
pub fn sigma_difference_counts(a: &WeightStack, b: &WeightStack, act: &Activation, data: &Dataset) -> Result<Vec<Vec<usize>>> {
    let depth = a.depth();
    let mut counts = vec![vec![0; data.len()]; depth];
    for s in 0..data.len() {
        let ta = forward(a, act, data.input(s))?;
        let tb = forward(b, act, data.input(s))?;
        for l in 0..depth {
            counts[l][s] = ta.sigma[l].iter().zip(&tb.sigma[l]).filter(|(x, y)| x != y).count();
        }
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_reproducible() {
        let spec = InitSpec { p: 5, depth: 2, seed: 9 };
        assert_eq!(gaussian_init(&spec).unwrap(), gaussian_init(&spec).unwrap());
        let other = InitSpec { seed: 10, ..spec };
        assert_ne!(gaussian_init(&spec).unwrap(), gaussian_init(&other).unwrap());
    }

    #[test]
    fn zero_radius_clusters_are_exact() {
        let mut spec = ClusteredDataSpec::new(3, 4, 0.0, 1);
        spec.mu = Some(vec![0.0, 3.0, 4.0]);
        let d = make_clustered_dataset(&spec).unwrap();
        assert_eq!(d.input(0), &[0.0, 0.6, 0.8]);
        assert_eq!(d.input(1), &[-0.0, -0.6, -0.8]);
        assert_eq!(d.labels(), &[1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn cluster_radius_respected() {
        let spec = ClusteredDataSpec::new(6, 10, 0.05, 3);
        let mu = spec.direction().unwrap();
        let d = make_clustered_dataset(&spec).unwrap();
        for s in 0..d.len() {
            let y = d.label(s);
            let dist: f64 = d.input(s).iter().zip(&mu).map(|(x, m)| (x - y * m).powi(2)).sum::<f64>().sqrt();
            assert!(dist <= 0.05 + 1e-15);
        }
    }

    #[test]
    fn cluster_spec_validation() {
        assert!(make_clustered_dataset(&ClusteredDataSpec::new(3, 1, 0.0, 0)).is_err());
        assert!(make_clustered_dataset(&ClusteredDataSpec::new(3, 2, 0.2, 0)).is_err());
        let mut wide = ClusteredDataSpec::new(3, 2, 0.2, 0);
        wide.allow_wide_clusters = true;
        assert!(make_clustered_dataset(&wide).is_ok());
    }

    #[test]
    fn narrow_diagnostics_warn() {
        let v = gaussian_init(&InitSpec { p: 8, depth: 2, seed: 1 }).unwrap();
        let d = make_clustered_dataset(&ClusteredDataSpec::new(8, 4, 0.05, 2)).unwrap();
        let act = Activation::huberized(0.01).unwrap();
        let r = init_diagnostics(&v, &act, &d, DiagnosticRanges::default()).unwrap();
        assert!(!r.wide_regime);
        assert!(!r.warnings.is_empty());
    }
}
