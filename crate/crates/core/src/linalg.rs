//! Dense matrices, the stacked network parameters, and their norms.
//!
//! Everything here is plain `f64` arithmetic on row-major buffers. The
//! operator norm is estimated by power iteration on `MᵀM`; it never pulls in
//! a factorization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default relative tolerance for [`operator_norm`].
pub const OP_NORM_REL_TOL: f64 = 1e-10;
/// Default iteration cap for [`operator_norm`].
pub const OP_NORM_MAX_ITERS: usize = 10_000;

const POWER_ITERATION_SEED: u64 = 0x5eed_0f_0b5e;

/// A dense real matrix stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, d) in diag.iter().enumerate() {
            m.data[i * n + i] = *d;
        }
        m
    }

    /// Builds a matrix from row-major entries. Entries must be finite.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("data", "matrix entries must be finite"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        Self::from_vec(r, c, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `M v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                got: v.len(),
            });
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), v)).collect())
    }

    /// `Mᵀ v`.
    pub fn matvec_t(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::DimensionMismatch {
                expected: self.rows,
                got: v.len(),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (r, &vr) in v.iter().enumerate() {
            if vr == 0.0 {
                continue;
            }
            for (o, m) in out.iter_mut().zip(self.row(r)) {
                *o += m * vr;
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_sq().sqrt()
    }

    pub(crate) fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, alpha: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }
}

/// Euclidean inner product of two equal-length slices, accumulated in four
/// interleaved lanes in a fixed order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            lanes[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

pub fn vec_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Result of a power-iteration operator norm estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorNorm {
    pub value: f64,
    pub iterations: usize,
    /// False when `max_iters` was exhausted before the relative change fell
    /// below the tolerance. `value` is still the last (lower) estimate.
    pub converged: bool,
}

/// Largest singular value of `m` by power iteration on `MᵀM`.
///
/// The start vector is all-ones plus a small fixed-seed perturbation, so the
/// result is reproducible and almost surely not orthogonal to the top
/// singular vector.
pub fn operator_norm(m: &Matrix, rel_tol: f64, max_iters: usize) -> Result<OperatorNorm> {
    if m.rows == 0 || m.cols == 0 {
        return Err(Error::invalid("m", "matrix has a zero dimension"));
    }
    if !(rel_tol > 0.0) {
        return Err(Error::invalid("rel_tol", "must be positive"));
    }
    if m.rows == 1 || m.cols == 1 {
        return Ok(OperatorNorm {
            value: m.frobenius_norm(),
            iterations: 0,
            converged: true,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_ITERATION_SEED);
    let mut v: Vec<f64> = (0..m.cols)
        .map(|_| 1.0 + 1e-3 * rng.gen_range(-1.0..1.0))
        .collect();
    normalize(&mut v);

    let mut sigma = 0.0;
    for it in 1..=max_iters.max(1) {
        let (next_sigma, mut w) = gram_apply(m, &v);
        if next_sigma == 0.0 {
            // v is in the null space; either m = 0 or we got unlucky.
            if m.max_abs() == 0.0 {
                return Ok(OperatorNorm {
                    value: 0.0,
                    iterations: it,
                    converged: true,
                });
            }
            v = (0..m.cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
            normalize(&mut v);
            continue;
        }
        normalize(&mut w);
        v = w;
        if (next_sigma - sigma).abs() <= rel_tol * next_sigma {
            return Ok(OperatorNorm {
                value: next_sigma,
                iterations: it,
                converged: true,
            });
        }
        sigma = next_sigma;
    }
    Ok(OperatorNorm {
        value: sigma,
        iterations: max_iters,
        converged: false,
    })
}

/// `(‖M v‖, MᵀM v)` in one sweep over the rows of `m`.
fn gram_apply(m: &Matrix, v: &[f64]) -> (f64, Vec<f64>) {
    let mut out = vec![0.0; m.cols];
    let mut sq = 0.0;
    for r in 0..m.rows {
        let row = m.row(r);
        let s = dot(row, v);
        sq += s * s;
        if s != 0.0 {
            out.iter_mut().zip(row).for_each(|(o, x)| *o += s * x);
        }
    }
    (sq.sqrt(), out)
}

fn normalize(v: &mut [f64]) {
    let n = vec_norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Index of one scalar parameter inside a [`WeightStack`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamIndex {
    /// 0-based layer, `depth()` is the outer layer.
    pub layer: usize,
    pub row: usize,
    pub col: usize,
}

/// All trainable parameters: `L` hidden `p×p` matrices and a `1×p` outer row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightStack {
    hidden: Vec<Matrix>,
    outer: Matrix,
}

/// Norm summary of a [`WeightStack`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackNorms {
    pub frobenius: f64,
    pub per_layer_frobenius: Vec<f64>,
    pub per_layer_operator: Vec<f64>,
}

impl WeightStack {
    pub fn new(hidden: Vec<Matrix>, outer: Matrix) -> Result<Self> {
        if hidden.is_empty() {
            return Err(Error::invalid("hidden", "need at least one hidden layer"));
        }
        let p = outer.cols;
        if p == 0 || outer.rows != 1 {
            return Err(Error::ShapeMismatch(format!(
                "outer layer must be 1xp with p >= 1, got {}x{}",
                outer.rows, outer.cols
            )));
        }
        for (i, m) in hidden.iter().enumerate() {
            if m.shape() != (p, p) {
                return Err(Error::ShapeMismatch(format!(
                    "hidden layer {} is {}x{}, expected {p}x{p}",
                    i + 1,
                    m.rows,
                    m.cols
                )));
            }
        }
        Ok(Self { hidden, outer })
    }

    pub fn zeros(p: usize, depth: usize) -> Self {
        assert!(p >= 1 && depth >= 1, "width and depth must be positive");
        Self {
            hidden: vec![Matrix::zeros(p, p); depth],
            outer: Matrix::zeros(1, p),
        }
    }

    /// Rebuilds a stack of the given shape from a flat parameter vector in
    /// layer order (hidden layers row-major, then the outer row).
    pub fn from_flat(p: usize, depth: usize, flat: &[f64]) -> Result<Self> {
        let mut s = Self::zeros(p, depth);
        if flat.len() != s.num_params() {
            return Err(Error::DimensionMismatch {
                expected: s.num_params(),
                got: flat.len(),
            });
        }
        let mut off = 0;
        for m in s.layers_mut() {
            let k = m.data.len();
            m.data.copy_from_slice(&flat[off..off + k]);
            off += k;
        }
        Ok(s)
    }

    pub fn width(&self) -> usize {
        self.outer.cols
    }

    /// Number of hidden layers `L`.
    pub fn depth(&self) -> usize {
        self.hidden.len()
    }

    pub fn hidden(&self) -> &[Matrix] {
        &self.hidden
    }

    pub fn outer(&self) -> &Matrix {
        &self.outer
    }

    pub fn outer_mut(&mut self) -> &mut Matrix {
        &mut self.outer
    }

    /// Layer `i` in `0..=depth()`, where `depth()` is the outer layer.
    pub fn layer(&self, i: usize) -> &Matrix {
        if i < self.hidden.len() {
            &self.hidden[i]
        } else {
            &self.outer
        }
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut Matrix {
        if i < self.hidden.len() {
            &mut self.hidden[i]
        } else {
            &mut self.outer
        }
    }

    /// All `L+1` matrices in order.
    pub fn layers(&self) -> impl Iterator<Item = &Matrix> {
        self.hidden.iter().chain(std::iter::once(&self.outer))
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        self.hidden.iter_mut().chain(std::iter::once(&mut self.outer))
    }

    pub fn num_params(&self) -> usize {
        self.layers().map(|m| m.data.len()).sum()
    }

    pub fn same_shape(&self, other: &WeightStack) -> bool {
        self.width() == other.width() && self.depth() == other.depth()
    }

    fn check_shape(&self, other: &WeightStack) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "stack (p={}, L={}) vs (p={}, L={})",
                self.width(),
                self.depth(),
                other.width(),
                other.depth()
            )))
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.layers().flat_map(|m| m.data.iter().copied()).collect()
    }

    /// Maps a flat position back to `(layer, row, col)`.
    pub fn param_index(&self, mut flat: usize) -> ParamIndex {
        for (layer, m) in self.layers().enumerate() {
            if flat < m.data.len() {
                return ParamIndex {
                    layer,
                    row: flat / m.cols,
                    col: flat % m.cols,
                };
            }
            flat -= m.data.len();
        }
        panic!("flat index out of range");
    }

    pub fn get_param(&self, idx: ParamIndex) -> f64 {
        self.layer(idx.layer).get(idx.row, idx.col)
    }

    pub fn set_param(&mut self, idx: ParamIndex, v: f64) {
        self.layer_mut(idx.layer).set(idx.row, idx.col, v);
    }

    /// Collective Frobenius norm over all `L+1` matrices.
    pub fn frobenius_norm(&self) -> f64 {
        self.layers().map(Matrix::frobenius_sq).sum::<f64>().sqrt()
    }

    pub fn per_layer_frobenius(&self) -> Vec<f64> {
        self.layers().map(Matrix::frobenius_norm).collect()
    }

    pub fn norms(&self) -> Result<StackNorms> {
        let per_layer_frobenius = self.per_layer_frobenius();
        let per_layer_operator = self
            .layers()
            .map(|m| operator_norm(m, OP_NORM_REL_TOL, OP_NORM_MAX_ITERS).map(|o| o.value))
            .collect::<Result<Vec<_>>>()?;
        Ok(StackNorms {
            frobenius: self.frobenius_norm(),
            per_layer_frobenius,
            per_layer_operator,
        })
    }

    /// Entrywise dot product summed over all layers.
    pub fn dot(&self, other: &WeightStack) -> Result<f64> {
        self.check_shape(other)?;
        Ok(self
            .layers()
            .zip(other.layers())
            .map(|(a, b)| dot(&a.data, &b.data))
            .sum())
    }

    /// Returns `self + alpha * x`.
    pub fn axpy(&self, alpha: f64, x: &WeightStack) -> Result<WeightStack> {
        self.check_shape(x)?;
        let mut out = self.clone();
        out.axpy_in_place(alpha, x);
        Ok(out)
    }

    pub(crate) fn axpy_in_place(&mut self, alpha: f64, x: &WeightStack) {
        debug_assert!(self.same_shape(x));
        for (a, b) in self.layers_mut().zip(x.layers()) {
            for (ai, bi) in a.data.iter_mut().zip(&b.data) {
                *ai += alpha * bi;
            }
        }
    }

    pub fn sub(&self, other: &WeightStack) -> Result<WeightStack> {
        self.axpy(-1.0, other)
    }

    pub fn scaled(&self, alpha: f64) -> WeightStack {
        let mut out = self.clone();
        out.scale_in_place(alpha);
        out
    }

    pub(crate) fn scale_in_place(&mut self, alpha: f64) {
        for m in self.layers_mut() {
            m.data.iter_mut().for_each(|v| *v *= alpha);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers().all(|m| m.data.iter().all(|v| v.is_finite()))
    }

    /// Largest per-layer Frobenius distance `max_ℓ ‖A_ℓ − B_ℓ‖`.
    pub fn max_layer_distance(&self, other: &WeightStack) -> Result<f64> {
        self.check_shape(other)?;
        Ok(self
            .layers()
            .zip(other.layers())
            .map(|(a, b)| {
                a.data
                    .iter()
                    .zip(&b.data)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max))
    }
}

/// Free-function form of [`WeightStack::frobenius_norm`].
pub fn frobenius_norm(stack: &WeightStack) -> f64 {
    stack.frobenius_norm()
}

/// Free-function form of [`WeightStack::dot`].
pub fn stack_dot(a: &WeightStack, b: &WeightStack) -> Result<f64> {
    a.dot(b)
}

/// Free-function form of [`WeightStack::axpy`]: `y + alpha x`.
pub fn stack_axpy(y: &WeightStack, alpha: f64, x: &WeightStack) -> Result<WeightStack> {
    y.axpy(alpha, x)
}
