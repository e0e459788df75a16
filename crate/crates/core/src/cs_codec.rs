//! Gradient sparsification, Gaussian random projection, 1-bit quantization and
//! sparse reconstruction.
//!
//! A worker turns its dense gradient into a length-`S` sign vector:
//!
//! ```text
//! g  --top-κ-->  g̃  --Φ·-->  Φg̃  --sign-->  c ∈ {−1,+1}^S
//! ```
//!
//! The parameter server observes a noisy weighted average of such sign vectors
//! and recovers a sparse gradient estimate with iterative hard thresholding.

use std::cmp::Ordering;

use log::warn;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::seed;

/// Dense gradient of length `D` with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector(Vec<f64>);

impl GradientVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite gradient entry at index {i}")));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm_sq(&self) -> f64 {
        norm_sq(&self.0)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Squared Euclidean distance to another gradient of the same length.
    pub fn dist_sq(&self, other: &GradientVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

/// A top-κ sparsified gradient: dense storage plus its (ascending) support.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGradient {
    values: Vec<f64>,
    support: Vec<usize>,
}

impl SparseGradient {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        norm_sq(&self.values).sqrt()
    }

    pub fn into_gradient(self) -> GradientVector {
        GradientVector(self.values)
    }
}

pub(crate) fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Indices of the `k` largest-magnitude entries, ascending.
///
/// Equal magnitudes are ordered by lower index first.
pub(crate) fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let d = values.len();
    if k >= d {
        return (0..d).collect();
    }
    if k == 0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..d).collect();
    let by_magnitude = |a: &usize, b: &usize| -> Ordering {
        values[*b]
            .abs()
            .partial_cmp(&values[*a].abs())
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    };
    idx.select_nth_unstable_by(k - 1, by_magnitude);
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Keeps the `kappa` entries of largest magnitude and zeros the rest.
pub fn top_k_sparsify(g: &GradientVector, kappa: usize) -> Result<SparseGradient> {
    let d = g.len();
    if kappa < 1 || kappa > d {
        return Err(Error::param("kappa", format!("need 1 <= kappa <= D = {d}, got {kappa}")));
    }
    let support = top_k_indices(g.as_slice(), kappa);
    let mut values = vec![0.0; d];
    for &j in &support {
        values[j] = g.0[j];
    }
    Ok(SparseGradient { values, support })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixKind {
    Gaussian,
    /// `S = D` identity; only used for lossless pipeline diagnostics.
    Identity,
}

/// Everything needed to rebuild a measurement matrix. Raw entries are never
/// persisted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatrixSpec {
    pub rows: usize,
    pub cols: usize,
    pub seed: u64,
    pub variance: f64,
    pub kind: MatrixKind,
}

impl MatrixSpec {
    pub fn build(&self) -> Result<MeasurementMatrix> {
        match self.kind {
            MatrixKind::Gaussian => gen_measurement_matrix(self.rows, self.cols, self.seed, self.variance),
            MatrixKind::Identity => {
                check_len("identity measurement matrix", self.cols, self.rows)?;
                Ok(MeasurementMatrix::identity(self.cols))
            }
        }
    }
}

/// An `S × D` measurement matrix shared by all workers and the parameter server.
///
/// Entries are stored column-major in single precision; all products
/// accumulate in double precision.
#[derive(Debug, Clone)]
pub struct MeasurementMatrix {
    spec: MatrixSpec,
    columns: Vec<f32>,
}

/// Draws an `S × D` matrix with i.i.d. `N(0, variance)` entries from the
/// stream seeded by `seed`. Entries are drawn column by column.
pub fn gen_measurement_matrix(rows: usize, cols: usize, seed: u64, variance: f64) -> Result<MeasurementMatrix> {
    if rows < 1 || rows >= cols {
        return Err(Error::param(
            "S",
            format!("compressive regime needs 1 <= S < D, got S = {rows}, D = {cols}"),
        ));
    }
    if !(variance > 0.0 && variance.is_finite()) {
        return Err(Error::param("variance", format!("must be positive, got {variance}")));
    }
    let sd = variance.sqrt();
    let mut rng = seed::rng(seed);
    let columns = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (sd * z) as f32
        })
        .collect();
    Ok(MeasurementMatrix {
        spec: MatrixSpec {
            rows,
            cols,
            seed,
            variance,
            kind: MatrixKind::Gaussian,
        },
        columns,
    })
}

impl MeasurementMatrix {
    pub fn identity(dim: usize) -> Self {
        Self {
            spec: MatrixSpec {
                rows: dim,
                cols: dim,
                seed: 0,
                variance: 1.0,
                kind: MatrixKind::Identity,
            },
            columns: Vec::new(),
        }
    }

    pub fn spec(&self) -> MatrixSpec {
        self.spec
    }

    pub fn rows(&self) -> usize {
        self.spec.rows
    }

    pub fn cols(&self) -> usize {
        self.spec.cols
    }

    pub fn entry(&self, row: usize, col: usize) -> f64 {
        match self.spec.kind {
            MatrixKind::Identity => f64::from(u8::from(row == col)),
            MatrixKind::Gaussian => f64::from(self.columns[col * self.spec.rows + row]),
        }
    }

    fn column(&self, col: usize) -> &[f32] {
        let s = self.spec.rows;
        &self.columns[col * s..(col + 1) * s]
    }

    /// `Φx` for a vector that is nonzero only on `support`.
    pub fn apply_sparse(&self, x: &[f64], support: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows()];
        if self.spec.kind == MatrixKind::Identity {
            for &j in support {
                out[j] = x[j];
            }
            return out;
        }
        for &j in support {
            let xj = x[j];
            if xj == 0.0 {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.column(j)) {
                *o += f64::from(a) * xj;
            }
        }
        out
    }

    /// `Φx` for a dense `x`; zero entries are skipped.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let support: Vec<usize> = (0..x.len()).filter(|&j| x[j] != 0.0).collect();
        self.apply_sparse(x, &support)
    }

    /// `Φᵀr`.
    pub fn apply_transpose(&self, r: &[f64]) -> Vec<f64> {
        if self.spec.kind == MatrixKind::Identity {
            return r.to_vec();
        }
        (0..self.cols()).map(|j| dot_f32_f64(self.column(j), r)).collect()
    }
}

fn dot_f32_f64(a: &[f32], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (ac, bc) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += f64::from(ac[l]) * bc[l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..a.len() {
        tail += f64::from(a[i]) * b[i];
    }
    acc.iter().sum::<f64>() + tail
}

/// `sign(x)` with `sign(0) = +1`.
pub fn sign(x: f64) -> i8 {
    if x >= 0.0 {
        1
    } else {
        -1
    }
}

/// A 1-bit compressed update `sign(Φg̃)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressedUpdate {
    signs: Vec<i8>,
    /// Set when the input gradient was identically zero, so the signs carry
    /// no information (all `+1` by the tie rule).
    pub degenerate: bool,
}

impl CompressedUpdate {
    pub fn from_signs(signs: Vec<i8>) -> Result<Self> {
        if let Some(i) = signs.iter().position(|&s| s != 1 && s != -1) {
            return Err(Error::Input(format!("sign entry {i} is not ±1")));
        }
        Ok(Self {
            signs,
            degenerate: false,
        })
    }

    pub fn signs(&self) -> &[i8] {
        &self.signs
    }

    pub fn len(&self) -> usize {
        self.signs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signs.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.signs.iter().map(|&s| f64::from(s)).collect()
    }
}

/// `sign(Φg̃)`.
pub fn compress_1bit(g: &SparseGradient, phi: &MeasurementMatrix) -> Result<CompressedUpdate> {
    check_len("compress_1bit: Φ columns vs gradient", phi.cols(), g.dim())?;
    let projection = phi.apply_sparse(&g.values, &g.support);
    let degenerate = g.support.iter().all(|&j| g.values[j] == 0.0);
    if degenerate {
        warn!("compress_1bit: all-zero sparse gradient, emitting all +1 signs");
    }
    Ok(CompressedUpdate {
        signs: projection.into_iter().map(sign).collect(),
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryMode {
    /// Iterative hard thresholding on the real-valued measurements.
    IhtReal,
    /// Binary iterative hard thresholding on `sign(y)`.
    BihtSign,
    /// Return `y` unchanged; requires `S = D`. Lossless diagnostics only.
    PassThrough,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecoveryConfig {
    pub sparsity_budget: usize,
    pub max_iterations: usize,
    pub step_size: f64,
    pub tolerance: f64,
    pub mode: RecoveryMode,
    /// Output norm for `BihtSign`; `None` means `‖y‖·√(D/S)`.
    #[serde(default)]
    pub magnitude: Option<f64>,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            sparsity_budget: 1,
            max_iterations: 300,
            step_size: 1.0,
            tolerance: 1e-6,
            mode: RecoveryMode::IhtReal,
            magnitude: None,
        }
    }
}

impl RecoveryConfig {
    /// Default sparsity budget `min(κ·U_scheduled, S/4)`, at least 1.
    pub fn default_budget(kappa: usize, scheduled: usize, measurements: usize) -> usize {
        (kappa * scheduled).min(measurements / 4).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sparsity_budget < 1 {
            return Err(Error::param("sparsity_budget", "must be >= 1"));
        }
        if self.max_iterations < 1 {
            return Err(Error::param("max_iterations", "must be >= 1"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::param("step_size", format!("must be > 0, got {}", self.step_size)));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::param("tolerance", "must be >= 0"));
        }
        if let Some(m) = self.magnitude {
            if !(m >= 0.0 && m.is_finite()) {
                return Err(Error::param("magnitude", format!("must be >= 0, got {m}")));
            }
        }
        Ok(())
    }
}

/// Output of [`reconstruct_sparse`].
#[derive(Debug, Clone)]
pub struct Recovery {
    pub estimate: GradientVector,
    pub iterations: usize,
    pub converged: bool,
    /// `‖y − Φx‖` after each accepted IHT iterate (index 0 is `‖y‖`), or the
    /// number of sign mismatches per BIHT iterate.
    pub residual_history: Vec<f64>,
}

const MAX_BACKTRACKS: usize = 40;

/// Recovers a sparse vector from measurements `y ≈ Φx`.
pub fn reconstruct_sparse(y: &[f64], phi: &MeasurementMatrix, cfg: &RecoveryConfig) -> Result<Recovery> {
    cfg.validate()?;
    check_len("reconstruct_sparse: measurements", phi.rows(), y.len())?;
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::Input(format!("non-finite measurement at index {i}")));
    }
    match cfg.mode {
        RecoveryMode::IhtReal => Ok(iht(y, phi, cfg)),
        RecoveryMode::BihtSign => Ok(biht(y, phi, cfg)),
        RecoveryMode::PassThrough => {
            check_len("pass-through recovery needs S = D", phi.cols(), phi.rows())?;
            Ok(Recovery {
                estimate: GradientVector(y.to_vec()),
                iterations: 0,
                converged: true,
                residual_history: Vec::new(),
            })
        }
    }
}

/// Hard-thresholded gradient steps with backtracking: a candidate whose
/// residual exceeds the current one is rejected and the step halved.
fn iht(y: &[f64], phi: &MeasurementMatrix, cfg: &RecoveryConfig) -> Recovery {
    let d = phi.cols();
    let k = cfg.sparsity_budget.min(d);
    let mut x = vec![0.0; d];
    let mut residual = y.to_vec();
    let mut res_norm = norm_sq(&residual).sqrt();
    let mut history = vec![res_norm];
    let mut converged = res_norm == 0.0;
    let mut iterations = 0;

    while !converged && iterations < cfg.max_iterations {
        iterations += 1;
        let grad = phi.apply_transpose(&residual);
        let mut step = cfg.step_size;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let candidate: Vec<f64> = x.iter().zip(&grad).map(|(a, g)| a + step * g).collect();
            let support = top_k_indices(&candidate, k);
            let mut next = vec![0.0; d];
            for &j in &support {
                next[j] = candidate[j];
            }
            let fitted = phi.apply_sparse(&next, &support);
            let next_res: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
            let next_norm = norm_sq(&next_res).sqrt();
            if next_norm <= res_norm {
                accepted = Some((next, next_res, next_norm));
                break;
            }
            step *= 0.5;
        }
        let Some((next, next_res, next_norm)) = accepted else {
            // no descent at any step length: stationary point
            converged = true;
            break;
        };
        let rel_change = (res_norm - next_norm) / res_norm;
        x = next;
        residual = next_res;
        res_norm = next_norm;
        history.push(res_norm);
        if res_norm == 0.0 || rel_change < cfg.tolerance {
            converged = true;
        }
    }

    Recovery {
        estimate: GradientVector(x),
        iterations,
        converged,
        residual_history: history,
    }
}

fn biht(y: &[f64], phi: &MeasurementMatrix, cfg: &RecoveryConfig) -> Recovery {
    let d = phi.cols();
    let k = cfg.sparsity_budget.min(d);
    let target: Vec<f64> = y.iter().map(|&v| f64::from(sign(v))).collect();
    let mut x = vec![0.0; d];
    let mut support: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut best = (usize::MAX, x.clone());

    while iterations < cfg.max_iterations {
        let fitted = phi.apply_sparse(&x, &support);
        let mismatch: Vec<f64> = target
            .iter()
            .zip(&fitted)
            .map(|(t, f)| t - f64::from(sign(*f)))
            .collect();
        let wrong = mismatch.iter().filter(|m| **m != 0.0).count();
        history.push(wrong as f64);
        if wrong < best.0 && !support.is_empty() {
            best = (wrong, x.clone());
        }
        if wrong == 0 && !support.is_empty() {
            converged = true;
            break;
        }
        iterations += 1;
        let grad = phi.apply_transpose(&mismatch);
        let candidate: Vec<f64> = x
            .iter()
            .zip(&grad)
            .map(|(a, g)| a + 0.5 * cfg.step_size * g)
            .collect();
        support = top_k_indices(&candidate, k);
        x = vec![0.0; d];
        for &j in &support {
            x[j] = candidate[j];
        }
    }
    if !converged {
        let fitted = phi.apply_sparse(&x, &support);
        let wrong = target
            .iter()
            .zip(&fitted)
            .filter(|(t, f)| **t != f64::from(sign(**f)))
            .count();
        if wrong < best.0 {
            best = (wrong, x);
        }
    }

    let mut estimate = if best.0 == usize::MAX { vec![0.0; d] } else { best.1 };
    let norm = norm_sq(&estimate).sqrt();
    let magnitude = cfg
        .magnitude
        .unwrap_or_else(|| norm_sq(y).sqrt() * (d as f64 / y.len() as f64).sqrt());
    if norm > 0.0 {
        for v in &mut estimate {
            *v *= magnitude / norm;
        }
    }
    Recovery {
        estimate: GradientVector(estimate),
        iterations,
        converged,
        residual_history: history,
    }
}
