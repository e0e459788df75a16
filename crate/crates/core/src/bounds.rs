//! Closed-form aggregation-error and convergence bounds.
//!
//! All functions are pure. The schedule enters as a selection mask `β` and
//! power scaling `b`; the per-worker sample counts are part of
//! [`BoundParams`].

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Upper end (exclusive) of the admissible RIP constant.
pub const DELTA_MAX: f64 = std::f64::consts::SQRT_2 - 1.0;

/// Constants of the learning problem and the compression pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundParams {
    /// Lipschitz constant of the global gradient.
    pub lipschitz: f64,
    pub rho1: f64,
    pub rho2: f64,
    /// Bound on every local gradient norm.
    pub grad_bound: f64,
    /// RIP constant of the measurement matrix.
    pub delta: f64,
    pub kappa: usize,
    pub measurements: usize,
    pub dim: usize,
    pub noise_variance: f64,
    pub sample_counts: Vec<usize>,
    pub learning_rate: f64,
}

impl BoundParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < DELTA_MAX) {
            return Err(Error::param(
                "delta",
                format!("need 0 < delta < sqrt(2) - 1, got {}", self.delta),
            ));
        }
        if !(0.0..1.0).contains(&self.rho2) {
            return Err(Error::param("rho2", format!("need 0 <= rho2 < 1, got {}", self.rho2)));
        }
        if !(self.rho1 >= 0.0 && self.rho1.is_finite()) {
            return Err(Error::param("rho1", format!("need rho1 >= 0, got {}", self.rho1)));
        }
        if !(self.lipschitz > 0.0 && self.lipschitz.is_finite()) {
            return Err(Error::param("lipschitz", "need L > 0"));
        }
        if !(self.grad_bound > 0.0 && self.grad_bound.is_finite()) {
            return Err(Error::param("grad_bound", "need G > 0"));
        }
        if self.kappa < 1 || self.kappa > self.dim {
            return Err(Error::param("kappa", format!("need 1 <= kappa <= D, got {}", self.kappa)));
        }
        if self.measurements < 1 || self.measurements >= self.dim {
            return Err(Error::param(
                "measurements",
                format!("need 1 <= S < D, got S = {}, D = {}", self.measurements, self.dim),
            ));
        }
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return Err(Error::param("noise_variance", "need sigma^2 >= 0"));
        }
        if self.sample_counts.is_empty() || self.sample_counts.contains(&0) {
            return Err(Error::param("sample_counts", "need at least one worker, each K_i >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::param("learning_rate", "need alpha > 0"));
        }
        Ok(())
    }

    pub fn total_samples(&self) -> f64 {
        self.sample_counts.iter().sum::<usize>() as f64
    }

    /// `(D − κ) / D`.
    fn truncation_ratio(&self) -> f64 {
        (self.dim - self.kappa) as f64 / self.dim as f64
    }

    /// `Σ K_i β_i b`, rejecting empty schedules.
    fn received_scale(&self, selected: &[bool], power_scale: f64) -> Result<f64> {
        check_len("bounds: selection vs sample counts", self.sample_counts.len(), selected.len())?;
        if !(power_scale > 0.0 && power_scale.is_finite()) {
            return Err(Error::param("power_scale", format!("b must be > 0, got {power_scale}")));
        }
        let k: usize = selected
            .iter()
            .zip(&self.sample_counts)
            .filter(|(s, _)| **s)
            .map(|(_, k)| k)
            .sum();
        if k == 0 {
            return Err(Error::EmptySchedule("bounds need at least one scheduled worker"));
        }
        Ok(k as f64 * power_scale)
    }
}

/// The reconstruction constants `(ϖ, ϱ, C)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RipConstants {
    pub varpi: f64,
    pub varrho: f64,
    pub c: f64,
}

pub fn rip_constants(delta: f64) -> Result<RipConstants> {
    if !(delta > 0.0 && delta < DELTA_MAX) {
        return Err(Error::param(
            "delta",
            format!("reconstruction constant needs 0 < delta < sqrt(2) - 1, got {delta}"),
        ));
    }
    let varpi = 2.0 * (1.0 + delta).sqrt() / (1.0 - delta).sqrt();
    let varrho = std::f64::consts::SQRT_2 * delta / (1.0 - delta);
    Ok(RipConstants {
        varpi,
        varrho,
        c: 2.0 * varpi / (1.0 - varrho),
    })
}

/// Per-worker sparsification error bound `(1+δ)(D−κ)G²/D`.
pub fn sparsification_error_bound(p: &BoundParams) -> f64 {
    (1.0 + p.delta) * p.truncation_ratio() * p.grad_bound * p.grad_bound
}

/// Quantization error bound `S + (1+δ)(D−κ)G²/D`.
pub fn quantization_error_bound(p: &BoundParams) -> f64 {
    p.measurements as f64 + sparsification_error_bound(p)
}

/// Norm-limited measurement error `ε_t`.
pub fn epsilon_bound(p: &BoundParams, selected: &[bool], power_scale: f64) -> Result<f64> {
    let scale = p.received_scale(selected, power_scale)?;
    Ok(quantization_error_bound(p) + p.measurements as f64 * p.noise_variance / (scale * scale))
}

/// Total aggregation error bound `E‖ĝ − g‖²`.
pub fn total_error_bound(p: &BoundParams, selected: &[bool], power_scale: f64) -> Result<f64> {
    p.validate()?;
    let scale = p.received_scale(selected, power_scale)?;
    let c = rip_constants(p.delta)?.c;
    let s = p.measurements as f64;
    let g2 = p.grad_bound * p.grad_bound;
    let scheduled = selected.iter().filter(|&&b| b).count() as f64;
    Ok(c * c * (1.0 + (1.0 + p.delta) * p.truncation_ratio() * g2 / s + p.noise_variance / (scale * scale))
        + scheduled * sparsification_error_bound(p))
}

/// Per-round term `B_t` of the convergence bound.
pub fn bt_term(p: &BoundParams, selected: &[bool], power_scale: f64) -> Result<f64> {
    p.validate()?;
    let scale = p.received_scale(selected, power_scale)?;
    let c = rip_constants(p.delta)?.c;
    let l = p.lipschitz;
    let s = p.measurements as f64;
    let g2 = p.grad_bound * p.grad_bound;
    let dropped: f64 = selected
        .iter()
        .zip(&p.sample_counts)
        .filter(|(s, _)| !**s)
        .map(|(_, &k)| k as f64 * p.rho1)
        .sum();
    let scheduled = selected.iter().filter(|&&b| b).count() as f64;
    Ok(dropped / (2.0 * l * p.total_samples())
        + c * c / (2.0 * l) * (1.0 + (1.0 + p.delta) * p.truncation_ratio() * g2 / s + p.noise_variance / (scale * scale))
        + scheduled * (1.0 + p.delta) * p.truncation_ratio() * g2 / (2.0 * l))
}

/// Diagnostic `A_t = 1/(2L) − Σ K_i ρ2 (1−β_i) / (2LK)`; feeds no decision.
pub fn a_t(p: &BoundParams, selected: &[bool]) -> Result<f64> {
    check_len("a_t: selection vs sample counts", p.sample_counts.len(), selected.len())?;
    let dropped: f64 = selected
        .iter()
        .zip(&p.sample_counts)
        .filter(|(s, _)| !**s)
        .map(|(_, &k)| k as f64)
        .sum();
    let l = p.lipschitz;
    Ok(1.0 / (2.0 * l) - dropped * p.rho2 / (2.0 * l * p.total_samples()))
}

/// Right-hand side of the average squared gradient-norm bound after `T`
/// rounds, where `T = bt_series.len()`.
pub fn convergence_rhs(p: &BoundParams, initial_gap: f64, bt_series: &[f64]) -> Result<f64> {
    if !(0.0..1.0).contains(&p.rho2) {
        return Err(Error::param("rho2", format!("need 0 <= rho2 < 1, got {}", p.rho2)));
    }
    if bt_series.is_empty() {
        return Err(Error::param("bt_series", "need T >= 1"));
    }
    let factor = 2.0 * p.lipschitz / (bt_series.len() as f64 * (1.0 - p.rho2));
    Ok(factor * initial_gap + factor * bt_series.iter().sum::<f64>())
}

/// The error floor: [`convergence_rhs`] without the initial-gap term.
pub fn error_floor(p: &BoundParams, bt_series: &[f64]) -> Result<f64> {
    convergence_rhs(p, 0.0, bt_series)
}

/// Per-round bound values written to the metrics table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundBoundReport {
    pub sparsify_bound: f64,
    pub quantize_bound: f64,
    pub epsilon: f64,
    pub total_error_bound: f64,
    pub b_term: f64,
}

pub fn round_report(p: &BoundParams, selected: &[bool], power_scale: f64) -> Result<RoundBoundReport> {
    Ok(RoundBoundReport {
        sparsify_bound: sparsification_error_bound(p),
        quantize_bound: quantization_error_bound(p),
        epsilon: epsilon_bound(p, selected, power_scale)?,
        total_error_bound: total_error_bound(p, selected, power_scale)?,
        b_term: bt_term(p, selected, power_scale)?,
    })
}

/// Largest observed `|‖Φx‖²/‖x‖² − 1|` over random `k`-sparse Gaussian
/// vectors. Reported only; bounds always use the configured `δ`.
pub fn empirical_rip_constant(phi: &crate::cs_codec::MeasurementMatrix, k: usize, trials: usize, seed: u64) -> f64 {
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    let d = phi.cols();
    let k = k.min(d);
    let mut rng = crate::seed::rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let mut support: Vec<usize> = Vec::with_capacity(k);
        while support.len() < k {
            let j = rng.random_range(0..d);
            if !support.contains(&j) {
                support.push(j);
            }
        }
        let mut x = vec![0.0; d];
        for &j in &support {
            x[j] = StandardNormal.sample(&mut rng);
        }
        let n2 = crate::cs_codec::norm_sq(&x);
        if n2 == 0.0 {
            continue;
        }
        let e = crate::cs_codec::norm_sq(&phi.apply_sparse(&x, &support)) / n2;
        worst = worst.max((e - 1.0).abs());
    }
    worst
}
