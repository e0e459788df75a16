//! Analog multiple-access channel: block-fading gains, channel-inversion power
//! control, over-the-air superposition with AWGN and PS-side post-processing.
//!
//! Worker `i` pre-scales its symbols by `p_i = β_i K_i b / h_i`, so after the
//! channel multiplies by `h_i` the PS receives `Σ K_i b β_i c_i + z`. Dividing
//! by `Σ K_i β_i b` yields the sample-weighted average of the scheduled
//! workers' symbols plus scaled noise.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cs_codec::CompressedUpdate;
use crate::error::{check_len, Error, Result};
use crate::seed::{self, Purpose};

/// Relative slack on the peak-power check, absorbing rounding in `b = h√P/K`.
pub const POWER_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkerProfile {
    /// Local dataset size `K_i`.
    pub sample_count: usize,
    /// Peak transmit power `P_i^Max` in mW.
    pub max_power: f64,
}

impl WorkerProfile {
    pub fn new(sample_count: usize, max_power: f64) -> Result<Self> {
        let w = Self {
            sample_count,
            max_power,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_count < 1 {
            return Err(Error::param("sample_count", "K_i must be >= 1"));
        }
        if !(self.max_power > 0.0 && self.max_power.is_finite()) {
            return Err(Error::param("max_power", format!("must be > 0, got {}", self.max_power)));
        }
        Ok(())
    }

    pub fn k(&self) -> f64 {
        self.sample_count as f64
    }
}

/// Channel state for one round. Gains are fixed within the round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRound {
    gains: Vec<f64>,
    noise_variance: f64,
    round_index: usize,
}

impl ChannelRound {
    pub fn new(gains: Vec<f64>, noise_variance: f64, round_index: usize) -> Result<Self> {
        if let Some(i) = gains.iter().position(|h| !(*h > 0.0 && h.is_finite())) {
            return Err(Error::param("gains", format!("h_{i} = {} must be > 0", gains[i])));
        }
        if !(noise_variance >= 0.0 && noise_variance.is_finite()) {
            return Err(Error::param("noise_variance", format!("must be >= 0, got {noise_variance}")));
        }
        Ok(Self {
            gains,
            noise_variance,
            round_index,
        })
    }

    pub fn gains(&self) -> &[f64] {
        &self.gains
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    pub fn round_index(&self) -> usize {
        self.round_index
    }

    pub fn workers(&self) -> usize {
        self.gains.len()
    }
}

/// Worker selection `β` and common power scaling `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulingDecision {
    pub selected: Vec<bool>,
    pub power_scale: f64,
}

impl SchedulingDecision {
    pub fn scheduled_count(&self) -> usize {
        self.selected.iter().filter(|&&b| b).count()
    }

    /// `Σ K_i β_i`.
    pub fn scheduled_samples(&self, workers: &[WorkerProfile]) -> f64 {
        self.selected
            .iter()
            .zip(workers)
            .filter(|(sel, _)| **sel)
            .map(|(_, w)| w.k())
            .sum()
    }

    /// Checks `K_i² b² / h_i² ≤ P_i^Max` for every scheduled worker.
    pub fn check_feasible(&self, workers: &[WorkerProfile], gains: &[f64]) -> Result<()> {
        check_len("decision vs workers", workers.len(), self.selected.len())?;
        check_len("decision vs gains", gains.len(), self.selected.len())?;
        if !(self.power_scale > 0.0 && self.power_scale.is_finite()) {
            return Err(Error::param("power_scale", format!("b must be > 0, got {}", self.power_scale)));
        }
        if self.scheduled_count() == 0 {
            return Err(Error::EmptySchedule("at least one worker must be scheduled"));
        }
        for (i, ((&sel, w), &h)) in self.selected.iter().zip(workers).zip(gains).enumerate() {
            if !sel {
                continue;
            }
            let p = w.k() * self.power_scale / h;
            let power = p * p;
            if power > w.max_power * (1.0 + POWER_TOLERANCE) {
                return Err(Error::PowerConstraint {
                    worker: i,
                    power,
                    limit: w.max_power,
                });
            }
        }
        Ok(())
    }
}

/// Draws `U` block-fading gains `h_i = |z_i|`, `z_i ~ N(0, 1)`, from the stream
/// keyed by `(seed, round_index)`.
pub fn draw_channel_gains(workers: usize, seed: u64, round_index: usize, noise_variance: f64) -> Result<ChannelRound> {
    if workers < 1 {
        return Err(Error::param("U", "need at least one worker"));
    }
    let mut rng = seed::rng(seed::derive(seed, Purpose::ChannelGains, round_index as u64, 0));
    let gains = (0..workers)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            // |z| = 0 has probability zero but would break channel inversion
            z.abs().max(f64::MIN_POSITIVE)
        })
        .collect();
    ChannelRound::new(gains, noise_variance, round_index)
}

/// Pre-processing factor `p = β K b / h`.
pub fn power_control_factor(worker: &WorkerProfile, selected: bool, power_scale: f64, gain: f64) -> Result<f64> {
    if !(gain > 0.0) {
        return Err(Error::param("gain", format!("channel gain must be > 0, got {gain}")));
    }
    if !(power_scale > 0.0) {
        return Err(Error::param("power_scale", format!("b must be > 0, got {power_scale}")));
    }
    Ok(if selected {
        worker.k() * power_scale / gain
    } else {
        0.0
    })
}

/// Over-the-air sum of arbitrary real symbol vectors.
///
/// `symbols[i]` may be `None` for unscheduled workers. Feasibility is checked
/// on the decision alone (unit-magnitude symbols), as for 1-bit updates.
pub fn aggregate_analog(
    symbols: &[Option<&[f64]>],
    round: &ChannelRound,
    workers: &[WorkerProfile],
    decision: &SchedulingDecision,
    noise_seed: u64,
) -> Result<Vec<f64>> {
    let u = round.workers();
    check_len("aggregate: updates vs gains", u, symbols.len())?;
    check_len("aggregate: workers vs gains", u, workers.len())?;
    decision.check_feasible(workers, round.gains())?;

    let len = symbols
        .iter()
        .zip(&decision.selected)
        .find_map(|(s, &sel)| if sel { *s } else { None })
        .map(<[f64]>::len)
        .ok_or_else(|| Error::Input("no symbols supplied for the scheduled workers".into()))?;

    let mut y = vec![0.0; len];
    for (i, (&sel, sym)) in decision.selected.iter().zip(symbols).enumerate() {
        if !sel {
            continue;
        }
        let sym = sym.ok_or_else(|| Error::Input(format!("scheduled worker {i} sent no symbols")))?;
        check_len("aggregate: symbol length", len, sym.len())?;
        let h = round.gains()[i];
        let p = power_control_factor(&workers[i], true, decision.power_scale, h)?;
        for (acc, &c) in y.iter_mut().zip(sym) {
            *acc += h * p * c;
        }
    }

    if round.noise_variance() > 0.0 {
        let sd = round.noise_variance().sqrt();
        let mut rng = seed::rng(noise_seed);
        for acc in &mut y {
            let z: f64 = StandardNormal.sample(&mut rng);
            *acc += sd * z;
        }
    }
    Ok(y)
}

/// Received vector `y = Σ_i h_i p_i C(g_i) + z`.
pub fn aggregate_over_air(
    updates: &[CompressedUpdate],
    round: &ChannelRound,
    workers: &[WorkerProfile],
    decision: &SchedulingDecision,
    noise_seed: u64,
) -> Result<Vec<f64>> {
    let symbols: Vec<Vec<f64>> = updates.iter().map(CompressedUpdate::to_f64).collect();
    let refs: Vec<Option<&[f64]>> = symbols.iter().map(|s| Some(s.as_slice())).collect();
    aggregate_analog(&refs, round, workers, decision, noise_seed)
}

/// Applies the post-processing factor `(Σ K_i β_i b)^{-1}`.
pub fn post_process(y: &[f64], workers: &[WorkerProfile], decision: &SchedulingDecision) -> Result<Vec<f64>> {
    check_len("post_process: workers vs decision", decision.selected.len(), workers.len())?;
    let denom = decision.scheduled_samples(workers) * decision.power_scale;
    if !(denom > 0.0) {
        return Err(Error::EmptySchedule("post-processing factor undefined without scheduled workers"));
    }
    Ok(y.iter().map(|v| v / denom).collect())
}

/// The noise-free target `Σ K_i β_i c_i / Σ K_i β_i`.
pub fn desired_average(
    updates: &[CompressedUpdate],
    workers: &[WorkerProfile],
    decision: &SchedulingDecision,
) -> Result<Vec<f64>> {
    check_len("desired_average", workers.len(), updates.len())?;
    let total = decision.scheduled_samples(workers);
    if total == 0.0 {
        return Err(Error::EmptySchedule("desired average needs a scheduled worker"));
    }
    let len = updates.first().map_or(0, CompressedUpdate::len);
    let mut out = vec![0.0; len];
    for ((u, w), &sel) in updates.iter().zip(workers).zip(&decision.selected) {
        if sel {
            for (o, &c) in out.iter_mut().zip(u.signs()) {
                *o += w.k() * f64::from(c);
            }
        }
    }
    Ok(out.into_iter().map(|v| v / total).collect())
}
