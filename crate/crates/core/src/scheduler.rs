//! Per-round joint worker selection and power scaling.
//!
//! The round objective
//!
//! ```text
//! R(β, b) = Σ K_i ρ1 (1−β_i)/K
//!         + C² (1 + (1+δ)(D−κ)G²/(DS) + σ² (Σ K_i β_i b)^{-2})
//!         + Σ β_i (1+δ)(D−κ)G²/D
//! ```
//!
//! is minimized subject to the peak-power limit `K_i² b² / h_i² ≤ P_i`.
//! For fixed `β` the objective decreases in `b`, so the best `b` is the largest
//! feasible one. [`solve_enumeration`] scans every nonempty `β`;
//! [`solve_admm`] decomposes the problem per worker and costs `O(U)` per
//! iteration.

use serde::{Deserialize, Serialize};

use crate::bounds::{rip_constants, BoundParams};
use crate::channel::{SchedulingDecision, WorkerProfile};
use crate::error::{check_len, Error, Result};

/// Default largest `U` accepted by [`solve_enumeration`].
pub const ENUMERATION_CAP: usize = 20;

/// Strict-positivity floor for `r`, `q` and `b` inside ADMM.
pub const POSITIVITY_FLOOR: f64 = 1e-12;

/// One round's scheduling problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerInstance {
    pub gains: Vec<f64>,
    pub workers: Vec<WorkerProfile>,
    pub bounds: BoundParams,
}

impl SchedulerInstance {
    pub fn new(gains: Vec<f64>, workers: Vec<WorkerProfile>, bounds: BoundParams) -> Result<Self> {
        let inst = Self { gains, workers, bounds };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        check_len("scheduler: workers vs gains", self.gains.len(), self.workers.len())?;
        if self.gains.is_empty() {
            return Err(Error::param("U", "need at least one worker"));
        }
        if let Some(i) = self.gains.iter().position(|h| !(*h > 0.0 && h.is_finite())) {
            return Err(Error::param("gains", format!("h_{i} must be > 0")));
        }
        for w in &self.workers {
            w.validate()?;
        }
        self.bounds.validate()?;
        let counts: Vec<usize> = self.workers.iter().map(|w| w.sample_count).collect();
        if counts != self.bounds.sample_counts {
            return Err(Error::Input("bound parameters disagree with worker sample counts".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.gains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gains.is_empty()
    }

    /// Largest individually feasible `b` for worker `i`: `h_i √P_i / K_i`.
    pub fn worker_b_max(&self, i: usize) -> f64 {
        self.gains[i] * self.workers[i].max_power.sqrt() / self.workers[i].k()
    }

    fn constants(&self) -> Result<Constants> {
        let p = &self.bounds;
        let c2 = rip_constants(p.delta)?.c.powi(2);
        let trunc = (p.dim - p.kappa) as f64 / p.dim as f64;
        let g2 = p.grad_bound * p.grad_bound;
        let total = p.total_samples();
        Ok(Constants {
            base: c2 * (1.0 + (1.0 + p.delta) * trunc * g2 / p.measurements as f64),
            noise: c2 * p.noise_variance,
            per_worker: (1.0 + p.delta) * trunc * g2,
            drop_cost: self.workers.iter().map(|w| w.k() * p.rho1 / total).collect(),
        })
    }
}

/// Objective pieces that do not depend on the decision.
struct Constants {
    /// `C²(1 + (1+δ)(D−κ)G²/(DS))`
    base: f64,
    /// `C² σ²`
    noise: f64,
    /// `(1+δ)(D−κ)G²/D`
    per_worker: f64,
    /// `K_i ρ1 / K`
    drop_cost: Vec<f64>,
}

impl Constants {
    fn objective(&self, selected: &[bool], scheduled_samples: f64, b: f64) -> f64 {
        let mut dropped = 0.0;
        let mut count = 0.0;
        for (&sel, &cost) in selected.iter().zip(&self.drop_cost) {
            if sel {
                count += 1.0;
            } else {
                dropped += cost;
            }
        }
        let scale = scheduled_samples * b;
        dropped + self.base + self.noise / (scale * scale) + count * self.per_worker
    }
}

fn scheduled_samples(inst: &SchedulerInstance, selected: &[bool]) -> f64 {
    selected
        .iter()
        .zip(&inst.workers)
        .filter(|(s, _)| **s)
        .map(|(_, w)| w.k())
        .sum()
}

/// Round objective `R_t(β, b)`.
pub fn objective_r(inst: &SchedulerInstance, selected: &[bool], power_scale: f64) -> Result<f64> {
    check_len("objective_r: selection", inst.len(), selected.len())?;
    if !selected.iter().any(|&s| s) {
        return Err(Error::EmptySchedule("objective is unbounded for an empty schedule"));
    }
    if !(power_scale > 0.0 && power_scale.is_finite()) {
        return Err(Error::param("power_scale", format!("b must be > 0, got {power_scale}")));
    }
    let k = inst.constants()?;
    Ok(k.objective(selected, scheduled_samples(inst, selected), power_scale))
}

/// `min_{i: β_i = 1} h_i √P_i / K_i`, the optimal `b` for a fixed selection.
pub fn feasible_b_max(inst: &SchedulerInstance, selected: &[bool]) -> Result<f64> {
    check_len("feasible_b_max: selection", inst.len(), selected.len())?;
    selected
        .iter()
        .enumerate()
        .filter(|(_, s)| **s)
        .map(|(i, _)| inst.worker_b_max(i))
        .reduce(f64::min)
        .ok_or(Error::EmptySchedule("no scheduled worker bounds b"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Enumeration,
    Admm,
    /// Every worker scheduled at its largest feasible `b`; no optimization.
    AllWorkers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerResult {
    pub decision: SchedulingDecision,
    pub objective: f64,
    pub solver: SolverKind,
    pub iterations: usize,
    pub converged: bool,
}

/// Exhaustive search over all `2^U − 1` nonempty selections.
pub fn solve_enumeration(inst: &SchedulerInstance) -> Result<SchedulerResult> {
    solve_enumeration_capped(inst, ENUMERATION_CAP)
}

pub fn solve_enumeration_capped(inst: &SchedulerInstance, cap: usize) -> Result<SchedulerResult> {
    inst.validate()?;
    let u = inst.len();
    if u > cap || u >= usize::BITS as usize {
        return Err(Error::TooLarge {
            solver: "enumeration",
            workers: u,
            cap,
        });
    }
    let k = inst.constants()?;
    let b_single: Vec<f64> = (0..u).map(|i| inst.worker_b_max(i)).collect();
    let mut selected = vec![false; u];
    let mut best: Option<(f64, usize, f64)> = None;
    for mask in 1usize..(1 << u) {
        let mut samples = 0.0;
        let mut b = f64::INFINITY;
        for i in 0..u {
            selected[i] = mask & (1 << i) != 0;
            if selected[i] {
                samples += inst.workers[i].k();
                b = b.min(b_single[i]);
            }
        }
        let r = k.objective(&selected, samples, b);
        if best.is_none_or(|(r_best, _, _)| r < r_best) {
            best = Some((r, mask, b));
        }
    }
    let (objective, mask, b) = best.expect("U >= 1 yields at least one candidate");
    Ok(SchedulerResult {
        decision: SchedulingDecision {
            selected: (0..u).map(|i| mask & (1 << i) != 0).collect(),
            power_scale: b,
        },
        objective,
        solver: SolverKind::Enumeration,
        iterations: (1 << u) - 1,
        converged: true,
    })
}

/// Schedule everyone at the common feasible `b`.
pub fn solve_all_workers(inst: &SchedulerInstance) -> Result<SchedulerResult> {
    let selected = vec![true; inst.len()];
    let b = feasible_b_max(inst, &selected)?;
    Ok(SchedulerResult {
        objective: objective_r(inst, &selected, b)?,
        decision: SchedulingDecision {
            selected,
            power_scale: b,
        },
        solver: SolverKind::AllWorkers,
        iterations: 0,
        converged: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdmmParams {
    pub step_c: f64,
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for AdmmParams {
    fn default() -> Self {
        Self {
            step_c: 1.0,
            abs_tol: 1e-4,
            rel_tol: 1e-4,
            max_iter: 500,
        }
    }
}

/// ADMM iterate.
///
/// `r`, `q` and `b` are expressed in units of `b_ref = max_i h_i √P_i / K_i`
/// and the peak-power rows are divided by `P_i`, so that every block of the
/// augmented Lagrangian is of order one regardless of the physical scale of
/// `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualState {
    pub r: Vec<f64>,
    pub q: Vec<f64>,
    pub b: f64,
    pub beta: Vec<bool>,
    /// Multipliers of the peak-power rows, kept nonnegative.
    pub nu: Vec<f64>,
    /// Multipliers of `r_i = β_i q_i`.
    pub xi: Vec<f64>,
    /// Multipliers of `q_i = b`.
    pub varsigma: Vec<f64>,
    pub step_c: f64,
}

impl DualState {
    /// Starts from `β = 1`, `r = q = b = min_i b_max_i` and zero multipliers.
    pub fn initial(inst: &SchedulerInstance, step_c: f64) -> Self {
        let u = inst.len();
        let b_ref = b_reference(inst);
        let b0 = (0..u)
            .map(|i| inst.worker_b_max(i) / b_ref)
            .fold(f64::INFINITY, f64::min);
        Self {
            r: vec![b0; u],
            q: vec![b0; u],
            b: b0,
            beta: vec![true; u],
            nu: vec![0.0; u],
            xi: vec![0.0; u],
            varsigma: vec![0.0; u],
            step_c,
        }
    }
}

fn b_reference(inst: &SchedulerInstance) -> f64 {
    (0..inst.len()).map(|i| inst.worker_b_max(i)).fold(0.0, f64::max)
}

/// Step 2 for worker `i`: minimizes the two branches `β_i ∈ {0, 1}` of the
/// augmented Lagrangian in closed form over `q_i` and keeps the cheaper one.
/// Ties select the worker.
pub fn admm_worker_subproblem(i: usize, state: &DualState, inst: &SchedulerInstance) -> Result<(f64, bool)> {
    let k = inst.constants()?;
    Ok(worker_step(i, state, k.drop_cost[i], k.per_worker))
}

fn worker_step(i: usize, st: &DualState, drop_cost: f64, per_worker: f64) -> (f64, bool) {
    let c = st.step_c;
    let (r, b, xi, vs) = (st.r[i], st.b, st.xi[i], st.varsigma[i]);
    let coupling = |q: f64| vs * (q - b) + 0.5 * c * (q - b) * (q - b);

    let q0 = (b - vs / c).max(POSITIVITY_FLOOR);
    let cost0 = drop_cost + xi * r + 0.5 * c * r * r + coupling(q0);

    let q1 = (0.5 * (r + b + (xi - vs) / c)).max(POSITIVITY_FLOOR);
    let cost1 = per_worker + xi * (r - q1) + 0.5 * c * (r - q1) * (r - q1) + coupling(q1);

    if cost1 <= cost0 {
        (q1, true)
    } else {
        (q0, false)
    }
}

/// Step 1: jointly minimizes over `(r, b)`. The `b` block is a scalar
/// quadratic. The `r` block couples only through `s = Σ k_i r_i`; each `r_i`
/// is an explicit projected function of `λ = 2A/s³`, leaving one monotone
/// scalar equation solved by safeguarded Newton.
fn step_one(st: &mut DualState, weights: &[f64], power_rows: &[f64], noise_coef: f64) {
    let c = st.step_c;
    let u = st.r.len() as f64;
    let sum_q: f64 = st.q.iter().sum();
    let sum_vs: f64 = st.varsigma.iter().sum();
    st.b = ((c * sum_q + sum_vs) / (c * u)).max(POSITIVITY_FLOOR);

    // r_i(λ) = max(floor, (c β_i q_i − ξ_i + λ k_i) / (c + 2 ν_i / m_i²))
    let offsets: Vec<f64> = (0..st.r.len())
        .map(|i| c * if st.beta[i] { st.q[i] } else { 0.0 } - st.xi[i])
        .collect();
    let denoms: Vec<f64> = (0..st.r.len())
        .map(|i| c + 2.0 * st.nu[i] / (power_rows[i] * power_rows[i]))
        .collect();
    let r_at = |lambda: f64, out: &mut [f64]| -> (f64, f64) {
        // returns (Σ k_i r_i, d/dλ Σ k_i r_i)
        let mut s = 0.0;
        let mut ds = 0.0;
        for i in 0..out.len() {
            let raw = (offsets[i] + lambda * weights[i]) / denoms[i];
            if raw > POSITIVITY_FLOOR {
                out[i] = raw;
                ds += weights[i] * weights[i] / denoms[i];
            } else {
                out[i] = POSITIVITY_FLOOR;
            }
            s += weights[i] * out[i];
        }
        (s, ds)
    };

    // warm start from the previous iterate's s
    let guess = weights
        .iter()
        .zip(&st.r)
        .map(|(w, r)| w * r)
        .sum::<f64>()
        .max(POSITIVITY_FLOOR);
    let mut r = std::mem::take(&mut st.r);
    if noise_coef == 0.0 {
        r_at(0.0, &mut r);
        st.r = r;
        return;
    }
    // root of φ(s) = Σ k_i r_i(2A/s³) − s, strictly decreasing in s
    let phi = |s: f64, r: &mut [f64]| -> (f64, f64) {
        let lambda = 2.0 * noise_coef / (s * s * s);
        let (sum, dsum) = r_at(lambda, r);
        let dlambda = -6.0 * noise_coef / (s * s * s * s);
        (sum - s, dsum * dlambda - 1.0)
    };
    let (f0, df0) = phi(guess, &mut r);
    let (mut lo, mut hi) = (guess, guess);
    if f0 > 0.0 {
        hi = 2.0 * guess;
        while phi(hi, &mut r).0 > 0.0 {
            lo = hi;
            hi *= 2.0;
        }
    } else {
        lo = 0.5 * guess;
        while lo > POSITIVITY_FLOOR && phi(lo, &mut r).0 <= 0.0 {
            hi = lo;
            lo *= 0.5;
        }
        lo = lo.max(POSITIVITY_FLOOR);
    }
    let newton = guess - f0 / df0;
    let mut s = if newton > lo && newton < hi && df0 < 0.0 {
        newton
    } else {
        0.5 * (lo + hi)
    };
    for _ in 0..200 {
        let (f, df) = phi(s, &mut r);
        if f > 0.0 {
            lo = s;
        } else {
            hi = s;
        }
        let newton = s - f / df;
        let next = if newton > lo && newton < hi && df < 0.0 {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - s).abs() <= 1e-9 * s || hi - lo <= 1e-9 * hi {
            s = next;
            break;
        }
        s = next;
    }
    phi(s, &mut r);
    st.r = r;
}

/// ADMM decomposition of the scheduling problem.
///
/// Every Step-2 selection is repaired to `(β, feasible_b_max(β))` and the one
/// with the lowest `R` is returned, so the result is always feasible. The
/// binary step makes the iterates cycle on many instances; the last iterate
/// alone is often far from the best one visited.
pub fn solve_admm(inst: &SchedulerInstance, params: &AdmmParams) -> Result<SchedulerResult> {
    inst.validate()?;
    if !(params.step_c > 0.0 && params.step_c.is_finite()) {
        return Err(Error::param("step_c", format!("must be > 0, got {}", params.step_c)));
    }
    let k = inst.constants()?;
    let mut state = DualState::initial(inst, params.step_c);
    let mut incumbent: Option<(f64, Vec<bool>)> = None;
    let (iterations, converged) = run_admm(inst, params, &mut state, |s| {
        if let Ok(b) = feasible_b_max(inst, &s.beta) {
            let r = k.objective(&s.beta, scheduled_samples(inst, &s.beta), b);
            if incumbent.as_ref().is_none_or(|(best, _)| r < *best) {
                incumbent = Some((r, s.beta.clone()));
            }
        }
    })?;
    let beta = incumbent.map(|(_, beta)| beta).unwrap_or(state.beta);
    finish_admm(inst, &beta, iterations, converged)
}

/// Runs ADMM from `state`, calling `observe` after every iteration.
pub fn run_admm(
    inst: &SchedulerInstance,
    params: &AdmmParams,
    state: &mut DualState,
    mut observe: impl FnMut(&DualState),
) -> Result<(usize, bool)> {
    let u = inst.len();
    let k = inst.constants()?;
    let b_ref = b_reference(inst);
    let total = inst.bounds.total_samples();
    let weights: Vec<f64> = inst.workers.iter().map(|w| w.k() / total).collect();
    let power_rows: Vec<f64> = (0..u).map(|i| inst.worker_b_max(i) / b_ref).collect();
    let noise_coef = k.noise / (total * b_ref).powi(2);
    let c = state.step_c;

    for l in 1..=params.max_iter {
        let b_prev = state.b;
        step_one(state, &weights, &power_rows, noise_coef);

        let updates: Vec<(f64, bool)> = (0..u)
            .map(|i| worker_step(i, state, k.drop_cost[i], k.per_worker))
            .collect();
        for (i, (q, beta)) in updates.into_iter().enumerate() {
            state.q[i] = q;
            state.beta[i] = beta;
        }

        let mut consensus = 0.0;
        for i in 0..u {
            let rel_power = state.r[i] / power_rows[i];
            state.nu[i] = (state.nu[i] + c * (rel_power * rel_power - 1.0)).max(0.0);
            let bq = if state.beta[i] { state.q[i] } else { 0.0 };
            state.xi[i] += c * (state.r[i] - bq);
            state.varsigma[i] += c * (state.q[i] - state.b);
            consensus += (state.q[i] - state.b).abs();
        }
        observe(state);
        if !consensus.is_finite() || !state.b.is_finite() {
            return Err(Error::Numeric(format!("ADMM diverged at iteration {l}")));
        }
        if consensus < params.abs_tol && (state.b - b_prev).abs() < params.rel_tol {
            return Ok((l, true));
        }
    }
    Ok((params.max_iter, false))
}

fn finish_admm(inst: &SchedulerInstance, beta: &[bool], iterations: usize, converged: bool) -> Result<SchedulerResult> {
    let mut selected = beta.to_vec();
    if !selected.iter().any(|&s| s) {
        // nearest nonempty selection: the best single worker
        let mut best = (f64::INFINITY, 0);
        for i in 0..inst.len() {
            let mut one = vec![false; inst.len()];
            one[i] = true;
            let r = objective_r(inst, &one, inst.worker_b_max(i))?;
            if r < best.0 {
                best = (r, i);
            }
        }
        selected[best.1] = true;
    }
    let b = feasible_b_max(inst, &selected)?;
    Ok(SchedulerResult {
        objective: objective_r(inst, &selected, b)?,
        decision: SchedulingDecision {
            selected,
            power_scale: b,
        },
        solver: SolverKind::Admm,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::draw_channel_gains;
    use rand::Rng;

    fn bound_params(counts: Vec<usize>) -> BoundParams {
        BoundParams {
            lipschitz: 10.0,
            rho1: 20.0,
            rho2: 0.5,
            grad_bound: 1.0,
            delta: 0.2,
            kappa: 10,
            measurements: 1000,
            dim: 50890,
            noise_variance: 10.0 / 10f64.powf(0.5),
            sample_counts: counts,
            learning_rate: 0.1,
        }
    }

    pub(crate) fn random_instance(u: usize, seed_: u64) -> SchedulerInstance {
        let mut rng = crate::seed::rng(seed_);
        let gains = draw_channel_gains(u, seed_, 0, 0.0).unwrap().gains().to_vec();
        let workers: Vec<WorkerProfile> = (0..u)
            .map(|_| WorkerProfile::new(rng.random_range(100..3000), 10.0).unwrap())
            .collect();
        let counts = workers.iter().map(|w| w.sample_count).collect();
        SchedulerInstance::new(gains, workers, bound_params(counts)).unwrap()
    }

    /// Independent re-enumeration using only the textbook formula.
    fn oracle(inst: &SchedulerInstance) -> (Vec<bool>, f64) {
        let p = &inst.bounds;
        let u = inst.len();
        let r = crate::bounds::rip_constants(p.delta).unwrap();
        let c2 = r.c * r.c;
        let big_k: f64 = p.sample_counts.iter().map(|&k| k as f64).sum();
        let mut best = (Vec::new(), f64::INFINITY);
        for mask in 1u32..(1 << u) {
            let beta: Vec<bool> = (0..u).map(|i| mask >> i & 1 == 1).collect();
            let b = (0..u)
                .filter(|&i| beta[i])
                .map(|i| inst.gains[i] * inst.workers[i].max_power.sqrt() / inst.workers[i].sample_count as f64)
                .fold(f64::INFINITY, f64::min);
            let mut value = 0.0;
            let mut kb = 0.0;
            for i in 0..u {
                let ki = inst.workers[i].sample_count as f64;
                if beta[i] {
                    kb += ki * b;
                    value += (1.0 + p.delta) * (p.dim - p.kappa) as f64 / p.dim as f64 * p.grad_bound.powi(2);
                } else {
                    value += ki * p.rho1 / big_k;
                }
            }
            value += c2
                * (1.0
                    + (1.0 + p.delta) * (p.dim - p.kappa) as f64 * p.grad_bound.powi(2)
                        / (p.dim as f64 * p.measurements as f64)
                    + p.noise_variance / (kb * kb));
            if value < best.1 {
                best = (beta, value);
            }
        }
        best
    }

    #[test]
    fn objective_all_scheduled_has_no_drop_term() {
        let inst = random_instance(4, 1);
        let k = inst.constants().unwrap();
        let all = [true; 4];
        let b = 1e-4;
        let samples = scheduled_samples(&inst, &all);
        let r = objective_r(&inst, &all, b).unwrap();
        let expected = k.base + k.noise / (samples * b).powi(2) + 4.0 * k.per_worker;
        assert!((r - expected).abs() <= 1e-12 * r);
    }

    #[test]
    fn objective_hand_instance() {
        // U=2, K=[1,1], ρ1=1, δ→C=4 is not admissible, so use δ = 0.2 and
        // κ = D, G = 1: R = C²(1 + σ²/(Σβb)²) + Σ(1−β_i)/2
        let mut p = bound_params(vec![1, 1]);
        p.rho1 = 1.0;
        p.kappa = p.dim;
        p.noise_variance = 0.5;
        let inst = SchedulerInstance::new(
            vec![0.5, 2.0],
            vec![WorkerProfile::new(1, 10.0).unwrap(); 2],
            p,
        )
        .unwrap();
        let c2 = rip_constants(0.2).unwrap().c.powi(2);
        let both = objective_r(&inst, &[true, true], 0.1).unwrap();
        assert!((both - c2 * (1.0 + 0.5 / 0.04)).abs() < 1e-10 * both);
        let one = objective_r(&inst, &[false, true], 0.1).unwrap();
        assert!((one - (c2 * (1.0 + 0.5 / 0.01) + 0.5)).abs() < 1e-10 * one);
    }

    #[test]
    fn objective_decreases_in_b_and_rejects_bad_input() {
        let inst = random_instance(3, 2);
        let sel = [true, false, true];
        assert!(objective_r(&inst, &sel, 2e-4).unwrap() < objective_r(&inst, &sel, 1e-4).unwrap());
        assert!(matches!(objective_r(&inst, &[false; 3], 1e-4), Err(Error::EmptySchedule(_))));
        assert!(objective_r(&inst, &sel, 0.0).is_err());
    }

    #[test]
    fn b_max_closed_form() {
        let mut p = bound_params(vec![3000]);
        p.noise_variance = 1e-4;
        let inst = SchedulerInstance::new(vec![0.1], vec![WorkerProfile::new(3000, 10.0).unwrap()], p).unwrap();
        let b = feasible_b_max(&inst, &[true]).unwrap();
        assert!((b - 1.0541e-4).abs() < 1e-8);
        assert!((b - 0.1 * 10f64.sqrt() / 3000.0).abs() < 1e-18);
        assert!(feasible_b_max(&inst, &[false]).is_err());
    }

    #[test]
    fn b_max_ignores_unscheduled_workers() {
        let inst = random_instance(5, 3);
        let sel = [true, false, true, false, false];
        let b = feasible_b_max(&inst, &sel).unwrap();
        let mut inst2 = inst.clone();
        inst2.gains[1] = 1e-6;
        assert_eq!(b, feasible_b_max(&inst2, &sel).unwrap());
    }

    #[test]
    fn b_max_agrees_with_golden_section() {
        let inst = random_instance(4, 4);
        let sel = [true, true, false, true];
        let b_max = feasible_b_max(&inst, &sel).unwrap();
        // golden-section search of R over the feasible interval [b_max/1000, b_max]
        let f = |b: f64| objective_r(&inst, &sel, b).unwrap();
        let (mut lo, mut hi) = (b_max * 1e-3, b_max);
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let m1 = hi - phi * (hi - lo);
            let m2 = lo + phi * (hi - lo);
            if f(m1) < f(m2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        assert!((0.5 * (lo + hi) - b_max).abs() <= 1e-8 * b_max.max(1.0));
    }

    #[test]
    fn enumeration_single_worker() {
        let inst = random_instance(1, 5);
        let res = solve_enumeration(&inst).unwrap();
        assert_eq!(res.decision.selected, vec![true]);
        assert_eq!(res.decision.power_scale, inst.worker_b_max(0));
        assert_eq!(res.iterations, 1);
    }

    #[test]
    fn enumeration_matches_oracle() {
        for seed_ in 0..20 {
            let inst = random_instance(3, 100 + seed_);
            let res = solve_enumeration(&inst).unwrap();
            let (beta, value) = oracle(&inst);
            assert_eq!(res.decision.selected, beta);
            assert!((res.objective - value).abs() <= 1e-12 * value);
        }
    }

    #[test]
    fn enumeration_refuses_large_u() {
        let inst = random_instance(21, 6);
        assert!(matches!(solve_enumeration(&inst), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn enumeration_full_size_is_fast_and_feasible() {
        let mut p = bound_params(vec![3000; 10]);
        p.noise_variance = 1e-4;
        let gains = draw_channel_gains(10, 7, 0, 0.0).unwrap().gains().to_vec();
        let inst = SchedulerInstance::new(gains.clone(), vec![WorkerProfile::new(3000, 10.0).unwrap(); 10], p).unwrap();
        let t = std::time::Instant::now();
        let res = solve_enumeration(&inst).unwrap();
        assert!(t.elapsed().as_secs_f64() < 1.0);
        res.decision.check_feasible(&inst.workers, &gains).unwrap();
    }

    #[test]
    fn stronger_channel_never_hurts_enumeration() {
        for seed_ in 0..10 {
            let inst = random_instance(5, 200 + seed_);
            let base = solve_enumeration(&inst).unwrap().objective;
            for i in 0..5 {
                let mut better = inst.clone();
                better.gains[i] *= 1.5;
                assert!(solve_enumeration(&better).unwrap().objective <= base * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn worker_subproblem_branches() {
        let inst = random_instance(3, 8);
        let k = inst.constants().unwrap();
        let mut st = DualState::initial(&inst, 1.0);
        st.varsigma[0] = 0.3;
        st.b = 0.9;
        // branch 0 minimizer b − ς/c
        let q0 = (st.b - st.varsigma[0] / st.step_c).max(POSITIVITY_FLOOR);
        let (q, beta) = worker_step(0, &st, 0.0, 1e9);
        assert!(!beta);
        assert!((q - q0).abs() < 1e-15);

        // ς = ξ = 0, r = b: compare penalty vs drop cost (+ c/2 b²)
        let mut st = DualState::initial(&inst, 1.0);
        st.r[1] = st.b;
        let (q1, beta_small) = worker_step(1, &st, 0.1 * k.per_worker, k.per_worker);
        assert!(!beta_small);
        assert!((q1 - st.b).abs() < 1e-15);
        let (_, beta_large) = worker_step(1, &st, 10.0 * k.per_worker, k.per_worker);
        assert!(beta_large);
        let (q, beta) = admm_worker_subproblem(1, &st, &inst).unwrap();
        assert_eq!(beta, k.drop_cost[1] + 0.5 * st.b * st.b >= k.per_worker);
        assert!(q > 0.0);
    }

    #[test]
    fn symmetric_workers_get_identical_subproblem_answers() {
        let p = bound_params(vec![500; 4]);
        let inst = SchedulerInstance::new(vec![0.8; 4], vec![WorkerProfile::new(500, 10.0).unwrap(); 4], p).unwrap();
        let st = DualState::initial(&inst, 1.0);
        let first = admm_worker_subproblem(0, &st, &inst).unwrap();
        for i in 1..4 {
            assert_eq!(admm_worker_subproblem(i, &st, &inst).unwrap(), first);
        }
    }

    #[test]
    fn admm_single_worker_matches_enumeration() {
        let inst = random_instance(1, 9);
        let a = solve_admm(&inst, &AdmmParams::default()).unwrap();
        let e = solve_enumeration(&inst).unwrap();
        assert_eq!(a.decision, e.decision);
        assert_eq!(a.objective, e.objective);
    }

    #[test]
    fn admm_iterates_are_well_behaved() {
        for seed_ in 0..10 {
            let inst = random_instance(6, 300 + seed_);
            let mut st = DualState::initial(&inst, 1.0);
            let params = AdmmParams::default();
            let (_, converged) = run_admm(&inst, &params, &mut st, |s| {
                assert!(s.nu.iter().all(|&v| v >= 0.0));
                assert!(s.b > 0.0 && s.b.is_finite());
                let primal: f64 = (0..s.r.len())
                    .map(|i| (s.r[i] - if s.beta[i] { s.q[i] } else { 0.0 }).abs())
                    .sum();
                let consensus: f64 = s.q.iter().map(|q| (q - s.b).abs()).sum();
                assert!(primal.is_finite() && consensus.is_finite());
            })
            .unwrap();
            if converged {
                let consensus: f64 = st.q.iter().map(|q| (q - st.b).abs()).sum();
                assert!(consensus < params.abs_tol);
            }
            let res = solve_admm(&inst, &params).unwrap();
            res.decision.check_feasible(&inst.workers, &inst.gains).unwrap();
        }
    }

    #[test]
    fn admm_rejects_bad_step() {
        let inst = random_instance(2, 10);
        let params = AdmmParams {
            step_c: 0.0,
            ..AdmmParams::default()
        };
        assert!(solve_admm(&inst, &params).is_err());
    }
}
