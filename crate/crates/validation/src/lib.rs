//! Independent oracles and small helpers shared by the acceptance suite.
//!
//! Everything here recomputes quantities from the closed-form definitions
//! without calling the solver or bound code it is used to check.

use obcsaa::bounds::BoundParams;
use obcsaa::channel::{draw_channel_gains, WorkerProfile};
use obcsaa::scheduler::SchedulerInstance;
use rand::Rng;

/// Noise variance for `P = 10` at 5 dB.
pub const SNR5_NOISE: f64 = 10.0 / 3.162_277_660_168_379_5;

/// A random scheduling instance: Rayleigh-magnitude gains, `K_i` uniform in
/// `100..3000`, `P_i = 10`, and the MLP-sized bound constants.
pub fn random_instance(u: usize, seed: u64) -> SchedulerInstance {
    let mut rng = obcsaa::seed::rng(seed ^ 0x5eed_0f1a_57a7);
    let gains = draw_channel_gains(u, seed, 0, SNR5_NOISE)
        .expect("gain draw")
        .gains()
        .to_vec();
    let workers: Vec<WorkerProfile> = (0..u)
        .map(|_| WorkerProfile::new(rng.random_range(100..3000), 10.0).expect("profile"))
        .collect();
    let counts = workers.iter().map(|w| w.sample_count).collect();
    let bounds = BoundParams {
        lipschitz: 10.0,
        rho1: 20.0,
        rho2: 0.5,
        grad_bound: 1.0,
        delta: 0.2,
        kappa: 10,
        measurements: 1000,
        dim: 50_890,
        noise_variance: SNR5_NOISE,
        sample_counts: counts,
        learning_rate: 0.1,
    };
    SchedulerInstance::new(gains, workers, bounds).expect("instance")
}

/// Reconstruction constant `C` evaluated straight from its definition.
pub fn c_constant(delta: f64) -> f64 {
    let varpi = 2.0 * ((1.0 + delta) / (1.0 - delta)).sqrt();
    let varrho = 2f64.sqrt() * delta / (1.0 - delta);
    2.0 * varpi / (1.0 - varrho)
}

/// The scheduling objective, term by term, for selection `beta` at power
/// scale `b`.
pub fn objective_oracle(inst: &SchedulerInstance, beta: &[bool], b: f64) -> f64 {
    let p = &inst.bounds;
    let c2 = c_constant(p.delta).powi(2);
    let k_total: f64 = p.sample_counts.iter().map(|&k| k as f64).sum();
    let trunc = (1.0 + p.delta) * (p.dim - p.kappa) as f64 * p.grad_bound * p.grad_bound;
    let mut drop = 0.0;
    let mut sparse = 0.0;
    let mut received = 0.0;
    for (i, &on) in beta.iter().enumerate() {
        let k = p.sample_counts[i] as f64;
        if on {
            sparse += trunc / p.dim as f64;
            received += k * b;
        } else {
            drop += k * p.rho1 / k_total;
        }
    }
    let noise = p.noise_variance / (received * received);
    drop + c2 * (1.0 + trunc / (p.measurements as f64 * p.dim as f64) + noise) + sparse
}

/// Largest power scale every selected worker can afford: `min h_i √P_i / K_i`.
pub fn b_max_oracle(inst: &SchedulerInstance, beta: &[bool]) -> f64 {
    beta.iter()
        .enumerate()
        .filter(|(_, &on)| on)
        .map(|(i, _)| inst.gains[i] * inst.workers[i].max_power.sqrt() / inst.workers[i].sample_count as f64)
        .fold(f64::INFINITY, f64::min)
}

/// Exhaustive search over every nonempty selection; returns the minimizing
/// selection and its objective.
pub fn brute_force(inst: &SchedulerInstance) -> (Vec<bool>, f64) {
    let u = inst.gains.len();
    assert!(u < 24, "brute force is exponential");
    let mut best = (Vec::new(), f64::INFINITY);
    for mask in 1u32..(1 << u) {
        let beta: Vec<bool> = (0..u).map(|i| mask >> i & 1 == 1).collect();
        let value = objective_oracle(inst, &beta, b_max_oracle(inst, &beta));
        if value < best.1 {
            best = (beta, value);
        }
    }
    best
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Number of adjacent pairs where the sequence drops, and the largest drop.
pub fn inversions(values: &[f64]) -> (usize, f64) {
    values.windows(2).fold((0, 0.0), |(n, worst), w| {
        if w[1] < w[0] {
            (n + 1, f64::max(worst, w[0] - w[1]))
        } else {
            (n, worst)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn c_constant_limits() {
        assert!((c_constant(1e-12) - 4.0).abs() < 1e-9);
        assert!((c_constant(0.2) - 7.578_320_335_011_695).abs() < 1e-12);
    }

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = [10.0, 100.0, 1000.0].iter().map(|&x: &f64| (x, 3.0 * x.powf(0.8))).collect();
        assert!((loglog_slope(&pts) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn inversion_count() {
        assert_eq!(inversions(&[0.1, 0.2, 0.3]), (0, 0.0));
        let (n, worst) = inversions(&[0.5, 0.49, 0.6, 0.55]);
        assert_eq!(n, 2);
        assert!((worst - 0.05).abs() < 1e-12);
    }

    #[test]
    fn brute_force_agrees_with_the_objective_on_one_worker() {
        let inst = random_instance(1, 3);
        let (beta, value) = brute_force(&inst);
        assert_eq!(beta, vec![true]);
        let direct = obcsaa::scheduler::objective_r(&inst, &beta, inst.worker_b_max(0)).unwrap();
        assert!((value - direct).abs() <= 1e-12 * direct);
    }
}
