//! Algebraic relations between the bound functions.

use obcsaa::bounds::{
    a_t, bt_term, convergence_rhs, epsilon_bound, error_floor, quantization_error_bound, rip_constants,
    round_report, sparsification_error_bound, total_error_bound, BoundParams, DELTA_MAX,
};
use proptest::prelude::*;

fn params(delta: f64, kappa: usize, measurements: usize, dim: usize, noise: f64, counts: Vec<usize>) -> BoundParams {
    BoundParams {
        lipschitz: 4.0,
        rho1: 15.0,
        rho2: 0.3,
        grad_bound: 1.5,
        delta,
        kappa,
        measurements,
        dim,
        noise_variance: noise,
        sample_counts: counts,
        learning_rate: 0.1,
    }
}

#[test]
fn report_collects_the_individual_bounds() {
    let p = params(0.2, 10, 400, 2000, 1e-2, vec![300, 700, 1000]);
    let sel = [true, false, true];
    let r = round_report(&p, &sel, 2e-3).unwrap();
    assert_eq!(r.sparsify_bound, sparsification_error_bound(&p));
    assert_eq!(r.quantize_bound, quantization_error_bound(&p));
    assert_eq!(r.epsilon, epsilon_bound(&p, &sel, 2e-3).unwrap());
    assert_eq!(r.total_error_bound, total_error_bound(&p, &sel, 2e-3).unwrap());
    assert_eq!(r.b_term, bt_term(&p, &sel, 2e-3).unwrap());
}

#[test]
fn invalid_parameters_are_rejected() {
    let good = params(0.2, 10, 400, 2000, 0.0, vec![1]);
    good.validate().unwrap();
    for bad in [
        BoundParams { delta: DELTA_MAX, ..good.clone() },
        BoundParams { delta: 0.5, ..good.clone() },
        BoundParams { rho2: 1.0, ..good.clone() },
        BoundParams { measurements: 2000, ..good.clone() },
        BoundParams { kappa: 2001, ..good.clone() },
        BoundParams { sample_counts: vec![], ..good.clone() },
        BoundParams { noise_variance: -1.0, ..good.clone() },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
    assert!(total_error_bound(&good, &[false], 1.0).is_err());
    assert!(total_error_bound(&good, &[true], 0.0).is_err());
    assert!(total_error_bound(&good, &[true, true], 1.0).is_err());
}

#[test]
fn error_floor_is_the_rhs_without_the_gap() {
    let p = params(0.2, 10, 400, 2000, 1e-2, vec![300, 700]);
    let series = [3.0, 2.0, 1.5, 1.0];
    let floor = error_floor(&p, &series).unwrap();
    let rhs = convergence_rhs(&p, 5.0, &series).unwrap();
    let scale = 2.0 * p.lipschitz / (series.len() as f64 * (1.0 - p.rho2));
    assert!((rhs - floor - scale * 5.0).abs() < 1e-12);
    assert!((floor - scale * series.iter().sum::<f64>()).abs() < 1e-12);
    assert!(a_t(&p, &[true, true]).unwrap().is_finite());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn total_bound_decomposes(
        delta in 0.01f64..0.41,
        kappa in 1usize..500,
        measurements in 1usize..1000,
        noise in 0.0f64..10.0,
        counts in prop::collection::vec(1usize..4000, 1..8),
        b in 1e-5f64..1.0,
    ) {
        let p = params(delta, kappa, measurements, 1000, noise, counts.clone());
        let sel: Vec<bool> = (0..counts.len()).map(|i| i % 2 == 0).collect();
        let c2 = rip_constants(delta).unwrap().c.powi(2);
        let expect = c2 / measurements as f64 * epsilon_bound(&p, &sel, b).unwrap()
            + sel.iter().filter(|&&s| s).count() as f64 * sparsification_error_bound(&p);
        let got = total_error_bound(&p, &sel, b).unwrap();
        prop_assert!((got - expect).abs() <= 1e-12 * expect);
        prop_assert!(got >= c2);
    }

    #[test]
    fn bounds_shrink_with_power_scale_and_grow_with_delta(
        b in 1e-5f64..0.1,
        delta in 0.05f64..0.35,
        noise in 1e-3f64..10.0,
    ) {
        let p = params(delta, 10, 400, 2000, noise, vec![100, 200]);
        let sel = [true, true];
        let lo = total_error_bound(&p, &sel, b).unwrap();
        let hi = total_error_bound(&p, &sel, 2.0 * b).unwrap();
        prop_assert!(hi < lo);
        let wider = params(delta + 0.05, 10, 400, 2000, noise, vec![100, 200]);
        prop_assert!(total_error_bound(&wider, &sel, b).unwrap() > lo);
    }
}
