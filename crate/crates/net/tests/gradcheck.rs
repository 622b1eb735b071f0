use ccir_core::losses::LossConfig;
use ccir_net::config::NetworkConfig;
use ccir_net::gradcheck::{grad_check, rigged_minimum_gradient, GradCheckOptions};

#[test]
fn analytic_gradients_match_central_differences() {
    let opts = GradCheckOptions::default();
    for seed in [0, 1, 2] {
        let r = grad_check(&NetworkConfig::tiny(), seed, &opts).unwrap();
        assert!(r.checked >= 200, "{r:?}");
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}

#[test]
fn grad_check_is_repeatable() {
    let opts = GradCheckOptions {
        coords: 40,
        ..GradCheckOptions::default()
    };
    let a = grad_check(&NetworkConfig::tiny(), 9, &opts).unwrap();
    let b = grad_check(&NetworkConfig::tiny(), 9, &opts).unwrap();
    assert_eq!(a.max_rel_error.to_bits(), b.max_rel_error.to_bits());
    assert_eq!(a.worst, b.worst);
}

#[test]
fn exact_minimum_has_zero_gradient() {
    for seed in [0, 5] {
        let g = rigged_minimum_gradient(&NetworkConfig::tiny(), seed, &LossConfig::default()).unwrap();
        assert!(g <= 1e-10, "{g}");
    }
}
