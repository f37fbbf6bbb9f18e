mod common;

use common::{densenet_check, layer_checks, GRAD_TOL};

#[test]
fn every_layer_matches_central_differences_over_20_seeds() {
    for seed in 0..20 {
        for (name, e) in layer_checks(seed) {
            assert!(e.checked > 0, "{name} seed {seed}: nothing checked");
            assert!(e.norm <= GRAD_TOL, "{name} seed {seed}: {e:?}");
        }
    }
}

#[test]
fn tiny_densenet_matches_central_differences_over_20_seeds() {
    for seed in 0..20 {
        let e = densenet_check(seed, 6);
        assert!(
            e.checked > 200,
            "seed {seed}: only {} coordinates",
            e.checked
        );
        assert!(e.norm <= GRAD_TOL, "seed {seed}: {e:?}");
    }
}

#[test]
fn layer_errors_are_far_below_tolerance_on_well_scaled_inputs() {
    // Convolution and batch norm gradients are O(1) here, so even the
    // coordinatewise error must meet the tolerance.
    for seed in 0..20 {
        for (name, e) in layer_checks(seed) {
            if name.starts_with("conv")
                || name.starts_with("batch_norm")
                || name == "channel_concat"
            {
                assert!(e.elementwise <= GRAD_TOL, "{name} seed {seed}: {e:?}");
            }
        }
    }
}
