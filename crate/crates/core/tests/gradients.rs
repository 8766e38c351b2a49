mod common;

use common::{worst_gradient_error, REL_TOL};

#[test]
fn gradients_match_finite_differences_tiny_model() {
    let worst = worst_gradient_error(1, 2, 8, 0);
    assert!(worst < REL_TOL, "worst relative error {worst:e}");
}

#[test]
fn gradients_match_on_random_small_instances() {
    for seed in 1..6 {
        let worst = worst_gradient_error(2, 3, 12, seed);
        assert!(worst < REL_TOL, "seed {seed}: worst relative error {worst:e}");
    }
}
