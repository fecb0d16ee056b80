//! Analytic gradients against central finite differences in f64.

#[path = "support/gradsuite.rs"]
mod gradsuite;

use gradsuite::{end_to_end_error, primitive_errors, END_TO_END_TOL, PRIMITIVE_TOL};

#[test]
fn every_primitive() {
    let errors = primitive_errors();
    assert!(errors.len() >= 25);
    for (name, err) in errors {
        assert!(err <= PRIMITIVE_TOL, "{name}: relative error {err:e}");
    }
}

#[test]
fn end_to_end_hybrid_loss() {
    let err = end_to_end_error(dico_core::diffusion::HYBRID_LAMBDA);
    assert!(err <= END_TO_END_TOL, "relative error {err:e}");
}

#[test]
fn end_to_end_bound_dominated() {
    // a large weight makes the bound, which reaches the model only via v,
    // dominate the check
    let err = end_to_end_error(100.0);
    assert!(err <= END_TO_END_TOL, "relative error {err:e}");
}
