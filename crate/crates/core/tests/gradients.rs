//! Analytic gradients against central finite differences.

mod common;

use common::{critic_errors, logprob_errors, surrogate_errors, TOL};

fn assert_all_close(errors: &[f64], what: &str) {
    for (i, e) in errors.iter().enumerate() {
        assert!(*e <= TOL, "{what}, instance {i}: relative error {e:e}");
    }
}

#[test]
fn sequence_logprob_gradient() {
    assert_all_close(&logprob_errors(11, 25), "weighted log-prob");
}

#[test]
fn critic_mse_gradient() {
    assert_all_close(&critic_errors(12, 25), "critic MSE");
}

#[test]
fn clipped_surrogate_gradient() {
    assert_all_close(&surrogate_errors(13, 25), "clipped surrogate");
}
