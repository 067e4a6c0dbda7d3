mod common;

use common::*;

#[test]
fn pertnn_backward_matches_finite_differences() {
    let mut r = rng(1);
    for case in 0..50 {
        let e = pertnn_grad_error(&mut r);
        assert!(e <= 1e-6, "case {case}: relative error {e:e}");
    }
}

#[test]
fn quadratic_gradient_matches_finite_differences() {
    let mut r = rng(2);
    for case in 0..50 {
        let task = random_quadratic(&mut r);
        let e = objective_grad_error(&task, &mut r);
        assert!(e <= 1e-6, "case {case}: relative error {e:e}");
    }
}

#[test]
fn mlp_gradient_matches_finite_differences() {
    let mut r = rng(3);
    for case in 0..50 {
        let task = random_mlp(&mut r);
        let e = objective_grad_error(&task, &mut r);
        assert!(e <= 1e-6, "case {case}: relative error {e:e}");
    }
}

#[test]
fn meta_gradient_matches_cutoff_objective_with_normalization() {
    let mut r = rng(4);
    for case in 0..20 {
        let e = meta_grad_error(&mut r, true);
        assert!(e <= 1e-5, "case {case}: relative error {e:e}");
    }
}

#[test]
fn meta_gradient_matches_cutoff_objective_without_normalization() {
    let mut r = rng(5);
    for case in 0..20 {
        let e = meta_grad_error(&mut r, false);
        assert!(e <= 1e-5, "case {case}: relative error {e:e}");
    }
}
