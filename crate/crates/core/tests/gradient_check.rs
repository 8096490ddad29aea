//! Analytic gradients against central finite differences in f64.

mod common;

use common::{finite_difference_check, tiny};

#[test]
fn single_block_matches_finite_differences() {
    let r = finite_difference_check(&tiny(1, 3), 11, 1e-4);
    assert!(r.max_rel < 1e-4, "max relative error {:e} at {}", r.max_rel, r.worst);
}

#[test]
fn grayscale_input_matches_finite_differences() {
    let r = finite_difference_check(&tiny(1, 1), 3, 1e-4);
    assert!(r.max_rel < 1e-4, "max relative error {:e} at {}", r.max_rel, r.worst);
}
