//! Analytic gradients against central finite differences.

#[path = "criteria/gradcheck.rs"]
mod suite;

#[test]
fn analytic_gradients_match_finite_differences() {
    println!("{}", suite::analytic_gradients_match_finite_differences());
}

#[test]
fn shared_dense_sums_site_gradients() {
    suite::shared_dense_sums_site_gradients();
}
