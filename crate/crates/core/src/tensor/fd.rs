//! Central finite differences, the independent gradient oracle.

/// Central-difference gradient of a deterministic scalar function:
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate.
///
/// `f` must be a pure function of its argument; `step` must be positive.
pub fn finite_difference_grad(f: impl Fn(&[f64]) -> f64, theta: &[f64], step: f64) -> Vec<f64> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut grad = Vec::with_capacity(theta.len());
    let mut probe = theta.to_vec();
    for i in 0..theta.len() {
        probe[i] = theta[i] + step;
        let up = f(&probe);
        probe[i] = theta[i] - step;
        let down = f(&probe);
        probe[i] = theta[i];
        grad.push((up - down) / (2.0 * step));
    }
    grad
}
