//! Central-difference gradient checking.
//!
//! The checks run on 64-bit parameters: the loss closure gets a perturbed
//! copy of the parameter vector and must be a pure function of it, so the
//! numeric gradient `(f(w+h) - f(w-h)) / 2h` is trustworthy to O(h²).

/// Numeric gradient of `loss` at `params` by central differences.
pub fn finite_difference<L>(params: &[f64], step: f64, mut loss: L) -> Vec<f64>
where
    L: FnMut(&[f64]) -> f64,
{
    let mut work = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + step;
        let up = loss(&work);
        work[i] = orig - step;
        let down = loss(&work);
        work[i] = orig;
        grad.push((up - down) / (2.0 * step));
    }
    grad
}

/// Largest elementwise relative error `|a - b| / max(floor, |a| + |b|)`.
///
/// The floor keeps near-zero pairs from exploding the ratio; pick it a few
/// orders below the gradients that matter.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / (a.abs() + n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_polynomial_gradients() {
        // f(x, y) = x^2 y + 3y, gradient (2xy, x^2 + 3).
        let params = [1.5, -2.0];
        let grad = finite_difference(&params, 1e-5, |p| p[0] * p[0] * p[1] + 3.0 * p[1]);
        let exact = [2.0 * 1.5 * -2.0, 1.5 * 1.5 + 3.0];
        assert!(max_relative_error(&exact, &grad, 1e-12) < 1e-9);
    }

    #[test]
    fn relative_error_uses_the_floor_for_near_zero_pairs() {
        assert_eq!(max_relative_error(&[0.0], &[0.0], 1e-9), 0.0);
        let e = max_relative_error(&[1e-15], &[0.0], 1e-9);
        assert!(e < 1e-5);
    }
}
