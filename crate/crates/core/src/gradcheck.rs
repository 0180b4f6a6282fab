//! Finite-difference helpers for checking analytic gradients.

/// Step used by the gradient checks in this crate.
pub const FD_STEP: f64 = 1e-5;

/// Central differences `(f(x + h e_i) − f(x − h e_i)) / 2h` for every coordinate.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Central difference of `f` along `direction`.
pub fn directional_difference(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    direction: &[f64],
    h: f64,
) -> f64 {
    let shifted = |s: f64| -> Vec<f64> { x.iter().zip(direction).map(|(a, d)| a + s * d).collect() };
    (f(&shifted(h)) - f(&shifted(-h))) / (2.0 * h)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both are zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1)`: relative for large vectors, absolute
/// near zero (where a relative measure would only report rounding noise).
pub fn mixed_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1.0)
}
