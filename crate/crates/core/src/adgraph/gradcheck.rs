//! Central finite differences, used as the independent oracle for every
//! reverse-mode gradient in the crate.

/// Central-difference gradient of `f` at `x` with step `eps`.
pub fn central_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let up = f(&probe);
            probe[i] = x[i] - eps;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Central-difference directional derivative of `f` at `x` along `dir`.
pub fn directional(f: impl Fn(&[f64]) -> f64, x: &[f64], dir: &[f64], eps: f64) -> f64 {
    let shifted = |s: f64| -> Vec<f64> { x.iter().zip(dir).map(|(a, d)| a + s * d).collect() };
    (f(&shifted(eps)) - f(&shifted(-eps))) / (2.0 * eps)
}

/// ‖a − b‖ / max(‖a‖, ‖b‖, floor).
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}
