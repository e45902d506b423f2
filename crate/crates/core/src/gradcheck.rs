//! Central finite differences for checking analytic gradients.

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
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

/// `max_i |a_i - b_i| / max(max_i |b_i|, floor)`: the worst coordinate error
/// relative to the size of the reference gradient.
pub fn relative_error(analytic: &[f64], reference: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), reference.len(), "gradient lengths differ");
    let scale = reference.iter().fold(floor, |m, v| m.max(v.abs()));
    let worst = analytic.iter().zip(reference).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
    worst / scale
}
