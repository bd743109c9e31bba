//! Finite-difference gradient oracles.
//!
//! These never touch the tape: they only evaluate a scalar function at
//! perturbed points, which keeps them independent of the backward rules
//! they are used to check.

/// Central difference `(f(x+h) - f(x-h)) / 2h` along every coordinate.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let fp = f(&xp);
            xp[i] = orig - h;
            let fm = f(&xp);
            xp[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Fourth-order central stencil for coordinate `i` only.
pub fn central_diff5_at(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    let orig = xp[i];
    let mut at = |d: f64| {
        xp[i] = orig + d;
        f(&xp)
    };
    let (f2p, f1p, f1m, f2m) = (at(2.0 * h), at(h), at(-h), at(-2.0 * h));
    (-f2p + 8.0 * f1p - 8.0 * f1m + f2m) / (12.0 * h)
}

/// `|a - b| / (|b| + 1e-8)`, with `b` the finite-difference reference.
pub fn relative_error(autodiff: f64, reference: f64) -> f64 {
    (autodiff - reference).abs() / (reference.abs() + 1e-8)
}

/// Largest [`relative_error`] over paired slices.
pub fn max_relative_error(autodiff: &[f64], reference: &[f64]) -> f64 {
    autodiff
        .iter()
        .zip(reference)
        .map(|(a, r)| relative_error(*a, *r))
        .fold(0.0, f64::max)
}
