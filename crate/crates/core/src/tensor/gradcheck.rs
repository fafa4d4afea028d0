/// Denominator floor so that two near-zero gradients compare as equal
/// instead of producing a huge ratio.
const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_with_floor(analytic, numeric, REL_FLOOR)
}

pub fn relative_error_with_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Maximum relative error between `analytic` and central differences
/// `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps` over every coordinate.
pub fn finite_diff_gradcheck<F>(f: F, x: &[f64], analytic: &[f64], eps: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let all: Vec<usize> = (0..x.len()).collect();
    finite_diff_gradcheck_at(f, x, analytic, eps, &all)
}

/// [`finite_diff_gradcheck`] restricted to the listed coordinates.
pub fn finite_diff_gradcheck_at<F>(f: F, x: &[f64], analytic: &[f64], eps: f64, indices: &[usize]) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    finite_diff_gradcheck_floor(f, x, analytic, eps, indices, REL_FLOOR)
}

/// As [`finite_diff_gradcheck_at`] with an explicit denominator floor, for
/// functions whose value is large enough that rounding in the difference
/// quotient swamps near-zero gradients.
pub fn finite_diff_gradcheck_floor<F>(
    mut f: F,
    x: &[f64],
    analytic: &[f64],
    eps: f64,
    indices: &[usize],
    floor: f64,
) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len(), "gradient length");
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for &i in indices {
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = f(&probe);
        probe[i] = orig - eps;
        let down = f(&probe);
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(relative_error_with_floor(analytic[i], numeric, floor));
    }
    worst
}
