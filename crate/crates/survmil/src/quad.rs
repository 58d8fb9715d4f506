//! Adaptive Simpson quadrature.
//!
//! Reference integrator used by the validation suites to check mixture
//! densities against their closed-form survival functions; the model code
//! never calls it.

/// Recursive adaptive Simpson on [a, b] with absolute tolerance `tol`.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    let m = 0.5 * (a + b);
    let fa = f(a);
    let fm = f(m);
    let fb = f(b);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(f, a, b, fa, fm, fb, whole, tol, 60)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        left + right + delta / 15.0
    } else {
        simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
}

/// Integrates a density over (0, infinity) through the substitution
/// t = e^y, which turns heavy power-law tails into light exponential ones.
/// `y_lo`/`y_hi` bound the transformed support.
pub fn integrate_positive_density<F: Fn(f64) -> f64>(
    pdf: &F,
    y_lo: f64,
    y_hi: f64,
    tol: f64,
) -> f64 {
    let g = |y: f64| {
        let t = y.exp();
        pdf(t) * t
    };
    adaptive_simpson(&g, y_lo, y_hi, tol)
}
