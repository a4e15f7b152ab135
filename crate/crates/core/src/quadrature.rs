//! Adaptive Simpson quadrature.
//!
//! Every integral in the crate's exact oracles goes through [`adaptive_simpson`].
//! Integrands are expected to be bounded on the closed interval; callers remove
//! endpoint singularities with a change of variables before integrating.

/// Absolute tolerance used by the order-probability integrals (per nesting level).
pub const ORDER_TOLERANCE: f64 = 1e-8;

/// Absolute tolerance used by the mask-pattern weight integrals. These are
/// differentiated by finite differences in tests, so they need to be tight.
pub const SUBSET_TOLERANCE: f64 = 1e-13;

const MAX_DEPTH: u32 = 48;

/// Integrates `f` over `[a, b]` to absolute tolerance `tol`.
///
/// Recursion halves the tolerance at each split and applies the Richardson
/// correction `(S2 - S1) / 15`. Subintervals at `MAX_DEPTH` are accepted
/// as-is, which bounds the work spent near integrable kinks.
pub fn adaptive_simpson<F>(f: F, a: f64, b: f64, tol: f64) -> f64
where
    F: Fn(f64) -> f64,
{
    if b <= a {
        return 0.0;
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = simpson(a, b, fa, fm, fb);
    refine(&f, a, b, fa, fm, fb, whole, tol, MAX_DEPTH)
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn refine<F>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64
where
    F: Fn(f64) -> f64,
{
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    refine(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + refine(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}
