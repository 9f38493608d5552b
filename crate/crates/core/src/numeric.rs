//! Small numerical kernels shared by the solvers: exponential-moment integrals
//! over (possibly infinite) intervals, bisection, and a quadrature wrapper.

use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;

const SERIES_RADIUS: f64 = 0.5;

/// `(e^z - 1) / z`, continuous through `z = 0`.
pub fn expm1_over(z: C64) -> C64 {
    if z.norm() < SERIES_RADIUS {
        // sum z^k / (k+1)!
        let mut term = C64::new(1.0, 0.0);
        let mut sum = term;
        for k in 1..24 {
            term = term * z / (k as f64 + 1.0);
            sum += term;
        }
        sum
    } else {
        (z.exp() - 1.0) / z
    }
}

/// `int_0^1 t e^{z t} dt = (e^z (z - 1) + 1) / z^2`, continuous through `z = 0`.
pub fn moment1_over(z: C64) -> C64 {
    if z.norm() < SERIES_RADIUS {
        // sum z^k / (k! (k + 2))
        let mut fact = C64::new(1.0, 0.0);
        let mut sum = C64::new(0.5, 0.0);
        for k in 1..24 {
            fact = fact * z / k as f64;
            sum += fact / (k as f64 + 2.0);
        }
        sum
    } else {
        (z.exp() * (z - 1.0) + 1.0) / (z * z)
    }
}

/// `(e^z - 1 - z) / z^2`, continuous through `z = 0`.
pub fn expm2_over(z: C64) -> C64 {
    if z.norm() < SERIES_RADIUS {
        // sum z^k / (k+2)!
        let mut term = C64::new(0.5, 0.0);
        let mut sum = term;
        for k in 1..24 {
            term = term * z / (k as f64 + 2.0);
            sum += term;
        }
        sum
    } else {
        (z.exp() - 1.0 - z) / (z * z)
    }
}

/// `e^z - 1` for complex `z`, accurate near zero.
pub fn expm1_c(z: C64) -> C64 {
    z * expm1_over(z)
}

/// Oriented integrals `int_a^b e^{rho u} du` and `int_a^b u e^{rho u} du` for finite `a`, `b`.
fn finite_moments(rho: C64, a: f64, b: f64) -> (C64, C64) {
    let d = b - a;
    let z = rho * d;
    let base = (rho * a).exp();
    let i0 = base * d * expm1_over(z);
    let i1 = base * (a * d * expm1_over(z) + d * d * moment1_over(z));
    (i0, i1)
}

/// Returns `(int_{u0}^{u1} e^{rho u} du, int_{u0}^{u1} u e^{rho u} du)`.
///
/// `u0` may be `-inf` (requires `Re rho > 0`) and `u1` may be `+inf`
/// (requires `Re rho < 0`). Empty or reversed intervals give zero.
pub fn exp_moments(rho: C64, u0: f64, u1: f64) -> Result<(C64, C64)> {
    if !(u1 > u0) {
        return Ok((C64::new(0.0, 0.0), C64::new(0.0, 0.0)));
    }
    match (u0.is_finite(), u1.is_finite()) {
        (true, true) => {
            // Anchor at the end with the larger growth so the series factor stays bounded.
            if (rho * u1).re >= (rho * u0).re {
                let (i0, i1) = finite_moments(rho, u1, u0);
                Ok((-i0, -i1))
            } else {
                Ok(finite_moments(rho, u0, u1))
            }
        }
        (false, true) => {
            if rho.re <= 0.0 {
                return Err(Error::DomainError(format!("int_(-inf) e^(rho u) du diverges for rho = {rho}")));
            }
            let e = (rho * u1).exp();
            Ok((e / rho, e * (u1 / rho - 1.0 / (rho * rho))))
        }
        (true, false) => {
            if rho.re >= 0.0 {
                return Err(Error::DomainError(format!("int^(+inf) e^(rho u) du diverges for rho = {rho}")));
            }
            let e = (rho * u0).exp();
            Ok((-e / rho, -e * (u0 / rho - 1.0 / (rho * rho))))
        }
        (false, false) => Err(Error::DomainError("exponential moment over the whole real line".into())),
    }
}

/// Bisection for the sign change of a nondecreasing function on `[lo, hi]`.
///
/// Requires `f(lo) < 0 <= f(hi)`. Stops when the bracket is narrower than `xtol`
/// or stops shrinking in floating point.
pub fn bisect_increasing<F>(mut f: F, mut lo: f64, mut hi: f64, xtol: f64, max_iter: usize) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    for _ in 0..max_iter {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi || hi - lo <= xtol {
            return Ok(mid);
        }
        if f(mid)? < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if hi - lo <= xtol.max(4.0 * f64::EPSILON * hi.abs().max(lo.abs())) {
        Ok(0.5 * (lo + hi))
    } else {
        Err(Error::ConvergenceFailure(format!("bisection bracket [{lo}, {hi}] after {max_iter} iterations")))
    }
}

/// Tanh-sinh quadrature of `f` over `[a, b]`, split at the interior `breaks`.
///
/// Used by the generator residual and by test oracles; the closed-form
/// evaluation paths never call it.
pub fn integrate<F>(f: F, a: f64, b: f64, breaks: &[f64], tol: f64) -> Result<f64>
where
    F: Fn(f64) -> f64,
{
    if !(b > a) {
        return Ok(0.0);
    }
    let mut points: Vec<f64> =
        std::iter::once(a).chain(breaks.iter().copied().filter(|p| *p > a && *p < b)).chain(std::iter::once(b)).collect();
    points.sort_by(|x, y| x.partial_cmp(y).unwrap());
    points.dedup();
    let mut total = 0.0;
    for w in points.windows(2) {
        let out = quadrature::integrate(&f, w[0], w[1], tol);
        if !out.integral.is_finite() {
            return Err(Error::QuadratureFailure(format!("non-finite integral on [{}, {}]", w[0], w[1])));
        }
        total += out.integral;
    }
    Ok(total)
}
