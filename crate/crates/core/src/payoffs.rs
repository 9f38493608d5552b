//! Terminal rewards `g(x) = K - bx - sum c_i e^{a_i x}`, the three running
//! payoff families and their weighted sums, and the closed-form integrals of a
//! running payoff against exponential kernels (`Psi_f`, `Theta_f` and the
//! never-stop value).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{exp_moments, C64};
use crate::scale_fn::{ExpTerm, ScaleContext};

/// Tolerance for the removable singularity of `varpi` at `a = Phi_r`.
pub const VARPI_TIE_TOL: f64 = 1e-8;
/// `|Phi_r - L|` below this (relative) is treated as a degenerate exponent.
pub const DEGENERATE_TOL: f64 = 1e-12;

/// One exponential term `c e^{a x}` of a reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardTerm {
    pub a: f64,
    pub c: f64,
}

/// Terminal reward `g(x) = K - bx - sum_i c_i e^{a_i x}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub k: f64,
    pub b: f64,
    pub terms: Vec<RewardTerm>,
}

impl RewardSpec {
    pub fn new(k: f64, b: f64, terms: Vec<RewardTerm>) -> Result<Self> {
        let spec = Self { k, b, terms };
        spec.validate()?;
        Ok(spec)
    }

    pub fn constant(k: f64) -> Self {
        Self { k, b: 0.0, terms: Vec::new() }
    }

    /// `g(x) = -slope * x`.
    pub fn linear(slope: f64) -> Result<Self> {
        Self::new(0.0, slope, Vec::new())
    }

    pub fn exponential(k: f64, a: &[f64], c: &[f64]) -> Result<Self> {
        if a.len() != c.len() {
            return Err(Error::DimensionMismatch(format!("reward has {} exponents but {} coefficients", a.len(), c.len())));
        }
        let terms = a.iter().zip(c).map(|(&a, &c)| RewardTerm { a, c }).collect();
        Self::new(k, 0.0, terms)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.k.is_finite() {
            return Err(Error::InvalidSpec(format!("K must be finite, got {}", self.k)));
        }
        if !(self.b >= 0.0) || !self.b.is_finite() {
            return Err(Error::InvalidSpec(format!("b must be finite and nonnegative, got {}", self.b)));
        }
        for (i, t) in self.terms.iter().enumerate() {
            if !(t.a > 0.0) || !t.a.is_finite() {
                return Err(Error::InvalidSpec(format!("terms[{i}].a must be positive, got {}", t.a)));
            }
            if !(t.c > 0.0) || !t.c.is_finite() {
                return Err(Error::InvalidSpec(format!("terms[{i}].c must be positive, got {}", t.c)));
            }
            if self.terms[..i].iter().any(|u| u.a == t.a) {
                return Err(Error::InvalidSpec(format!("terms[{i}].a = {} is repeated", t.a)));
            }
        }
        Ok(())
    }

    pub fn is_constant(&self) -> bool {
        self.b == 0.0 && self.terms.is_empty()
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.k - self.b * x - self.terms.iter().map(|t| t.c * (t.a * x).exp()).sum::<f64>()
    }

    pub fn derivative(&self, x: f64) -> f64 {
        -self.b - self.terms.iter().map(|t| t.a * t.c * (t.a * x).exp()).sum::<f64>()
    }

    pub fn second_derivative(&self, x: f64) -> f64 {
        -self.terms.iter().map(|t| t.a * t.a * t.c * (t.a * x).exp()).sum::<f64>()
    }

    /// Sum of rewards; exponential terms with equal rates are combined.
    pub fn sum<'a, I: IntoIterator<Item = &'a RewardSpec>>(parts: I) -> RewardSpec {
        let mut out = RewardSpec::constant(0.0);
        for p in parts {
            out.k += p.k;
            out.b += p.b;
            for t in &p.terms {
                match out.terms.iter_mut().find(|u| u.a == t.a) {
                    Some(u) => u.c += t.c,
                    None => out.terms.push(*t),
                }
            }
        }
        out
    }
}

/// Running payoff `f`, nondecreasing and bounded below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum RunningPayoff {
    /// Step function: `values[0]` on `(-inf, l_1]`, `values[n]` on `(l_n, l_{n+1}]`, last value beyond `l_last`.
    Simple {
        breakpoints: Vec<f64>,
        values: Vec<f64>,
    },
    /// `b1 * max(y + b2, b3)`; `b3 = None` means no floor.
    LinearFloor {
        b1: f64,
        b2: f64,
        b3: Option<f64>,
    },
    /// `exp(min(L y, B))`.
    ExpCap {
        l: f64,
        cap: f64,
    },
    WeightedSum {
        parts: Vec<(f64, RunningPayoff)>,
    },
}

/// Elementary piece of a payoff on an interval `(lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    Const(f64),
    /// `slope * y + intercept`
    Affine {
        slope: f64,
        intercept: f64,
    },
    /// `coef * e^{rate y}`
    Exp {
        coef: f64,
        rate: f64,
    },
}

#[derive(Debug, Clone, Copy)]
struct Piece {
    lo: f64,
    hi: f64,
    shape: Shape,
}

impl RunningPayoff {
    pub fn zero() -> Self {
        RunningPayoff::WeightedSum { parts: Vec::new() }
    }

    pub fn constant(c: f64) -> Self {
        RunningPayoff::Simple { breakpoints: Vec::new(), values: vec![c] }
    }

    pub fn simple(breakpoints: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let f = RunningPayoff::Simple { breakpoints, values };
        f.validate()?;
        Ok(f)
    }

    pub fn linear_floor(b1: f64, b2: f64, b3: Option<f64>) -> Result<Self> {
        let f = RunningPayoff::LinearFloor { b1, b2, b3 };
        f.validate()?;
        Ok(f)
    }

    pub fn exp_cap(l: f64, cap: f64) -> Result<Self> {
        let f = RunningPayoff::ExpCap { l, cap };
        f.validate()?;
        Ok(f)
    }

    pub fn weighted(parts: Vec<(f64, RunningPayoff)>) -> Result<Self> {
        let f = RunningPayoff::WeightedSum { parts };
        f.validate()?;
        Ok(f)
    }

    /// `gamma * self`.
    pub fn scaled(self, gamma: f64) -> Self {
        RunningPayoff::WeightedSum { parts: vec![(gamma, self)] }
    }

    /// Unit-weight sum.
    pub fn sum<I: IntoIterator<Item = RunningPayoff>>(parts: I) -> Self {
        RunningPayoff::WeightedSum { parts: parts.into_iter().map(|p| (1.0, p)).collect() }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            RunningPayoff::Simple { breakpoints, values } => {
                if values.len() != breakpoints.len() + 1 {
                    return Err(Error::InvalidSpec(format!(
                        "simple payoff needs {} values for {} breakpoints, got {}",
                        breakpoints.len() + 1,
                        breakpoints.len(),
                        values.len()
                    )));
                }
                if breakpoints.iter().chain(values).any(|v| !v.is_finite()) {
                    return Err(Error::InvalidSpec("simple payoff entries must be finite".into()));
                }
                if breakpoints.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::InvalidSpec("simple payoff breakpoints must be strictly increasing".into()));
                }
                if values.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::InvalidSpec("simple payoff values must be strictly increasing".into()));
                }
            }
            RunningPayoff::LinearFloor { b1, b2, b3 } => {
                if !(*b1 > 0.0) || !b1.is_finite() || !b2.is_finite() || b3.is_some_and(|v| !v.is_finite()) {
                    return Err(Error::InvalidSpec(format!("linear payoff needs b1 > 0 and finite b2, b3 (got {b1}, {b2}, {b3:?})")));
                }
            }
            RunningPayoff::ExpCap { l, cap } => {
                if !(*l > 0.0) || !l.is_finite() || !cap.is_finite() {
                    return Err(Error::InvalidSpec(format!("exponential payoff needs L > 0 and finite B (got {l}, {cap})")));
                }
            }
            RunningPayoff::WeightedSum { parts } => {
                for (i, (w, p)) in parts.iter().enumerate() {
                    if !w.is_finite() {
                        return Err(Error::InvalidSpec(format!("weight {i} must be finite, got {w}")));
                    }
                    p.validate()?;
                }
                if parts.iter().any(|(w, _)| *w < 0.0) {
                    self.check_nondecreasing()?;
                }
            }
        }
        Ok(())
    }

    pub fn eval(&self, y: f64) -> f64 {
        match self {
            RunningPayoff::Simple { breakpoints, values } => {
                let idx = breakpoints.partition_point(|&l| l < y);
                values[idx]
            }
            RunningPayoff::LinearFloor { b1, b2, b3 } => {
                let v = y + b2;
                b1 * b3.map_or(v, |f| v.max(f))
            }
            RunningPayoff::ExpCap { l, cap } => (l * y).min(*cap).exp(),
            RunningPayoff::WeightedSum { parts } => parts.iter().map(|(w, p)| w * p.eval(y)).sum(),
        }
    }

    /// `F - G`, for converting cumulative running payoffs into per-stage ones.
    /// Fails unless the difference is still nondecreasing.
    pub fn difference(upper: RunningPayoff, lower: RunningPayoff) -> Result<Self> {
        RunningPayoff::weighted(vec![(1.0, upper), (-1.0, lower)])
    }

    /// Right derivative, ignoring jumps.
    pub fn slope(&self, y: f64) -> f64 {
        match self {
            RunningPayoff::Simple { .. } => 0.0,
            RunningPayoff::LinearFloor { b1, b2, b3 } => match b3 {
                Some(f) if y + b2 < *f => 0.0,
                _ => *b1,
            },
            RunningPayoff::ExpCap { l, cap } => {
                if l * y < *cap {
                    l * (l * y).exp()
                } else {
                    0.0
                }
            }
            RunningPayoff::WeightedSum { parts } => parts.iter().map(|(w, p)| w * p.slope(y)).sum(),
        }
    }

    fn push_kinks(&self, out: &mut Vec<f64>) {
        match self {
            RunningPayoff::Simple { breakpoints, .. } => out.extend_from_slice(breakpoints),
            RunningPayoff::LinearFloor { b2, b3, .. } => out.extend(b3.map(|f| f - b2)),
            RunningPayoff::ExpCap { l, cap } => out.push(cap / l),
            RunningPayoff::WeightedSum { parts } => parts.iter().for_each(|(_, p)| p.push_kinks(out)),
        }
    }

    /// Sampled check that a signed combination is nondecreasing: no downward
    /// jump at any kink and no negative slope between kinks.
    fn check_nondecreasing(&self) -> Result<()> {
        let mut kinks = Vec::new();
        self.push_kinks(&mut kinks);
        kinks.sort_by(f64::total_cmp);
        kinks.dedup();
        let lo = kinks.first().copied().unwrap_or(0.0) - 50.0;
        let hi = kinks.last().copied().unwrap_or(0.0) + 50.0;
        let mut edges = vec![lo];
        edges.extend_from_slice(&kinks);
        edges.push(hi);
        let fail = |y: f64| Err(Error::InvalidSpec(format!("signed payoff combination decreases near y = {y}")));
        for &k in &kinks {
            let (left, right) = (self.eval(k), self.eval(k + 1e-9 * (1.0 + k.abs())));
            if right < left - 1e-9 * (1.0 + left.abs()) {
                return fail(k);
            }
        }
        for w in edges.windows(2) {
            for i in 0..64 {
                let y = w[0] + (w[1] - w[0]) * (i as f64 + 0.5) / 64.0;
                if self.slope(y) < -1e-12 * (1.0 + self.eval(y).abs()) {
                    return fail(y);
                }
            }
        }
        Ok(())
    }

    /// `lim_{y -> -inf} f(y)`, or `-inf` for an unfloored linear payoff.
    pub fn lower_limit(&self) -> f64 {
        match self {
            RunningPayoff::Simple { values, .. } => values[0],
            RunningPayoff::LinearFloor { b1, b3, .. } => b3.map_or(f64::NEG_INFINITY, |f| b1 * f),
            RunningPayoff::ExpCap { .. } => 0.0,
            RunningPayoff::WeightedSum { parts } => parts.iter().filter(|(w, _)| *w != 0.0).map(|(w, p)| w * p.lower_limit()).sum(),
        }
    }

    /// Pieces of a base family. Not defined for weighted sums.
    fn pieces(&self) -> Vec<Piece> {
        let inf = f64::INFINITY;
        match self {
            RunningPayoff::Simple { breakpoints, values } => {
                let mut edges = vec![-inf];
                edges.extend_from_slice(breakpoints);
                edges.push(inf);
                values.iter().enumerate().map(|(i, &v)| Piece { lo: edges[i], hi: edges[i + 1], shape: Shape::Const(v) }).collect()
            }
            RunningPayoff::LinearFloor { b1, b2, b3 } => {
                let affine = Shape::Affine { slope: *b1, intercept: b1 * b2 };
                match b3 {
                    None => vec![Piece { lo: -inf, hi: inf, shape: affine }],
                    Some(f) => {
                        let kink = f - b2;
                        vec![Piece { lo: -inf, hi: kink, shape: Shape::Const(b1 * f) }, Piece { lo: kink, hi: inf, shape: affine }]
                    }
                }
            }
            RunningPayoff::ExpCap { l, cap } => {
                let kink = cap / l;
                vec![
                    Piece { lo: -inf, hi: kink, shape: Shape::Exp { coef: 1.0, rate: *l } },
                    Piece { lo: kink, hi: inf, shape: Shape::Const(cap.exp()) },
                ]
            }
            RunningPayoff::WeightedSum { .. } => unreachable!("weighted sums are expanded by the caller"),
        }
    }

    /// Terms of `sum_k coef_k int_0^{u_max} e^{rate_k u} f(x + dir u) du`, one entry per kernel term and piece.
    ///
    /// `dir` is `+1.0` or `-1.0`. The complex terms are returned unsummed so the
    /// caller can check cancellation of imaginary parts.
    pub fn kernel_terms(&self, kernel: &[ExpTerm], x: f64, dir: f64, u_max: f64) -> Result<Vec<C64>> {
        let mut out = Vec::new();
        self.push_kernel_terms(1.0, kernel, x, dir, u_max, &mut out)?;
        Ok(out)
    }

    fn push_kernel_terms(&self, weight: f64, kernel: &[ExpTerm], x: f64, dir: f64, u_max: f64, out: &mut Vec<C64>) -> Result<()> {
        if let RunningPayoff::WeightedSum { parts } = self {
            for (w, p) in parts {
                if *w != 0.0 {
                    p.push_kernel_terms(weight * w, kernel, x, dir, u_max, out)?;
                }
            }
            return Ok(());
        }
        for piece in self.pieces() {
            // y = x + dir u in (lo, hi]
            let (mut u0, mut u1) = if dir > 0.0 { (piece.lo - x, piece.hi - x) } else { (x - piece.hi, x - piece.lo) };
            u0 = u0.max(0.0);
            u1 = u1.min(u_max);
            if !(u1 > u0) {
                continue;
            }
            for term in kernel {
                let v = match piece.shape {
                    Shape::Const(c) => exp_moments(term.rate, u0, u1)?.0 * c,
                    Shape::Affine { slope, intercept } => {
                        let (i0, i1) = exp_moments(term.rate, u0, u1)?;
                        i0 * (slope * x + intercept) + i1 * (slope * dir)
                    }
                    Shape::Exp { coef, rate } => {
                        let (i0, _) = exp_moments(term.rate + dir * rate, u0, u1)?;
                        i0 * (coef * (rate * x).exp())
                    }
                };
                out.push(v * term.coef * weight);
            }
        }
        Ok(())
    }

    fn check_degenerate(&self, phi: f64) -> Result<()> {
        match self {
            RunningPayoff::ExpCap { l, .. } if (phi - l).abs() <= DEGENERATE_TOL * phi.max(1.0) => {
                Err(Error::DegenerateExponent(format!("Phi_r = {phi} coincides with L = {l}")))
            }
            RunningPayoff::WeightedSum { parts } => parts.iter().try_for_each(|(_, p)| p.check_degenerate(phi)),
            _ => Ok(()),
        }
    }
}

/// `varpi_r(a) = (r - psi(a)) / (Phi_r - a)`, continuous through `a = Phi_r`.
pub fn varpi(ctx: &ScaleContext, a: f64) -> Result<f64> {
    let phi = ctx.phi_r();
    if (a - phi).abs() < VARPI_TIE_TOL {
        return ctx.model().psi_prime(phi);
    }
    Ok((ctx.r() - ctx.model().psi(a)?) / (phi - a))
}

/// `Psi_f(A) = int_0^inf e^{-Phi_r y} f(y + A) dy`.
pub fn psi_f(f: &RunningPayoff, phi: f64, a: f64) -> Result<f64> {
    f.check_degenerate(phi)?;
    let kernel = [ExpTerm { coef: C64::new(1.0, 0.0), rate: C64::new(-phi, 0.0) }];
    Ok(f.kernel_terms(&kernel, a, 1.0, f64::INFINITY)?.iter().map(|z| z.re).sum())
}

/// `Theta_f(x; A) = int_A^x W(x - y) f(y) dy` for `x > A`, zero otherwise.
pub fn theta_f(f: &RunningPayoff, ctx: &ScaleContext, x: f64, a: f64) -> Result<f64> {
    theta_f_derivative(f, ctx, x, a, 0)
}

/// `order`-th `x`-derivative of `Theta_f(x; A)` (order 0, 1 or 2) for `x > A`.
///
/// The second derivative picks up `W'(0+) f(x)`; at a jump of `f` it uses the right limit.
pub fn theta_f_derivative(f: &RunningPayoff, ctx: &ScaleContext, x: f64, a: f64, order: u32) -> Result<f64> {
    if x <= a {
        return Ok(0.0);
    }
    ctx.guard(x - a)?;
    let kernel = ctx.kernel(0.0, order);
    let terms = f.kernel_terms(&kernel, x, -1.0, x - a)?;
    let integral = ctx.real_sum(terms)?;
    match order {
        0 | 1 => Ok(integral),
        2 => Ok(integral + ctx.w_prime_zero()? * f.eval(x)),
        _ => Err(Error::DomainError(format!("derivative order {order} not supported"))),
    }
}

/// Value of never stopping, `int (Phi'_r e^{-Phi_r (x-y)} - W(y-x)) f(y) dy`.
pub fn never_stop_value(f: &RunningPayoff, ctx: &ScaleContext, x: f64) -> Result<f64> {
    let sd = ctx.spectral();
    let below = [ExpTerm { coef: C64::new(sd.phi_r_prime, 0.0), rate: C64::new(-sd.phi_r, 0.0) }];
    let above: Vec<ExpTerm> = sd.coeffs.iter().zip(&sd.xis).map(|(&c, &xi)| ExpTerm { coef: c, rate: -xi }).collect();
    let mut terms = f.kernel_terms(&below, x, -1.0, f64::INFINITY)?;
    terms.extend(f.kernel_terms(&above, x, 1.0, f64::INFINITY)?);
    ctx.real_sum(terms)
}

/// `w^{(k)}_{x,A}(s, t) = int_{[s,t] cap [A,x]} W_k(x - y) dy`, the tilted
/// scale function integrated over the overlap of `[s, t]` and `[A, x]`.
pub fn w_helper(ctx: &ScaleContext, k: f64, x: f64, a: f64, s: f64, t: f64) -> Result<f64> {
    if !(s < t) {
        return Err(Error::DomainError(format!("w helper needs s < t, got s = {s}, t = {t}")));
    }
    let hi = (x - s.max(a)).max(0.0);
    let lo = (x - t.max(a)).max(0.0);
    if !(hi > lo) {
        return Ok(0.0);
    }
    ctx.guard(hi)?;
    let mut terms = Vec::new();
    for term in ctx.kernel(k, 0) {
        terms.push(term.coef * exp_moments(term.rate, lo, hi)?.0);
    }
    ctx.real_sum(terms)
}

/// `gamma^{(a)}(s, t) = int_s^t y e^{a y} dy`.
pub fn gamma_helper(a: f64, s: f64, t: f64) -> Result<f64> {
    if a == 0.0 {
        return Err(Error::DegenerateExponent("gamma helper with a = 0".into()));
    }
    let anti = |y: f64| (y / a - 1.0 / (a * a)) * (a * y).exp();
    Ok(anti(t) - anti(s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn signed_differences() {
        let steep = RunningPayoff::linear_floor(2.0, 0.0, None).unwrap();
        let flat = RunningPayoff::linear_floor(1.0, 0.0, None).unwrap();
        let d = RunningPayoff::difference(steep.clone(), flat.clone()).unwrap();
        assert_eq!(d.eval(3.0), 3.0);
        assert!(RunningPayoff::difference(flat, steep).is_err());
        let big = RunningPayoff::simple(vec![0.0], vec![-10.0, 10.0]).unwrap();
        let small = RunningPayoff::simple(vec![0.0], vec![-1.0, 1.0]).unwrap();
        assert!(RunningPayoff::difference(big.clone(), small.clone()).is_ok());
        assert!(RunningPayoff::difference(small, big).is_err());
        let capped = RunningPayoff::exp_cap(1.0, 1.0).unwrap();
        let d = RunningPayoff::difference(capped.clone().scaled(2.0), capped.clone()).unwrap();
        assert!((d.eval(-1.0) - (-1.0f64).exp()).abs() < 1e-15);
        assert!(RunningPayoff::difference(RunningPayoff::constant(1.0), capped).is_err());
    }
    use crate::fixtures;
    use crate::levy_model::{LevyModel, PhaseTypeJump};
    use crate::numeric::integrate;
    use proptest::prelude::*;

    fn ctx() -> ScaleContext {
        fixtures::weibull_context(0.05)
    }

    /// `int_0^inf e^{-Phi y} f(y + A) dy` by quadrature, split at the kinks.
    fn psi_quad(f: &RunningPayoff, phi: f64, a: f64, kinks: &[f64]) -> f64 {
        let upper = 80.0 / phi;
        let breaks: Vec<f64> = kinks.iter().map(|k| k - a).collect();
        integrate(|y| (-phi * y).exp() * f.eval(y + a), 0.0, upper, &breaks, 1e-13).unwrap()
    }

    fn theta_quad(f: &RunningPayoff, ctx: &ScaleContext, x: f64, a: f64, kinks: &[f64]) -> f64 {
        integrate(|y| ctx.w(x - y).unwrap() * f.eval(y), a, x, kinks, 1e-13).unwrap()
    }

    #[test]
    fn reward_examples() {
        let g = RewardSpec::constant(10.0);
        assert_eq!(g.eval(-4.0), 10.0);
        assert_eq!(fixtures::reward_lin().eval(2.0), -2.0);
        assert!(fixtures::reward_exp().eval(0.0).abs() < 1e-14);
        assert!(RewardSpec::exponential(1.0, &[0.1, 0.1], &[1.0, 1.0]).is_err());
        assert!(RewardSpec::exponential(1.0, &[-0.1], &[1.0]).is_err());
    }

    #[test]
    fn reward_sum_merges_rates() {
        let g1 = RewardSpec::exponential(1.0, &[0.1, 0.2], &[1.0, 2.0]).unwrap();
        let g2 = RewardSpec::exponential(2.0, &[0.2], &[3.0]).unwrap();
        let s = RewardSpec::sum([&g1, &g2]);
        assert_eq!(s.terms.len(), 2);
        for &x in &[-2.0, 0.3, 1.7] {
            assert!((s.eval(x) - g1.eval(x) - g2.eval(x)).abs() < 1e-13);
        }
    }

    #[test]
    fn varpi_examples() {
        let model = LevyModel::new(1.0, 2f64.sqrt(), 0.0, PhaseTypeJump::exponential(1.0).unwrap()).unwrap();
        let bctx = ScaleContext::new(model, 2.0).unwrap();
        // psi(2) = 2 + 4 = 6, so varpi(2) = (2 - 6) / (1 - 2) = 4
        assert!((varpi(&bctx, 2.0).unwrap() - 4.0).abs() < 1e-12);
        let c = ctx();
        let phi = c.phi_r();
        let limit = c.model().psi_prime(phi).unwrap();
        assert_eq!(varpi(&c, phi).unwrap(), limit);
        assert!((varpi(&c, phi + 1e-7).unwrap() - limit).abs() < 1e-4);
        assert!((varpi(&c, phi - 1e-7).unwrap() - limit).abs() < 1e-4);
        for &a in &[0.05, 0.3, 1.0, 3.0] {
            assert!(varpi(&c, a).unwrap() > 0.0);
        }
    }

    #[test]
    fn psi_constant_and_linear() {
        let phi = ctx().phi_r();
        let f = RunningPayoff::constant(3.0);
        assert!((psi_f(&f, phi, 1.3).unwrap() - 3.0 / phi).abs() < 1e-13);
        let lin = RunningPayoff::linear_floor(2.0, 0.5, None).unwrap();
        for &a in &[-3.0, 0.0, 2.0] {
            let closed = 2.0 * ((0.5 + a) / phi + 1.0 / (phi * phi));
            assert!((psi_f(&lin, phi, a).unwrap() - closed).abs() < 1e-12 * closed.abs().max(1.0));
        }
    }

    #[test]
    fn psi_matches_closed_forms_with_floors() {
        let phi = ctx().phi_r();
        // floored linear payoff
        let (b1, b2, b3) = (1.5, 0.3, -0.8);
        let lin = RunningPayoff::linear_floor(b1, b2, Some(b3)).unwrap();
        for &a in &[-3.0, -1.1, 0.0, 2.0] {
            let d = (b3 - (b2 + a)).max(0.0);
            let e = (-phi * d).exp();
            let closed = b1 * (b3 / phi * (1.0 - e) + (b2 + a) / phi * e + e * (d / phi + 1.0 / (phi * phi)));
            assert!((psi_f(&lin, phi, a).unwrap() - closed).abs() < 1e-12 * closed.abs().max(1.0));
        }
        // capped exponential payoff
        let (l, cap) = (1.0, 1.0);
        let ex = RunningPayoff::exp_cap(l, cap).unwrap();
        let phi_l = phi - l;
        for &a in &[-4.0, 0.0, 0.9, 3.0] {
            let d = (cap / l - a).max(0.0);
            let closed = cap.exp() / phi * (-phi * d).exp() + (l * a).exp() / phi_l * (1.0 - (-phi_l * d).exp());
            assert!((psi_f(&ex, phi, a).unwrap() - closed).abs() < 1e-12 * closed.abs().max(1.0));
        }
        // simple payoff
        let sim = fixtures::payoff_simple();
        for &a in &[-2.0f64, 0.0, 1.0] {
            let e0 = (-phi * (0.0 - a).max(0.0)).exp();
            let closed = (-10.0 * (1.0 - e0) + 10.0 * e0) / phi;
            assert!((psi_f(&sim, phi, a).unwrap() - closed).abs() < 1e-12 * 10.0 / phi);
        }
    }

    #[test]
    fn psi_matches_quadrature() {
        let phi = ctx().phi_r();
        let sim = fixtures::payoff_simple();
        let q = psi_quad(&sim, phi, 0.0, &[0.0]);
        assert!((psi_f(&sim, phi, 0.0).unwrap() - q).abs() < 1e-8);
        let cases = [
            (fixtures::payoff_linear(), vec![]),
            (RunningPayoff::linear_floor(1.0, 0.0, Some(-1.0)).unwrap(), vec![-1.0]),
            (fixtures::payoff_exp(), vec![1.0]),
            (sim, vec![0.0]),
        ];
        for (f, kinks) in &cases {
            for k in 0..=10 {
                let a = -5.0 + k as f64;
                let exact = psi_f(f, phi, a).unwrap();
                let q = psi_quad(f, phi, a, kinks);
                assert!((exact - q).abs() <= 1e-6 * q.abs().max(1.0), "{f:?} A={a}: {exact} vs {q}");
            }
        }
    }

    #[test]
    fn psi_degenerate_exponent() {
        let phi = ctx().phi_r();
        let f = RunningPayoff::exp_cap(phi, 1.0).unwrap();
        assert!(matches!(psi_f(&f, phi, 0.0), Err(Error::DegenerateExponent(_))));
    }

    #[test]
    fn theta_examples() {
        let c = ctx();
        let f = RunningPayoff::constant(2.5);
        assert_eq!(theta_f(&f, &c, -1.0, 0.0).unwrap(), 0.0);
        let v = theta_f(&f, &c, 2.0, -0.5).unwrap();
        assert!((v - 2.5 * (c.z(2.5).unwrap() - 1.0) / c.r()).abs() < 1e-10);
    }

    #[test]
    fn theta_matches_quadrature() {
        let c = ctx();
        let cases = [
            (fixtures::payoff_linear(), vec![]),
            (RunningPayoff::linear_floor(1.0, 0.5, Some(-1.0)).unwrap(), vec![-1.5]),
            (fixtures::payoff_exp(), vec![1.0]),
            (fixtures::payoff_simple(), vec![0.0]),
        ];
        for (f, kinks) in &cases {
            for &(x, a) in &[(0.0, -2.0), (1.5, -1.0), (3.0, 0.5), (4.0, -3.0)] {
                let exact = theta_f(f, &c, x, a).unwrap();
                let q = theta_quad(f, &c, x, a, kinks);
                assert!((exact - q).abs() <= 1e-7 * q.abs().max(1.0), "{f:?} x={x} A={a}: {exact} vs {q}");
            }
        }
    }

    #[test]
    fn theta_derivatives_match_finite_differences() {
        let c = ctx();
        let f = fixtures::payoff_exp().scaled(0.3);
        let a = -1.0;
        let h = 1e-5;
        for &x in &[-0.4, 0.5, 2.0] {
            let t = |x| theta_f(&f, &c, x, a).unwrap();
            let d1 = theta_f_derivative(&f, &c, x, a, 1).unwrap();
            let d2 = theta_f_derivative(&f, &c, x, a, 2).unwrap();
            assert!(((t(x + h) - t(x - h)) / (2.0 * h) - d1).abs() < 1e-6 * d1.abs().max(1.0));
            let fd2 = (theta_f_derivative(&f, &c, x + h, a, 1).unwrap() - theta_f_derivative(&f, &c, x - h, a, 1).unwrap()) / (2.0 * h);
            assert!((fd2 - d2).abs() < 1e-5 * d2.abs().max(1.0));
        }
    }

    #[test]
    fn family_theta_formulas() {
        let c = ctx();
        let sd = c.spectral().clone();
        let phi = sd.phi_r;
        // linear family with floor
        let (b1, b2, b3) = (1.0, 0.2, -1.0);
        let f = RunningPayoff::linear_floor(b1, b2, Some(b3)).unwrap();
        let (x, a) = (2.0, -2.5);
        let m = (b3 - b2).max(a).min(x);
        let mut sum = C64::new(0.0, 0.0);
        for (ci, xi) in sd.coeffs.iter().zip(&sd.xis) {
            // gamma^{(-Phi)} and gamma^{(xi)} with complex xi, computed by hand
            let g_phi = gamma_helper(-phi, m, x).unwrap();
            let anti = |y: f64| (y / xi - 1.0 / (xi * xi)) * (xi * y).exp();
            let g_xi = anti(x) - anti(m);
            sum += ci * ((phi * x).exp() * g_phi - (-xi * x).exp() * g_xi);
        }
        let closed = b1 * (b3 * w_helper(&c, 0.0, x, a, a, m).unwrap() + b2 * w_helper(&c, 0.0, x, a, m, x).unwrap()) + b1 * sum.re;
        let exact = theta_f(&f, &c, x, a).unwrap();
        assert!((exact - closed).abs() < 1e-9 * exact.abs().max(1.0));

        // capped exponential family: the second term carries a factor e^{Lx}
        let (l, cap) = (1.0, 0.5);
        let f = RunningPayoff::exp_cap(l, cap).unwrap();
        let (x, a) = (1.5, -2.0);
        let m = (cap / l).max(a).min(x);
        let closed = cap.exp() * w_helper(&c, 0.0, x, a, m, x).unwrap() + (l * x).exp() * w_helper(&c, l, x, a, a, m).unwrap();
        let exact = theta_f(&f, &c, x, a).unwrap();
        assert!((exact - closed).abs() < 1e-9 * exact.abs().max(1.0));
    }

    #[test]
    fn w_helper_examples() {
        let c = ctx();
        assert_eq!(w_helper(&c, 0.0, 1.0, 0.0, -3.0, -1.0).unwrap(), 0.0);
        let (x, a) = (2.0, -0.5);
        let full = w_helper(&c, 0.0, x, a, -10.0, 10.0).unwrap();
        assert!((full - (c.z(x - a).unwrap() - 1.0) / c.r()).abs() < 1e-10);
        let v = w_helper(&c, 0.5, 2.0, 0.0, 0.5, 1.5).unwrap();
        let q = integrate(|y| c.w_tilted(0.5, 2.0 - y).unwrap(), 0.5, 1.5, &[], 1e-13).unwrap();
        assert!((v - q).abs() < 1e-8);
    }

    #[test]
    fn gamma_examples() {
        assert_eq!(gamma_helper(0.7, 1.0, 1.0).unwrap(), 0.0);
        assert!((gamma_helper(1.0, 0.0, 1.0).unwrap() - 1.0).abs() < 1e-15);
        let q = integrate(|y| y * (-0.7 * y).exp(), -1.0, 2.0, &[], 1e-14).unwrap();
        assert!((gamma_helper(-0.7, -1.0, 2.0).unwrap() - q).abs() < 1e-10);
        assert!(gamma_helper(0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn never_stop_constant_is_annuity() {
        let c = ctx();
        let f = RunningPayoff::constant(1.7);
        for &x in &[-3.0, 0.0, 2.0] {
            assert!((never_stop_value(&f, &c, x).unwrap() - 1.7 / c.r()).abs() < 1e-9 * 1.7 / c.r());
        }
    }

    #[test]
    fn never_stop_matches_quadrature() {
        let c = ctx().with_x_max(400.0);
        let sd = c.spectral().clone();
        let phi = sd.phi_r;
        for f in [fixtures::payoff_simple(), fixtures::payoff_exp(), fixtures::payoff_linear()] {
            let x = 0.4;
            let below = integrate(|u| sd.phi_r_prime * (-phi * u).exp() * f.eval(x - u), 0.0, 100.0 / phi, &[x, x - 1.0], 1e-13).unwrap();
            let above = integrate(
                |v| {
                    let k: f64 = sd.coeffs.iter().zip(&sd.xis).map(|(c, xi)| (c * (-xi * v).exp()).re).sum();
                    k * f.eval(x + v)
                },
                0.0,
                150.0,
                &[-x, 1.0 - x],
                1e-13,
            )
            .unwrap();
            let exact = never_stop_value(&f, &c, x).unwrap();
            assert!((exact - below - above).abs() < 1e-6 * exact.abs().max(1.0), "{f:?}: {exact} vs {}", below + above);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn psi_is_linear_in_f(w1 in 0.0f64..3.0, w2 in 0.0f64..3.0, a in -5.0f64..5.0) {
            let phi = ctx().phi_r();
            let f1 = fixtures::payoff_simple();
            let f2 = fixtures::payoff_exp();
            let sum = RunningPayoff::weighted(vec![(w1, f1.clone()), (w2, f2.clone())]).unwrap();
            let lhs = psi_f(&sum, phi, a).unwrap();
            let rhs = w1 * psi_f(&f1, phi, a).unwrap() + w2 * psi_f(&f2, phi, a).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
        }

        #[test]
        fn psi_is_nondecreasing(a in -5.0f64..5.0, da in 0.0f64..1.0) {
            let phi = ctx().phi_r();
            for f in [fixtures::payoff_simple(), fixtures::payoff_linear(), fixtures::payoff_exp()] {
                prop_assert!(psi_f(&f, phi, a + da).unwrap() >= psi_f(&f, phi, a).unwrap() - 1e-12);
            }
        }

        #[test]
        fn reward_is_concave(x in -8.0f64..4.0, h in 1e-3f64..0.5) {
            for g in [fixtures::reward_exp(), fixtures::reward_lin()] {
                let dd = g.eval(x + h) - 2.0 * g.eval(x) + g.eval(x - h);
                prop_assert!(dd <= 1e-9);
                prop_assert!(g.derivative(x) <= 0.0);
            }
        }
    }
}
