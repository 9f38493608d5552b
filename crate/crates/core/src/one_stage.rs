//! Single stopping problem: the first-order function `Lambda(A)`, its root
//! `A*`, and the value of threshold strategies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::bisect_increasing;
use crate::payoffs::{never_stop_value, psi_f, theta_f, theta_f_derivative, varpi, RewardSpec, RunningPayoff};
use crate::scale_fn::ScaleContext;

/// Running payoff and terminal reward of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub f: RunningPayoff,
    pub g: RewardSpec,
}

impl StageSpec {
    pub fn new(f: RunningPayoff, g: RewardSpec) -> Self {
        Self { f, g }
    }

    pub fn validate(&self) -> Result<()> {
        self.f.validate()?;
        self.g.validate()
    }

    /// Combined stage `(sum f, sum g)`.
    pub fn merge<'a, I: IntoIterator<Item = &'a StageSpec>>(stages: I) -> StageSpec {
        let stages: Vec<&StageSpec> = stages.into_iter().collect();
        StageSpec { f: RunningPayoff::sum(stages.iter().map(|s| s.f.clone())), g: RewardSpec::sum(stages.iter().map(|s| &s.g)) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Thresholds beyond `+-a_max` are reported as infinite.
    pub a_max: f64,
    /// Absolute tolerance on `A*`.
    pub xtol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { a_max: 1e3, xtol: 1e-10, max_iter: 200 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSolution {
    /// Finite root, `+inf` (stop at once) or `-inf` (never stop).
    pub a_star: f64,
    /// `|Lambda(A*)|` for a finite root, zero otherwise.
    pub lambda_at_root: f64,
    pub bracket: (f64, f64),
}

/// `Lambda(A) = -rK/Phi + b (r/Phi^2 + (rA - psi'(0+))/Phi) + sum c_i e^{a_i A} varpi(a_i) + Psi_f(A)`.
pub fn lambda_fn(stage: &StageSpec, ctx: &ScaleContext, a: f64) -> Result<f64> {
    let r = ctx.r();
    let phi = ctx.phi_r();
    let g = &stage.g;
    let mut total = -r / phi * g.k;
    if g.b != 0.0 {
        total += g.b * (r / (phi * phi) + (r * a - ctx.spectral().psi_prime_zero) / phi);
    }
    for t in &g.terms {
        total += t.c * (t.a * a).exp() * varpi(ctx, t.a)?;
    }
    Ok(total + psi_f(&stage.f, phi, a)?)
}

/// Root of `Lambda` by bracket doubling from `[-1, 1]` and bisection.
pub fn solve_threshold(stage: &StageSpec, ctx: &ScaleContext, opts: &SolverOptions) -> Result<ThresholdSolution> {
    solve_increasing(|a| lambda_fn(stage, ctx, a), opts)
}

/// Same contract as [`solve_threshold`] for any nondecreasing first-order function.
pub fn solve_increasing<F>(mut lambda: F, opts: &SolverOptions) -> Result<ThresholdSolution>
where
    F: FnMut(f64) -> Result<f64>,
{
    let mut lo = -1.0f64;
    while lambda(lo)? >= 0.0 {
        if lo <= -opts.a_max {
            return Ok(ThresholdSolution { a_star: f64::NEG_INFINITY, lambda_at_root: 0.0, bracket: (lo, lo) });
        }
        lo = (2.0 * lo).max(-opts.a_max);
    }
    let mut hi = 1.0f64.max(lo + 1.0);
    while lambda(hi)? <= 0.0 {
        if hi >= opts.a_max {
            return Ok(ThresholdSolution { a_star: f64::INFINITY, lambda_at_root: 0.0, bracket: (hi, hi) });
        }
        hi = (2.0 * hi).min(opts.a_max);
    }
    let bracket = (lo, hi);
    let root = bisect_increasing(&mut lambda, lo, hi, opts.xtol, opts.max_iter)?;
    let at_root = lambda(root)?;
    log::debug!("threshold {root} in [{lo}, {hi}], Lambda = {at_root:e}");
    Ok(ThresholdSolution { a_star: root, lambda_at_root: at_root.abs(), bracket })
}

/// Expected value `u_A(x)` of stopping the first time the process is at or below `A`.
pub fn value_at(stage: &StageSpec, ctx: &ScaleContext, a: f64, x: f64) -> Result<f64> {
    if a == f64::INFINITY || x <= a {
        return Ok(stage.g.eval(x));
    }
    if a == f64::NEG_INFINITY {
        return never_stop_value(&stage.f, ctx, x);
    }
    let y = x - a;
    let r = ctx.r();
    let phi = ctx.phi_r();
    let g = &stage.g;
    let w = ctx.w(y)?;
    let mut total = g.k * (ctx.z(y)? - r / phi * w);
    for t in &g.terms {
        let q = ctx.z_tilted(t.a, y)? - varpi(ctx, t.a)? * ctx.w_tilted(t.a, y)?;
        total -= t.c * (t.a * x).exp() * q;
    }
    if g.b != 0.0 {
        total -= g.b * ctx.discounted_position_at_passage(x, a)?;
    }
    Ok(total + w * psi_f(&stage.f, phi, a)? - theta_f(&stage.f, ctx, x, a)?)
}

/// `(u_A(x), u_A'(x), u_A''(x))` away from the threshold. Below `A` these are the reward and its derivatives.
pub fn value_at_derivatives(stage: &StageSpec, ctx: &ScaleContext, a: f64, x: f64) -> Result<(f64, f64, f64)> {
    let g = &stage.g;
    if a == f64::INFINITY || x <= a {
        return Ok((g.eval(x), g.derivative(x), g.second_derivative(x)));
    }
    if a == f64::NEG_INFINITY {
        return Err(Error::DomainError("derivatives of the never-stop value are not implemented".into()));
    }
    let y = x - a;
    let r = ctx.r();
    let phi = ctx.phi_r();
    let (w, w1, w2) = (ctx.w(y)?, ctx.w_prime(y)?, ctx.w_second(y)?);
    let mut u = [g.k * (ctx.z(y)? - r / phi * w), g.k * (r * w - r / phi * w1), g.k * (r * w1 - r / phi * w2)];
    for t in &g.terms {
        let om = varpi(ctx, t.a)?;
        let ra = ctx.tilted_rate(t.a)?;
        let (wa, wa1, wa2) = (ctx.w_tilted(t.a, y)?, ctx.w_tilted_derivative(t.a, y, 1)?, ctx.w_tilted_derivative(t.a, y, 2)?);
        let q = ctx.z_tilted(t.a, y)? - om * wa;
        let q1 = ra * wa - om * wa1;
        let q2 = ra * wa1 - om * wa2;
        let e = t.c * (t.a * x).exp();
        u[0] -= e * q;
        u[1] -= e * (t.a * q + q1);
        u[2] -= e * (t.a * t.a * q + 2.0 * t.a * q1 + q2);
    }
    if g.b != 0.0 {
        let (d1, d2) = ctx.discounted_position_derivatives(x, a)?;
        u[0] -= g.b * ctx.discounted_position_at_passage(x, a)?;
        u[1] -= g.b * d1;
        u[2] -= g.b * d2;
    }
    let psi = psi_f(&stage.f, phi, a)?;
    u[0] += w * psi - theta_f(&stage.f, ctx, x, a)?;
    u[1] += w1 * psi - theta_f_derivative(&stage.f, ctx, x, a, 1)?;
    u[2] += w2 * psi - theta_f_derivative(&stage.f, ctx, x, a, 2)?;
    Ok((u[0], u[1], u[2]))
}

/// Value function under the optimal threshold, using the simplified form at a finite root.
pub fn value_optimal(stage: &StageSpec, ctx: &ScaleContext, sol: &ThresholdSolution, x: f64) -> Result<f64> {
    let a = sol.a_star;
    if !a.is_finite() || x <= a {
        return value_at(stage, ctx, a, x);
    }
    let y = x - a;
    let r = ctx.r();
    let m1 = ctx.spectral().psi_prime_zero;
    let g = &stage.g;
    let z = ctx.z(y)?;
    let mut total = g.k * z;
    if g.b != 0.0 {
        total -= g.b * (ctx.zbar(y)? + (a - m1 / r) * z + m1 / r);
    }
    for t in &g.terms {
        total -= t.c * (t.a * x).exp() * ctx.z_tilted(t.a, y)?;
    }
    Ok(total - theta_f(&stage.f, ctx, x, a)?)
}
