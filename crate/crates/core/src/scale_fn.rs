//! Closed-form scale functions for phase-type Lévy processes.
//!
//! With `Phi_r` and the left-half-plane roots `-xi_i` of `psi(s) = r`,
//!
//! ```text
//! W(x)   = sum_i C_i (e^{Phi_r x} - e^{-xi_i x}),                       x >= 0
//! Z(x)   = 1 + r int_0^x W(y) dy
//! Zbar(x) = int_0^x Z(y) dy
//! ```
//!
//! and the exponentially tilted pair `W_c^{(r - psi(c))}(x) = e^{-cx} W(x)` and
//! `Z_c^{(r - psi(c))}` use `Phi_r - c` and `xi_i + c` in place of the roots.
//! Every sum is evaluated in complex arithmetic; conjugate pairs make the
//! result real and the leftover imaginary part is checked.

use crate::error::{Error, Result};
use crate::levy_model::{LevyModel, SpectralData};
use crate::numeric::{expm1_c, expm1_over, expm2_over, C64};

/// Default bound on `|Im|` relative to the magnitude of the summed terms.
pub const DEFAULT_IMAG_TOL: f64 = 1e-9;
/// Default overflow guard is `DEFAULT_GUARD_EXPONENT / Phi_r`.
pub const DEFAULT_GUARD_EXPONENT: f64 = 50.0;

/// One exponential term `coef * e^{rate u}` of a kernel on `u >= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpTerm {
    pub coef: C64,
    pub rate: C64,
}

/// A Lévy model together with its spectral data at a fixed discount rate.
#[derive(Debug, Clone)]
pub struct ScaleContext {
    model: LevyModel,
    spectral: SpectralData,
    imag_tol: f64,
    x_max: f64,
}

/// Discounted two-sided and one-sided exit functionals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FirstPassage {
    /// `E^x[e^{-r tau_b^+}; tau_b^+ < tau_0]`
    pub up: f64,
    /// `E^x[e^{-r tau_0}; tau_0 < tau_b^+]`
    pub down: f64,
    /// `E^x[e^{-r tau_0}]`
    pub tau0: f64,
}

impl ScaleContext {
    pub fn new(model: LevyModel, r: f64) -> Result<Self> {
        let spectral = model.spectral_data(r)?;
        Self::from_parts(model, spectral)
    }

    pub fn from_parts(model: LevyModel, spectral: SpectralData) -> Result<Self> {
        let residual = (model.psi(spectral.phi_r)? - spectral.r).abs();
        if residual > 1e-9 * spectral.r.max(1.0) {
            return Err(Error::DomainError(format!("spectral data does not belong to this model (psi(Phi_r) - r = {residual:e})")));
        }
        let x_max = DEFAULT_GUARD_EXPONENT / spectral.phi_r;
        Ok(Self { model, spectral, imag_tol: DEFAULT_IMAG_TOL, x_max })
    }

    pub fn with_x_max(mut self, x_max: f64) -> Self {
        self.x_max = x_max;
        self
    }

    pub fn with_imag_tol(mut self, tol: f64) -> Self {
        self.imag_tol = tol;
        self
    }

    pub fn model(&self) -> &LevyModel {
        &self.model
    }

    pub fn spectral(&self) -> &SpectralData {
        &self.spectral
    }

    pub fn r(&self) -> f64 {
        self.spectral.r
    }

    pub fn phi_r(&self) -> f64 {
        self.spectral.phi_r
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn imag_tol(&self) -> f64 {
        self.imag_tol
    }

    pub(crate) fn guard(&self, x: f64) -> Result<()> {
        if x > self.x_max || x.is_nan() {
            return Err(Error::RangeError { x, x_max: self.x_max });
        }
        Ok(())
    }

    /// Sums complex terms and checks that the imaginary parts cancel.
    pub(crate) fn real_sum<I: IntoIterator<Item = C64>>(&self, terms: I) -> Result<f64> {
        let mut total = C64::new(0.0, 0.0);
        let mut magnitude = 0.0;
        for t in terms {
            total += t;
            magnitude += t.norm();
        }
        if total.im.abs() > self.imag_tol * magnitude {
            return Err(Error::ImaginaryResidual { residual: total.im.abs(), magnitude });
        }
        Ok(total.re)
    }

    fn pairs(&self) -> impl Iterator<Item = (C64, C64)> + '_ {
        self.spectral.coeffs.iter().copied().zip(self.spectral.xis.iter().copied())
    }

    /// `r - psi(c)`, the discount rate of the tilted scale functions.
    pub fn tilted_rate(&self, c: f64) -> Result<f64> {
        Ok(self.r() - self.model.psi(c)?)
    }

    /// Scale function `W^{(r)}(x)`; zero for negative `x`.
    pub fn w(&self, x: f64) -> Result<f64> {
        self.w_tilted(0.0, x)
    }

    /// Right derivative `W^{(r)'}(x)` for `x > 0`; at `x = 0` this is the `x -> 0+` limit.
    pub fn w_prime(&self, x: f64) -> Result<f64> {
        if x < 0.0 {
            return Err(Error::DomainError(format!("W' requested at x = {x} < 0")));
        }
        self.w_tilted_derivative(0.0, x, 1)
    }

    /// Second derivative of `W^{(r)}` on `x > 0`.
    pub fn w_second(&self, x: f64) -> Result<f64> {
        if x < 0.0 {
            return Err(Error::DomainError(format!("W'' requested at x = {x} < 0")));
        }
        self.w_tilted_derivative(0.0, x, 2)
    }

    /// `Z^{(r)}(x)`; identically one for `x <= 0`.
    pub fn z(&self, x: f64) -> Result<f64> {
        if x <= 0.0 {
            return Ok(1.0);
        }
        Ok(1.0 + self.r() * self.w_integral(0.0, x)?)
    }

    /// `Zbar^{(r)}(x) = int_0^x Z^{(r)}(y) dy`; equal to `x` for `x <= 0`.
    pub fn zbar(&self, x: f64) -> Result<f64> {
        if x <= 0.0 {
            return Ok(x);
        }
        self.guard(x)?;
        let phi = self.phi_r();
        let x2 = x * x;
        let s = self.real_sum(self.pairs().map(|(c, xi)| c * x2 * (expm2_over(C64::new(phi * x, 0.0)) - expm2_over(-xi * x))))?;
        Ok(x + self.r() * s)
    }

    /// `W_c^{(r - psi(c))}(x) = e^{-cx} W^{(r)}(x)` in closed form.
    pub fn w_tilted(&self, c: f64, x: f64) -> Result<f64> {
        if x < 0.0 {
            return Ok(0.0);
        }
        self.guard(x)?;
        let phi_c = self.phi_r() - c;
        let phi = self.phi_r();
        // e^{Phi_c x} - e^{-xi_c x} = -e^{Phi_c x} expm1(-(Phi + xi) x)
        self.real_sum(self.pairs().map(|(coef, xi)| -coef * (phi_c * x).exp() * expm1_c(-(xi + phi) * x)))
    }

    /// `k`-th derivative (k = 1, 2) of the tilted `W` on `x > 0`.
    pub fn w_tilted_derivative(&self, c: f64, x: f64, k: u32) -> Result<f64> {
        if x < 0.0 {
            return Ok(0.0);
        }
        self.guard(x)?;
        let phi_c = C64::new(self.phi_r() - c, 0.0);
        let sign = if k.is_multiple_of(2) { -1.0 } else { 1.0 };
        self.real_sum(self.pairs().map(|(coef, xi)| {
            let xi_c = xi + c;
            coef * (phi_c.powu(k) * (phi_c * x).exp() + sign * xi_c.powu(k) * (-xi_c * x).exp())
        }))
    }

    /// `int_0^x W_c(y) dy` for `x >= 0`.
    fn w_integral(&self, c: f64, x: f64) -> Result<f64> {
        self.guard(x)?;
        let phi_c = C64::new(self.phi_r() - c, 0.0);
        self.real_sum(self.pairs().map(|(coef, xi)| {
            let xi_c = xi + c;
            coef * x * (expm1_over(phi_c * x) - expm1_over(-xi_c * x))
        }))
    }

    /// `Z_c^{(r - psi(c))}(x) = 1 + (r - psi(c)) int_0^x W_c(y) dy`.
    pub fn z_tilted(&self, c: f64, x: f64) -> Result<f64> {
        let rate = self.tilted_rate(c)?;
        if x <= 0.0 {
            return Ok(1.0);
        }
        Ok(1.0 + rate * self.w_integral(c, x)?)
    }

    /// Exponential-sum kernel of the `order`-th derivative of the tilted `W`.
    pub fn kernel(&self, tilt: f64, order: u32) -> Vec<ExpTerm> {
        let phi_c = C64::new(self.phi_r() - tilt, 0.0);
        let sign = if order.is_multiple_of(2) { -1.0 } else { 1.0 };
        let mut terms = Vec::with_capacity(2 * self.spectral.xis.len());
        for (coef, xi) in self.pairs() {
            let xi_c = xi + tilt;
            terms.push(ExpTerm { coef: coef * phi_c.powu(order), rate: phi_c });
            terms.push(ExpTerm { coef: sign * coef * xi_c.powu(order), rate: -xi_c });
        }
        terms
    }

    /// `W^{(r)'}(0+)`; equals `2 / sigma^2` for processes with a Gaussian part.
    pub fn w_prime_zero(&self) -> Result<f64> {
        let phi = self.phi_r();
        self.real_sum(self.pairs().map(|(c, xi)| c * (xi + phi)))
    }

    /// Discounted exit functionals for `0 <= x <= b`.
    pub fn first_passage_functionals(&self, x: f64, b: f64) -> Result<FirstPassage> {
        if !(b > 0.0) || !(0.0..=b).contains(&x) {
            return Err(Error::DomainError(format!("need 0 <= x <= b and b > 0, got x = {x}, b = {b}")));
        }
        let wx = self.w(x)?;
        let wb = self.w(b)?;
        let zx = self.z(x)?;
        let zb = self.z(b)?;
        let up = wx / wb;
        Ok(FirstPassage { up, down: zx - zb * up, tau0: zx - self.r() / self.phi_r() * wx })
    }

    /// `E^x[e^{-r tau_A} X_{tau_A}]`.
    pub fn discounted_position_at_passage(&self, x: f64, a: f64) -> Result<f64> {
        let y = x - a;
        if y <= 0.0 {
            return Ok(x);
        }
        let (r, phi, m1) = (self.r(), self.phi_r(), self.spectral.psi_prime_zero);
        let kappa = (r - m1 * phi + r * a * phi) / (phi * phi);
        Ok(self.zbar(y)? + (a - m1 / r) * self.z(y)? + m1 / r - kappa * self.w(y)?)
    }

    /// First and second `x`-derivatives of [`discounted_position_at_passage`](Self::discounted_position_at_passage) for `x > a`.
    pub fn discounted_position_derivatives(&self, x: f64, a: f64) -> Result<(f64, f64)> {
        let y = x - a;
        if y <= 0.0 {
            return Ok((1.0, 0.0));
        }
        let (r, phi, m1) = (self.r(), self.phi_r(), self.spectral.psi_prime_zero);
        let kappa = (r - m1 * phi + r * a * phi) / (phi * phi);
        let w = self.w(y)?;
        let w1 = self.w_prime(y)?;
        let w2 = self.w_second(y)?;
        let lead = (a - m1 / r) * r;
        Ok((self.z(y)? + lead * w - kappa * w1, r * w + lead * w1 - kappa * w2))
    }
}
