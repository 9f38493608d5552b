//! Spectrally negative Lévy processes with phase-type jumps.
//!
//! The process is `X_t - X_0 = mu t + sigma B_t - sum_{n <= N_t} Z_n` where `N` is a
//! Poisson process with rate `lambda` and the `Z_n` are i.i.d. phase-type with
//! representation `(alpha, T)`. Its Laplace exponent is rational in `s`:
//!
//! ```text
//! psi(s) = mu s + sigma^2 s^2 / 2 + lambda (alpha (sI - T)^{-1} t - alpha 1),   t = -T 1
//! ```
//!
//! which is what makes the scale functions available in closed form.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{bisect_increasing, C64};

/// Row sums of the subgenerator may exceed zero by this much. Published
/// fitted matrices are rounded to four decimals.
pub const ROW_SUM_TOL: f64 = 1e-3;
/// Tolerance on `sum(alpha) <= 1`.
pub const ALPHA_SUM_TOL: f64 = 1e-9;
/// Minimum distance between `s` and an eigenvalue of `T` for `psi(s)` to be evaluated.
pub const EIGEN_COLLISION_TOL: f64 = 1e-9;
/// Relative separation required between roots of `psi(s) = r`.
pub const ROOT_SEPARATION_TOL: f64 = 1e-7;

/// Phase-type distribution with initial law `alpha` and subgenerator `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseTypeJump {
    alpha: DVector<f64>,
    t_mat: DMatrix<f64>,
    exit: DVector<f64>,
    eigenvalues: Vec<C64>,
}

impl PhaseTypeJump {
    pub fn new(alpha: Vec<f64>, t_rows: Vec<Vec<f64>>) -> Result<Self> {
        let m = alpha.len();
        if m == 0 {
            return Err(Error::DimensionMismatch("phase-type dimension must be positive".into()));
        }
        if t_rows.len() != m || t_rows.iter().any(|row| row.len() != m) {
            return Err(Error::DimensionMismatch(format!("alpha has {m} entries but T is not {m}x{m}")));
        }
        let t_mat = DMatrix::from_fn(m, m, |i, j| t_rows[i][j]);
        for i in 0..m {
            if !(t_mat[(i, i)] < 0.0) {
                return Err(Error::InvalidSubgenerator(format!("diagonal entry T[{i}][{i}] = {} must be negative", t_mat[(i, i)])));
            }
            for j in 0..m {
                if i != j && t_mat[(i, j)] < 0.0 {
                    return Err(Error::InvalidSubgenerator(format!("off-diagonal entry T[{i}][{j}] = {} is negative", t_mat[(i, j)])));
                }
            }
            let row_sum: f64 = t_mat.row(i).sum();
            if row_sum > ROW_SUM_TOL {
                return Err(Error::InvalidSubgenerator(format!("row {i} of T sums to {row_sum} > 0")));
            }
        }
        if let Some(a) = alpha.iter().find(|a| !(**a >= 0.0)) {
            return Err(Error::InvalidInitialDistribution(format!("negative entry {a}")));
        }
        let total: f64 = alpha.iter().sum();
        if total > 1.0 + ALPHA_SUM_TOL {
            return Err(Error::InvalidInitialDistribution(format!("entries sum to {total} > 1")));
        }

        let exit = -(&t_mat * DVector::from_element(m, 1.0));
        if !exit.iter().any(|v| *v > 0.0) {
            return Err(Error::InvalidSubgenerator("no phase has a positive exit rate".into()));
        }
        let eigenvalues: Vec<C64> = t_mat.complex_eigenvalues().iter().map(|z| C64::new(z.re, z.im)).collect();
        if let Some(z) = eigenvalues.iter().find(|z| z.re >= 0.0) {
            return Err(Error::InvalidSubgenerator(format!("eigenvalue {z} has nonnegative real part")));
        }
        Ok(Self { alpha: DVector::from_vec(alpha), t_mat, exit, eigenvalues })
    }

    /// Exponential distribution with the given rate.
    pub fn exponential(rate: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![vec![-rate]])
    }

    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn subgenerator(&self) -> &DMatrix<f64> {
        &self.t_mat
    }

    /// Exit-rate vector `t = -T 1`.
    pub fn exit_rates(&self) -> &DVector<f64> {
        &self.exit
    }

    pub fn eigenvalues(&self) -> &[C64] {
        &self.eigenvalues
    }

    /// Probability mass of a genuine (nonzero) jump.
    pub fn mass(&self) -> f64 {
        self.alpha.sum()
    }

    /// `E[Z] = alpha (-T)^{-1} 1`.
    pub fn mean(&self) -> f64 {
        let m = self.dim();
        let minus_t = -self.t_mat.clone();
        let y = minus_t.lu().solve(&DVector::from_element(m, 1.0)).expect("subgenerator with negative spectrum is invertible");
        self.alpha.dot(&y)
    }

    /// Density `alpha e^{T z} t` for `z > 0`.
    pub fn density(&self, z: f64) -> f64 {
        if z < 0.0 {
            return 0.0;
        }
        let e = (&self.t_mat * z).exp();
        (self.alpha.transpose() * e * &self.exit)[(0, 0)]
    }

    fn check_collision(&self, s: C64) -> Result<()> {
        if self.eigenvalues.iter().any(|e| (s - e).norm() < EIGEN_COLLISION_TOL) {
            return Err(Error::SingularResolvent(format!("{s}")));
        }
        Ok(())
    }

    /// `(alpha (sI - T)^{-1} t, alpha (sI - T)^{-2} t)` for complex `s`.
    pub fn resolvent_moments(&self, s: C64) -> Result<(C64, C64)> {
        self.check_collision(s)?;
        let m = self.dim();
        let a = DMatrix::from_fn(m, m, |i, j| {
            let diag = if i == j { s } else { C64::new(0.0, 0.0) };
            diag - C64::new(self.t_mat[(i, j)], 0.0)
        });
        let lu = a.clone().lu();
        let t_c = self.exit.map(|v| C64::new(v, 0.0));
        let alpha_c = self.alpha.map(|v| C64::new(v, 0.0));
        let y = lu.solve(&t_c).ok_or_else(|| Error::SingularResolvent(format!("{s}")))?;
        let z = a.transpose().lu().solve(&alpha_c).ok_or_else(|| Error::SingularResolvent(format!("{s}")))?;
        let first = alpha_c.dot(&y);
        let second = z.dot(&y);
        if !first.is_finite() || !second.is_finite() {
            return Err(Error::SingularResolvent(format!("{s}")));
        }
        Ok((first, second))
    }

    /// Real-argument variant of [`resolvent_moments`](Self::resolvent_moments).
    pub fn resolvent_moments_real(&self, s: f64) -> Result<(f64, f64)> {
        self.check_collision(C64::new(s, 0.0))?;
        let m = self.dim();
        let a = DMatrix::from_fn(m, m, |i, j| if i == j { s } else { 0.0 } - self.t_mat[(i, j)]);
        let y = a.clone().lu().solve(&self.exit).ok_or_else(|| Error::SingularResolvent(format!("{s}")))?;
        let z = a.transpose().lu().solve(&self.alpha).ok_or_else(|| Error::SingularResolvent(format!("{s}")))?;
        let first = self.alpha.dot(&y);
        let second = z.dot(&y);
        if !first.is_finite() || !second.is_finite() {
            return Err(Error::SingularResolvent(format!("{s}")));
        }
        Ok((first, second))
    }

    /// Coefficients (ascending powers) of `det(sI - T)` and of `alpha adj(sI - T) t`,
    /// by the Faddeev–LeVerrier recursion.
    pub fn char_and_adjugate_polys(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.dim();
        let mut c = vec![0.0; n + 1];
        c[n] = 1.0;
        let mut adj = vec![0.0; n];
        let eye = DMatrix::<f64>::identity(n, n);
        let mut mk = DMatrix::<f64>::zeros(n, n);
        for k in 1..=n {
            mk = &self.t_mat * &mk + &eye * c[n - k + 1];
            // adj(sI - T) = sum_k M_k s^{n-k}
            adj[n - k] = (self.alpha.transpose() * &mk * &self.exit)[(0, 0)];
            c[n - k] = -(&self.t_mat * &mk).trace() / k as f64;
        }
        (c, adj)
    }
}

/// Spectrally negative Lévy process: drift, Brownian part and compound-Poisson
/// phase-type jumps.
#[derive(Debug, Clone, PartialEq)]
pub struct LevyModel {
    mu: f64,
    sigma: f64,
    lambda: f64,
    jump: PhaseTypeJump,
}

impl LevyModel {
    pub fn new(mu: f64, sigma: f64, lambda: f64, jump: PhaseTypeJump) -> Result<Self> {
        if !mu.is_finite() {
            return Err(Error::UnsupportedModel(format!("drift {mu} is not finite")));
        }
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::UnsupportedModel(format!(
                "sigma = {sigma}; only processes with a Gaussian component (sigma > 0) are supported"
            )));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::UnsupportedModel(format!("jump rate {lambda} must be nonnegative")));
        }
        Ok(Self { mu, sigma, lambda, jump })
    }

    /// Validates `(alpha, T)` and builds the model in one step.
    pub fn build(mu: f64, sigma: f64, lambda: f64, alpha: Vec<f64>, t_rows: Vec<Vec<f64>>) -> Result<Self> {
        let jump = PhaseTypeJump::new(alpha, t_rows)?;
        Self::new(mu, sigma, lambda, jump)
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn jump(&self) -> &PhaseTypeJump {
        &self.jump
    }

    /// Laplace exponent for complex argument.
    pub fn laplace_exponent(&self, s: C64) -> Result<C64> {
        let gauss = self.mu * s + 0.5 * self.sigma * self.sigma * s * s;
        if self.lambda == 0.0 {
            return Ok(gauss);
        }
        let (first, _) = self.jump.resolvent_moments(s)?;
        Ok(gauss + self.lambda * (first - self.jump.mass()))
    }

    /// Laplace exponent for real argument.
    pub fn psi(&self, s: f64) -> Result<f64> {
        let gauss = self.mu * s + 0.5 * self.sigma * self.sigma * s * s;
        if self.lambda == 0.0 {
            return Ok(gauss);
        }
        let (first, _) = self.jump.resolvent_moments_real(s)?;
        Ok(gauss + self.lambda * (first - self.jump.mass()))
    }

    /// `psi'(s) = mu + sigma^2 s - lambda alpha (sI - T)^{-2} t`.
    pub fn psi_derivative(&self, s: C64) -> Result<C64> {
        let gauss = self.mu + self.sigma * self.sigma * s;
        if self.lambda == 0.0 {
            return Ok(gauss);
        }
        let (_, second) = self.jump.resolvent_moments(s)?;
        Ok(gauss - self.lambda * second)
    }

    pub fn psi_prime(&self, s: f64) -> Result<f64> {
        let gauss = self.mu + self.sigma * self.sigma * s;
        if self.lambda == 0.0 {
            return Ok(gauss);
        }
        let (_, second) = self.jump.resolvent_moments_real(s)?;
        Ok(gauss - self.lambda * second)
    }

    /// `psi'(0+) = E[X_1] = mu - lambda E[Z]`.
    pub fn psi_prime_zero(&self) -> f64 {
        self.mu - self.lambda * self.jump.mean()
    }

    /// The right inverse `Phi_r = sup{s >= 0 : psi(s) = r}`.
    pub fn solve_phi(&self, r: f64) -> Result<f64> {
        if !(r > 0.0) || !r.is_finite() {
            return Err(Error::DomainError(format!("discount rate {r} must be positive")));
        }
        // psi is convex with psi(0) = 0 < r, so {s >= 0 : psi(s) < r} = [0, Phi_r).
        let mut hi = 1.0;
        let mut expansions = 0;
        while self.psi(hi)? <= r {
            hi *= 2.0;
            expansions += 1;
            if expansions > 200 {
                return Err(Error::ConvergenceFailure(format!("could not bracket psi(s) = {r}")));
            }
        }
        let root = bisect_increasing(|s| Ok(self.psi(s)? - r), 0.0, hi, 0.0, 400)?;
        // One Newton step removes the last bits of bisection error.
        let d = self.psi_prime(root)?;
        let polished = root - (self.psi(root)? - r) / d;
        let phi = if (self.psi(polished)? - r).abs() <= (self.psi(root)? - r).abs() { polished } else { root };
        if !(phi > 0.0) || !(self.psi_prime(phi)? > 0.0) {
            return Err(Error::ConvergenceFailure(format!("invalid Phi_r = {phi}")));
        }
        Ok(phi)
    }

    pub fn has_jumps(&self) -> bool {
        self.lambda > 0.0 && self.jump.mass() > 0.0
    }

    /// Ascending coefficients of `det(sI - T) (psi(s) - r)`, a polynomial of degree `m + 2`.
    pub fn cleared_polynomial(&self, r: f64) -> Vec<f64> {
        let (charp, adj) = self.jump.char_and_adjugate_polys();
        let s2 = 0.5 * self.sigma * self.sigma;
        let quad = [-self.lambda * self.jump.mass() - r, self.mu, s2];
        let mut poly = vec![0.0; charp.len() + 2];
        for (i, ci) in charp.iter().enumerate() {
            for (j, qj) in quad.iter().enumerate() {
                poly[i + j] += ci * qj;
            }
        }
        for (i, ai) in adj.iter().enumerate() {
            poly[i] += self.lambda * ai;
        }
        poly
    }

    /// Roots, coefficients and derived constants needed by the scale functions at rate `r`.
    pub fn spectral_data(&self, r: f64) -> Result<SpectralData> {
        let phi_r = self.solve_phi(r)?;
        // Without jumps the factor det(sI - T) only adds spurious roots.
        let (poly, expected) = if self.has_jumps() {
            (self.cleared_polynomial(r), self.jump.dim() + 2)
        } else {
            (vec![-r, self.mu, 0.5 * self.sigma * self.sigma], 2)
        };
        let roots = polynomial_roots(&poly)?;
        if roots.len() != expected {
            return Err(Error::ConvergenceFailure(format!("found {} roots, expected {expected}", roots.len())));
        }
        let mut polished: Vec<C64> = Vec::with_capacity(roots.len());
        for root in roots {
            polished.push(self.newton_polish(root, r)?);
        }

        let scale = polished.iter().map(|z| z.norm()).fold(1.0, f64::max);
        for i in 0..polished.len() {
            for j in (i + 1)..polished.len() {
                let gap = (polished[i] - polished[j]).norm();
                if gap <= ROOT_SEPARATION_TOL * scale {
                    return Err(Error::RootMultiplicity(format!("{} and {} are {gap:e} apart", polished[i], polished[j])));
                }
            }
        }

        let positive: Vec<C64> = polished.iter().copied().filter(|z| z.re > 0.0).collect();
        if positive.len() != 1 {
            return Err(Error::ConvergenceFailure(format!("expected exactly one root with positive real part, found {}", positive.len())));
        }
        if (positive[0].re - phi_r).abs() > 1e-9 * phi_r.max(1.0) || positive[0].im.abs() > 1e-9 {
            return Err(Error::ConvergenceFailure(format!("polynomial root {} disagrees with Phi_r = {phi_r}", positive[0])));
        }

        let mut xis: Vec<C64> = polished.iter().filter(|z| z.re < 0.0).map(|z| -*z).collect();
        enforce_conjugate_pairs(&mut xis)?;
        xis.sort_by(|a, b| a.re.partial_cmp(&b.re).unwrap().then(a.im.partial_cmp(&b.im).unwrap()));

        let mut coeffs = Vec::with_capacity(xis.len());
        for xi in &xis {
            coeffs.push(-1.0 / self.psi_derivative(-*xi)?);
        }
        let phi_r_prime = 1.0 / self.psi_prime(phi_r)?;
        Ok(SpectralData { r, phi_r, xis, coeffs, phi_r_prime, psi_prime_zero: self.psi_prime_zero() })
    }

    fn newton_polish(&self, mut s: C64, r: f64) -> Result<C64> {
        for _ in 0..60 {
            let f = self.laplace_exponent(s)? - r;
            let d = self.psi_derivative(s)?;
            let step = f / d;
            if !step.is_finite() {
                break;
            }
            s -= step;
            if step.norm() <= 1e-15 * s.norm().max(1.0) {
                break;
            }
        }
        if s.im.abs() <= 1e-12 * s.norm().max(1.0) {
            s.im = 0.0;
        }
        Ok(s)
    }
}

/// Roots of a real polynomial (ascending coefficients) as eigenvalues of its companion matrix.
pub fn polynomial_roots(coeffs: &[f64]) -> Result<Vec<C64>> {
    let mut coeffs = coeffs.to_vec();
    while coeffs.len() > 1 && *coeffs.last().unwrap() == 0.0 {
        coeffs.pop();
    }
    let n = coeffs.len() - 1;
    if n == 0 {
        return Ok(Vec::new());
    }
    let lead = coeffs[n];
    let mut companion = DMatrix::<f64>::zeros(n, n);
    for i in 1..n {
        companion[(i, i - 1)] = 1.0;
    }
    for i in 0..n {
        companion[(i, n - 1)] = -coeffs[i] / lead;
    }
    let roots: Vec<C64> = companion.complex_eigenvalues().iter().map(|z| C64::new(z.re, z.im)).collect();
    if roots.iter().any(|z| !z.is_finite()) {
        return Err(Error::ConvergenceFailure("companion eigenvalues are not finite".into()));
    }
    Ok(roots)
}

fn enforce_conjugate_pairs(xis: &mut [C64]) -> Result<()> {
    let n = xis.len();
    let mut paired = vec![false; n];
    for i in 0..n {
        if paired[i] || xis[i].im == 0.0 {
            continue;
        }
        let target = xis[i].conj();
        let partner = (0..n)
            .filter(|&j| j != i && !paired[j] && xis[j].im != 0.0)
            .min_by(|&a, &b| (xis[a] - target).norm().partial_cmp(&(xis[b] - target).norm()).unwrap());
        match partner {
            Some(j) if (xis[j] - target).norm() <= 1e-8 * target.norm().max(1.0) => {
                xis[j] = target;
                paired[i] = true;
                paired[j] = true;
            }
            _ => return Err(Error::ConvergenceFailure(format!("root -{} has no conjugate partner", xis[i]))),
        }
    }
    Ok(())
}

/// Everything needed to evaluate scale functions at discount rate `r`.
///
/// `-xis[i]` are the roots of `psi(s) = r` in the left half-plane and
/// `coeffs[i] = -1 / psi'(-xis[i])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralData {
    pub r: f64,
    pub phi_r: f64,
    pub xis: Vec<C64>,
    pub coeffs: Vec<C64>,
    /// `dPhi_r / dr = 1 / psi'(Phi_r)`.
    pub phi_r_prime: f64,
    pub psi_prime_zero: f64,
}
