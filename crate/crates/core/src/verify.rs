//! Independent checks of the closed forms: Monte Carlo simulation of the
//! process under threshold strategies, and the generator residual
//! `(L - r) u + f` of a value function.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::levy_model::{LevyModel, PhaseTypeJump};
use crate::numeric::integrate;
use crate::one_stage::{value_at, value_at_derivatives, StageSpec};
use crate::scale_fn::ScaleContext;

/// Monte Carlo settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_paths: usize,
    /// Smallest diffusion step, used next to an active barrier.
    pub dt: f64,
    /// Simulation stops at this time; the remainder is reported as `truncation_bound`.
    pub horizon: f64,
    pub seed: u64,
    pub antithetic: bool,
    /// Largest diffusion step, used far from every barrier.
    #[serde(default = "default_max_step")]
    pub max_step: f64,
    /// Brownian-bridge test for barrier crossings between grid points.
    #[serde(default)]
    pub bridge: bool,
}

fn default_max_step() -> f64 {
    0.1
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { n_paths: 200_000, dt: 1e-3, horizon: 200.0, seed: 1, antithetic: false, max_step: default_max_step(), bridge: false }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_paths == 0 {
            return Err(Error::InvalidSpec("n_paths must be at least 1".into()));
        }
        if self.antithetic && !self.n_paths.is_multiple_of(2) {
            return Err(Error::InvalidSpec("n_paths must be even with antithetic pairs".into()));
        }
        if !(self.dt > 0.0) || !(self.horizon >= self.dt) || !(self.max_step >= self.dt) {
            return Err(Error::InvalidSpec(format!(
                "need 0 < dt <= max_step and dt <= horizon (dt = {}, max_step = {}, horizon = {})",
                self.dt, self.max_step, self.horizon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
    /// Discounted size of what the horizon cut off, estimated from the paths still running.
    pub truncation_bound: f64,
}

impl McEstimate {
    /// `(mean - target) / std_error`; zero when both the error and the gap vanish.
    pub fn z_score(&self, target: f64) -> f64 {
        let gap = self.mean - target;
        if self.std_error == 0.0 {
            if gap == 0.0 {
                0.0
            } else {
                gap.signum() * f64::INFINITY
            }
        } else {
            gap / self.std_error
        }
    }
}

/// Jump size drawn by running the absorbing Markov chain; a defective initial law gives zero.
pub fn sample_jump<R: Rng + ?Sized>(jump: &PhaseTypeJump, rng: &mut R) -> f64 {
    let alpha = jump.alpha();
    let t_mat = jump.subgenerator();
    let exit = jump.exit_rates();
    let m = jump.dim();
    let mut u: f64 = rng.random();
    let mut phase = None;
    for i in 0..m {
        if u < alpha[i] {
            phase = Some(i);
            break;
        }
        u -= alpha[i];
    }
    let mut total = 0.0;
    while let Some(i) = phase {
        let exit_i = exit[i].max(0.0);
        let out: f64 = (0..m).filter(|&j| j != i).map(|j| t_mat[(i, j)]).sum::<f64>() + exit_i;
        let hold: f64 = rng.sample(Exp1);
        total += hold / -t_mat[(i, i)];
        let mut v = rng.random::<f64>() * out;
        phase = None;
        for j in (0..m).filter(|&j| j != i) {
            if v < t_mat[(i, j)] {
                phase = Some(j);
                break;
            }
            v -= t_mat[(i, j)];
        }
    }
    total
}

/// Outcome of one path.
struct PathResult {
    value: f64,
    /// Discounted magnitude left at the horizon, zero if the path finished.
    tail: f64,
}

/// Drives one path until the handler reports completion or the horizon is reached.
/// Barriers reported by the handler set the step size and the bridge tests.
struct Stepper<'a> {
    model: &'a LevyModel,
    cfg: &'a SimConfig,
    sign: f64,
}

enum Event {
    /// Diffusion step from `x0` to `x1` over `[t, t+h]`.
    Step {
        t: f64,
        h: f64,
        x0: f64,
        x1: f64,
    },
    Jump {
        t: f64,
        x: f64,
    },
}

trait PathHandler {
    fn lower(&self) -> f64;
    fn upper(&self) -> f64 {
        f64::INFINITY
    }
    /// Returns `true` when the path is finished.
    fn event(&mut self, ev: Event, bridge_hit: Option<f64>) -> bool;
    fn tail(&self, t: f64, x: f64) -> f64;
    fn value(&self) -> f64;
}

impl Stepper<'_> {
    fn step_size(&self, x: f64, lower: f64, upper: f64) -> f64 {
        let d = (x - lower).min(upper - x);
        if !d.is_finite() {
            return self.cfg.max_step;
        }
        let sigma = self.model.sigma();
        let by_noise = (d / (8.0 * sigma)).powi(2);
        let by_drift = if self.model.mu() != 0.0 { d / (4.0 * self.model.mu().abs()) } else { f64::INFINITY };
        by_noise.min(by_drift).clamp(self.cfg.dt, self.cfg.max_step)
    }

    fn run<H: PathHandler>(&self, x0: f64, handler: &mut H, normals: &mut ChaCha8Rng, jumps: &mut ChaCha8Rng) -> PathResult {
        let lambda = self.model.lambda();
        let (mu, sigma) = (self.model.mu(), self.model.sigma());
        let horizon = self.cfg.horizon;
        let mut t = 0.0;
        let mut x = x0;
        if handler.event(Event::Jump { t, x }, None) {
            return PathResult { value: handler.value(), tail: 0.0 };
        }
        loop {
            let next_jump = if lambda > 0.0 { t + jumps.sample::<f64, _>(Exp1) / lambda } else { f64::INFINITY };
            while t < next_jump.min(horizon) {
                let h = self.step_size(x, handler.lower(), handler.upper()).min(next_jump - t).min(horizon - t);
                let z: f64 = normals.sample(StandardNormal);
                let x1 = x + mu * h + self.sign * sigma * h.sqrt() * z;
                let bridge_hit = if self.cfg.bridge { self.bridge_test(x, x1, h, handler, normals) } else { None };
                let done = handler.event(Event::Step { t, h, x0: x, x1 }, bridge_hit);
                t += h;
                x = x1;
                if done {
                    return PathResult { value: handler.value(), tail: 0.0 };
                }
            }
            if t >= horizon {
                return PathResult { value: handler.value(), tail: handler.tail(t, x) };
            }
            t = next_jump;
            x -= sample_jump(self.model.jump(), jumps);
            if handler.event(Event::Jump { t, x }, None) {
                return PathResult { value: handler.value(), tail: 0.0 };
            }
        }
    }

    /// Barrier level hit between grid points, if the Brownian bridge says so.
    fn bridge_test<H: PathHandler>(&self, x0: f64, x1: f64, h: f64, handler: &H, rng: &mut ChaCha8Rng) -> Option<f64> {
        let s2h = self.model.sigma().powi(2) * h;
        let lo = handler.lower();
        let hi = handler.upper();
        if lo.is_finite() && x0 > lo && x1 > lo {
            let p = (-2.0 * (x0 - lo) * (x1 - lo) / s2h).exp();
            if rng.random::<f64>() < p {
                return Some(lo);
            }
        }
        if hi.is_finite() && x0 < hi && x1 < hi {
            let p = (-2.0 * (hi - x0) * (hi - x1) / s2h).exp();
            if rng.random::<f64>() < p {
                return Some(hi);
            }
        }
        None
    }
}

/// Multi-stage threshold strategy on one path.
struct StrategyHandler<'a> {
    stages: &'a [StageSpec],
    thresholds: &'a [f64],
    r: f64,
    next: usize,
    value: f64,
}

impl StrategyHandler<'_> {
    /// Running payoff of the active stage, `F_m = sum_{k >= m} f_k`.
    fn running(&self, x: f64) -> f64 {
        self.stages[self.next..].iter().map(|s| s.f.eval(x)).sum()
    }

    fn trigger(&mut self, t: f64, x: f64) -> bool {
        while self.next < self.stages.len() && x <= self.thresholds[self.next] {
            self.value += (-self.r * t).exp() * self.stages[self.next].g.eval(x);
            self.next += 1;
        }
        self.next == self.stages.len()
    }
}

impl PathHandler for StrategyHandler<'_> {
    fn lower(&self) -> f64 {
        self.thresholds[self.next]
    }

    fn event(&mut self, ev: Event, bridge_hit: Option<f64>) -> bool {
        match ev {
            Event::Jump { t, x } => self.trigger(t, x),
            Event::Step { t, h, x0, x1 } => {
                let f0 = self.running(x0);
                let f1 = self.running(x1);
                self.value += 0.5 * h * ((-self.r * t).exp() * f0 + (-self.r * (t + h)).exp() * f1);
                match bridge_hit {
                    Some(level) => self.trigger(t + h, level),
                    None => self.trigger(t + h, x1),
                }
            }
        }
    }

    fn tail(&self, t: f64, x: f64) -> f64 {
        let rest: f64 = self.stages[self.next..].iter().map(|s| s.g.eval(x).abs()).sum();
        (-self.r * t).exp() * (self.running(x).abs() / self.r + rest)
    }

    fn value(&self) -> f64 {
        self.value
    }
}

/// Two-sided exit from `(0, b)`: records `e^{-r tau}` on the side where the path leaves.
struct ExitHandler {
    b: f64,
    r: f64,
    up: f64,
    down: f64,
}

impl PathHandler for ExitHandler {
    fn lower(&self) -> f64 {
        0.0
    }

    fn upper(&self) -> f64 {
        self.b
    }

    fn event(&mut self, ev: Event, bridge_hit: Option<f64>) -> bool {
        let (t, x) = match ev {
            Event::Jump { t, x } => (t, x),
            Event::Step { t, h, x1, .. } => (t + h, bridge_hit.unwrap_or(x1)),
        };
        if x >= self.b {
            self.up = (-self.r * t).exp();
            true
        } else if x <= 0.0 {
            self.down = (-self.r * t).exp();
            true
        } else {
            false
        }
    }

    fn tail(&self, t: f64, _x: f64) -> f64 {
        (-self.r * t).exp()
    }

    fn value(&self) -> f64 {
        self.up
    }
}

fn stream_rngs(seed: u64, path: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut normals = ChaCha8Rng::seed_from_u64(seed);
    normals.set_stream(2 * path);
    let mut jumps = ChaCha8Rng::seed_from_u64(seed);
    jumps.set_stream(2 * path + 1);
    (normals, jumps)
}

/// Runs `n` samples (antithetic pairs count once) and aggregates them in index order.
fn run_samples<F>(cfg: &SimConfig, sample: F) -> Vec<(f64, f64)>
where
    F: Fn(u64, f64) -> (f64, f64) + Sync,
{
    let n = if cfg.antithetic { cfg.n_paths / 2 } else { cfg.n_paths };
    (0..n as u64)
        .into_par_iter()
        .map(|k| {
            if cfg.antithetic {
                let (a, ta) = sample(k, 1.0);
                let (b, tb) = sample(k, -1.0);
                (0.5 * (a + b), ta.max(tb))
            } else {
                sample(k, 1.0)
            }
        })
        .collect()
}

fn summarize(samples: &[(f64, f64)], n_paths: usize) -> McEstimate {
    let n = samples.len() as f64;
    let mean = samples.iter().map(|s| s.0).sum::<f64>() / n;
    let var = if samples.len() > 1 { samples.iter().map(|s| (s.0 - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    let truncation_bound = samples.iter().map(|s| s.1).fold(0.0, f64::max);
    McEstimate { mean, std_error: (var / n).sqrt(), n: n_paths, truncation_bound }
}

/// Estimates the value of stopping stage `m` at the first time `X <= thresholds[m]`.
pub fn simulate_strategy(
    model: &LevyModel,
    r: f64,
    stages: &[StageSpec],
    thresholds: &[f64],
    x0: f64,
    cfg: &SimConfig,
) -> Result<McEstimate> {
    cfg.validate()?;
    if stages.len() != thresholds.len() || stages.is_empty() {
        return Err(Error::DimensionMismatch(format!("{} stages and {} thresholds", stages.len(), thresholds.len())));
    }
    if thresholds.iter().any(|a| a.is_nan()) || thresholds.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::InfeasibleThresholds(thresholds.to_vec()));
    }
    let samples = run_samples(cfg, |k, sign| {
        let (mut normals, mut jumps) = stream_rngs(cfg.seed, k);
        let stepper = Stepper { model, cfg, sign };
        let mut h = StrategyHandler { stages, thresholds, r, next: 0, value: 0.0 };
        let out = stepper.run(x0, &mut h, &mut normals, &mut jumps);
        (out.value, out.tail)
    });
    Ok(summarize(&samples, cfg.n_paths))
}

/// Estimates `E[e^{-r tau_b^+}; tau_b^+ < tau_0]` and `E[e^{-r tau_0}; tau_0 < tau_b^+]` from the same paths.
pub fn simulate_two_sided_exit(model: &LevyModel, r: f64, x: f64, b: f64, cfg: &SimConfig) -> Result<(McEstimate, McEstimate)> {
    cfg.validate()?;
    if !(b > 0.0) || !(0.0..=b).contains(&x) {
        return Err(Error::DomainError(format!("need 0 <= x <= b, got x = {x}, b = {b}")));
    }
    let run = |k: u64, sign: f64| {
        let (mut normals, mut jumps) = stream_rngs(cfg.seed, k);
        let stepper = Stepper { model, cfg, sign };
        let mut h = ExitHandler { b, r, up: 0.0, down: 0.0 };
        let out = stepper.run(x, &mut h, &mut normals, &mut jumps);
        (h.up, h.down, out.tail)
    };
    let n = if cfg.antithetic { cfg.n_paths / 2 } else { cfg.n_paths };
    let raw: Vec<(f64, f64, f64)> = (0..n as u64)
        .into_par_iter()
        .map(|k| {
            if cfg.antithetic {
                let a = run(k, 1.0);
                let c = run(k, -1.0);
                (0.5 * (a.0 + c.0), 0.5 * (a.1 + c.1), a.2.max(c.2))
            } else {
                run(k, 1.0)
            }
        })
        .collect();
    let up: Vec<(f64, f64)> = raw.iter().map(|s| (s.0, s.2)).collect();
    let down: Vec<(f64, f64)> = raw.iter().map(|s| (s.1, s.2)).collect();
    Ok((summarize(&up, cfg.n_paths), summarize(&down, cfg.n_paths)))
}

/// `(L - r) u_A(x) + f(x)` with `L h = mu h' + sigma^2/2 h'' + lambda int (h(x - z) - h(x)) f_Z(z) dz`.
pub fn generator_residual(stage: &StageSpec, ctx: &ScaleContext, a: f64, x: f64) -> Result<f64> {
    if x == a {
        return Err(Error::DomainError("generator residual is not defined at the threshold".into()));
    }
    let model = ctx.model();
    let (u, u1, u2) = value_at_derivatives(stage, ctx, a, x)?;
    let mut jump_part = 0.0;
    if model.has_jumps() {
        let decay = model.jump().eigenvalues().iter().map(|e| -e.re).fold(f64::INFINITY, f64::min);
        let z_max = 40.0 / decay;
        let breaks: Vec<f64> = if x > a { vec![x - a] } else { vec![] };
        let failure = std::cell::RefCell::new(None);
        let integral = integrate(
            |z| match value_at(stage, ctx, a, x - z) {
                Ok(v) => (v - u) * model.jump().density(z),
                Err(e) => {
                    failure.borrow_mut().get_or_insert(e);
                    0.0
                }
            },
            0.0,
            z_max,
            &breaks,
            1e-11,
        )?;
        if let Some(e) = failure.into_inner() {
            return Err(e);
        }
        jump_part = model.lambda() * integral;
    }
    let sigma = model.sigma();
    Ok(model.mu() * u1 + 0.5 * sigma * sigma * u2 + jump_part - ctx.r() * u + stage.f.eval(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::payoffs::{RewardSpec, RunningPayoff};

    fn small_cfg(n: usize) -> SimConfig {
        SimConfig { n_paths: n, dt: 1e-3, horizon: 60.0, seed: 7, antithetic: false, max_step: 0.1, bridge: false }
    }

    #[test]
    fn exponential_phase_samples() {
        let jump = PhaseTypeJump::exponential(1.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let mut xs: Vec<f64> = (0..n).map(|_| sample_jump(&jump, &mut rng)).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let d = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let cdf = 1.0 - (-1.5 * x).exp();
                (cdf - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - cdf).abs())
            })
            .fold(0.0, f64::max);
        // 1% critical value of the Kolmogorov statistic
        assert!(d < 1.628 / (n as f64).sqrt(), "KS distance {d}");
    }

    #[test]
    fn weibull_sample_mean() {
        let model = fixtures::weibull_model();
        let jump = model.jump();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        let xs: Vec<f64> = (0..n).map(|_| sample_jump(jump, &mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
        assert!((mean - jump.mean()).abs() < 3.0 * sd / (n as f64).sqrt());
    }

    #[test]
    fn seeded_streams_replay() {
        let jump = fixtures::weibull_model().jump().clone();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| sample_jump(&jump, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
        assert_ne!(draw(5), draw(6));
    }

    #[test]
    fn drift_of_unit_time_increment() {
        let model = fixtures::weibull_model();
        let n = 1_000_000u64;
        let xs: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|k| {
                let (mut normals, mut jumps) = stream_rngs(99, k);
                let mut x = model.mu() + model.sigma() * normals.sample::<f64, _>(StandardNormal);
                let mut t: f64 = jumps.sample::<f64, _>(Exp1) / model.lambda();
                while t < 1.0 {
                    x -= sample_jump(model.jump(), &mut jumps);
                    t += jumps.sample::<f64, _>(Exp1) / model.lambda();
                }
                x
            })
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
        assert!((mean - model.psi_prime_zero()).abs() < 3.0 * sd / (n as f64).sqrt());
    }

    #[test]
    fn immediate_stop_has_no_variance() {
        let model = fixtures::weibull_model();
        let stage = fixtures::one_stage('a', 1, 0.05);
        let est = simulate_strategy(&model, 0.05, std::slice::from_ref(&stage), &[f64::INFINITY], 1.0, &small_cfg(100)).unwrap();
        assert_eq!(est.mean, stage.g.eval(1.0));
        assert_eq!(est.std_error, 0.0);
        assert_eq!(est.n, 100);
    }

    #[test]
    fn simulation_is_deterministic() {
        let model = fixtures::weibull_model();
        let stage = fixtures::one_stage('b', 2, 0.05);
        let cfg = small_cfg(2000);
        let a = simulate_strategy(&model, 0.05, std::slice::from_ref(&stage), &[-1.0], 0.5, &cfg).unwrap();
        let b = simulate_strategy(&model, 0.05, &[stage], &[-1.0], 0.5, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_increasing_thresholds() {
        let model = fixtures::weibull_model();
        let stages = fixtures::table_cases()[0].stages();
        let err = simulate_strategy(&model, 0.05, &stages, &[0.0, 1.0, 0.0], 0.0, &small_cfg(10));
        assert!(matches!(err, Err(Error::InfeasibleThresholds(_))));
        let mut cfg = small_cfg(10);
        cfg.n_paths = 0;
        assert!(simulate_strategy(&model, 0.05, &stages, &[0.0, 0.0, 0.0], 0.0, &cfg).is_err());
    }

    #[test]
    fn brownian_first_passage_and_antithetics() {
        let model = crate::levy_model::LevyModel::new(0.3, 0.5, 0.0, PhaseTypeJump::exponential(1.0).unwrap()).unwrap();
        let r = 0.1;
        let ctx = ScaleContext::new(model.clone(), r).unwrap();
        let stage = StageSpec::new(RunningPayoff::zero(), RewardSpec::constant(1.0));
        let (x, a) = (1.0, 0.0);
        let exact = ctx.first_passage_functionals(x - a, 1.0).unwrap().tau0;
        let mut cfg = small_cfg(20_000);
        cfg.horizon = 120.0;
        cfg.bridge = true;
        let plain = simulate_strategy(&model, r, std::slice::from_ref(&stage), &[a], x, &cfg).unwrap();
        cfg.antithetic = true;
        let anti = simulate_strategy(&model, r, &[stage], &[a], x, &cfg).unwrap();
        assert!(plain.z_score(exact).abs() < 3.0 + plain.truncation_bound / plain.std_error);
        assert!((anti.mean - plain.mean).abs() < 3.0 * plain.std_error.hypot(anti.std_error));
        assert!(anti.std_error <= plain.std_error);
    }

    #[test]
    fn dt_refinement_reduces_bias() {
        let model = crate::levy_model::LevyModel::new(0.2, 0.4, 0.0, PhaseTypeJump::exponential(1.0).unwrap()).unwrap();
        let r = 0.5;
        let ctx = ScaleContext::new(model.clone(), r).unwrap();
        let stage = StageSpec::new(RunningPayoff::zero(), RewardSpec::constant(1.0));
        let exact = ctx.first_passage_functionals(0.5, 1.0).unwrap().tau0;
        let mut biases = Vec::new();
        for &dt in &[0.02, 0.01, 0.005] {
            let cfg = SimConfig { n_paths: 40_000, dt, horizon: 20.0, seed: 3, antithetic: false, max_step: dt, bridge: false };
            let est = simulate_strategy(&model, r, std::slice::from_ref(&stage), &[0.0], 0.5, &cfg).unwrap();
            biases.push((est.mean - exact).abs());
        }
        assert!(biases[0] > biases[1] && biases[1] > biases[2], "{biases:?}");
    }

    #[test]
    fn residual_of_stopping_at_once() {
        let model = crate::levy_model::LevyModel::new(0.5, 0.3, 0.0, PhaseTypeJump::exponential(1.0).unwrap()).unwrap();
        let ctx = ScaleContext::new(model, 0.1).unwrap();
        let stage = StageSpec::new(RunningPayoff::constant(0.2), RewardSpec::constant(2.0));
        let res = generator_residual(&stage, &ctx, f64::INFINITY, 0.3).unwrap();
        assert!((res - (-0.1 * 2.0 + 0.2)).abs() < 1e-14);
    }
}
