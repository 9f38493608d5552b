//! JSON problem configuration. The schema is described in `docs/config.md`.

use std::path::Path;

use levystop_core::one_stage::SolverOptions;
use levystop_core::{
    Error, LevyModel, MultiStageSpec, PhaseTypeJump, RewardSpec, RewardTerm, RunningPayoff, ScaleContext, SimConfig, StageSpec,
};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub model: ModelConfig,
    pub r: f64,
    #[serde(default)]
    pub running_payoff_mode: PayoffMode,
    pub stages: Vec<StageConfig>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub mu: f64,
    pub sigma: f64,
    pub lambda: f64,
    pub alpha: Vec<f64>,
    #[serde(rename = "T")]
    pub t: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayoffMode {
    /// Each stage lists its own increment `f_m`.
    #[default]
    Differences,
    /// Each stage lists the total running payoff `F_m` while it is active.
    Cumulative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub g: RewardConfig,
    #[serde(default)]
    pub f: PayoffConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    #[serde(rename = "K", default)]
    pub k: f64,
    #[serde(default)]
    pub b: f64,
    #[serde(default)]
    pub terms: Vec<RewardTermConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardTermConfig {
    pub a: f64,
    pub c: f64,
}

/// One payoff term or a list of terms that are added up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PayoffConfig {
    One(PayoffTerm),
    Many(Vec<PayoffTerm>),
}

impl Default for PayoffConfig {
    fn default() -> Self {
        PayoffConfig::Many(Vec::new())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayoffTerm {
    #[serde(flatten)]
    pub family: PayoffFamily,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", content = "params", rename_all = "snake_case")]
pub enum PayoffFamily {
    Simple {
        breakpoints: Vec<f64>,
        values: Vec<f64>,
    },
    Linear {
        b1: f64,
        b2: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        b3: Option<f64>,
    },
    Exponential {
        #[serde(rename = "L")]
        l: f64,
        #[serde(rename = "B")]
        cap: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub a_max: f64,
    pub root_tol: f64,
    pub imag_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let opts = SolverOptions::default();
        Self { a_max: opts.a_max, root_tol: opts.xtol, imag_tol: 1e-9 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub n_points: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { x_min: -6.0, x_max: 2.0, n_points: 801 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateConfig {
    #[serde(flatten)]
    pub sim: SimConfig,
    /// Starting points for the value check.
    #[serde(default)]
    pub x0: Vec<f64>,
    /// `(x, b)` pairs for the two-sided exit check.
    #[serde(default)]
    pub exit_pairs: Vec<(f64, f64)>,
    /// Points per side of each threshold for the generator residual.
    #[serde(default = "default_residual_points")]
    pub residual_points: usize,
}

fn default_residual_points() -> usize {
    20
}

/// Validated problem ready for the solvers.
pub struct Problem {
    pub config: ProblemConfig,
    pub ctx: ScaleContext,
    pub spec: MultiStageSpec,
    pub opts: SolverOptions,
}

fn invalid(path: impl Into<String>, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{}: {msg}", path.into()))
}

pub fn load(path: &Path) -> Result<ProblemConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    parse(&text)
}

pub fn parse(text: &str) -> Result<ProblemConfig, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let inner = e.inner();
        invalid(e.path().to_string(), format_args!("{inner}"))
    })
}

impl ProblemConfig {
    pub fn build(self) -> Result<Problem, CliError> {
        let model = self.build_model()?;
        if !(self.r > 0.0) || !self.r.is_finite() {
            return Err(invalid("r", format_args!("discount rate must be positive, got {}", self.r)));
        }
        let s = self.solver;
        if !(s.a_max > 1.0) || !(s.root_tol > 0.0) || !(s.imag_tol > 0.0) {
            return Err(invalid("solver", "need a_max > 1 and positive tolerances"));
        }
        let o = self.output;
        if !(o.x_min < o.x_max) || o.n_points < 2 {
            return Err(invalid("output", "need x_min < x_max and n_points >= 2"));
        }
        if let Some(sim) = &self.simulate {
            sim.sim.validate().map_err(|e| invalid("simulate", e))?;
            if sim.residual_points == 0 {
                return Err(invalid("simulate.residual_points", "must be at least 1"));
            }
        }
        let stages = self.build_stages()?;
        let spec = MultiStageSpec::new(stages).map_err(|e| invalid("stages", e))?;
        let ctx = ScaleContext::new(model, self.r).map_err(CliError::Core)?.with_imag_tol(s.imag_tol);
        let opts = SolverOptions { a_max: s.a_max, xtol: s.root_tol, ..SolverOptions::default() };
        Ok(Problem { config: self, ctx, spec, opts })
    }

    fn build_model(&self) -> Result<LevyModel, CliError> {
        let m = &self.model;
        for (name, v) in [("mu", m.mu), ("sigma", m.sigma), ("lambda", m.lambda)] {
            if !v.is_finite() {
                return Err(invalid(format!("model.{name}"), "must be finite"));
            }
        }
        let jump = PhaseTypeJump::new(m.alpha.clone(), m.t.clone()).map_err(|e| match e {
            Error::InvalidInitialDistribution(_) => invalid("model.alpha", e),
            _ => invalid("model.T", e),
        })?;
        LevyModel::new(m.mu, m.sigma, m.lambda, jump).map_err(|e| {
            let field = if !(m.sigma > 0.0) { "model.sigma" } else { "model.lambda" };
            invalid(field, e)
        })
    }

    fn build_stages(&self) -> Result<Vec<StageSpec>, CliError> {
        if self.stages.is_empty() {
            return Err(invalid("stages", "at least one stage is required"));
        }
        let mut given = Vec::with_capacity(self.stages.len());
        for (i, st) in self.stages.iter().enumerate() {
            let terms = st.g.terms.iter().map(|t| RewardTerm { a: t.a, c: t.c }).collect();
            let g = RewardSpec::new(st.g.k, st.g.b, terms).map_err(|e| invalid(format!("stages[{i}].g"), e))?;
            let f = st.f.build().map_err(|e| invalid(format!("stages[{i}].f"), e))?;
            given.push((g, f));
        }
        let n = given.len();
        let mut stages = Vec::with_capacity(n);
        for i in 0..n {
            let f = match self.running_payoff_mode {
                PayoffMode::Differences => given[i].1.clone(),
                PayoffMode::Cumulative if i + 1 < n => RunningPayoff::difference(given[i].1.clone(), given[i + 1].1.clone())
                    .map_err(|e| invalid(format!("stages[{i}].f"), format_args!("cumulative payoff minus the next stage's: {e}")))?,
                PayoffMode::Cumulative => given[i].1.clone(),
            };
            stages.push(StageSpec::new(f, given[i].0.clone()));
        }
        Ok(stages)
    }
}

impl PayoffConfig {
    fn terms(&self) -> &[PayoffTerm] {
        match self {
            PayoffConfig::One(t) => std::slice::from_ref(t),
            PayoffConfig::Many(ts) => ts,
        }
    }

    pub fn build(&self) -> levystop_core::Result<RunningPayoff> {
        let mut parts = Vec::new();
        for t in self.terms() {
            let base = match &t.family {
                PayoffFamily::Simple { breakpoints, values } => RunningPayoff::simple(breakpoints.clone(), values.clone())?,
                PayoffFamily::Linear { b1, b2, b3 } => RunningPayoff::linear_floor(*b1, *b2, *b3)?,
                PayoffFamily::Exponential { l, cap } => RunningPayoff::exp_cap(*l, *cap)?,
            };
            if !(t.weight >= 0.0) {
                return Err(Error::InvalidSpec(format!("weight must be nonnegative, got {}", t.weight)));
            }
            parts.push((t.weight, base));
        }
        RunningPayoff::weighted(parts)
    }
}
