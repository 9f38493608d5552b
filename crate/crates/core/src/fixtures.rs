//! Reference model and stage configurations used by the tests, the benches and
//! the bundled example configs.

use crate::levy_model::LevyModel;
use crate::one_stage::StageSpec;
use crate::payoffs::{RewardSpec, RunningPayoff};
use crate::scale_fn::ScaleContext;

pub const WEIBULL_MU: f64 = 1.0;
pub const WEIBULL_SIGMA: f64 = 0.2;
pub const WEIBULL_LAMBDA: f64 = 1.0;

/// Default discount rate for the reference experiments.
pub const DEFAULT_R: f64 = 0.05;

/// Six-phase fit of the Weibull density `2x exp(-x^2)`.
pub fn weibull_alpha() -> Vec<f64> {
    vec![0.0000, 0.0048, 0.0044, 0.9906, 0.0002, 0.0000]
}

pub fn weibull_t() -> Vec<Vec<f64>> {
    vec![
        vec![-5.5209, 0.0000, 0.0000, 0.0000, 0.0000, 0.0000],
        vec![0.0073, -5.4523, 5.4443, 0.0000, 0.0000, 0.0000],
        vec![5.4959, 0.0000, -5.4959, 0.0000, 0.0000, 0.0000],
        vec![0.2193, 0.0030, 0.2920, -5.6885, 5.1589, 0.0154],
        vec![0.2703, 0.8484, 0.0027, 0.0000, -5.6502, 4.5262],
        vec![0.0020, 4.8467, 0.0157, 0.0000, 0.0000, -5.9780],
    ]
}

pub fn weibull_model() -> LevyModel {
    LevyModel::build(WEIBULL_MU, WEIBULL_SIGMA, WEIBULL_LAMBDA, weibull_alpha(), weibull_t()).expect("reference model is valid")
}

pub fn weibull_context(r: f64) -> ScaleContext {
    ScaleContext::new(weibull_model(), r).expect("reference spectral data")
}

/// Reward (a): `10 - 4e^{0.1x} - 3e^{0.2x} - 2e^{0.3x} - e^{0.4x}`.
pub fn reward_exp() -> RewardSpec {
    RewardSpec::exponential(10.0, &[0.1, 0.2, 0.3, 0.4], &[4.0, 3.0, 2.0, 1.0]).unwrap()
}

/// Reward (b): `-x`.
pub fn reward_lin() -> RewardSpec {
    RewardSpec::linear(1.0).unwrap()
}

/// Running payoff (i): `-10` below zero, `10` above.
pub fn payoff_simple() -> RunningPayoff {
    RunningPayoff::simple(vec![0.0], vec![-10.0, 10.0]).unwrap()
}

/// Running payoff (ii): `y` with no floor.
pub fn payoff_linear() -> RunningPayoff {
    RunningPayoff::linear_floor(1.0, 0.0, None).unwrap()
}

/// Running payoff (iii): `e^{min(y, 1)}`.
pub fn payoff_exp() -> RunningPayoff {
    RunningPayoff::exp_cap(1.0, 1.0).unwrap()
}

/// Single-stage configuration by reward letter (`'a'`, `'b'`), payoff index (1..=3) and weight.
pub fn one_stage(reward: char, payoff: usize, gamma: f64) -> StageSpec {
    let g = match reward {
        'a' => reward_exp(),
        'b' => reward_lin(),
        _ => panic!("unknown reward {reward}"),
    };
    let f = match payoff {
        1 => payoff_simple(),
        2 => payoff_linear(),
        3 => payoff_exp(),
        _ => panic!("unknown payoff {payoff}"),
    };
    StageSpec::new(f.scaled(gamma), g)
}

/// One row of the three-stage experiment table.
#[derive(Debug, Clone)]
pub struct TableCase {
    pub a1: [f64; 4],
    pub a3: [f64; 4],
    pub c1: [f64; 4],
    pub c3: [f64; 4],
    pub alpha2: f64,
    pub gammas: [f64; 3],
    /// `A*_1, A*_2, A*_3, A*_{12}, A*_{23}, A*_{123}` to two decimals.
    pub candidates: [f64; 6],
    pub thresholds: [f64; 3],
}

pub fn table_cases() -> [TableCase; 4] {
    [
        TableCase {
            a1: [0.49, 0.19, 0.17, 0.03],
            a3: [0.05, 0.24, 0.46, 0.13],
            c1: [2.11, 2.09, 3.51, 3.49],
            c3: [4.71, 1.51, 2.70, 0.89],
            alpha2: 0.9991,
            gammas: [0.2920, 0.4317, 0.0155],
            candidates: [-2.44, -2.83, -1.39, -2.59, -2.03, -2.21],
            thresholds: [-2.21, -2.21, -2.21],
        },
        TableCase {
            a1: [0.47, 0.17, 0.06, 0.12],
            a3: [0.24, 0.18, 0.19, 0.05],
            c1: [0.66, 2.88, 1.77, 0.22],
            c3: [4.78, 1.17, 0.08, 3.24],
            alpha2: 0.6477,
            gammas: [0.4173, 0.0497, 0.9027],
            candidates: [-0.48, -2.31, -2.18, -0.85, -2.22, -1.34],
            thresholds: [-0.48, -2.22, -2.22],
        },
        TableCase {
            a1: [0.04, 0.06, 0.01, 0.12],
            a3: [0.01, 0.11, 0.26, 0.05],
            c1: [1.84, 2.39, 4.20, 2.23],
            c3: [3.01, 3.72, 2.57, 4.20],
            alpha2: 0.6265,
            gammas: [0.3070, 0.0611, 0.2195],
            candidates: [-3.15, -2.35, -5.67, -2.85, -4.14, -3.75],
            thresholds: [-2.85, -2.85, -5.67],
        },
        TableCase {
            a1: [0.39, 0.28, 0.17, 0.16],
            a3: [0.06, 0.01, 0.40, 0.08],
            c1: [3.01, 3.45, 0.42, 0.76],
            c3: [3.27, 2.25, 4.57, 2.69],
            alpha2: 0.0782,
            gammas: [0.0759, 0.0540, 0.5308],
            candidates: [-0.76, -3.07, -3.64, -0.85, -3.59, -1.89],
            thresholds: [-0.76, -3.07, -3.64],
        },
    ]
}

impl TableCase {
    /// Stage list: exponential reward with simple payoff, linear reward with
    /// linear payoff, exponential reward with capped exponential payoff.
    pub fn stages(&self) -> Vec<StageSpec> {
        let g1 = RewardSpec::exponential(10.0, &self.a1, &self.c1).unwrap();
        let g2 = RewardSpec::linear(self.alpha2).unwrap();
        let g3 = RewardSpec::exponential(10.0, &self.a3, &self.c3).unwrap();
        vec![
            StageSpec::new(payoff_simple().scaled(self.gammas[0]), g1),
            StageSpec::new(payoff_linear().scaled(self.gammas[1]), g2),
            StageSpec::new(payoff_exp().scaled(self.gammas[2]), g3),
        ]
    }
}

/// Threshold perturbations for the three-stage dominance check.
pub const PERTURBATIONS: [[f64; 3]; 6] =
    [[1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [1.0, 1.0, 1.0], [0.0, 0.0, -1.0], [0.0, -1.0, -1.0], [-1.0, -1.0, -1.0]];
