//! Optimal one-stage and multi-stage stopping for spectrally negative Lévy
//! processes with phase-type jumps.
//!
//! The usual entry point is a [`ScaleContext`] built from a [`LevyModel`] and a
//! discount rate; the stage solvers in [`one_stage`] and [`multi_stage`] take it
//! by reference.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fixtures;
pub mod levy_model;
pub mod multi_stage;
pub mod numeric;
pub mod one_stage;
pub mod payoffs;
pub mod scale_fn;
pub mod verify;

pub use error::{Error, Result};
pub use levy_model::{LevyModel, PhaseTypeJump, SpectralData};
pub use multi_stage::{MultiStageSpec, StagePartition};
pub use one_stage::{SolverOptions, StageSpec, ThresholdSolution};
pub use payoffs::{RewardSpec, RewardTerm, RunningPayoff};
pub use scale_fn::{FirstPassage, ScaleContext};
pub use verify::{McEstimate, SimConfig};
