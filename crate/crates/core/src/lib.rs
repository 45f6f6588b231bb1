//! Multiple-instance survival modeling with cross-cohort transfer
//! evaluation, factor analysis, and top-K expert routing.

pub mod abmil;
pub mod cohort;
pub mod error;
pub mod factors;
pub mod moe;
pub mod numerics;
pub mod survival;
pub mod transfer;

pub use error::{Error, Result};
pub use numerics::{DenseMatrix, GradientTape, ParamSet};
pub use survival::{HazardCurve, RiskScore, SurvivalLabel};
