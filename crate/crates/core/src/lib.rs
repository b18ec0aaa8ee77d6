//! Difference-in-differences mediation analysis with double machine learning.

pub mod contrast;
pub mod crossfit;
pub mod data;
pub mod error;
pub mod exec;
pub mod nuisance;
pub mod estimators;
pub mod scores;
pub mod simulation;
