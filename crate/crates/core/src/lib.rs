//! In-context linear regression workbench.
//!
//! Samples linear-regression prompts, evaluates the Bayes-optimal ridge and
//! pseudo-inverse predictors, trains a set-based MLP and a small causal
//! transformer on the prompt distribution, and measures how each predictor
//! degrades when the test inputs are shifted away from the training inputs.

pub mod autodiff;
pub mod evalshift;
pub mod experiment;
pub mod linalg;
pub mod models;
pub mod oracles;
pub mod prompting;
pub mod rng;
pub mod stats;
pub mod svg;
pub mod training;
pub mod verify;
