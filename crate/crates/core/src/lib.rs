//! Softmax-gated contaminated mixture of multinomial logistic experts.
//!
//! A frozen pretrained expert `f₀(· | x, η₀)` is mixed with a learnable
//! adapter expert `f(· | x, η)` through the logistic gate
//! `π(x) = σ(βᵀx + τ)`. This crate evaluates the model, simulates data from
//! it, fits it by maximum likelihood (EM with a BFGS M-step, or direct BFGS),
//! measures parameter and density discrepancies, checks the strong
//! identifiability condition numerically, and runs convergence-rate studies.

pub mod config;
pub mod datagen;
pub mod error;
pub mod estimation;
pub mod identifiability;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rate_study;
pub mod rng;

pub use error::{Error, Result};
