//! Hidden Markov model identifiability lab.
//!
//! Discrete and conditionally-Gaussian HMMs, the closed-form optimal predictors of masked
//! prediction tasks, tensor-decomposition recovery of parameters from those predictors, and
//! the counterexample constructions showing where recovery is impossible.

pub mod linalg;
pub mod models;
pub mod predictors;
pub mod seeding;
pub mod tensor_engine;
pub mod recovery;
pub mod counterexamples;
pub mod expcli;
