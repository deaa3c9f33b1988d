//! Hierarchical Cannings process in a quenched random environment.
//!
//! The crate is organised bottom-up:
//!
//! * [`hiergroup`] holds the hierarchical group and its tree of blocks.
//! * [`environment`] describes the parameter sequences and the seeded
//!   random field of resampling measures on the tree.
//! * [`walkcalc`] evaluates closed-form kernels of the hierarchical walk.
//! * [`coalescent`] simulates the dual spatial Λ-coalescent.
//! * [`renorm`] runs the volatility recursion and classifies its scaling.
//! * [`dichotomy`] decides coexistence versus clustering.
//! * [`chain`] computes interaction-chain profiles and cluster classes.
//! * [`forward`] simulates the individual-based model and its single-site limit.

pub mod chain;
pub mod coalescent;
pub mod dichotomy;
pub mod environment;
pub mod error;
pub mod forward;
pub mod growth;
pub mod hiergroup;
pub mod renorm;
pub mod rng;
pub mod walkcalc;

pub use error::{Error, Result};
