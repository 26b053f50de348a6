//! Desk-scale bilevel optimization engine.
//!
//! The crate is organized around a small reverse-mode autodiff core
//! ([`autodiff`]) and builds up to first-order meta-gradient methods
//! ([`bilevel`]): a central-difference method with algorithmic adaptation
//! for adaptive optimizers, plus Neumann-series and conjugate-gradient
//! baselines driven by finite-difference Hessian-vector products. A
//! biased-regression testbed ([`regress`]) supplies closed-form meta
//! gradients and the optimal meta solution for verification, a synthetic
//! noisy-label reweighting task ([`tasks`]) exercises the engine end to
//! end, and a simulated data-parallel executor ([`parallel`]) models the
//! single-synchronization communication schedule.
//!
//! Start with the runnable examples (`cargo run --example <name>`) or the
//! `metagrad` binary (`regress | reweight | bench | gradcheck`).

pub mod autodiff;
pub mod bilevel;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod optim;
pub mod parallel;
pub mod regress;
pub mod rng;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
