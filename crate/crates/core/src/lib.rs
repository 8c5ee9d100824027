//! Mixture-of-Bradley–Terry preference alignment over finite prompt and
//! response spaces.
//!
//! The crate is `no_std` with `alloc`. It holds the domain types, every
//! closed-form quantity of the mixture model (posteriors, ELBO, corrected
//! rewards, optimal expert policies), the variational EM trainer, the
//! regularized E-step, the Gumbel-Softmax relaxation and a synthetic
//! ground-truth generator. File formats and the command line live in the
//! `moedpo` crate.

#![no_std]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod em;
pub mod error;
pub mod math;
pub mod mbt;
pub mod model;
pub mod optim;
pub mod policy;
pub mod regularized;
pub mod relax;
pub mod synth;
pub mod types;

pub use error::{Error, Result};
pub use model::{Model, ModelInit};
pub use types::{
    ExpertPolicy, Gating, Hyperparams, LrSchedule, Matrix, PreferenceTriplet, ProblemSpace,
    ReferencePolicy, References, Responsibilities, RewardTable,
};
