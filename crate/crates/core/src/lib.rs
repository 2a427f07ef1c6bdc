//! Preference-based action representation learning on desk-scale assistive
//! reaching tasks: environments, policies, preference reward models, the
//! latent action encoder, baselines and evaluation.

pub mod config;
pub mod env;
mod error;
pub mod eval;
pub mod experiment;
pub mod gradsuite;
pub mod nn;
pub mod pbarl;
pub mod pg;
pub mod policy;
pub mod pref;

pub use error::{derive_seed, Error, Result};
