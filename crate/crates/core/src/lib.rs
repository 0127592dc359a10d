//! Affect-conditioned encoder–decoder GAN for facial expression transfer.
//!
//! The crate covers the whole pipeline: a procedural face corpus, the
//! generator and auxiliary-classifier discriminator, their losses, a
//! deterministic resumable trainer and an evaluation suite.

pub mod affect;
pub mod corpus;
pub mod discriminator;
pub mod error;
pub mod eval;
pub mod generator;
pub mod losses;
pub mod nn;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
