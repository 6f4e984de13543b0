//! Latent-action dialog agents: synthetic corpora, latent policies,
//! encoder-decoder models, supervised and policy-gradient training,
//! negotiation and slot-filling environments, and evaluation metrics.

pub mod corpus;
pub mod env;
pub mod error;
pub mod eval;
pub mod latent;
pub mod model;
pub mod nn;
pub mod rng;
pub mod training;

pub use error::{LarlError, Result};
