//! Multi-agent translation games with language drift diagnostics.
//!
//! Two sequence-to-sequence agents communicate through a pivot language:
//! agent A translates a source sentence into a pivot message and agent B
//! translates that message into the target language. Fine-tuning the pair
//! with policy gradients lets the pivot messages drift; the [`constraints`]
//! module provides a language-model prior and a grounding model that anchor
//! them, and [`metrics`] quantifies how far they moved.

pub mod agents;
pub mod checkpoint;
pub mod config;
pub mod constraints;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod stats;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
