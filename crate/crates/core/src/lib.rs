//! Word alignment toolkit: a supervised alignment head over encoder-decoder
//! states, the statistical and attention baselines it is measured against,
//! subword handling, evaluation, annotation projection and an annotation
//! service.

pub mod cli;
pub mod corpus;
pub mod disc;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod numerics;
pub mod projection;
pub mod seq2seq;
pub mod service;
pub mod stat;
pub mod subword;
pub mod synth;

pub use error::{Error, Result};
