//! Language-driven zero-shot adaptation of a semantic segmentation head to
//! several target domains at once.
//!
//! Stage 1 mines per-image feature statistics ("styles") for every target
//! domain from text descriptions alone ([`simulation`], [`hca`], [`dcrl`]).
//! Stage 2 fine-tunes one shared head on the simulated features, with a
//! text-driven rectifier ([`tdr`]) in the training graph only. Inference is
//! `image -> labels` with no domain input.
//!
//! Everything runs on a synthetic world ([`toyworld`]) with a calibrated toy
//! encoder, so no pretrained weights are needed.

pub mod container;
pub mod dcrl;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod hca;
pub mod optim;
pub mod pipeline;
pub mod seed;
pub mod segmentation;
pub mod simulation;
pub mod tdr;
pub mod tensor;
pub mod toyworld;

pub use error::{Result, UldaError};
