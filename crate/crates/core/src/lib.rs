//! Tools for measuring how well the learned feedback patterns of an
//! RLHF-tuned model line up with the feedback it was trained on.
//!
//! The pipeline: pre-train and PPO-tune a [toy transformer](toymodel),
//! pick the layers whose parameters moved most, train
//! [sparse autoencoders](sae) on their MLP activations, compute
//! contrastive activation deltas and fit [probes](probes) that predict
//! the implicit reward, then [analyse](analysis) and [ablate](ablate) the
//! features the probes rely on.

// `!(x > 0.0)` style checks deliberately reject NaN along with the failing range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablate;
pub mod analysis;
pub mod error;
pub mod explain;
pub mod finetune;
pub mod numerics;
pub mod pipeline;
pub mod probes;
pub mod sae;
pub mod synthetic;
pub mod tensorio;
pub mod toymodel;

pub use error::{Error, Result};
