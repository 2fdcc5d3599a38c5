//! Duration-aligned dubbing translation at desk scale.
//!
//! A toy autoregressive policy is supervised-fine-tuned on a synthetic
//! subtitle-translation task, then aligned so each generated line's spoken
//! duration matches its source line's duration. Alignment uses segment-wise
//! preference sampling and a per-segment DPO loss, with whole-response DPO
//! and PPO baselines for comparison.

pub mod align;
pub mod cli;
pub mod corpus;
pub mod duration;
pub mod gradcheck;
pub mod policy;
pub mod sampling;
