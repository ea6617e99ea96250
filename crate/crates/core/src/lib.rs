//! Score-DPO preference optimization over bounding-box reasoning chains.
//!
//! The crate is organized bottom-up:
//!
//! - [`types`] and [`jsonl`]: chains, scored responses, preference pairs and
//!   their line-oriented JSON form.
//! - [`prefmath`]: sigmoid, Bradley-Terry and Gumbel-shifted preference
//!   probabilities with a Monte-Carlo check.
//! - [`loss`]: DPO / Score-DPO losses and gradients.
//! - [`policy`]: the linear-softmax region selector being trained.
//! - [`synthbench`]: grid region-reasoning tasks and greedy evaluation.
//! - [`backends`]: simulated and HTTP model backends.
//! - [`datagen`]: per-query preference data generation.
//! - [`trainer`]: sDPO training and the iterative generate/train loop.
//! - [`verify`]: the self-check suite behind `uvcot verify`.

pub mod backends;
pub mod datagen;
pub mod jsonl;
pub mod loss;
pub mod policy;
pub mod prefmath;
pub mod seed;
pub mod synthbench;
pub mod trainer;
pub mod types;
pub mod verify;
