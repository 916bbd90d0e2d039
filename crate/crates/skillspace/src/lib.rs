//! Skill discovery from unlabeled demonstration trajectories and bi-level
//! planning on the learned skill space.
//!
//! The pipeline, end to end:
//!
//! 1. [`dataset`] — generate or load demonstration trajectories.
//! 2. [`vqcnmp`] — train the vector-quantized conditional trajectory model;
//!    each occupied codebook vector is one discovered skill. A second,
//!    self-supervised pass retrains with the discovered assignments frozen.
//! 3. [`discovery`] — clustering metrics, model ranking, codebook-size
//!    sweeps, and skill prototype extraction.
//! 4. [`planner_high`] — an LLM (or a deterministic mock) picks an ordered
//!    list of skills for a goal.
//! 5. [`planner_low`] — gradient descent on the skill vector bends each
//!    step's trajectory to the actual object pose.
//!
//! Everything is deterministic given a seed; [`nn_core`] provides the
//! hand-rolled differentiable blocks, all verified against finite
//! differences (see [`gradcheck`]).

pub mod dataset;
pub mod discovery;
pub mod gradcheck;
pub mod nn_core;
pub mod planner_high;
pub mod planner_low;
pub mod vqcnmp;
