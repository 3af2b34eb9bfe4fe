//! Online 4D human-scene reconstruction at desk scale.
//!
//! A recurrent state-token transformer reads a stream of frames and, in one
//! forward pass per frame, emits camera- and world-frame pointmaps, the camera
//! pose, and parametric body meshes for every detected person. People are
//! tracked across frames by optimal transport over their refined tokens.
//!
//! The crate is organised bottom-up:
//!
//! - [`diffcore`]: tensors, reverse-mode tape, gradient checker, T4DR files
//! - [`body`]: procedural skinned humanoid, forward kinematics, skinning
//! - [`geometry`]: poses, cameras, pointmaps, focal recovery, alignment
//! - [`netcore`]: tokenizer, detector, prompts, state decoders and heads
//! - [`recurrence`]: the streaming loop, gated state updates, chunk resets
//! - [`tracking`]: cost matrices, dustbins, Sinkhorn, track bookkeeping
//! - [`synth`]: procedural box-world scenes with full ground truth
//! - [`train`]: losses, optimizer, training loop, checkpoints
//! - [`eval`]: human, trajectory, camera and depth metrics
//! - [`cli`]: the `h4d` subcommands
//!
//! Runnable walkthroughs for each capability live in `examples/`.

pub mod body;
pub mod cli;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod netcore;
pub mod recurrence;
pub mod synth;
pub mod tracking;
pub mod train;

pub use error::{Error, Result};
