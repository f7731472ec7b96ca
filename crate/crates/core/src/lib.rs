//! Core of the hybrid-training lab.
//!
//! Pure, allocation-only logic: the gridworld, its scripted oracle, the token
//! codec, a small decoder-only transformer with hand-written gradients, the
//! modality-mixed trainer and the rollout harness. File formats, the CLI and
//! the steering service live in the `hyt-lab` companion crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod codec;
pub mod eval;
pub mod fnv;
pub mod hyt;
pub mod net;
pub mod oracle;
pub mod rng;
pub mod world;
