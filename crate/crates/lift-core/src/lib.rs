//! Desk-scale factorized volume synthesis.
//!
//! A 2D slice generator is combined with a learned through-plane trajectory
//! to produce 3D volumes: an unconditional path trains a depth-to-latent
//! mapper against slice feature banks, and a paired path trains a slice
//! translator whose per-slice codes are mixed along depth by a bidirectional
//! GRU. Everything runs on procedural blob phantoms in f64 on the CPU, with
//! seeded determinism end to end.
//!
//! Module map:
//!
//! * [`volume`] / [`masks`] / [`lfv`]: volume container, plane slicing, depth
//!   encodings, region masks, and the `LFV1` file format.
//! * [`phantom`]: procedural paired phantom volumes and dataset splits.
//! * [`autodiff`]: reverse-mode tape over dense f64 tensors, the optimizer,
//!   and the `LFC1` checkpoint format.
//! * [`drift`]: frozen slice feature extractor, feature banks, and the
//!   kernel-weighted drifting loss.
//! * [`liftu`]: frozen slice generator plus trainable depth mapper.
//! * [`liftc`]: slice translator with z-context mixing and two-pass
//!   inference.
//! * [`metrics`]: volume fidelity metrics and their CSV records.
//! * [`stats`]: bootstrap confidence intervals and the Wilcoxon signed-rank
//!   test.
//! * [`probes`]: nearest-neighbour memorization probes.
//! * [`reference`]: naive mirror implementations used by the self-test
//!   battery and the acceptance suite.

pub mod autodiff;
pub mod detmath;
pub mod drift;
pub mod error;
pub mod lfv;
pub mod liftc;
pub mod liftu;
pub mod linalg;
pub mod masks;
pub mod metrics;
pub mod phantom;
pub mod probes;
pub mod reference;
pub mod rng;
pub mod stats;
pub mod threads;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{PlaneSelector, ValueRange, Volume};
