//! Deformable time-delay (1-D convolutional) layers with input-conditioned
//! fractional sampling offsets, exact analytic gradients, latency-controlled
//! streaming variants, and desk-scale experiment tooling.
//!
//! The building blocks, bottom-up:
//!
//! * [`seq`] — dense `(channels, length)` feature maps and the `FSEQ` binary
//!   format; [`rng`] — a portable seeded random source.
//! * [`interp`] — linear interpolation at fractional frame positions and its
//!   derivative with respect to the position.
//! * [`conv`] — standard TDNN layers (fixed grid, "same" zero padding) with
//!   analytic forward/backward.
//! * [`deform`] — deformable TDNN layers: an auxiliary convolution predicts
//!   one fractional offset per kernel tap per output frame, shared across
//!   channels; latency-controlled clipping keeps lookahead bounded.
//! * [`network`] — multi-layer networks from declarative configs, with the
//!   last `k` layers optionally deformable; [`checkpoint`] — binary
//!   save/load.
//! * [`task`], [`warp`], [`loss`], [`optim`], [`train`] — a synthetic
//!   warped-sequence benchmark and the training/evaluation loop.
//! * [`analysis`] — dependency (receptive-field) maps, lookahead audits,
//!   offset histograms; [`gradcheck`] — the finite-difference oracle used
//!   throughout the test suite.
//!
//! With the default `parallel` feature, data-parallel inner loops run on
//! rayon; disabling it falls back to sequential loops with bit-identical
//! results.

pub mod analysis;
pub mod checkpoint;
pub mod conv;
pub mod deform;
pub mod error;
mod exec;
pub mod gradcheck;
pub mod interp;
pub mod loss;
pub mod network;
pub mod optim;
pub mod rng;
pub mod seq;
pub mod task;
pub mod train;
pub mod warp;

pub use error::{Error, Result};
pub use seq::FeatureSeq;
