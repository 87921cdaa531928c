//! A numerical laboratory for coupled contrastive-learning dynamics.
//!
//! The crate studies two per-anchor softmax objectives side by side — the
//! standard contrastive loss (full denominator) and its negatives-only
//! counterpart — and measures how far their training trajectories drift
//! apart, both in a similarity-matrix surrogate dynamic and through small
//! encoder networks. Analytic bounds on that drift (probabilistic class-mass
//! bounds, per-step gradient gaps, discrete Gronwall envelopes, terminal
//! representation-similarity floors) are implemented next to the simulators,
//! and a verification layer checks each claim against direct simulation.
//!
//! Module map:
//!
//! * [`datagen`] — synthetic mixture datasets, augmentation kernel, batches;
//! * [`simcore`] — similarity states, per-anchor losses and gradients;
//! * [`schedule`] — step-size schedules;
//! * [`coupled`] — the coupled two-trajectory similarity dynamic;
//! * [`encoder`] — small encoders trained with shared randomness;
//! * [`bounds`] — closed-form bound evaluators;
//! * [`metrics`] — representation-similarity metrics (CKA, RSA, probes);
//! * [`verify`] — simulation-backed checks of every bound;
//! * [`seedstream`] — deterministic keyed RNG streams.

// Validation guards are written as `!(x > 0.0)` on purpose: unlike `x <= 0.0`,
// the negated form also rejects NaN inputs.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod coupled;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod schedule;
pub mod seedstream;
pub mod simcore;
pub mod verify;

pub use error::{Error, Result};
