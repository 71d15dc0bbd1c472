//! Health event prediction on dynamic disease co-occurrence graphs.
//!
//! The crate builds the full modeling stack from scratch:
//!
//! - [`num`] — a dense `f64` tensor kernel with reverse-mode automatic
//!   differentiation on a gradient tape, an Adam optimizer, and a
//!   finite-difference gradient checker.
//! - [`ehr`] — the visit-sequence data model: code vocabulary, multi-hot
//!   visits, patient records, splits, and task labels.
//! - [`cograph`] — the weighted, asymmetric global disease co-occurrence
//!   graph built from training feature visits.
//! - [`dyngraph`] — per-visit diagnosis/neighbor masks, the four subgraph
//!   adjacency matrices, and two algebraically equivalent aggregation
//!   routes: a brute-force oracle that materializes `d x d` matrices and a
//!   memory-optimized path whose intermediates stay `d x s`.
//! - [`transitions`] — disease-level temporal learning: scaled dot-product
//!   attention for emerging diseases, a modified GRU for persistent ones,
//!   visit max pooling, and location-based attention over visits.
//! - [`tasks`] — classifier heads, binary cross-entropy training, the
//!   evaluation metrics (weighted F1, recall@k, AUC), the
//!   persistent/emerging recall split, ablation variants, and a frequency
//!   baseline.
//! - [`synthgen`] — a seeded synthetic record generator with planted
//!   cluster and transition structure.
//!
//! Everything except IO lives here; the companion CLI crate carries file
//! formats and the command-line surface. The crate is `no_std`-compatible
//! (with `alloc`) when built without the default `std` feature; the `std`
//! feature additionally enables allocation accounting in [`num::track`].

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod cograph;
pub mod dyngraph;
pub mod ehr;
mod error;
pub(crate) mod fmath;
pub mod num;
pub mod synthgen;
pub mod tasks;
pub mod transitions;

pub use error::{Error, Result};
