//! Core of the chest X-ray VQA workbench.
//!
//! The crate turns free-text radiology reports into structured findings
//! ([`report`]), renders question/answer pairs from them ([`qa`]), builds the
//! knowledge and per-image relation graphs ([`kg`], [`graph`]) and answers
//! questions with a three-graph relation-aware attention model ([`model`])
//! running on a small reverse-mode tensor engine ([`numeric`]). Metrics and
//! interpretation helpers live in [`eval`].
//!
//! Everything here is IO-free and builds under `no_std` with `alloc`; file
//! formats, the CLI and the HTTP service live in the `mvqa` crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod eval;
pub mod graph;
pub mod kg;
pub mod lexicon;
pub mod model;
pub mod numeric;
pub mod qa;
pub mod report;
pub mod synth;
pub mod text;

mod math;
mod rng;

pub use rng::seeded_rng;
