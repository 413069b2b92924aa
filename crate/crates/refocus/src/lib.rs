//! Interactive episodic-memory localization with user feedback, end to end on
//! synthetic data.
//!
//! The crate generates seeded synthetic "videos" with deliberately ambiguous
//! queries, samples incorrect reference spans, synthesizes clause-structured
//! user feedback, derives clip-level alignment pseudo-labels, trains a
//! feedback alignment module (FALM) plus a compact host localizer on a
//! from-scratch autodiff engine, and evaluates single-turn, multi-turn, and
//! noisy-feedback localization with recall-at-tIoU metrics.
//!
//! Start with the `examples/` directory: each example is a runnable
//! walkthrough of one capability (world generation, feedback synthesis,
//! label generation, FALM training, end-to-end refinement, multi-turn
//! fusion). The `refocus` binary chains the same stages through on-disk
//! artifacts.

pub mod error;
pub mod evalkit;
pub mod falm;
pub mod feedbackgen;
pub mod labelgen;
pub mod localizer;
mod nn;
pub mod pipeline;
pub mod refsample;
pub mod span;
pub mod synthworld;
pub mod trainer;
pub mod types;

pub use error::Error;
pub use span::{clips_in_span, span_duration, tiou, Span};

pub type Result<T> = std::result::Result<T, Error>;
