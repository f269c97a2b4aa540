//! Weather- and time-aware multi-task semantic segmentation.
//!
//! The crate bundles a procedural street-scene synthesizer, a small atrous
//! encoder-decoder with weather / time-of-day supervisor heads, the
//! synthetic-aware training engine and a condition-stratified mIoU harness.

pub mod dataset;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod nn;
pub mod scenegen;
pub mod schema;
pub mod training;
