//! TICON at desk scale: a shared transformer contextualizer over grids of
//! tile embeddings from heterogeneous mock tile encoders, pretrained with
//! omni-feature masked modeling, plus the downstream evaluation harness and a
//! Tangle-style slide aggregator on a synthetic whole-slide substrate.

pub mod agg;
pub mod error;
pub mod eval;
pub mod kvconfig;
pub mod model;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
