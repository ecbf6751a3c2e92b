//! Discriminability distillation for group representation learning.
//!
//! The pipeline scores every element of a labeled corpus by how close its
//! embedding sits to its own class centroid relative to the hardest negative
//! centroid, distills that score into a small regressor over raw inputs, and
//! at inference time filters and weights group members by the predicted score
//! before pooling them into a single group feature.
//!
//! All numerical code is generic over [`Scalar`] (`f32` or `f64`). The
//! aliases at the bottom of this file pin the `f64` instantiation used by the
//! file formats and the command-line tool.

pub mod aggregator;
pub mod cli;
pub mod data;
pub mod distiller;
pub mod engine;
pub mod error;
pub mod eval;
pub mod scalar;
pub mod stats;
pub mod synth;

pub use aggregator::{AggregationPolicy, GroupRepresentation, Strategy};
pub use data::{Corpus, DiscriminabilityRecord, ElementRecord};
pub use distiller::{Activation, Regressor, RegressorConfig, TrainReport};
pub use engine::{CentroidTable, NormalizationStats};
pub use error::{DdlError, Result};
pub use eval::{EvalReport, PairList};
pub use scalar::Scalar;
pub use synth::SynthConfig;

pub type Corpus64 = Corpus<f64>;
pub type Corpus32 = Corpus<f32>;
pub type ElementRecord64 = ElementRecord<f64>;
pub type DiscriminabilityRecord64 = DiscriminabilityRecord<f64>;
pub type CentroidTable64 = CentroidTable<f64>;
pub type Regressor64 = Regressor<f64>;
pub type Regressor32 = Regressor<f32>;
pub type GroupRepresentation64 = GroupRepresentation<f64>;
