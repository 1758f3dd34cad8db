//! Cross-modal embedding of person categories and image features with an
//! adaptive semantic margin regularizer.
//!
//! Pipeline: [`data`] builds or loads datasets, [`trainer`] pretrains and
//! trains the two encoders of [`model`] under the losses in [`objective`],
//! and [`retrieval`] scores attribute-based retrieval.

pub mod data;
pub mod diffnet;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod model;
pub mod objective;
pub mod retrieval;
pub mod schema;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
pub use model::{Checkpoint, ModelGradient, ModelShape, ModelState};
pub use objective::{LossConfig, Variant};
pub use schema::{AttributeSchema, PersonCategory};
pub use trainer::{OptimizerState, TrainConfig};
