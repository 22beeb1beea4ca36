//! Zero-shot classification with generative latent prototypes.
//!
//! A linear map from image features to semantic vectors is fitted on seen
//! classes, optionally together with virtual instances of the unseen classes
//! sampled around reconstructed prototypes, and test images are assigned to
//! the nearest unseen semantic vector.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod io;
pub mod model;
pub mod prototype;
pub mod rng;
pub mod solvers;
pub mod synth;
pub mod transfer;

pub use dataset::{ClassId, FeatureMatrix, LabelVector, SemanticTable, ZslSplit};
pub use error::{GlapError, Result};
pub use model::{fit_combined, predict, train, GlapModel, Metric, Strategy, StrategyConfig};
