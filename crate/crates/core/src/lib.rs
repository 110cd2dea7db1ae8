//! Matrix-factor models for multivariate spatio-temporal data.
//!
//! Observations are `n × p` matrices `Y_t` (locations by variables) that
//! decompose as `Y_t = A X_t B' + E_t`, with a small `d × r` latent factor
//! matrix `X_t`. The crate estimates `A`, `B` and the factors from
//! auto-covariance moments, fits smooth loading functions over space for
//! kriging at new locations, and a matrix autoregression for forecasting.
//!
//! Everything is generic over the scalar type; [`Dataset`], [`Model`] and
//! friends are the `f64` instantiations.

pub mod artifact;
pub mod data;
pub mod error;
pub mod factors;
pub mod linalg;
pub mod mar;
pub mod model;
pub mod moments;
pub mod predict;
pub mod scalar;
pub mod sieve;
pub mod sim;

pub use artifact::{load_model, save_model, ModelArtifact, ARTIFACT_VERSION};
pub use data::{
    load_dataset, partition_locations, save_dataset, DataFormat, Location, Partition, PartitionStrategy, StDataset,
};
pub use error::{Error, ErrorClass, Result};
pub use factors::{RankChoice, RankSpec};
pub use mar::{fit_mar1, fit_var1, Mar1Model, MarConfig, MarInit, Var1Model};
pub use model::{fit, fit_detailed, FactorModel, FitConfig, FitOutput, SieveOptions};
pub use predict::{
    forecast, forecast_model, forecast_with_var, krige, krige_model, subspace_distance, MetricReport, Scale,
};
pub use scalar::Real;
pub use sieve::{Rect, SieveConfig, SieveFit};

pub type Dataset = StDataset<f64>;
pub type Dataset32 = StDataset<f32>;
pub type Model = FactorModel<f64>;
pub type Model32 = FactorModel<f32>;
pub type MarModel = Mar1Model<f64>;
pub type MarModel32 = Mar1Model<f32>;
