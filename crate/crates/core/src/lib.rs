pub mod dataset;
pub mod error;

pub use error::{Error, Result};
pub mod networks;
pub mod losses;
pub mod training;
pub mod inference;
pub mod evaluation;

/// Training and inference run in `f32`; gradient checks use `f64`.
pub type Bundle32 = training::ModelBundle<f32>;
pub type Bundle64 = training::ModelBundle<f64>;
pub type Dataset32 = dataset::LoadedDataset<f32>;
pub type Dataset64 = dataset::LoadedDataset<f64>;
pub type Face32 = dataset::FaceImage<f32>;
pub type Face64 = dataset::FaceImage<f64>;
