pub mod aggregation;
pub mod backbone;
pub mod config;
pub mod dataio;
pub mod decoder;
pub mod error;
pub mod guidance;
pub mod infer;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod training;
