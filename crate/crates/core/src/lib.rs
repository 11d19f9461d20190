pub mod augment;
pub mod error;
pub mod inference;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod phantom;
pub mod pipeline;
pub mod rng;
pub mod ssl;
pub mod supervised;
pub mod tensor;
pub mod volio;

pub use error::{Error, Result};
