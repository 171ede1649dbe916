pub mod autodiff;
pub mod checkpoint;
pub mod datasets;
pub mod encoder;
pub mod error;
pub mod export;
pub mod head;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod stats;
pub mod synthetic;
pub mod text;
pub mod train;

pub use error::{Error, Result};
