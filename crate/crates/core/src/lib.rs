pub mod config;
pub mod cv;
pub mod data_io;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod preprocess;
pub mod ssgsea;
pub mod survival;
pub mod synthgen;
pub mod trainer;

pub use error::{PearlError, Result};
