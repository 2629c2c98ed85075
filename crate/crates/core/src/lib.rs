pub mod data;
pub mod error;
pub mod rng;

pub use data::{standardize_response, Dataset, ResponseTransform};
pub use error::{Error, Result};
pub use rng::{derive_stream, RngStream};
pub mod forest;
pub mod lasso;
pub mod ensemble;
pub mod simgen;
pub mod theory;
pub mod experiments;
