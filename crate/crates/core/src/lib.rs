pub mod adapter;
pub mod archive;
pub mod attention;
pub mod block;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod oracle;
pub mod report;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
