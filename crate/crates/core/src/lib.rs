pub mod amc;
pub mod channel;
pub mod config;
pub mod error;
pub mod experiments;
pub mod files;
pub mod gradsuite;
pub mod linkmap;
pub mod predictors;
pub mod train;
pub mod units;

pub use error::{Error, Result};
