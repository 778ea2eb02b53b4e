pub mod activation_tables;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod experiment;
pub mod fixed_point;
pub mod golden;
pub mod nna_engine;
pub mod qnn;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
