pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod selftest;
pub mod tasks;

pub use error::{Error, Result};
