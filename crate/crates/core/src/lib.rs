pub mod autodiff;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod export;
pub mod gpgbn;
pub mod graph_data;
pub mod selftest;
pub mod sparse;
pub mod special;
pub mod stochastic;
pub mod training;

pub use error::{Error, Result};
