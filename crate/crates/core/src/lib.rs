pub mod autodiff;
pub mod error;
pub mod matrix;
pub mod params;
pub mod rng;

pub use error::{Error, Result};
pub mod session_data;
pub mod dataset;
pub mod objective;
pub mod synthetic;
pub mod gradcheck;
pub mod models;
pub mod checkpoint;
pub mod eval;
pub mod training;
pub mod baselines;
