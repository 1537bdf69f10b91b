pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod fairness;
pub mod gradcheck;
pub mod lambda_solver;
pub mod model;
pub mod optimizer;
pub mod rank_losses;

pub use error::{Error, Result};
