pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod layout;
pub mod rope;
pub mod schedule;
pub mod engine;
pub mod model;
pub mod analysis;
pub mod cli;
