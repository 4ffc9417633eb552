pub mod config;
pub mod confident;
pub mod corpus;
pub mod error;
pub mod losses;
pub mod nn;
pub mod par;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
