pub mod bench;
pub mod calib;
pub mod cli;
pub mod corpus;
pub mod diffcore;
pub mod encoder;
pub mod episode;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod hybrid;
pub mod model;
pub mod nota;
pub mod rng;
pub mod trainer;
pub mod vat;

pub use error::{Error, ErrorCategory, Result};
