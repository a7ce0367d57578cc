pub mod accounting;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod model;
pub mod nn;
pub mod optim;
pub mod report;
pub mod rng;
pub mod tape;
pub mod task;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
