pub mod anc;
pub mod bank;
pub mod config;
pub mod error;
pub mod exec;
pub mod hash;
pub mod labeler;
pub mod manifest;
pub mod nn;
pub mod noise;
pub mod runtime;
pub mod signal;
pub mod wav;

pub use error::{Error, Result};
