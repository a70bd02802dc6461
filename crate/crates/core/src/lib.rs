//! Time-domain speech separation with a dual-path transformer masking
//! network.

pub mod attention;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod dualpath;
pub mod encoder_stack;
pub mod error;
pub mod gradcheck;
pub mod ndkernel;
pub mod objectives;
pub mod profiler;
pub mod sepmodel;
pub mod train;

pub use error::{Error, Result};
