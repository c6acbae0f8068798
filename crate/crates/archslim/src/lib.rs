//! File IO, parallel drivers and the `3as` command line for
//! [`archslim_core`].

pub mod cli;
pub mod io;
pub mod parallel;

pub use io::{read_plan, read_weights, write_atomic, write_weights, IoError};
