//! File formats, run orchestration and the command-line front end for the
//! `hlfusion-core` HSI + LiDAR classifier.

pub mod checkpoint;
pub mod cube_file;
pub mod error;
pub mod history;
pub mod manifest;
pub mod map;
pub mod report;
pub mod run;

pub use error::{Error, ExitCode, Result};
