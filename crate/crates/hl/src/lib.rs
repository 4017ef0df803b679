//! File formats, HTTP service and command-line front end for the
//! highlighted-guidance engine in `highlighter-core`.

pub mod cli;
pub mod error;
pub mod formats;
pub mod service;
pub mod snapshot;
pub mod thw;
pub mod weights;

pub use error::{Error, FormatError, Result};
