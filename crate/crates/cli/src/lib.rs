//! Library side of the `regionedit` command-line tool.

pub mod cache;
pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod render;
