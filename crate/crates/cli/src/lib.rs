//! Command-line and HTTP surfaces of the retrieval engine.

pub mod commands;
pub mod server;

pub use commands::run;
