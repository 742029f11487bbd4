//! Command-line pipeline and HTTP render service for dynrad checkpoints.

pub mod args;
pub mod commands;
pub mod loaded;
pub mod service;

pub use args::Cli;
pub use commands::run;
pub use loaded::LoadedModel;
