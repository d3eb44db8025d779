//! Command-line surface for the splat engine: scene and config file
//! formats, bit-exact image IO, built-in synthetic fixtures, and the
//! subcommands that tie them to the library.

pub mod commands;
pub mod config;
pub mod fixtures;
pub mod image_io;
pub mod scene;

pub use commands::run;
