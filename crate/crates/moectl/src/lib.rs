//! File formats, IO and the command-line front end for the editing model.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod images;
pub mod manifest;
pub mod records;
