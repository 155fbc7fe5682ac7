//! Annotation HTTP service and the `hfalign` command line.

pub mod api;
pub mod cli;
