//! Configuration resolution and on-disk stage management behind `vp2`.

pub mod config;
pub mod stages;

/// Misuse of the command line or an inconsistent configuration.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Usage(pub String);
