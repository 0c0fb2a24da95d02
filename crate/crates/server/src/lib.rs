//! Service and command-line front end over `lelsd-core`: an HTTP API for
//! interactive editing sessions and the `lelsd` tool for training, editing,
//! calibration and evaluation.

pub mod backend;
pub mod cli;
pub mod render;
pub mod service;
