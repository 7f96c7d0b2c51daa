//! Command-line runner and HTTP session server.

pub mod commands;
pub mod http;
pub mod wire;
