//! Command-line workflows and the HTTP composition service.

pub mod api;
pub mod cli;
