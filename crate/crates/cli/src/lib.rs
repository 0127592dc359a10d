//! Command line front end and HTTP inference service.

pub mod commands;
pub mod service;
