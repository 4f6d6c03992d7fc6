//! Command-line tools and HTTP service.

pub mod commands;
pub mod config;
pub mod service;
