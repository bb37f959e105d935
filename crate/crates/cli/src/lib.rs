//! Command line and HTTP front ends for the splat deformation engine.

pub mod cache;
pub mod commands;
pub mod config;
pub mod service;
