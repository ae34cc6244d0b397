pub mod commands;
pub mod config;
pub mod pipeline;
pub mod workspace;
