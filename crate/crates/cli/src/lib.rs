pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;
pub mod retm_io;
pub mod wav;
