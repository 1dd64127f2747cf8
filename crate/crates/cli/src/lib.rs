//! Command line and HTTP front ends for ctrlkit.

pub mod api;
pub mod bundle;
pub mod server;
pub mod train_config;
