//! The shared services center gateway: wires the core modules to durable
//! storage and exposes them over HTTP.

pub mod api;
pub mod app;
pub mod client;
pub mod config;
pub mod harness;
pub mod seed;
pub mod transport;

pub use app::{GatewayError, Ssc};
pub use config::GatewayConfig;
