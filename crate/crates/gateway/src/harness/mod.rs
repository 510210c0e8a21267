//! Simulated administrations and scripted scenarios for driving a gateway
//! end to end.

pub mod admin;
pub mod demo;
pub mod scenario;
