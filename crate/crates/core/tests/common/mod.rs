#![allow(dead_code)]

pub mod auditlog;
pub mod forest;
pub mod gen;
pub mod oracle;
pub mod workflow;
pub mod bus;
