//! Core services of the shared services center.
//!
//! Base services: [`envelope`] (canonical encoding and signatures),
//! [`identity`] (SSO, profiles) and [`audit`] (traceability). Cooperation
//! services built on them: [`cooperation`] (synchronous port mediation),
//! [`eventbus`] (publish & subscribe), [`orchestration`] (process engine with
//! human tasks) and [`registry`] (life-event service catalog). Durable state
//! lives in append-only [`store`] journals.

pub mod audit;
pub mod clock;
pub mod cooperation;
pub mod envelope;
pub mod eventbus;
pub mod identity;
pub mod orchestration;
pub mod registry;
pub mod store;
