//! Bulk loading of catalog, users, models and topics. Every loader skips
//! entities that already exist, so seeding on each start is harmless.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use ssc_core::identity::NewUser;
use ssc_core::orchestration::ProcessModel;
use ssc_core::registry::{LifeEventNode, ServiceDescriptor};

use crate::app::{GatewayError, Ssc};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CatalogSeed {
    /// Parents must precede their children.
    pub life_events: Vec<LifeEventNode>,
    pub services: Vec<ServiceDescriptor>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserSeed {
    pub user_id: String,
    pub password: String,
    /// Hex-encoded Ed25519 public key enabling strong login.
    #[serde(default)]
    pub public_key: Option<String>,
    #[serde(default)]
    pub roles: BTreeSet<String>,
    #[serde(default)]
    pub static_profile: BTreeMap<String, String>,
}

impl UserSeed {
    pub fn to_new_user(&self) -> Result<NewUser, GatewayError> {
        let public_key = self
            .public_key
            .as_deref()
            .map(hex::decode)
            .transpose()
            .map_err(|e| GatewayError::Seed(format!("user {}: public_key: {e}", self.user_id)))?;
        Ok(NewUser {
            user_id: self.user_id.clone(),
            password: self.password.clone(),
            public_key,
            roles: self.roles.clone(),
            static_profile: self.static_profile.clone(),
        })
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, GatewayError> {
    let text = std::fs::read_to_string(path).map_err(|e| GatewayError::Seed(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| GatewayError::Seed(format!("{}: {e}", path.display())))
}

pub fn seed_topics(ssc: &Ssc, topics: &[String]) -> Result<(), GatewayError> {
    for t in topics {
        ssc.bus.create_topic(t).map_err(|e| GatewayError::Seed(e.to_string()))?;
    }
    Ok(())
}

pub fn seed_models(ssc: &Ssc, models: &[ProcessModel]) -> Result<(), GatewayError> {
    for m in models {
        if !ssc.orchestrator.has_model(&m.model_id) {
            ssc.register_model(m.clone())
                .map_err(|e| GatewayError::Seed(format!("model {}: {e}", m.model_id)))?;
        }
    }
    Ok(())
}

pub fn seed_users(ssc: &Ssc, users: &[UserSeed]) -> Result<(), GatewayError> {
    for u in users {
        if !ssc.identity.user_exists(&u.user_id) {
            ssc.identity
                .register_user(u.to_new_user()?)
                .map_err(|e| GatewayError::Seed(format!("user {}: {e}", u.user_id)))?;
        }
    }
    Ok(())
}

pub fn seed_catalog(ssc: &Ssc, catalog: &CatalogSeed) -> Result<(), GatewayError> {
    for n in &catalog.life_events {
        if !ssc.registry.has_life_event(&n.node_id) {
            ssc.registry
                .add_life_event(&n.node_id, &n.label, n.parent.as_deref())
                .map_err(|e| GatewayError::Seed(e.to_string()))?;
        }
    }
    for d in &catalog.services {
        if ssc.registry.get_descriptor(&d.service_id).is_err() {
            ssc.register_service(d.clone())
                .map_err(|e| GatewayError::Seed(format!("service {}: {e}", d.service_id)))?;
        }
    }
    Ok(())
}
