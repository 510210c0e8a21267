//! Service catalog organized by a taxonomy of life events.
//!
//! The taxonomy is an append-only forest. A service is tagged with one or
//! more life-event nodes; asking for a node returns every service tagged on
//! that node or anywhere below it.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::identity::AuthLevel;
use crate::store::{Journal, StoreError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LifeEventNode {
    pub node_id: String,
    pub label: String,
    #[serde(default)]
    pub parent: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UsageTarget {
    Citizen,
    Business,
    Administration,
}

impl UsageTarget {
    pub fn parse(s: &str) -> Option<UsageTarget> {
        match s {
            "citizen" => Some(UsageTarget::Citizen),
            "business" => Some(UsageTarget::Business),
            "administration" => Some(UsageTarget::Administration),
            _ => None,
        }
    }
}

/// How a catalogued service is reached.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Binding {
    SyncPort { admin_id: String, service_id: String },
    EventTopic { name: String },
    Process { model_id: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceDescriptor {
    pub service_id: String,
    pub provider_admin_id: String,
    pub title: String,
    #[serde(default)]
    pub description: String,
    pub life_events: BTreeSet<String>,
    pub usage_target: UsageTarget,
    pub min_auth_level: AuthLevel,
    pub binding: Binding,
}

/// Answers whether a binding target currently exists in its owning module.
pub trait BindingResolver {
    fn binding_exists(&self, binding: &Binding) -> bool;
}

impl<F: Fn(&Binding) -> bool> BindingResolver for F {
    fn binding_exists(&self, binding: &Binding) -> bool {
        self(binding)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomyTree {
    pub node: LifeEventNode,
    pub children: Vec<TaxonomyTree>,
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("life event `{0}` already exists")]
    DuplicateNode(String),
    #[error("unknown parent life event `{0}`")]
    UnknownParent(String),
    #[error("life event `{0}` would be its own ancestor")]
    CycleDetected(String),
    #[error("unknown life event `{0}`")]
    UnknownLifeEvent(String),
    #[error("binding target does not exist: {0:?}")]
    UnknownBinding(Binding),
    #[error("service `{0}` already registered")]
    DuplicateService(String),
    #[error("unknown service `{0}`")]
    UnknownService(String),
    #[error("invalid descriptor: {0}")]
    InvalidDescriptor(String),
    #[error(transparent)]
    Storage(#[from] StoreError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CatalogRecord {
    NodeAdded { node: LifeEventNode },
    ServiceRegistered { descriptor: ServiceDescriptor },
}

#[derive(Default)]
struct Catalog {
    nodes: BTreeMap<String, LifeEventNode>,
    children: BTreeMap<Option<String>, BTreeSet<String>>,
    services: BTreeMap<String, ServiceDescriptor>,
}

impl Catalog {
    fn subtree(&self, root: &str) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        let mut queue = VecDeque::from([root.to_string()]);
        while let Some(n) = queue.pop_front() {
            if let Some(kids) = self.children.get(&Some(n.clone())) {
                queue.extend(kids.iter().cloned());
            }
            out.insert(n);
        }
        out
    }

    fn tree(&self, id: &str) -> TaxonomyTree {
        TaxonomyTree {
            node: self.nodes[id].clone(),
            children: self
                .children
                .get(&Some(id.to_string()))
                .map(|kids| kids.iter().map(|k| self.tree(k)).collect())
                .unwrap_or_default(),
        }
    }
}

#[derive(Default)]
pub struct Registry {
    catalog: RwLock<Catalog>,
    journal: Option<Journal>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuilds the catalog from journaled records. Bindings were checked
    /// when first registered and are not re-checked here.
    pub fn recover(journal: Journal, records: Vec<CatalogRecord>) -> Result<Self, RegistryError> {
        let reg = Registry::new();
        for rec in records {
            match rec {
                CatalogRecord::NodeAdded { node } => reg.insert_node(node)?,
                CatalogRecord::ServiceRegistered { descriptor } => {
                    reg.check_descriptor(&descriptor, None)?;
                    reg.catalog
                        .write()
                        .services
                        .insert(descriptor.service_id.clone(), descriptor);
                }
            }
        }
        Ok(Registry {
            journal: Some(journal),
            ..reg
        })
    }

    fn persist(&self, rec: &CatalogRecord) -> Result<(), RegistryError> {
        if let Some(j) = &self.journal {
            j.append(rec)?;
        }
        Ok(())
    }

    fn validate_node(catalog: &Catalog, node: &LifeEventNode) -> Result<(), RegistryError> {
        if node.node_id.trim().is_empty() {
            return Err(RegistryError::InvalidDescriptor("node_id must be non-empty".into()));
        }
        if catalog.nodes.contains_key(&node.node_id) {
            return Err(RegistryError::DuplicateNode(node.node_id.clone()));
        }
        if let Some(parent) = &node.parent {
            if parent == &node.node_id {
                return Err(RegistryError::CycleDetected(node.node_id.clone()));
            }
            if !catalog.nodes.contains_key(parent) {
                return Err(RegistryError::UnknownParent(parent.clone()));
            }
        }
        Ok(())
    }

    fn insert_node(&self, node: LifeEventNode) -> Result<(), RegistryError> {
        let mut c = self.catalog.write();
        Self::validate_node(&c, &node)?;
        c.children
            .entry(node.parent.clone())
            .or_default()
            .insert(node.node_id.clone());
        c.nodes.insert(node.node_id.clone(), node);
        Ok(())
    }

    pub fn add_life_event(&self, node_id: &str, label: &str, parent: Option<&str>) -> Result<LifeEventNode, RegistryError> {
        let node = LifeEventNode {
            node_id: node_id.to_string(),
            label: label.to_string(),
            parent: parent.map(str::to_string),
        };
        let mut c = self.catalog.write();
        Self::validate_node(&c, &node)?;
        self.persist(&CatalogRecord::NodeAdded { node: node.clone() })?;
        c.children
            .entry(node.parent.clone())
            .or_default()
            .insert(node.node_id.clone());
        c.nodes.insert(node.node_id.clone(), node.clone());
        Ok(node)
    }

    pub fn has_life_event(&self, node_id: &str) -> bool {
        self.catalog.read().nodes.contains_key(node_id)
    }

    fn check_descriptor(&self, d: &ServiceDescriptor, bindings: Option<&dyn BindingResolver>) -> Result<(), RegistryError> {
        if d.service_id.trim().is_empty() || d.provider_admin_id.trim().is_empty() {
            return Err(RegistryError::InvalidDescriptor(
                "service_id and provider_admin_id must be non-empty".into(),
            ));
        }
        let c = self.catalog.read();
        if c.services.contains_key(&d.service_id) {
            return Err(RegistryError::DuplicateService(d.service_id.clone()));
        }
        if let Some(missing) = d.life_events.iter().find(|n| !c.nodes.contains_key(*n)) {
            return Err(RegistryError::UnknownLifeEvent(missing.clone()));
        }
        if let Some(resolver) = bindings {
            if !resolver.binding_exists(&d.binding) {
                return Err(RegistryError::UnknownBinding(d.binding.clone()));
            }
        }
        Ok(())
    }

    pub fn register_service(&self, descriptor: ServiceDescriptor, bindings: &dyn BindingResolver) -> Result<(), RegistryError> {
        self.check_descriptor(&descriptor, Some(bindings))?;
        let mut c = self.catalog.write();
        if c.services.contains_key(&descriptor.service_id) {
            return Err(RegistryError::DuplicateService(descriptor.service_id));
        }
        self.persist(&CatalogRecord::ServiceRegistered {
            descriptor: descriptor.clone(),
        })?;
        c.services.insert(descriptor.service_id.clone(), descriptor);
        Ok(())
    }

    /// Services tagged with `node_id` or any of its descendants, ordered by
    /// provider then service id.
    pub fn find_by_life_event(&self, node_id: &str, target: Option<UsageTarget>) -> Result<Vec<ServiceDescriptor>, RegistryError> {
        let c = self.catalog.read();
        if !c.nodes.contains_key(node_id) {
            return Err(RegistryError::UnknownLifeEvent(node_id.to_string()));
        }
        let subtree = c.subtree(node_id);
        let mut out: Vec<ServiceDescriptor> = c
            .services
            .values()
            .filter(|d| d.life_events.iter().any(|n| subtree.contains(n)))
            .filter(|d| target.is_none_or(|t| d.usage_target == t))
            .cloned()
            .collect();
        out.sort_by(|a, b| (&a.provider_admin_id, &a.service_id).cmp(&(&b.provider_admin_id, &b.service_id)));
        Ok(out)
    }

    /// Every service, optionally restricted to a usage target, in the same
    /// order as [`Registry::find_by_life_event`].
    pub fn list_services(&self, target: Option<UsageTarget>) -> Vec<ServiceDescriptor> {
        let mut out: Vec<ServiceDescriptor> = self
            .catalog
            .read()
            .services
            .values()
            .filter(|d| target.is_none_or(|t| d.usage_target == t))
            .cloned()
            .collect();
        out.sort_by(|a, b| (&a.provider_admin_id, &a.service_id).cmp(&(&b.provider_admin_id, &b.service_id)));
        out
    }

    pub fn get_descriptor(&self, service_id: &str) -> Result<ServiceDescriptor, RegistryError> {
        self.catalog
            .read()
            .services
            .get(service_id)
            .cloned()
            .ok_or_else(|| RegistryError::UnknownService(service_id.to_string()))
    }

    /// The taxonomy as a forest; roots and siblings in node-id order.
    pub fn list_taxonomy(&self) -> Vec<TaxonomyTree> {
        let c = self.catalog.read();
        c.children
            .get(&None)
            .map(|roots| roots.iter().map(|r| c.tree(r)).collect())
            .unwrap_or_default()
    }

    /// Depth-first flattening of [`Registry::list_taxonomy`].
    pub fn list_nodes(&self) -> Vec<LifeEventNode> {
        fn walk(t: &TaxonomyTree, out: &mut Vec<LifeEventNode>) {
            out.push(t.node.clone());
            for c in &t.children {
                walk(c, out);
            }
        }
        let mut out = Vec::new();
        for t in self.list_taxonomy() {
            walk(&t, &mut out);
        }
        out
    }

    pub fn service_count(&self) -> usize {
        self.catalog.read().services.len()
    }
}
