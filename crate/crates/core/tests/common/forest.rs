//! Random life-event forests and a bottom-up reference for descendant search.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use ssc_core::identity::AuthLevel;
use ssc_core::registry::{Binding, Registry, ServiceDescriptor, UsageTarget};

pub struct Forest {
    /// (node_id, parent) in insertion order; parents precede children.
    pub nodes: Vec<(String, Option<String>)>,
    pub descriptors: Vec<ServiceDescriptor>,
}

const TARGETS: [UsageTarget; 3] = [UsageTarget::Citizen, UsageTarget::Business, UsageTarget::Administration];

pub fn random_forest<R: Rng>(rng: &mut R, max_nodes: usize, max_descriptors: usize) -> Forest {
    let n = rng.gen_range(1..=max_nodes);
    let mut ids: Vec<String> = (0..n).map(|i| format!("ev{:03}", i)).collect();
    ids.shuffle(rng);
    let mut nodes: Vec<(String, Option<String>)> = Vec::with_capacity(n);
    for id in ids {
        let parent = if nodes.is_empty() || rng.gen_bool(0.15) {
            None
        } else {
            Some(nodes[rng.gen_range(0..nodes.len())].0.clone())
        };
        nodes.push((id, parent));
    }
    let m = rng.gen_range(0..=max_descriptors);
    let descriptors = (0..m)
        .map(|i| {
            let tags = rng.gen_range(1..=3);
            let provider = format!("admin-{}", rng.gen_range(0..7));
            ServiceDescriptor {
                service_id: format!("svc-{i:03}"),
                provider_admin_id: provider.clone(),
                title: format!("Service {i}"),
                description: String::new(),
                life_events: (0..tags).map(|_| nodes[rng.gen_range(0..nodes.len())].0.clone()).collect(),
                usage_target: *TARGETS.choose(rng).unwrap(),
                min_auth_level: AuthLevel::None,
                binding: Binding::SyncPort {
                    admin_id: provider,
                    service_id: format!("svc-{i:03}"),
                },
            }
        })
        .collect();
    Forest { nodes, descriptors }
}

pub fn build(f: &Forest) -> Registry {
    let reg = Registry::new();
    for (id, parent) in &f.nodes {
        reg.add_life_event(id, id, parent.as_deref()).unwrap();
    }
    let any = |_: &Binding| true;
    for d in &f.descriptors {
        reg.register_service(d.clone(), &any).unwrap();
    }
    reg
}

/// Walks each tag up through its ancestors instead of walking down.
pub fn brute_force(f: &Forest, node: &str, target: Option<UsageTarget>) -> Vec<String> {
    let parent: BTreeMap<&str, Option<&str>> = f.nodes.iter().map(|(n, p)| (n.as_str(), p.as_deref())).collect();
    fn under<'a>(parent: &BTreeMap<&'a str, Option<&'a str>>, mut tag: &'a str, node: &str) -> bool {
        loop {
            if tag == node {
                return true;
            }
            match parent[tag] {
                Some(p) => tag = p,
                None => return false,
            }
        }
    }
    let mut hits: Vec<(&str, &str)> = f
        .descriptors
        .iter()
        .filter(|d| target.is_none_or(|t| d.usage_target == t))
        .filter(|d| d.life_events.iter().any(|t| under(&parent, t, node)))
        .map(|d| (d.provider_admin_id.as_str(), d.service_id.as_str()))
        .collect();
    hits.sort();
    hits.into_iter().map(|(_, s)| s.to_string()).collect()
}

/// Compares every node and target combination; returns the number of
/// queries checked or the first disagreement.
pub fn check<R: Rng>(rng: &mut R, max_nodes: usize, max_descriptors: usize) -> Result<usize, String> {
    let f = random_forest(rng, max_nodes, max_descriptors);
    let reg = build(&f);
    let mut checked = 0;
    let node_ids: BTreeSet<&String> = f.nodes.iter().map(|(n, _)| n).collect();
    for node in node_ids {
        for target in [None, Some(UsageTarget::Citizen), Some(UsageTarget::Business), Some(UsageTarget::Administration)] {
            let got: Vec<String> = reg
                .find_by_life_event(node, target)
                .map_err(|e| e.to_string())?
                .into_iter()
                .map(|d| d.service_id)
                .collect();
            let want = brute_force(&f, node, target);
            if got != want {
                return Err(format!("node {node} target {target:?}: got {got:?}, want {want:?}"));
            }
            checked += 1;
        }
    }
    Ok(checked)
}
