use std::collections::{BTreeMap, BTreeSet};

use ssc_core::identity::AuthLevel;
use ssc_core::registry::{Binding, LifeEventNode, ServiceDescriptor, UsageTarget};

use crate::app::{GatewayError, Ssc};
use crate::harness::admin::{AdminSpec, BackendSpec, SimulatedAdministration};
use crate::seed::{seed_catalog, CatalogSeed};

/// Back-office services every demo administration offers, with the life
/// event each one is filed under.
const STANDARD_SERVICES: [(&str, &str, &str); 3] = [
    ("anagrafe", "Registry certificate", "residence"),
    ("tributi", "Local tax statement", "taxes"),
    ("scuola", "School enrollment", "family"),
];

pub fn demo_admin_id(i: usize) -> String {
    format!("comune-{i:03}")
}

/// Number of administrations that go online for a given scale.
pub fn participating(admin_count: usize, participation_ratio: f64) -> usize {
    let ratio = if participation_ratio.is_nan() {
        0.0
    } else {
        participation_ratio.clamp(0.0, 1.0)
    };
    ((admin_count as f64 * ratio).round() as usize).min(admin_count)
}

fn taxonomy() -> Vec<LifeEventNode> {
    let node = |id: &str, label: &str, parent: Option<&str>| LifeEventNode {
        node_id: id.into(),
        label: label.into(),
        parent: parent.map(Into::into),
    };
    vec![
        node("citizen", "Citizen life", None),
        node("residence", "Changing residence", Some("citizen")),
        node("taxes", "Paying local taxes", Some("citizen")),
        node("family", "Family and children", Some("citizen")),
    ]
}

/// Spawns `round(admin_count * participation_ratio)` simulated
/// administrations with the standard services and catalogues them.
/// Running it again with the same arguments changes nothing.
pub fn seed_demo(ssc: &Ssc, admin_count: usize, participation_ratio: f64, seed: u64) -> Result<usize, GatewayError> {
    let online = participating(admin_count, participation_ratio);
    let mut services = Vec::new();
    for i in 1..=online {
        let admin_id = demo_admin_id(i);
        let backends: BTreeMap<String, BackendSpec> = STANDARD_SERVICES
            .iter()
            .map(|(sid, title, _)| {
                let spec = BackendSpec {
                    response: format!("{title} from ${{admin}}: ${{payload}}"),
                    ..BackendSpec::default()
                };
                (sid.to_string(), spec)
            })
            .collect();
        if ssc.admin(&admin_id).is_none() {
            ssc.spawn_admin(SimulatedAdministration::new(&AdminSpec { admin_id: admin_id.clone(), backends }, seed))?;
        }
        for (sid, title, event) in STANDARD_SERVICES {
            services.push(ServiceDescriptor {
                service_id: format!("{admin_id}.{sid}"),
                provider_admin_id: admin_id.clone(),
                title: format!("{title} ({admin_id})"),
                description: String::new(),
                life_events: BTreeSet::from([event.to_string()]),
                usage_target: UsageTarget::Citizen,
                min_auth_level: AuthLevel::Weak,
                binding: Binding::SyncPort {
                    admin_id: admin_id.clone(),
                    service_id: sid.into(),
                },
            });
        }
    }
    seed_catalog(
        ssc,
        &CatalogSeed {
            life_events: taxonomy(),
            services,
        },
    )?;
    Ok(online)
}
