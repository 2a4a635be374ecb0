//! In-process multi-zone harness: a root → TLD → SLD hierarchy wired over an
//! in-memory datagram router with a manually advanced clock, so multi-hour
//! key lifetimes and rotation waits run in milliseconds. The router takes an
//! interceptor hook for attack scenarios and logs exchanges for round-trip
//! accounting.

pub mod attack;
pub mod bench;

pub use attack::RogueServer as StaleServer;

use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};

use thiserror::Error;

use crate::clock::SimClock;
use crate::crypto::{self, SigningKeypair};
use crate::delegation::DEFAULT_SKEW_SECS;
use crate::dns::{Name, RType};
use crate::keyserver::{
    KeyServer, KeyServerConfig, NameserverRegistration, PublishedKeys, RotationAction,
};
use crate::nameserver::{Nameserver, NameserverConfig};
use crate::resolver::{CachePolicy, Resolver, ResolverConfig, TrustAnchor};
use crate::transport::{Transport, TransportError};
use crate::wire;
use crate::zone::{ChildZoneKeys, ZoneData, ZoneError};

/// Anything that can answer a datagram at a router endpoint.
pub trait DatagramHandler: Send + Sync {
    fn handle(&self, datagram: &[u8], src: &str) -> Option<Vec<u8>>;
}

impl DatagramHandler for Nameserver {
    fn handle(&self, datagram: &[u8], src: &str) -> Option<Vec<u8>> {
        self.handle_datagram(datagram, src)
    }
}

impl DatagramHandler for KeyServer {
    fn handle(&self, datagram: &[u8], _src: &str) -> Option<Vec<u8>> {
        self.handle_channel_datagram(datagram)
    }
}

/// What an interceptor may do with a datagram in flight.
pub enum TapAction {
    Pass,
    Replace(Vec<u8>),
    Drop,
}

/// On-path adversary hook. Operates on raw datagrams only: the interceptor
/// has no keys.
pub trait Interceptor: Send {
    fn on_query(&mut self, _dest: &str, _datagram: &[u8]) -> TapAction {
        TapAction::Pass
    }
    fn on_response(&mut self, _dest: &str, _datagram: &[u8]) -> TapAction {
        TapAction::Pass
    }
}

#[derive(Debug, Clone)]
pub struct ExchangeRecord {
    pub dest: String,
    pub query_len: usize,
    pub response_len: Option<usize>,
    pub channel: bool,
}

/// In-memory datagram fabric. Endpoints are registered under server names;
/// an exchange is one synchronous round trip.
#[derive(Default)]
pub struct Router {
    endpoints: RwLock<HashMap<String, Arc<dyn DatagramHandler>>>,
    interceptor: Mutex<Option<Box<dyn Interceptor>>>,
    log: Mutex<Vec<ExchangeRecord>>,
    capture: Mutex<Option<Vec<Vec<u8>>>>,
}

impl Router {
    pub fn new() -> Arc<Router> {
        Arc::new(Router::default())
    }

    pub fn register(&self, name: impl Into<String>, handler: Arc<dyn DatagramHandler>) {
        self.endpoints.write().unwrap().insert(name.into(), handler);
    }

    pub fn deregister(&self, name: &str) -> Option<Arc<dyn DatagramHandler>> {
        self.endpoints.write().unwrap().remove(name)
    }

    pub fn set_interceptor(&self, interceptor: Option<Box<dyn Interceptor>>) {
        *self.interceptor.lock().unwrap() = interceptor;
    }

    pub fn take_log(&self) -> Vec<ExchangeRecord> {
        std::mem::take(&mut self.log.lock().unwrap())
    }

    pub fn clear_log(&self) {
        self.log.lock().unwrap().clear();
    }

    /// Protocol query exchanges (control-channel traffic excluded).
    pub fn query_exchange_count(&self) -> usize {
        self.log.lock().unwrap().iter().filter(|e| !e.channel).count()
    }

    /// Starts recording every raw datagram, both directions, channel
    /// traffic included.
    pub fn start_capture(&self) {
        *self.capture.lock().unwrap() = Some(Vec::new());
    }

    pub fn take_captured(&self) -> Vec<Vec<u8>> {
        self.capture.lock().unwrap().take().unwrap_or_default()
    }

    fn capture_datagram(&self, bytes: &[u8]) {
        if let Some(capture) = self.capture.lock().unwrap().as_mut() {
            capture.push(bytes.to_vec());
        }
    }
}

impl Transport for Router {
    fn exchange(&self, dest: &str, datagram: &[u8]) -> Result<Vec<u8>, TransportError> {
        let channel = crate::channel::is_channel_datagram(datagram);
        let mut query = datagram.to_vec();
        if !channel {
            if let Some(tap) = self.interceptor.lock().unwrap().as_mut() {
                match tap.on_query(dest, &query) {
                    TapAction::Pass => {}
                    TapAction::Replace(bytes) => query = bytes,
                    TapAction::Drop => {
                        self.log.lock().unwrap().push(ExchangeRecord {
                            dest: dest.to_string(),
                            query_len: datagram.len(),
                            response_len: None,
                            channel,
                        });
                        return Err(TransportError::Timeout(dest.to_string()));
                    }
                }
            }
        }
        self.capture_datagram(&query);
        let handler = self
            .endpoints
            .read()
            .unwrap()
            .get(dest)
            .cloned()
            .ok_or_else(|| TransportError::Unreachable(dest.to_string()))?;
        let mut response = handler.handle(&query, "resolver");
        if let Some(bytes) = response.as_ref() {
            self.capture_datagram(bytes);
        }
        if !channel {
            if let (Some(bytes), Some(tap)) =
                (response.as_ref(), self.interceptor.lock().unwrap().as_mut())
            {
                match tap.on_response(dest, bytes) {
                    TapAction::Pass => {}
                    TapAction::Replace(replacement) => response = Some(replacement),
                    TapAction::Drop => response = None,
                }
            }
        }
        self.log.lock().unwrap().push(ExchangeRecord {
            dest: dest.to_string(),
            query_len: datagram.len(),
            response_len: response.as_ref().map(|r| r.len()),
            channel,
        });
        response.ok_or_else(|| TransportError::Timeout(dest.to_string()))
    }
}

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("spec has no root zone (level 0, name `.`)")]
    NoRoot,
    #[error("duplicate zone {0}")]
    DuplicateZone(Name),
    #[error("zone {zone} has level {level} but its parent {parent} has level {parent_level}")]
    LevelGap { zone: Name, level: u32, parent: Name, parent_level: u32 },
    #[error("zone {0} has no parent zone in the spec")]
    OrphanZone(Name),
    #[error("zone {0} needs at least one nameserver")]
    NoNameservers(Name),
    #[error("parent zone {parent} does not delegate {child} in its zone file")]
    MissingDelegation { parent: Name, child: Name },
    #[error("zone {zone}: {source}")]
    Zone { zone: Name, source: ZoneError },
    #[error("bring-up failed for {zone}: {message}")]
    BringUp { zone: Name, message: String },
}

/// One zone in the testnet spec.
#[derive(Debug, Clone)]
pub struct ZoneSetup {
    pub name: Name,
    pub level: u32,
    pub ns_count: usize,
    /// Extra record lines appended to the generated zone file.
    pub extra_records: String,
    /// Full zone-file override; the generator is skipped entirely.
    pub zone_file_override: Option<String>,
}

impl ZoneSetup {
    pub fn new(name: &str, level: u32) -> ZoneSetup {
        ZoneSetup {
            name: Name::parse(name).expect("valid zone name"),
            level,
            ns_count: 1,
            extra_records: String::new(),
            zone_file_override: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TestnetSpec {
    pub zones: Vec<ZoneSetup>,
    pub stk_lifetime_secs: u32,
    pub max_skew_secs: u32,
    pub cache_policy: CachePolicy,
    /// Overrides both rotation waits; the negative rotation tests set this
    /// to zero to show the waits are load-bearing.
    pub rotation_wait_secs_override: Option<u64>,
    /// Record every datagram from bring-up onward, channel traffic
    /// included.
    pub capture_all_traffic: bool,
}

impl TestnetSpec {
    /// The canonical root → com. → example.com. hierarchy.
    pub fn three_level(extra_sld_records: &str) -> TestnetSpec {
        let mut sld = ZoneSetup::new("example.com.", 2);
        sld.extra_records = format!("www IN A 192.0.2.10\nnote IN TXT \"stage two\"\n{extra_sld_records}");
        TestnetSpec {
            zones: vec![ZoneSetup::new(".", 0), ZoneSetup::new("com.", 1), sld],
            stk_lifetime_secs: 6 * 3600,
            max_skew_secs: DEFAULT_SKEW_SECS,
            cache_policy: CachePolicy::default(),
            rotation_wait_secs_override: None,
            capture_all_traffic: false,
        }
    }
}

pub struct ZoneHandle {
    pub name: Name,
    pub level: u32,
    pub keyserver: Arc<KeyServer>,
    pub keyserver_address: String,
    pub nameservers: Vec<Arc<Nameserver>>,
    pub ns_names: Vec<Name>,
}

pub struct Testnet {
    pub clock: Arc<SimClock>,
    pub router: Arc<Router>,
    pub zones: Vec<ZoneHandle>,
    pub anchors: TrustAnchor,
    spec: TestnetSpec,
}

impl Testnet {
    pub fn build(spec: TestnetSpec) -> Result<Testnet, BuildError> {
        Self::build_with_clock(spec, SimClock::default_epoch())
    }

    pub fn build_with_clock(spec: TestnetSpec, clock: Arc<SimClock>) -> Result<Testnet, BuildError> {
        let mut zones = spec.zones.clone();
        zones.sort_by_key(|z| z.level);
        if zones.first().map(|z| (z.level, z.name.is_root())) != Some((0, true)) {
            return Err(BuildError::NoRoot);
        }
        for zone in &zones {
            if zones.iter().filter(|z| z.name == zone.name).count() > 1 {
                return Err(BuildError::DuplicateZone(zone.name.clone()));
            }
            if zone.ns_count == 0 {
                return Err(BuildError::NoNameservers(zone.name.clone()));
            }
        }
        // Every non-root zone needs a spec parent exactly one level up.
        for zone in zones.iter().filter(|z| z.level > 0) {
            let parent = Self::find_parent(&zones, &zone.name)
                .ok_or_else(|| BuildError::OrphanZone(zone.name.clone()))?;
            if parent.level + 1 != zone.level {
                return Err(BuildError::LevelGap {
                    zone: zone.name.clone(),
                    level: zone.level,
                    parent: parent.name.clone(),
                    parent_level: parent.level,
                });
            }
        }

        let router = Router::new();
        if spec.capture_all_traffic {
            router.start_capture();
        }

        // Key servers first: child public keys must exist before parents
        // load their zone data.
        let mut keyservers: Vec<Arc<KeyServer>> = Vec::new();
        for zone in &zones {
            let published_ttl = spec.cache_policy.key_ttl_secs(zone.level);
            let config = KeyServerConfig {
                zone_name: zone.name.clone(),
                zone_level: zone.level,
                max_stk_lifetime_secs: spec.stk_lifetime_secs.max(1),
                max_skew_secs: spec.max_skew_secs,
                published_key_ttl_secs: published_ttl,
                rotation_wait_override_secs: spec.rotation_wait_secs_override,
            };
            keyservers.push(Arc::new(KeyServer::new(
                config,
                SigningKeypair::generate(),
                crypto::gen_agreement_keypair(),
                crypto::gen_agreement_keypair(),
                clock.clone(),
            )));
        }

        let ns_names: Vec<Vec<Name>> = zones.iter().map(Self::nameserver_names).collect();

        // Zone files plus sidecars carrying each child's published keys.
        let mut zone_datas: Vec<Arc<ZoneData>> = Vec::new();
        for (idx, zone) in zones.iter().enumerate() {
            let child_entries: Vec<(Name, Vec<Name>, PublishedKeys)> = zones
                .iter()
                .enumerate()
                .filter(|(_, z)| {
                    z.level == zone.level + 1
                        && Self::find_parent(&zones, &z.name).map(|p| p.name == zone.name) == Some(true)
                })
                .map(|(i, z)| (z.name.clone(), ns_names[i].clone(), keyservers[i].published_keys()))
                .collect();
            let file = match &zone.zone_file_override {
                Some(text) => text.clone(),
                None => Self::generate_zone_file(zone, &ns_names[idx], &child_entries),
            };
            let sidecar: String = child_entries
                .iter()
                .map(|(name, _, keys)| {
                    ZoneData::sidecar_line(
                        name,
                        &ChildZoneKeys {
                            signing: keys.signing.clone(),
                            agreement: keys.agreement,
                        },
                    ) + "\n"
                })
                .collect();
            let data = ZoneData::load(&zone.name, zone.level, &file, &sidecar)
                .map_err(|source| BuildError::Zone { zone: zone.name.clone(), source })?;
            for (child, _, _) in &child_entries {
                if !data.delegations.contains_key(child) {
                    return Err(BuildError::MissingDelegation {
                        parent: zone.name.clone(),
                        child: child.clone(),
                    });
                }
            }
            zone_datas.push(Arc::new(data));
        }

        // Nameservers: register with their key server and the router.
        let mut handles = Vec::new();
        for (idx, zone) in zones.iter().enumerate() {
            let keyserver = keyservers[idx].clone();
            let keyserver_address = format!("ks.{}", display_zone(&zone.name));
            router.register(keyserver_address.clone(), keyserver.clone());
            let mut nameservers = Vec::new();
            for (ns_index, ns_name) in ns_names[idx].iter().enumerate() {
                let ns_id = ns_index as u32 + 1;
                let channel = crypto::gen_agreement_keypair();
                keyserver
                    .register_nameserver(NameserverRegistration {
                        nameserver_id: ns_id,
                        channel_static_pub: channel.public,
                        address: ns_name.as_str().to_string(),
                    })
                    .map_err(|e| BuildError::BringUp {
                        zone: zone.name.clone(),
                        message: e.to_string(),
                    })?;
                let mut config = NameserverConfig::new(
                    ns_id,
                    zone.name.clone(),
                    zone.level,
                    keyserver_address.clone(),
                );
                config.stk_lifetime_secs = spec.stk_lifetime_secs;
                let ns = Arc::new(
                    Nameserver::new(
                        config,
                        zone_datas[idx].clone(),
                        channel.private,
                        &keyserver.channel_public(),
                        router.clone() as Arc<dyn Transport>,
                        clock.clone(),
                    )
                    .map_err(|e| BuildError::BringUp {
                        zone: zone.name.clone(),
                        message: e.to_string(),
                    })?,
                );
                router.register(ns_name.as_str(), ns.clone());
                nameservers.push(ns);
            }
            handles.push(ZoneHandle {
                name: zone.name.clone(),
                level: zone.level,
                keyserver,
                keyserver_address,
                nameservers,
                ns_names: ns_names[idx].clone(),
            });
        }

        // Bring-up: agreement keys to every nameserver, then credentials.
        for handle in &handles {
            handle
                .keyserver
                .provision_all(router.as_ref())
                .map_err(|e| BuildError::BringUp {
                    zone: handle.name.clone(),
                    message: e.to_string(),
                })?;
            for ns in &handle.nameservers {
                ns.refresh_credential().map_err(|e| BuildError::BringUp {
                    zone: handle.name.clone(),
                    message: e.to_string(),
                })?;
            }
        }

        let root = &handles[0];
        let published = root.keyserver.published_keys();
        let anchors = TrustAnchor {
            root_signing: published.signing,
            root_agreement: published.agreement,
            root_ns: root.ns_names.iter().map(|n| n.as_str().to_string()).collect(),
        };
        router.clear_log();
        Ok(Testnet { clock, router, zones: handles, anchors, spec })
    }

    fn find_parent<'a>(zones: &'a [ZoneSetup], name: &Name) -> Option<&'a ZoneSetup> {
        let mut candidate = name.parent();
        loop {
            if let Some(z) = zones.iter().find(|z| z.name == candidate) {
                return Some(z);
            }
            if candidate.is_root() {
                return None;
            }
            candidate = candidate.parent();
        }
    }

    fn nameserver_names(zone: &ZoneSetup) -> Vec<Name> {
        (1..=zone.ns_count)
            .map(|i| {
                let host = if zone.name.is_root() {
                    format!("ns{i}.root.")
                } else {
                    format!("ns{i}.{}", zone.name.as_str())
                };
                Name::parse(&host).expect("generated ns name")
            })
            .collect()
    }

    fn generate_zone_file(
        zone: &ZoneSetup,
        ns_names: &[Name],
        children: &[(Name, Vec<Name>, PublishedKeys)],
    ) -> String {
        let apex = zone.name.as_str();
        let primary = ns_names[0].as_str();
        // NS sets and glue live longer than ordinary records, so warm
        // resolvers can keep reaching a zone after its answers expire.
        let mut file = String::from("$TTL 300\n");
        file.push_str(&format!("{apex} IN SOA {primary} admin.{primary} 1 3600 600 86400 60\n"));
        for ns in ns_names {
            file.push_str(&format!("{apex} 3600 IN NS {}\n", ns.as_str()));
        }
        for (i, ns) in ns_names.iter().enumerate() {
            file.push_str(&format!("{} 3600 IN A 10.{}.0.{}\n", ns.as_str(), zone.level, i + 1));
        }
        for (child, child_ns, _) in children {
            for (i, ns) in child_ns.iter().enumerate() {
                file.push_str(&format!("{} 3600 IN NS {}\n", child.as_str(), ns.as_str()));
                file.push_str(&format!(
                    "{} 3600 IN A 10.{}.1.{}\n",
                    ns.as_str(),
                    zone.level + 1,
                    i + 1
                ));
            }
        }
        if !zone.extra_records.is_empty() {
            file.push_str(&zone.extra_records);
            if !zone.extra_records.ends_with('\n') {
                file.push('\n');
            }
        }
        file
    }

    pub fn zone(&self, name: &str) -> &ZoneHandle {
        let name = Name::parse(name).expect("valid zone name");
        self.zones
            .iter()
            .find(|z| z.name == name)
            .unwrap_or_else(|| panic!("no zone {name} in testnet"))
    }

    pub fn parent_of(&self, child: &Name) -> Option<&ZoneHandle> {
        self.zones
            .iter()
            .filter(|z| child.is_within(&z.name) && z.name != *child)
            .max_by_key(|z| z.level)
    }

    /// A fresh resolver wired to this testnet's anchors, policy, and clock.
    pub fn resolver(&self) -> Resolver {
        let config = ResolverConfig {
            cache_policy: self.spec.cache_policy.clone(),
            skew_secs: self.spec.max_skew_secs,
            ..ResolverConfig::default()
        };
        Resolver::new(self.anchors.clone(), config, self.clock.clone())
    }

    pub fn transport(&self) -> &Router {
        self.router.as_ref()
    }

    /// Runs credential refresh checks on every nameserver, the way daemon
    /// maintenance timers would.
    pub fn tick_all(&self) {
        for zone in &self.zones {
            for ns in &zone.nameservers {
                ns.maybe_refresh();
            }
        }
    }

    /// Applies a child zone's published keys to the parent zone's data on
    /// every parent nameserver (the zone-owner side of a rotation).
    pub fn apply_parent_publish(&self, child: &Name, keys: &PublishedKeys) {
        let parent = self.parent_of(child).expect("child zone has a parent");
        for ns in &parent.nameservers {
            let snapshot = ns.zone_snapshot();
            let updated = snapshot.with_updated_delegation(
                child,
                ChildZoneKeys { signing: keys.signing.clone(), agreement: keys.agreement },
            );
            ns.set_zone(Arc::new(updated));
        }
    }

    /// Advances a rotation as far as it can go right now, applying parent
    /// publishes. Returns `Waiting` (advance the clock and pump again) or
    /// `Complete`.
    pub fn pump_rotation(&self, zone_name: &Name, kind: RotationKind) -> RotationAction {
        let handle = self.zone(zone_name.as_str());
        loop {
            let step = match kind {
                RotationKind::Agreement => {
                    handle.keyserver.agreement_rotation_step(self.router.as_ref())
                }
                RotationKind::Signing => handle.keyserver.signing_rotation_step(),
            };
            match step {
                Ok(RotationAction::PublishToParent(keys)) => {
                    self.apply_parent_publish(zone_name, &keys);
                    if handle.keyserver.confirm_parent_update().is_err() {
                        return RotationAction::Complete;
                    }
                }
                Ok(RotationAction::InProgress { pending }) => {
                    return RotationAction::InProgress { pending }
                }
                Ok(RotationAction::Waiting { until_millis }) => {
                    return RotationAction::Waiting { until_millis }
                }
                Ok(RotationAction::Complete) => return RotationAction::Complete,
                Err(_) => return RotationAction::Complete,
            }
        }
    }

    /// Measures encoded response size against the decrypted DNS payload it
    /// carries, via a real exchange with the zone's first nameserver.
    pub fn measure_overhead(
        &self,
        zone_name: &str,
        query_name: &Name,
        rtype: RType,
    ) -> Result<OverheadRow, String> {
        let handle = self.zone(zone_name);
        let ephemeral = crypto::gen_agreement_keypair();
        let dns_query = crate::dns::Message::query(rand::random(), query_name.clone(), rtype);
        let datagram = wire::encode_query_plain(&ephemeral.public, &dns_query.encode())
            .map_err(|e| e.to_string())?;
        let query_len = datagram.len();
        let reply = self
            .router
            .exchange(handle.ns_names[0].as_str(), &datagram)
            .map_err(|e| e.to_string())?;
        let envelope = wire::decode_response_envelope(&reply).map_err(|e| e.to_string())?;
        let master = crypto::dh(&ephemeral.private, &envelope.server_ephemeral)
            .map_err(|e| e.to_string())?;
        let inner = wire::open_response(&envelope, &master).map_err(|e| format!("{e:?}"))?;
        Ok(OverheadRow {
            query_len,
            dns_payload: inner.dns_response.len(),
            total: reply.len(),
            overhead: reply.len() - inner.dns_response.len(),
            delegating: inner.child_keys.is_some(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RotationKind {
    Agreement,
    Signing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OverheadRow {
    pub query_len: usize,
    pub dns_payload: usize,
    pub total: usize,
    pub overhead: usize,
    pub delegating: bool,
}

fn display_zone(name: &Name) -> String {
    if name.is_root() {
        "root.".to_string()
    } else {
        name.as_str().to_string()
    }
}
