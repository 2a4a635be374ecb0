//! The zone's central key server. It is the only holder of the zone's
//! long-term signing key: nameservers send short-term credential structures
//! over the authenticated channel and get them signed; the signing key never
//! rides in any message. The key server also owns the long-term agreement
//! key (whose private half IS distributed to every nameserver) and drives
//! the two long-term key rotation procedures.
//!
//! State that must survive a restart — registrations, anti-replay counters,
//! issuance history, and in-flight rotations — goes to an append-only
//! journal of length-prefixed JSON records.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{self, ChannelEndpoint, ControlMessage, RejectKind, KEY_SERVER_SENDER};
use crate::clock::Clock;
use crate::crypto::{
    self, AgreementKeypair, AgreementPrivate, AgreementPublic, SharedSecret, SigningKeypair,
    VerifyKey,
};
use crate::delegation::{self, IssuePolicy, ShortTermKeyStructure, SignedShortTermKeyStructure};
use crate::dns::Name;
use crate::transport::Transport;

#[derive(Debug, Error)]
pub enum KeyServerError {
    #[error("a rotation of this key kind is already in flight")]
    RotationInFlight,
    #[error("no rotation of this key kind is in flight")]
    NoRotation,
    #[error("rotation is not awaiting a parent-zone update")]
    NotAwaitingParent,
    #[error("nameserver {0} is not registered")]
    UnknownNameserver(u32),
    #[error("journal: {0}")]
    Journal(String),
    #[error("channel: {0}")]
    Channel(#[from] channel::ChannelError),
}

/// Why a signing request was refused.
#[derive(Debug, PartialEq, Eq)]
pub enum Reject {
    UnknownNameserver,
    Policy(delegation::RejectReason),
}

/// A nameserver known to the key server.
#[derive(Debug, Clone)]
pub struct NameserverRegistration {
    pub nameserver_id: u32,
    pub channel_static_pub: AgreementPublic,
    pub address: String,
}

#[derive(Debug, Clone)]
pub struct KeyServerConfig {
    pub zone_name: Name,
    pub zone_level: u32,
    /// Ceiling on credential lifetimes this server will sign.
    pub max_stk_lifetime_secs: u32,
    pub max_skew_secs: u32,
    /// How long resolvers cache this zone's long-term keys; rotation waits
    /// derive from it.
    pub published_key_ttl_secs: u64,
    /// Explicit rotation wait in seconds, overriding the derived
    /// TTL-plus-skew values. For operators who know better, and for tests
    /// that prove the waits matter.
    pub rotation_wait_override_secs: Option<u64>,
}

impl KeyServerConfig {
    fn cache_wait_millis(&self) -> u64 {
        self.rotation_wait_override_secs
            .unwrap_or(self.published_key_ttl_secs + u64::from(self.max_skew_secs))
            * 1000
    }

    fn stk_expiry_wait_millis(&self) -> u64 {
        self.rotation_wait_override_secs
            .unwrap_or(u64::from(self.max_stk_lifetime_secs) + u64::from(self.max_skew_secs))
            * 1000
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IssuanceRecord {
    pub nameserver_id: u32,
    pub inception: u32,
    pub expiration: u32,
}

/// What the zone owner must publish in the parent zone right now.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublishedKeys {
    pub signing: Vec<VerifyKey>,
    pub agreement: AgreementPublic,
}

/// Result of one rotation driver step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RotationAction {
    /// Distribution to nameservers still has unacked peers; call again.
    InProgress { pending: Vec<u32> },
    /// The parent zone must now publish exactly these keys; apply the update
    /// and call `confirm_parent_update`.
    PublishToParent(PublishedKeys),
    /// Mandated cache-expiry wait; step again once the clock passes `until`.
    Waiting { until_millis: u64 },
    /// Rotation finished.
    Complete,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
enum AgreementPhase {
    Distribute,
    AwaitParentPublish,
    WaitCaches { until_millis: u64 },
    RemoveOld,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
enum SigningPhase {
    AwaitParentPublishBoth,
    WaitCachesBoth { until_millis: u64 },
    WaitStkExpiry { until_millis: u64 },
    AwaitParentRemoveOld,
}

#[derive(Debug)]
struct AgreementRotation {
    new_generation: u32,
    new_key: AgreementKeypair,
    old_generation: u32,
    pending: BTreeSet<u32>,
    phase: AgreementPhase,
}

#[derive(Debug)]
struct SigningRotation {
    new_key: SigningKeypair,
    phase: SigningPhase,
}

struct PeerState {
    shared: SharedSecret,
    endpoint: ChannelEndpoint,
    last_counter: u64,
    agreement_generations: BTreeSet<u32>,
}

struct State {
    signing_current: SigningKeypair,
    signing_previous: Option<SigningKeypair>,
    agreement_current: (u32, AgreementKeypair),
    agreement_previous: Option<(u32, AgreementKeypair)>,
    registrations: BTreeMap<u32, NameserverRegistration>,
    peers: BTreeMap<u32, PeerState>,
    issuance_log: Vec<IssuanceRecord>,
    agreement_rotation: Option<AgreementRotation>,
    signing_rotation: Option<SigningRotation>,
}

pub struct KeyServer {
    config: KeyServerConfig,
    channel_key: AgreementKeypair,
    clock: Arc<dyn Clock>,
    state: Mutex<State>,
    journal: Mutex<Option<Journal>>,
}

impl KeyServer {
    pub fn new(
        config: KeyServerConfig,
        signing: SigningKeypair,
        agreement: AgreementKeypair,
        channel_key: AgreementKeypair,
        clock: Arc<dyn Clock>,
    ) -> Self {
        Self {
            config,
            channel_key,
            clock,
            state: Mutex::new(State {
                signing_current: signing,
                signing_previous: None,
                agreement_current: (1, agreement),
                agreement_previous: None,
                registrations: BTreeMap::new(),
                peers: BTreeMap::new(),
                issuance_log: Vec::new(),
                agreement_rotation: None,
                signing_rotation: None,
            }),
            journal: Mutex::new(None),
        }
    }

    /// Attaches a journal file, replaying it first if it already has records.
    pub fn with_journal(self, path: &Path) -> Result<Self, KeyServerError> {
        let events = Journal::read_all(path)?;
        for event in events {
            self.apply_event(&event)?;
        }
        let journal = Journal::open(path)?;
        *self.journal.lock().unwrap() = Some(journal);
        Ok(self)
    }

    pub fn channel_public(&self) -> AgreementPublic {
        self.channel_key.public
    }

    pub fn zone_name(&self) -> &Name {
        &self.config.zone_name
    }

    fn policy(&self) -> IssuePolicy {
        IssuePolicy {
            max_lifetime_secs: self.config.max_stk_lifetime_secs,
            max_skew_secs: self.config.max_skew_secs,
            zone_level: self.config.zone_level,
        }
    }

    fn record(&self, event: JournalEvent) {
        if let Some(journal) = self.journal.lock().unwrap().as_mut() {
            journal.append(&event);
        }
    }

    /// Registers a nameserver and derives its channel state.
    pub fn register_nameserver(&self, reg: NameserverRegistration) -> Result<(), KeyServerError> {
        self.record(JournalEvent::Registration {
            nameserver_id: reg.nameserver_id,
            channel_pub: reg.channel_static_pub.to_hex(),
            address: reg.address.clone(),
        });
        self.install_registration(reg)
    }

    fn install_registration(&self, reg: NameserverRegistration) -> Result<(), KeyServerError> {
        let mut state = self.state.lock().unwrap();
        let shared = crypto::dh(&self.channel_key.private, &reg.channel_static_pub)
            .map_err(|_| KeyServerError::UnknownNameserver(reg.nameserver_id))?;
        let mut endpoint = ChannelEndpoint::new(
            KEY_SERVER_SENDER,
            &self.channel_key.private,
            &reg.channel_static_pub,
        )
        .map_err(|_| KeyServerError::UnknownNameserver(reg.nameserver_id))?;
        endpoint.resume_counter(self.clock.now_millis().max(1));
        // Re-registration must not reset replay protection.
        let last_counter = state
            .peers
            .get(&reg.nameserver_id)
            .map(|p| p.last_counter)
            .unwrap_or(0);
        state.peers.insert(
            reg.nameserver_id,
            PeerState {
                shared,
                endpoint,
                last_counter,
                agreement_generations: BTreeSet::new(),
            },
        );
        state.registrations.insert(reg.nameserver_id, reg);
        Ok(())
    }

    pub fn registered_ids(&self) -> Vec<u32> {
        self.state.lock().unwrap().registrations.keys().copied().collect()
    }

    pub fn issuance_log(&self) -> Vec<IssuanceRecord> {
        self.state.lock().unwrap().issuance_log.clone()
    }

    /// The keys the parent zone should currently publish for this zone.
    pub fn published_keys(&self) -> PublishedKeys {
        let state = self.state.lock().unwrap();
        Self::published_keys_locked(&state)
    }

    fn published_keys_locked(state: &State) -> PublishedKeys {
        let mut signing = vec![state.signing_current.public()];
        if let Some(rotation) = &state.signing_rotation {
            match rotation.phase {
                SigningPhase::AwaitParentPublishBoth
                | SigningPhase::WaitCachesBoth { .. }
                | SigningPhase::WaitStkExpiry { .. } => {
                    signing.push(rotation.new_key.public());
                }
                SigningPhase::AwaitParentRemoveOld => {}
            }
        }
        if let Some(previous) = &state.signing_previous {
            // Issuance already switched; old key stays published until the
            // final rotation phase removes it.
            signing.insert(0, previous.public());
        }
        signing.dedup_by_key(|k| k.0);
        let agreement = match &state.agreement_rotation {
            Some(rotation) if rotation.phase != AgreementPhase::Distribute => {
                rotation.new_key.public
            }
            _ => state.agreement_current.1.public,
        };
        PublishedKeys { signing, agreement }
    }

    /// Signs a credential structure for a registered nameserver. The caller
    /// is responsible for having authenticated the requester (the channel
    /// path does; this is also the direct library surface).
    pub fn handle_signing_request(
        &self,
        nameserver_id: u32,
        structure: ShortTermKeyStructure,
    ) -> Result<SignedShortTermKeyStructure, Reject> {
        let mut state = self.state.lock().unwrap();
        if !state.registrations.contains_key(&nameserver_id) {
            return Err(Reject::UnknownNameserver);
        }
        let signed = delegation::issue(
            structure,
            &state.signing_current,
            self.clock.now_secs(),
            &self.policy(),
        )
        .map_err(Reject::Policy)?;
        let record = IssuanceRecord {
            nameserver_id,
            inception: structure.inception,
            expiration: structure.expiration,
        };
        state.issuance_log.push(record);
        drop(state);
        self.record(JournalEvent::Issuance {
            nameserver_id,
            inception: record.inception,
            expiration: record.expiration,
        });
        log::info!(
            "issued credential: ns={} inception={} expiration={}",
            nameserver_id,
            record.inception,
            record.expiration
        );
        Ok(signed)
    }

    /// Serves one channel datagram. Unknown senders and unauthenticated or
    /// replayed messages are dropped silently.
    pub fn handle_channel_datagram(&self, datagram: &[u8]) -> Option<Vec<u8>> {
        let sender = channel::peek_sender(datagram).ok()?;
        // Replay check and counter advance are one critical section, so a
        // duplicated datagram can never be processed twice.
        let (message, counter) = {
            let mut state = self.state.lock().unwrap();
            let peer = state.peers.get_mut(&sender)?;
            let (message, counter) = channel::open(datagram, &peer.shared, peer.last_counter).ok()?;
            peer.last_counter = counter;
            (message, counter)
        };
        self.record(JournalEvent::ReplayCounter { nameserver_id: sender, counter });
        let reply = match message {
            ControlMessage::SignRequest(structure) => {
                match self.handle_signing_request(sender, structure) {
                    Ok(signed) => ControlMessage::SignResponse(signed),
                    Err(Reject::UnknownNameserver) => {
                        ControlMessage::SignReject(RejectKind::UnknownNameserver)
                    }
                    Err(Reject::Policy(reason)) => {
                        ControlMessage::SignReject(RejectKind::Policy(reason))
                    }
                }
            }
            _ => return None,
        };
        let mut state = self.state.lock().unwrap();
        let peer = state.peers.get_mut(&sender)?;
        Some(peer.endpoint.seal(&reply))
    }

    /// Sends one control message to a registered nameserver and returns the
    /// acknowledged generation, if any.
    fn push_to_nameserver(
        &self,
        transport: &dyn Transport,
        nameserver_id: u32,
        message: &ControlMessage,
    ) -> Result<u32, KeyServerError> {
        let (address, datagram) = {
            let mut state = self.state.lock().unwrap();
            let reg = state
                .registrations
                .get(&nameserver_id)
                .ok_or(KeyServerError::UnknownNameserver(nameserver_id))?;
            let address = reg.address.clone();
            let peer = state
                .peers
                .get_mut(&nameserver_id)
                .ok_or(KeyServerError::UnknownNameserver(nameserver_id))?;
            (address, peer.endpoint.seal(message))
        };
        let reply = transport
            .exchange(&address, &datagram)
            .map_err(|e| KeyServerError::Journal(e.to_string()))?;
        let mut state = self.state.lock().unwrap();
        let peer = state
            .peers
            .get_mut(&nameserver_id)
            .ok_or(KeyServerError::UnknownNameserver(nameserver_id))?;
        let (response, counter) = channel::open(&reply, &peer.shared, peer.last_counter)?;
        peer.last_counter = counter;
        match response {
            ControlMessage::Ack { generation } => Ok(generation),
            _ => Err(KeyServerError::Channel(channel::ChannelError::Malformed)),
        }
    }

    /// Distributes the given agreement generation's private half to one
    /// nameserver; idempotent. Records which generations the peer holds.
    pub fn distribute_agreement_private(
        &self,
        transport: &dyn Transport,
        nameserver_id: u32,
        generation: u32,
        private: &AgreementPrivate,
    ) -> Result<(), KeyServerError> {
        let message = ControlMessage::InstallAgreementKey {
            generation,
            private: private.to_bytes(),
        };
        let acked = self.push_to_nameserver(transport, nameserver_id, &message)?;
        if acked != generation {
            return Err(KeyServerError::Channel(channel::ChannelError::Malformed));
        }
        let mut state = self.state.lock().unwrap();
        if let Some(peer) = state.peers.get_mut(&nameserver_id) {
            peer.agreement_generations.insert(generation);
        }
        Ok(())
    }

    /// Distributes the current agreement key to every registered nameserver;
    /// used at zone bring-up.
    pub fn provision_all(&self, transport: &dyn Transport) -> Result<(), KeyServerError> {
        let (generation, private) = {
            let state = self.state.lock().unwrap();
            (state.agreement_current.0, state.agreement_current.1.private.clone())
        };
        for id in self.registered_ids() {
            self.distribute_agreement_private(transport, id, generation, &private)?;
        }
        Ok(())
    }

    /// Which agreement generations each nameserver has acknowledged.
    pub fn acked_generations(&self, nameserver_id: u32) -> BTreeSet<u32> {
        self.state
            .lock()
            .unwrap()
            .peers
            .get(&nameserver_id)
            .map(|p| p.agreement_generations.clone())
            .unwrap_or_default()
    }

    // --- agreement key rotation ------------------------------------------

    pub fn begin_agreement_rotation(&self) -> Result<(), KeyServerError> {
        let mut state = self.state.lock().unwrap();
        if state.agreement_rotation.is_some() {
            return Err(KeyServerError::RotationInFlight);
        }
        let new_key = crypto::gen_agreement_keypair();
        let old_generation = state.agreement_current.0;
        let new_generation = old_generation + 1;
        let pending: BTreeSet<u32> = state.registrations.keys().copied().collect();
        state.agreement_rotation = Some(AgreementRotation {
            new_generation,
            new_key: new_key.clone(),
            old_generation,
            pending,
            phase: AgreementPhase::Distribute,
        });
        drop(state);
        self.record(JournalEvent::AgreementRotation {
            phase: AgreementPhase::Distribute,
            generation: new_generation,
            new_private: Some(hex::encode(new_key.private.to_bytes())),
        });
        Ok(())
    }

    pub fn agreement_rotation_step(
        &self,
        transport: &dyn Transport,
    ) -> Result<RotationAction, KeyServerError> {
        let now = self.clock.now_millis();
        let (phase, new_generation, new_private, old_generation, pending) = {
            let state = self.state.lock().unwrap();
            let rotation = state.agreement_rotation.as_ref().ok_or(KeyServerError::NoRotation)?;
            (
                rotation.phase.clone(),
                rotation.new_generation,
                rotation.new_key.private.clone(),
                rotation.old_generation,
                rotation.pending.clone(),
            )
        };
        match phase {
            AgreementPhase::Distribute => {
                let mut still_pending = Vec::new();
                for id in pending {
                    match self.distribute_agreement_private(transport, id, new_generation, &new_private)
                    {
                        Ok(()) => {
                            let mut state = self.state.lock().unwrap();
                            if let Some(r) = state.agreement_rotation.as_mut() {
                                r.pending.remove(&id);
                            }
                        }
                        Err(_) => still_pending.push(id),
                    }
                }
                if !still_pending.is_empty() {
                    return Ok(RotationAction::InProgress { pending: still_pending });
                }
                self.set_agreement_phase(AgreementPhase::AwaitParentPublish, new_generation);
                let state = self.state.lock().unwrap();
                Ok(RotationAction::PublishToParent(Self::published_keys_locked(&state)))
            }
            AgreementPhase::AwaitParentPublish => {
                let state = self.state.lock().unwrap();
                Ok(RotationAction::PublishToParent(Self::published_keys_locked(&state)))
            }
            AgreementPhase::WaitCaches { until_millis } => {
                if now < until_millis {
                    return Ok(RotationAction::Waiting { until_millis });
                }
                self.set_agreement_phase(AgreementPhase::RemoveOld, new_generation);
                self.agreement_rotation_step(transport)
            }
            AgreementPhase::RemoveOld => {
                let ids = self.registered_ids();
                let mut still_pending = Vec::new();
                for id in ids {
                    let message = ControlMessage::RemoveAgreementKey { generation: old_generation };
                    match self.push_to_nameserver(transport, id, &message) {
                        Ok(_) => {
                            let mut state = self.state.lock().unwrap();
                            if let Some(peer) = state.peers.get_mut(&id) {
                                peer.agreement_generations.remove(&old_generation);
                            }
                        }
                        Err(_) => still_pending.push(id),
                    }
                }
                if !still_pending.is_empty() {
                    return Ok(RotationAction::InProgress { pending: still_pending });
                }
                let mut state = self.state.lock().unwrap();
                let rotation = state.agreement_rotation.take().unwrap();
                state.agreement_previous = None;
                state.agreement_current = (rotation.new_generation, rotation.new_key);
                drop(state);
                self.record(JournalEvent::AgreementRotationDone { generation: new_generation });
                Ok(RotationAction::Complete)
            }
        }
    }

    fn set_agreement_phase(&self, phase: AgreementPhase, generation: u32) {
        {
            let mut state = self.state.lock().unwrap();
            if let Some(rotation) = state.agreement_rotation.as_mut() {
                rotation.phase = phase.clone();
                if phase != AgreementPhase::Distribute {
                    // Both generations are now decryptable zone-wide.
                    let old = state.agreement_current.clone();
                    state.agreement_previous = Some(old);
                }
            }
        }
        self.record(JournalEvent::AgreementRotation { phase, generation, new_private: None });
    }

    /// The zone owner confirms the parent zone now publishes the keys from
    /// the last `PublishToParent` action.
    pub fn confirm_parent_update(&self) -> Result<(), KeyServerError> {
        let now = self.clock.now_millis();
        let wait = self.config.cache_wait_millis();
        let mut state = self.state.lock().unwrap();
        if let Some(rotation) = state.agreement_rotation.as_mut() {
            if rotation.phase == AgreementPhase::AwaitParentPublish {
                rotation.phase = AgreementPhase::WaitCaches { until_millis: now + wait };
                let (phase, generation) = (rotation.phase.clone(), rotation.new_generation);
                drop(state);
                self.record(JournalEvent::AgreementRotation { phase, generation, new_private: None });
                return Ok(());
            }
        }
        if let Some(rotation) = state.signing_rotation.as_mut() {
            match rotation.phase {
                SigningPhase::AwaitParentPublishBoth => {
                    rotation.phase = SigningPhase::WaitCachesBoth { until_millis: now + wait };
                    let phase = rotation.phase.clone();
                    drop(state);
                    self.record(JournalEvent::SigningRotation { phase, new_private: None });
                    return Ok(());
                }
                SigningPhase::AwaitParentRemoveOld => {
                    state.signing_rotation = None;
                    state.signing_previous = None;
                    drop(state);
                    self.record(JournalEvent::SigningRotationDone);
                    return Ok(());
                }
                _ => {}
            }
        }
        Err(KeyServerError::NotAwaitingParent)
    }

    // --- signing key rotation --------------------------------------------

    pub fn begin_signing_rotation(&self) -> Result<(), KeyServerError> {
        let mut state = self.state.lock().unwrap();
        if state.signing_rotation.is_some() {
            return Err(KeyServerError::RotationInFlight);
        }
        let new_key = SigningKeypair::generate();
        state.signing_rotation = Some(SigningRotation {
            new_key: new_key.clone(),
            phase: SigningPhase::AwaitParentPublishBoth,
        });
        drop(state);
        self.record(JournalEvent::SigningRotation {
            phase: SigningPhase::AwaitParentPublishBoth,
            new_private: Some(hex::encode(new_key.private_bytes())),
        });
        Ok(())
    }

    pub fn signing_rotation_step(&self) -> Result<RotationAction, KeyServerError> {
        let now = self.clock.now_millis();
        let stk_wait = self.config.stk_expiry_wait_millis();
        loop {
            let mut state = self.state.lock().unwrap();
            let rotation = state.signing_rotation.as_mut().ok_or(KeyServerError::NoRotation)?;
            match rotation.phase.clone() {
                SigningPhase::AwaitParentPublishBoth | SigningPhase::AwaitParentRemoveOld => {
                    let keys = Self::published_keys_locked(&state);
                    return Ok(RotationAction::PublishToParent(keys));
                }
                SigningPhase::WaitCachesBoth { until_millis } => {
                    if now < until_millis {
                        return Ok(RotationAction::Waiting { until_millis });
                    }
                    // Switch issuance to the new key; credentials signed by
                    // the old key stay in service until they expire.
                    let new_key = rotation.new_key.clone();
                    rotation.phase = SigningPhase::WaitStkExpiry { until_millis: now + stk_wait };
                    let phase = rotation.phase.clone();
                    let old = std::mem::replace(&mut state.signing_current, new_key);
                    state.signing_previous = Some(old);
                    drop(state);
                    self.record(JournalEvent::SigningRotation { phase, new_private: None });
                }
                SigningPhase::WaitStkExpiry { until_millis } => {
                    if now < until_millis {
                        return Ok(RotationAction::Waiting { until_millis });
                    }
                    rotation.phase = SigningPhase::AwaitParentRemoveOld;
                    state.signing_previous = None;
                    drop(state);
                    self.record(JournalEvent::SigningRotation {
                        phase: SigningPhase::AwaitParentRemoveOld,
                        new_private: None,
                    });
                }
            }
        }
    }

    // --- journal replay ----------------------------------------------------

    fn apply_event(&self, event: &JournalEvent) -> Result<(), KeyServerError> {
        match event {
            JournalEvent::Registration { nameserver_id, channel_pub, address } => {
                let channel_static_pub = AgreementPublic::from_hex(channel_pub)
                    .map_err(|e| KeyServerError::Journal(e.to_string()))?;
                self.install_registration(NameserverRegistration {
                    nameserver_id: *nameserver_id,
                    channel_static_pub,
                    address: address.clone(),
                })?;
            }
            JournalEvent::Issuance { nameserver_id, inception, expiration } => {
                self.state.lock().unwrap().issuance_log.push(IssuanceRecord {
                    nameserver_id: *nameserver_id,
                    inception: *inception,
                    expiration: *expiration,
                });
            }
            JournalEvent::ReplayCounter { nameserver_id, counter } => {
                if let Some(peer) = self.state.lock().unwrap().peers.get_mut(nameserver_id) {
                    peer.last_counter = (*counter).max(peer.last_counter);
                }
            }
            JournalEvent::AgreementRotation { phase, generation, new_private } => {
                let mut state = self.state.lock().unwrap();
                if let Some(hex_key) = new_private {
                    let bytes: [u8; 32] = hex::decode(hex_key)
                        .ok()
                        .and_then(|v| v.try_into().ok())
                        .ok_or_else(|| KeyServerError::Journal("bad journaled key".into()))?;
                    let private = AgreementPrivate::from_bytes(bytes);
                    let public = private.public();
                    let old_generation = state.agreement_current.0;
                    let pending = state.registrations.keys().copied().collect();
                    state.agreement_rotation = Some(AgreementRotation {
                        new_generation: *generation,
                        new_key: AgreementKeypair { private, public },
                        old_generation,
                        pending,
                        phase: phase.clone(),
                    });
                } else if let Some(rotation) = state.agreement_rotation.as_mut() {
                    rotation.phase = phase.clone();
                    if *phase != AgreementPhase::Distribute {
                        let old = state.agreement_current.clone();
                        state.agreement_previous = Some(old);
                    }
                }
            }
            JournalEvent::AgreementRotationDone { .. } => {
                let mut state = self.state.lock().unwrap();
                if let Some(rotation) = state.agreement_rotation.take() {
                    state.agreement_previous = None;
                    state.agreement_current = (rotation.new_generation, rotation.new_key);
                }
            }
            JournalEvent::SigningRotation { phase, new_private } => {
                let mut state = self.state.lock().unwrap();
                if let Some(hex_key) = new_private {
                    let bytes = hex::decode(hex_key)
                        .map_err(|e| KeyServerError::Journal(e.to_string()))?;
                    let new_key = SigningKeypair::from_private_bytes(&bytes)
                        .map_err(|e| KeyServerError::Journal(e.to_string()))?;
                    state.signing_rotation =
                        Some(SigningRotation { new_key, phase: phase.clone() });
                } else if let Some(rotation) = state.signing_rotation.as_mut() {
                    let previous = rotation.phase.clone();
                    rotation.phase = phase.clone();
                    // Re-apply the issuance switch on replay.
                    if matches!(phase, SigningPhase::WaitStkExpiry { .. })
                        && matches!(previous, SigningPhase::WaitCachesBoth { .. })
                    {
                        let new_key = rotation.new_key.clone();
                        let old = std::mem::replace(&mut state.signing_current, new_key);
                        state.signing_previous = Some(old);
                    }
                    if matches!(phase, SigningPhase::AwaitParentRemoveOld) {
                        state.signing_previous = None;
                    }
                }
            }
            JournalEvent::SigningRotationDone => {
                let mut state = self.state.lock().unwrap();
                state.signing_rotation = None;
                state.signing_previous = None;
            }
        }
        Ok(())
    }

    /// Current agreement private key (for provisioning newly registered
    /// nameservers).
    pub fn current_agreement(&self) -> (u32, AgreementKeypair) {
        self.state.lock().unwrap().agreement_current.clone()
    }

    /// Exports the long-term signing private scalars currently held (two
    /// mid-rotation), for key-file persistence. These bytes must never
    /// appear in any message this server sends.
    pub fn signing_private_bytes(&self) -> Vec<[u8; 32]> {
        let state = self.state.lock().unwrap();
        let mut out = vec![state.signing_current.private_bytes()];
        if let Some(previous) = &state.signing_previous {
            out.push(previous.private_bytes());
        }
        if let Some(rotation) = &state.signing_rotation {
            out.push(rotation.new_key.private_bytes());
        }
        out
    }

    /// The in-flight agreement rotation's pending distribution set, if any.
    pub fn agreement_rotation_pending(&self) -> Option<Vec<u32>> {
        self.state
            .lock()
            .unwrap()
            .agreement_rotation
            .as_ref()
            .map(|r| r.pending.iter().copied().collect())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum JournalEvent {
    Registration { nameserver_id: u32, channel_pub: String, address: String },
    Issuance { nameserver_id: u32, inception: u32, expiration: u32 },
    ReplayCounter { nameserver_id: u32, counter: u64 },
    AgreementRotation { phase: AgreementPhase, generation: u32, new_private: Option<String> },
    AgreementRotationDone { generation: u32 },
    SigningRotation { phase: SigningPhase, new_private: Option<String> },
    SigningRotationDone,
}

/// Append-only journal of length-prefixed JSON records.
struct Journal {
    file: File,
    path: PathBuf,
}

impl Journal {
    fn open(path: &Path) -> Result<Self, KeyServerError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| KeyServerError::Journal(e.to_string()))?;
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            let _ = std::fs::set_permissions(path, std::fs::Permissions::from_mode(0o600));
        }
        Ok(Self { file, path: path.to_path_buf() })
    }

    fn append(&mut self, event: &JournalEvent) {
        let body = serde_json::to_vec(event).expect("journal events serialize");
        let mut record = Vec::with_capacity(4 + body.len());
        record.extend_from_slice(&(body.len() as u32).to_be_bytes());
        record.extend_from_slice(&body);
        if let Err(e) = self.file.write_all(&record).and_then(|_| self.file.flush()) {
            log::error!("journal write failed ({}): {e}", self.path.display());
        }
    }

    fn read_all(path: &Path) -> Result<Vec<JournalEvent>, KeyServerError> {
        let mut events = Vec::new();
        let mut bytes = Vec::new();
        match File::open(path) {
            Ok(mut file) => {
                file.read_to_end(&mut bytes)
                    .map_err(|e| KeyServerError::Journal(e.to_string()))?;
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(events),
            Err(e) => return Err(KeyServerError::Journal(e.to_string())),
        }
        let mut pos = 0usize;
        while pos + 4 <= bytes.len() {
            let len = u32::from_be_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
            pos += 4;
            let Some(body) = bytes.get(pos..pos + len) else {
                // Torn final record from an interrupted write; ignore it.
                break;
            };
            pos += len;
            let event = serde_json::from_slice(body)
                .map_err(|e| KeyServerError::Journal(e.to_string()))?;
            events.push(event);
        }
        Ok(events)
    }
}
