//! The authoritative nameserver engine. It holds three kinds of key
//! material: its short-term credential (and the matching signing key), the
//! zone's long-term agreement private key (shared by every nameserver in the
//! zone), and per-response ephemeral agreement keys. It never holds the
//! zone's long-term signing key; the type has no field for it.
//!
//! Unauthenticatable queries are dropped silently. An error response would
//! hand off-path attackers an oracle and a reflector; silence hands them
//! nothing.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use thiserror::Error;

use crate::channel::{self, ChannelEndpoint, ControlMessage, KEY_SERVER_SENDER};
use crate::clock::Clock;
use crate::crypto::{
    self, AgreementKeypair, AgreementPrivate, AgreementPublic, SharedSecret, SigningKeypair,
};
use crate::delegation::{ShortTermKeyStructure, SignedShortTermKeyStructure};
use crate::dns::{Message, Name};
use crate::transport::Transport;
use crate::wire::{self, ChildKeys, Query, ResponseInner, RESPONSE_NONCE_LEN};
use crate::zone::{Lookup, VanillaResponder, ZoneData};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeSupport {
    Both,
    PrivacyOnly,
}

#[derive(Debug, Clone)]
pub struct NameserverConfig {
    pub nameserver_id: u32,
    pub zone_name: Name,
    pub zone_level: u32,
    pub keyserver_address: String,
    pub stk_lifetime_secs: u32,
    /// Refresh once this fraction of the credential lifetime has elapsed.
    pub refresh_at_fraction: f64,
    pub mode_support: ModeSupport,
    /// Answer plain DNS datagrams that miss the protocol magic. Off by
    /// default: falling back silently is how downgrade attacks start.
    pub dual_stack: bool,
    /// Ephemeral key reuse window; `None` disables reuse.
    pub reuse_window_secs: Option<u64>,
    pub reuse_cap: u32,
    /// Responses per source per second; `None` disables rate limiting.
    pub rate_limit_per_sec: Option<u32>,
}

impl NameserverConfig {
    pub fn new(nameserver_id: u32, zone_name: Name, zone_level: u32, keyserver_address: String) -> Self {
        Self {
            nameserver_id,
            zone_name,
            zone_level,
            keyserver_address,
            stk_lifetime_secs: crate::delegation::DEFAULT_LIFETIME_SECS,
            refresh_at_fraction: 0.5,
            mode_support: ModeSupport::Both,
            dual_stack: false,
            reuse_window_secs: None,
            reuse_cap: 1024,
            rate_limit_per_sec: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum RefreshError {
    #[error("key server unreachable: {0}")]
    Unreachable(String),
    #[error("key server refused to sign: {0:?}")]
    Refused(channel::RejectKind),
    #[error("channel failure: {0}")]
    Channel(#[from] channel::ChannelError),
    #[error("signed structure does not match the requested key")]
    KeyMismatch,
}

struct Credential {
    signed: SignedShortTermKeyStructure,
    private: SigningKeypair,
}

struct ReuseSlot {
    keypair: AgreementKeypair,
    created_millis: u64,
    use_count: u32,
}

struct Session {
    credential: Option<Credential>,
    /// Installed zone agreement generations, newest first. Two live at once
    /// during an agreement-key rotation.
    agreement: Vec<(u32, AgreementPrivate)>,
    reuse: Option<ReuseSlot>,
}

struct KsChannel {
    endpoint: ChannelEndpoint,
    shared: SharedSecret,
    last_counter: u64,
}

/// Per-source token bucket; grants a one-second burst at the configured rate.
struct RateLimiter {
    rate_per_sec: u32,
    buckets: HashMap<String, (u64, u64)>, // (milli-tokens, last refill millis)
}

impl RateLimiter {
    fn new(rate_per_sec: u32) -> Self {
        Self { rate_per_sec, buckets: HashMap::new() }
    }

    fn allow(&mut self, src: &str, now_millis: u64) -> bool {
        let cap = u64::from(self.rate_per_sec) * 1000;
        let (tokens, last) = self
            .buckets
            .entry(src.to_string())
            .or_insert((cap, now_millis));
        let refill = now_millis.saturating_sub(*last) * u64::from(self.rate_per_sec);
        *tokens = (*tokens + refill).min(cap);
        *last = now_millis;
        if *tokens >= 1000 {
            *tokens -= 1000;
            true
        } else {
            false
        }
    }
}

pub struct Nameserver {
    config: NameserverConfig,
    zone: RwLock<Arc<ZoneData>>,
    clock: Arc<dyn Clock>,
    transport: Arc<dyn Transport>,
    ks_channel: Mutex<KsChannel>,
    session: Mutex<Session>,
    limiter: Mutex<Option<RateLimiter>>,
    last_refresh_attempt: AtomicU64,
}

impl Nameserver {
    pub fn new(
        config: NameserverConfig,
        zone: Arc<ZoneData>,
        channel_private: AgreementPrivate,
        keyserver_channel_pub: &AgreementPublic,
        transport: Arc<dyn Transport>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, crypto::CryptoError> {
        let shared = crypto::dh(&channel_private, keyserver_channel_pub)?;
        let mut endpoint =
            ChannelEndpoint::new(config.nameserver_id, &channel_private, keyserver_channel_pub)?;
        endpoint.resume_counter(clock.now_millis().max(1));
        let limiter = config.rate_limit_per_sec.map(RateLimiter::new);
        Ok(Self {
            config,
            zone: RwLock::new(zone),
            clock,
            transport,
            ks_channel: Mutex::new(KsChannel { endpoint, shared, last_counter: 0 }),
            session: Mutex::new(Session { credential: None, agreement: Vec::new(), reuse: None }),
            limiter: Mutex::new(limiter),
            last_refresh_attempt: AtomicU64::new(0),
        })
    }

    pub fn zone_snapshot(&self) -> Arc<ZoneData> {
        self.zone.read().unwrap().clone()
    }

    /// Atomically swaps the served zone contents.
    pub fn set_zone(&self, zone: Arc<ZoneData>) {
        *self.zone.write().unwrap() = zone;
    }

    pub fn config(&self) -> &NameserverConfig {
        &self.config
    }

    pub fn current_credential(&self) -> Option<SignedShortTermKeyStructure> {
        self.session.lock().unwrap().credential.as_ref().map(|c| c.signed)
    }

    pub fn installed_agreement_generations(&self) -> Vec<u32> {
        self.session.lock().unwrap().agreement.iter().map(|(g, _)| *g).collect()
    }

    /// Generates a fresh short-term keypair, has the key server sign its
    /// structure, and installs the credential atomically.
    pub fn refresh_credential(&self) -> Result<(), RefreshError> {
        let now = self.clock.now_secs();
        let fresh = SigningKeypair::generate();
        let structure = ShortTermKeyStructure {
            inception: now as u32,
            expiration: now as u32 + self.config.stk_lifetime_secs,
            stk_public_key: fresh.public(),
            nameserver_id: self.config.nameserver_id,
            zone_level: self.config.zone_level,
        };
        let request = {
            let mut chan = self.ks_channel.lock().unwrap();
            chan.endpoint.seal(&ControlMessage::SignRequest(structure))
        };
        let reply = self
            .transport
            .exchange(&self.config.keyserver_address, &request)
            .map_err(|e| RefreshError::Unreachable(e.to_string()))?;
        let message = {
            let mut chan = self.ks_channel.lock().unwrap();
            let (message, counter) = channel::open(&reply, &chan.shared, chan.last_counter)?;
            chan.last_counter = counter;
            message
        };
        match message {
            ControlMessage::SignResponse(signed) => {
                if signed.structure.stk_public_key != fresh.public()
                    || signed.structure != structure
                {
                    return Err(RefreshError::KeyMismatch);
                }
                let mut session = self.session.lock().unwrap();
                session.credential = Some(Credential { signed, private: fresh });
                Ok(())
            }
            ControlMessage::SignReject(kind) => Err(RefreshError::Refused(kind)),
            _ => Err(RefreshError::Channel(channel::ChannelError::Malformed)),
        }
    }

    /// Refreshes when past the refresh point, with at most one attempt per
    /// second while the key server is unreachable.
    pub fn maybe_refresh(&self) {
        let now = self.clock.now_secs();
        let due = {
            let session = self.session.lock().unwrap();
            match &session.credential {
                None => true,
                Some(c) => {
                    let inception = u64::from(c.signed.structure.inception);
                    let lifetime = u64::from(c.signed.structure.expiration) - inception;
                    let refresh_at =
                        inception + (lifetime as f64 * self.config.refresh_at_fraction) as u64;
                    now >= refresh_at
                }
            }
        };
        if !due {
            return;
        }
        let now_millis = self.clock.now_millis();
        let last = self.last_refresh_attempt.load(Ordering::Relaxed);
        if now_millis < last.saturating_add(1000) && last != 0 {
            return;
        }
        self.last_refresh_attempt.store(now_millis, Ordering::Relaxed);
        if let Err(e) = self.refresh_credential() {
            log::warn!("ns {}: credential refresh failed: {e}", self.config.nameserver_id);
        } else {
            self.last_refresh_attempt.store(0, Ordering::Relaxed);
        }
    }

    /// Serves one datagram: control-channel traffic from the key server,
    /// protocol queries, or (when dual-stack is on) plain DNS.
    pub fn handle_datagram(&self, datagram: &[u8], src: &str) -> Option<Vec<u8>> {
        if channel::is_channel_datagram(datagram) {
            return self.handle_control(datagram);
        }
        self.handle_query(datagram, src)
    }

    fn handle_control(&self, datagram: &[u8]) -> Option<Vec<u8>> {
        let sender = channel::peek_sender(datagram).ok()?;
        if sender != KEY_SERVER_SENDER {
            return None;
        }
        let mut chan = self.ks_channel.lock().unwrap();
        let (message, counter) = channel::open(datagram, &chan.shared, chan.last_counter).ok()?;
        chan.last_counter = counter;
        let reply = match message {
            ControlMessage::InstallAgreementKey { generation, private } => {
                let mut session = self.session.lock().unwrap();
                if !session.agreement.iter().any(|(g, _)| *g == generation) {
                    session
                        .agreement
                        .insert(0, (generation, AgreementPrivate::from_bytes(private)));
                    session.agreement.sort_by_key(|(g, _)| std::cmp::Reverse(*g));
                    session.agreement.truncate(2);
                }
                ControlMessage::Ack { generation }
            }
            ControlMessage::RemoveAgreementKey { generation } => {
                let mut session = self.session.lock().unwrap();
                session.agreement.retain(|(g, _)| *g != generation);
                ControlMessage::Ack { generation }
            }
            _ => return None,
        };
        Some(chan.endpoint.seal(&reply))
    }

    fn handle_query(&self, datagram: &[u8], src: &str) -> Option<Vec<u8>> {
        let now_millis = self.clock.now_millis();
        if let Some(limiter) = self.limiter.lock().unwrap().as_mut() {
            if !limiter.allow(src, now_millis) {
                return None;
            }
        }
        let query = match wire::decode_query(datagram) {
            Ok(query) => query,
            Err(wire::WireError::BadMagic) if self.config.dual_stack => {
                return VanillaResponder::new(self.zone_snapshot()).handle(datagram);
            }
            Err(_) => return None,
        };
        self.maybe_refresh();
        let now = self.clock.now_secs();

        // Fail closed on our own credential: no valid credential, no answers.
        let (signed, stk_private) = {
            let session = self.session.lock().unwrap();
            let credential = session.credential.as_ref()?;
            if now > u64::from(credential.signed.structure.expiration) {
                return None;
            }
            (credential.signed, credential.private.clone())
        };

        let resolver_ephemeral = *query.resolver_ephemeral();
        let dns_query_bytes = match &query {
            Query::Plain { dns_query, .. } => {
                if self.config.mode_support == ModeSupport::PrivacyOnly {
                    return None;
                }
                dns_query.clone()
            }
            Query::Private { query_nonce, ciphertext, .. } => {
                self.decrypt_query(&resolver_ephemeral, query_nonce, ciphertext)?
            }
        };

        let query_message = Message::decode(&dns_query_bytes).ok()?;
        let zone = self.zone_snapshot();
        let response = zone.respond(&query_message);
        let child_keys = match query_message.questions.first().map(|q| zone.lookup(q)) {
            Some(Lookup::Referral { child, .. }) => {
                let delegation = zone.delegations.get(&child)?;
                Some(ChildKeys {
                    signing: delegation.keys.signing.clone(),
                    agreement: delegation.keys.agreement,
                })
            }
            _ => None,
        };

        let ephemeral = self.pick_ephemeral(now_millis);
        let ephemeral_sig = stk_private.sign(ephemeral.public.as_bytes());
        let response_master = crypto::dh(&ephemeral.private, &resolver_ephemeral).ok()?;
        let response_nonce = crypto::random_bytes::<RESPONSE_NONCE_LEN>();
        let inner = ResponseInner {
            dns_response: response.encode(),
            credential: signed,
            ephemeral_sig,
            child_keys,
        };
        wire::seal_response(&inner, &ephemeral.public, &response_master, &response_nonce).ok()
    }

    fn decrypt_query(
        &self,
        resolver_ephemeral: &AgreementPublic,
        query_nonce: &crypto::Nonce,
        ciphertext: &[u8],
    ) -> Option<Vec<u8>> {
        let session = self.session.lock().unwrap();
        for (_, private) in &session.agreement {
            let Ok(master) = crypto::dh(private, resolver_ephemeral) else {
                continue;
            };
            if let Ok(plaintext) = wire::open_query_private(&master, query_nonce, ciphertext) {
                return Some(plaintext);
            }
        }
        None
    }

    /// Fresh ephemeral keypair per response unless reuse is enabled and the
    /// slot is inside its window and under its use cap. Response nonces stay
    /// fresh either way, so derived keys never repeat.
    fn pick_ephemeral(&self, now_millis: u64) -> AgreementKeypair {
        let Some(window_secs) = self.config.reuse_window_secs else {
            return crypto::gen_agreement_keypair();
        };
        let mut session = self.session.lock().unwrap();
        if let Some(slot) = session.reuse.as_mut() {
            let age_ok = now_millis.saturating_sub(slot.created_millis) < window_secs * 1000;
            if age_ok && slot.use_count < self.config.reuse_cap {
                slot.use_count += 1;
                return slot.keypair.clone();
            }
        }
        let fresh = crypto::gen_agreement_keypair();
        session.reuse = Some(ReuseSlot {
            keypair: fresh.clone(),
            created_millis: now_millis,
            use_count: 1,
        });
        fresh
    }
}
