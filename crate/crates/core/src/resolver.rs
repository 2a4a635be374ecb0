//! The recursive resolver engine. Starting from the root trust anchors it
//! walks the hierarchy one exchange per zone, verifying at every hop: the
//! response decrypts under the fresh ephemeral agreement, the server's
//! credential validates under the zone's long-term verify key set, and the
//! server's ephemeral key is signed by the credential's short-term key. Any
//! failure terminates the resolution with a typed reason and leaves the
//! cache untouched.
//!
//! Two caches: DNS records by their own TTLs, and zone long-term keys on a
//! per-level policy ladder (ancestor zones cached longest).

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::clock::Clock;
use crate::crypto::{self, AgreementPublic, Nonce, VerifyKey};
use crate::delegation::{self, Invalid, SignedShortTermKeyStructure, DEFAULT_SKEW_SECS};
use crate::dns::{Message, Name, Question, RData, Rcode, Record, RType};
use crate::transport::{Transport, TransportError};
use crate::wire::{self, OpenError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Plain,
    Private,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AuthFailure {
    #[error("response did not decrypt under the session key")]
    DecryptFailed,
    #[error("server credential signature invalid for this zone")]
    CredentialBadSig,
    #[error("server credential expired")]
    CredentialExpired,
    #[error("server credential not yet valid")]
    CredentialNotYetValid,
    #[error("server ephemeral key signature invalid")]
    EphemeralSigInvalid,
    #[error("response does not answer the transmitted question")]
    ResponseMismatch,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ResolveError {
    #[error("authentication failure: {0}")]
    Auth(AuthFailure),
    #[error("wire error: {0}")]
    Wire(wire::WireError),
    #[error("no nameserver answered in time")]
    Timeout,
    #[error("resolution failed: {0}")]
    ServFail(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("cache TTL ladder must be non-increasing with zone level")]
    NonMonotonicLadder,
    #[error("trust anchor file malformed: {0}")]
    BadAnchorFile(String),
}

/// Root keys and root server hints, loaded once at startup.
#[derive(Debug, Clone)]
pub struct TrustAnchor {
    pub root_signing: Vec<VerifyKey>,
    pub root_agreement: AgreementPublic,
    pub root_ns: Vec<String>,
}

impl TrustAnchor {
    /// Parses `root w <hex33> A <hex32>` plus optional `ns <name>` hint
    /// lines for reaching the root servers.
    pub fn parse(text: &str) -> Result<TrustAnchor, ConfigError> {
        let mut signing = Vec::new();
        let mut agreement = None;
        let mut root_ns = Vec::new();
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let tokens: Vec<&str> = line.split_whitespace().collect();
            match tokens[0] {
                "root" => {
                    let mut i = 1;
                    while i + 1 < tokens.len() {
                        match tokens[i] {
                            "w" => signing.push(
                                VerifyKey::from_hex(tokens[i + 1]).map_err(|_| {
                                    ConfigError::BadAnchorFile("bad signing key hex".into())
                                })?,
                            ),
                            "A" => {
                                agreement =
                                    Some(AgreementPublic::from_hex(tokens[i + 1]).map_err(|_| {
                                        ConfigError::BadAnchorFile("bad agreement key hex".into())
                                    })?)
                            }
                            other => {
                                return Err(ConfigError::BadAnchorFile(format!(
                                    "unexpected token `{other}`"
                                )))
                            }
                        }
                        i += 2;
                    }
                }
                "ns" if tokens.len() == 2 => root_ns.push(tokens[1].to_string()),
                other => {
                    return Err(ConfigError::BadAnchorFile(format!("unexpected line `{other}`")))
                }
            }
        }
        if signing.is_empty() {
            return Err(ConfigError::BadAnchorFile("missing root signing key".into()));
        }
        let agreement =
            agreement.ok_or_else(|| ConfigError::BadAnchorFile("missing root agreement key".into()))?;
        Ok(TrustAnchor { root_signing: signing, root_agreement: agreement, root_ns })
    }

    pub fn to_file_text(&self) -> String {
        let mut out = String::new();
        let ws: Vec<String> = self.root_signing.iter().map(|w| format!("w {}", w.to_hex())).collect();
        out.push_str(&format!("root {} A {}\n", ws.join(" "), self.root_agreement.to_hex()));
        for ns in &self.root_ns {
            out.push_str(&format!("ns {ns}\n"));
        }
        out
    }
}

/// Zone-key cache TTLs by zone level. Must be non-increasing: ancestor keys
/// are cached at least as long as their descendants'.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CachePolicy {
    ladder: Vec<(u32, u64)>,
}

impl Default for CachePolicy {
    fn default() -> Self {
        CachePolicy {
            ladder: vec![(0, 48 * 3600), (1, 24 * 3600), (2, 6 * 3600)],
        }
    }
}

impl CachePolicy {
    pub fn new(mut entries: Vec<(u32, u64)>) -> Result<Self, ConfigError> {
        entries.sort_by_key(|(level, _)| *level);
        if entries.is_empty() {
            return Err(ConfigError::NonMonotonicLadder);
        }
        if entries.windows(2).any(|w| w[1].1 > w[0].1) {
            return Err(ConfigError::NonMonotonicLadder);
        }
        Ok(CachePolicy { ladder: entries })
    }

    /// Key cache TTL in seconds for a zone at the given level.
    pub fn key_ttl_secs(&self, level: u32) -> u64 {
        let mut ttl = self.ladder.last().map(|(_, t)| *t).unwrap_or(0);
        for (l, t) in &self.ladder {
            if level <= *l {
                ttl = *t;
                break;
            }
        }
        ttl
    }
}

#[derive(Debug, Clone)]
pub struct ResolverConfig {
    pub cache_policy: CachePolicy,
    pub skew_secs: u32,
    /// Alternate nameservers tried per zone on timeout.
    pub retries: usize,
    pub negative_ttl_cap_secs: u64,
    pub max_depth: usize,
}

impl Default for ResolverConfig {
    fn default() -> Self {
        Self {
            cache_policy: CachePolicy::default(),
            skew_secs: DEFAULT_SKEW_SECS,
            retries: 2,
            negative_ttl_cap_secs: 60,
            max_depth: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct CachedRecords {
    records: Vec<Record>,
    rcode: Rcode,
    expires_millis: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct CachedZoneKeys {
    signing: Vec<VerifyKey>,
    agreement: AgreementPublic,
    level: u32,
    expires_millis: u64,
}

/// The dual cache. All writes happen after full verification; nothing from a
/// failed exchange reaches it.
#[derive(Debug, Default)]
pub struct ResolverCache {
    records: BTreeMap<(Name, RType), CachedRecords>,
    zone_keys: BTreeMap<Name, CachedZoneKeys>,
}

impl ResolverCache {
    fn fresh_records(&self, key: &(Name, RType), now_millis: u64) -> Option<&CachedRecords> {
        self.records.get(key).filter(|e| e.expires_millis > now_millis)
    }

    fn fresh_zone_keys(&self, zone: &Name, now_millis: u64) -> Option<&CachedZoneKeys> {
        self.zone_keys.get(zone).filter(|e| e.expires_millis > now_millis)
    }

    /// Stable digest of the full cache contents, for the fail-closed tests.
    pub fn fingerprint(&self) -> u64 {
        let mut hasher = DefaultHasher::new();
        for (key, entry) in &self.records {
            key.hash(&mut hasher);
            entry.expires_millis.hash(&mut hasher);
            format!("{:?}", entry.records).hash(&mut hasher);
            format!("{:?}", entry.rcode).hash(&mut hasher);
        }
        for (zone, entry) in &self.zone_keys {
            zone.hash(&mut hasher);
            entry.expires_millis.hash(&mut hasher);
            entry.level.hash(&mut hasher);
            for key in &entry.signing {
                key.0.hash(&mut hasher);
            }
            entry.agreement.0.hash(&mut hasher);
        }
        hasher.finish()
    }

    pub fn len(&self) -> usize {
        self.records.len() + self.zone_keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One verified hop in a resolution.
#[derive(Debug, Clone)]
pub struct TraceHop {
    pub zone: Name,
    pub nameserver: String,
    pub round_trips: u32,
    pub verified: bool,
    pub credential_expiration: u32,
    pub nameserver_id: u32,
}

/// A completed (possibly negative) answer.
#[derive(Debug, Clone)]
pub struct Answer {
    pub rcode: Rcode,
    pub records: Vec<Record>,
    pub from_cache: bool,
    /// Raw authenticated DNS payload, when the answer came off the network.
    pub dns_payload: Option<Vec<u8>>,
}

#[derive(Debug)]
pub struct ResolutionOutcome {
    pub result: Result<Answer, ResolveError>,
    pub trace: Vec<TraceHop>,
    /// Datagrams sent over the network for this resolution.
    pub exchanges: u32,
}

struct VerifiedResponse {
    dns: Message,
    dns_bytes: Vec<u8>,
    credential: SignedShortTermKeyStructure,
    child_keys: Option<wire::ChildKeys>,
}

pub struct Resolver {
    anchors: TrustAnchor,
    config: ResolverConfig,
    cache: Mutex<ResolverCache>,
    clock: Arc<dyn Clock>,
}

impl Resolver {
    pub fn new(anchors: TrustAnchor, config: ResolverConfig, clock: Arc<dyn Clock>) -> Self {
        Self { anchors, config, cache: Mutex::new(ResolverCache::default()), clock }
    }

    pub fn cache_fingerprint(&self) -> u64 {
        self.cache.lock().unwrap().fingerprint()
    }

    pub fn with_cache<T>(&self, f: impl FnOnce(&ResolverCache) -> T) -> T {
        f(&self.cache.lock().unwrap())
    }

    /// Resolves one question, walking the hierarchy from the deepest zone
    /// whose keys and NS records are still cached.
    pub fn resolve(
        &self,
        name: &Name,
        rtype: RType,
        mode: Mode,
        transport: &dyn Transport,
    ) -> ResolutionOutcome {
        let mut trace = Vec::new();
        let mut exchanges = 0u32;
        let result = self.resolve_inner(name, rtype, mode, transport, &mut trace, &mut exchanges);
        ResolutionOutcome { result, trace, exchanges }
    }

    fn resolve_inner(
        &self,
        name: &Name,
        rtype: RType,
        mode: Mode,
        transport: &dyn Transport,
        trace: &mut Vec<TraceHop>,
        exchanges: &mut u32,
    ) -> Result<Answer, ResolveError> {
        let now_millis = self.clock.now_millis();
        // Answer straight from cache when possible.
        {
            let cache = self.cache.lock().unwrap();
            if let Some(entry) = cache.fresh_records(&(name.clone(), rtype), now_millis) {
                return Ok(Answer {
                    rcode: entry.rcode,
                    records: entry.records.clone(),
                    from_cache: true,
                    dns_payload: None,
                });
            }
        }

        // Deepest ancestor zone with usable cached state, else the root.
        let (mut zone, mut zone_level, mut signing, mut agreement, mut ns_names) =
            self.starting_zone(name, now_millis);

        for _ in 0..self.config.max_depth {
            let verified = self.query_zone_with_retries(
                &zone,
                &signing,
                &agreement,
                &ns_names,
                name,
                rtype,
                mode,
                transport,
                trace,
                exchanges,
            )?;

            if let Some(referral) = Self::as_referral(&zone, name, &verified.dns) {
                let Some(child_keys) = verified.child_keys.clone() else {
                    return Err(ResolveError::ServFail(
                        "referral without child zone keys".into(),
                    ));
                };
                let child_level = zone_level + 1;
                let child_ns: Vec<Name> = verified
                    .dns
                    .authorities
                    .iter()
                    .filter_map(|r| match &r.rdata {
                        RData::Ns(n) => Some(n.clone()),
                        _ => None,
                    })
                    .collect();
                // Verified referral: cache child keys, NS set, and glue.
                {
                    let mut cache = self.cache.lock().unwrap();
                    let key_ttl = self.config.cache_policy.key_ttl_secs(child_level);
                    cache.zone_keys.insert(
                        referral.clone(),
                        CachedZoneKeys {
                            signing: child_keys.signing.clone(),
                            agreement: child_keys.agreement,
                            level: child_level,
                            expires_millis: now_millis + key_ttl * 1000,
                        },
                    );
                    Self::cache_record_set(
                        &mut cache,
                        (referral.clone(), RType::Ns),
                        &verified.dns.authorities,
                        Rcode::NoError,
                        now_millis,
                    );
                    for glue in &verified.dns.additionals {
                        Self::cache_record_set(
                            &mut cache,
                            (glue.name.clone(), glue.rdata.rtype()),
                            std::slice::from_ref(glue),
                            Rcode::NoError,
                            now_millis,
                        );
                    }
                }
                zone = referral;
                zone_level = child_level;
                signing = child_keys.signing;
                agreement = child_keys.agreement;
                ns_names = child_ns.iter().map(|n| n.as_str().to_string()).collect();
                continue;
            }

            // Final answer (positive, NODATA, or NXDOMAIN).
            return self.finish(name, rtype, verified, now_millis);
        }
        Err(ResolveError::ServFail("referral chain too deep".into()))
    }

    fn finish(
        &self,
        name: &Name,
        rtype: RType,
        verified: VerifiedResponse,
        now_millis: u64,
    ) -> Result<Answer, ResolveError> {
        let dns = &verified.dns;
        // A final answer must be authoritative; anything that is neither a
        // well-formed referral nor authoritative is a server protocol
        // violation, and nothing from it is cached.
        if !dns.authoritative {
            return Err(ResolveError::ServFail(
                "non-authoritative response is not a valid referral".into(),
            ));
        }
        let answer = Answer {
            rcode: dns.rcode,
            records: dns.answers.clone(),
            from_cache: false,
            dns_payload: Some(verified.dns_bytes.clone()),
        };
        let mut cache = self.cache.lock().unwrap();
        match dns.rcode {
            Rcode::NoError if !dns.answers.is_empty() => {
                Self::cache_record_set(
                    &mut cache,
                    (name.clone(), rtype),
                    &dns.answers,
                    Rcode::NoError,
                    now_millis,
                );
            }
            Rcode::NoError | Rcode::NxDomain => {
                // Negative caching honors the SOA minimum, capped.
                let soa_minimum = dns
                    .authorities
                    .iter()
                    .find_map(|r| match &r.rdata {
                        RData::Soa(soa) => Some(u64::from(soa.minimum)),
                        _ => None,
                    })
                    .unwrap_or(self.config.negative_ttl_cap_secs);
                let ttl = soa_minimum.min(self.config.negative_ttl_cap_secs);
                if ttl > 0 {
                    cache.records.insert(
                        (name.clone(), rtype),
                        CachedRecords {
                            records: vec![],
                            rcode: dns.rcode,
                            expires_millis: now_millis + ttl * 1000,
                        },
                    );
                }
            }
            _ => return Err(ResolveError::ServFail(format!("server rcode {:?}", dns.rcode))),
        }
        Ok(answer)
    }

    fn cache_record_set(
        cache: &mut ResolverCache,
        key: (Name, RType),
        records: &[Record],
        rcode: Rcode,
        now_millis: u64,
    ) {
        let Some(min_ttl) = records.iter().map(|r| r.ttl).min() else {
            return;
        };
        if min_ttl == 0 {
            return;
        }
        cache.records.insert(
            key,
            CachedRecords {
                records: records.to_vec(),
                rcode,
                expires_millis: now_millis + u64::from(min_ttl) * 1000,
            },
        );
    }

    /// Picks the deepest ancestor of `name` whose zone keys AND nameserver
    /// names are cached; falls back to the root anchors.
    fn starting_zone(
        &self,
        name: &Name,
        now_millis: u64,
    ) -> (Name, u32, Vec<VerifyKey>, AgreementPublic, Vec<String>) {
        let cache = self.cache.lock().unwrap();
        let mut candidate = name.clone();
        loop {
            if !candidate.is_root() {
                if let Some(keys) = cache.fresh_zone_keys(&candidate, now_millis) {
                    if let Some(ns) =
                        cache.fresh_records(&(candidate.clone(), RType::Ns), now_millis)
                    {
                        let ns_names: Vec<String> = ns
                            .records
                            .iter()
                            .filter_map(|r| match &r.rdata {
                                RData::Ns(n) => Some(n.as_str().to_string()),
                                _ => None,
                            })
                            .collect();
                        if !ns_names.is_empty() {
                            return (
                                candidate.clone(),
                                keys.level,
                                keys.signing.clone(),
                                keys.agreement,
                                ns_names,
                            );
                        }
                    }
                }
            }
            if candidate.is_root() {
                return (
                    Name::root(),
                    0,
                    self.anchors.root_signing.clone(),
                    self.anchors.root_agreement,
                    self.anchors.root_ns.clone(),
                );
            }
            candidate = candidate.parent();
        }
    }

    /// True referral: NS records in the authority section for a zone that is
    /// deeper than the one just asked and contains the queried name.
    fn as_referral(current_zone: &Name, qname: &Name, dns: &Message) -> Option<Name> {
        if dns.authoritative || dns.rcode != Rcode::NoError || !dns.answers.is_empty() {
            return None;
        }
        let owner = dns
            .authorities
            .iter()
            .find(|r| matches!(r.rdata, RData::Ns(_)))
            .map(|r| r.name.clone())?;
        if qname.is_within(&owner)
            && owner.is_within(current_zone)
            && owner.label_count() > current_zone.label_count()
        {
            Some(owner)
        } else {
            None
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn query_zone_with_retries(
        &self,
        zone: &Name,
        signing: &[VerifyKey],
        agreement: &AgreementPublic,
        ns_names: &[String],
        name: &Name,
        rtype: RType,
        mode: Mode,
        transport: &dyn Transport,
        trace: &mut Vec<TraceHop>,
        exchanges: &mut u32,
    ) -> Result<VerifiedResponse, ResolveError> {
        if ns_names.is_empty() {
            return Err(ResolveError::ServFail(format!("no nameservers known for {zone}")));
        }
        let mut order: Vec<&String> = ns_names.iter().collect();
        order.shuffle(&mut rand::thread_rng());
        order.truncate(self.config.retries.max(1));
        let mut last_timeout = ResolveError::Timeout;
        for ns in order {
            *exchanges += 1;
            match self.query_zone(zone, signing, agreement, ns, name, rtype, mode, transport) {
                Ok(verified) => {
                    trace.push(TraceHop {
                        zone: zone.clone(),
                        nameserver: ns.clone(),
                        round_trips: 1,
                        verified: true,
                        credential_expiration: verified.credential.structure.expiration,
                        nameserver_id: verified.credential.structure.nameserver_id,
                    });
                    return Ok(verified);
                }
                // Transport-level silence: try an alternate server.
                Err(ResolveError::Timeout) => {
                    trace.push(TraceHop {
                        zone: zone.clone(),
                        nameserver: ns.clone(),
                        round_trips: 1,
                        verified: false,
                        credential_expiration: 0,
                        nameserver_id: 0,
                    });
                    last_timeout = ResolveError::Timeout;
                }
                // Anything else is a verification failure: fail closed.
                Err(e) => {
                    trace.push(TraceHop {
                        zone: zone.clone(),
                        nameserver: ns.clone(),
                        round_trips: 1,
                        verified: false,
                        credential_expiration: 0,
                        nameserver_id: 0,
                    });
                    return Err(e);
                }
            }
        }
        Err(last_timeout)
    }

    /// One exchange with one nameserver, fully verified.
    #[allow(clippy::too_many_arguments)]
    fn query_zone(
        &self,
        _zone: &Name,
        signing: &[VerifyKey],
        agreement: &AgreementPublic,
        ns: &str,
        name: &Name,
        rtype: RType,
        mode: Mode,
        transport: &dyn Transport,
    ) -> Result<VerifiedResponse, ResolveError> {
        let query_id: u16 = rand::random();
        let question = Question { name: name.clone(), rtype };
        let dns_query = Message::query(query_id, name.clone(), rtype);
        let dns_bytes = dns_query.encode();

        // Step 1: fresh ephemeral agreement keypair, zeroized on drop.
        let ephemeral = crypto::gen_agreement_keypair();

        // Step 2: transmit, encrypting under the zone agreement key in
        // privacy mode.
        let datagram = match mode {
            Mode::Plain => wire::encode_query_plain(&ephemeral.public, &dns_bytes)
                .map_err(|e| ResolveError::ServFail(e.to_string()))?,
            Mode::Private => {
                let query_master = crypto::dh(&ephemeral.private, agreement)
                    .map_err(|e| ResolveError::ServFail(e.to_string()))?;
                let r_q = Nonce::fresh();
                wire::seal_query_private(&ephemeral.public, &query_master, &r_q, &dns_bytes)
                    .map_err(|e| ResolveError::ServFail(e.to_string()))?
            }
        };

        let reply = transport.exchange(ns, &datagram).map_err(|e| match e {
            TransportError::Timeout(_) | TransportError::Unreachable(_) => ResolveError::Timeout,
            TransportError::Io(msg) => ResolveError::ServFail(msg),
        })?;

        // Step 5: decrypt, then verify the credential chain and the
        // ephemeral signature. Any failure discards the response.
        let envelope = wire::decode_response_envelope(&reply).map_err(ResolveError::Wire)?;
        let response_master = crypto::dh(&ephemeral.private, &envelope.server_ephemeral)
            .map_err(|_| ResolveError::Auth(AuthFailure::DecryptFailed))?;
        let inner = wire::open_response(&envelope, &response_master).map_err(|e| match e {
            OpenError::Auth(_) => ResolveError::Auth(AuthFailure::DecryptFailed),
            OpenError::Wire(w) => ResolveError::Wire(w),
        })?;

        delegation::validate_any(
            &inner.credential,
            signing,
            self.clock.now_secs(),
            self.config.skew_secs,
        )
        .map_err(|e| {
            ResolveError::Auth(match e {
                Invalid::BadSignature => AuthFailure::CredentialBadSig,
                Invalid::Expired => AuthFailure::CredentialExpired,
                Invalid::NotYetValid => AuthFailure::CredentialNotYetValid,
            })
        })?;

        if !crypto::verify(
            envelope.server_ephemeral.as_bytes(),
            &inner.ephemeral_sig,
            &inner.credential.structure.stk_public_key,
        ) {
            return Err(ResolveError::Auth(AuthFailure::EphemeralSigInvalid));
        }

        let dns = Message::decode(&inner.dns_response)
            .map_err(|e| ResolveError::ServFail(format!("inner dns malformed: {e}")))?;
        if dns.id != query_id || !dns.is_response || dns.questions.first() != Some(&question) {
            return Err(ResolveError::Auth(AuthFailure::ResponseMismatch));
        }

        Ok(VerifiedResponse {
            dns,
            dns_bytes: inner.dns_response.clone(),
            credential: inner.credential,
            child_keys: inner.child_keys,
        })
    }
}
