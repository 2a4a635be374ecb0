//! Zone data: standard master-file parsing, lookup with Vanilla-DNS
//! semantics, and the plain/pre-signed responders used as baselines. Zone
//! files are untouched by the secure protocol; the only addition is a sidecar
//! listing the long-term public keys of delegated child zones.

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::crypto::{self, AgreementPublic, SigningKeypair, VerifyKey};
use crate::dns::{Message, Name, Question, RData, Rcode, Record, RType, SoaData};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ZoneError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: unknown record type `{rtype}`")]
    UnknownRecordType { line: usize, rtype: String },
    #[error("duplicate SOA record (line {0})")]
    DuplicateSoa(usize),
    #[error("zone has no SOA record")]
    MissingSoa,
    #[error("delegation for {0} has no child keys in the sidecar")]
    MissingChildKeys(Name),
    #[error("record {0} is outside the zone")]
    OutOfZone(Name),
}

fn parse_err(line: usize, msg: impl Into<String>) -> ZoneError {
    ZoneError::Parse {
        line,
        msg: msg.into(),
    }
}

/// Long-term public keys of a delegated child zone, published by the parent.
/// During the child's signing-key rotation two verify keys are live at once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChildZoneKeys {
    pub signing: Vec<VerifyKey>,
    pub agreement: AgreementPublic,
}

/// One zone cut: the child's NS set plus its published long-term keys.
#[derive(Debug, Clone)]
pub struct Delegation {
    pub ns_names: Vec<Name>,
    pub keys: ChildZoneKeys,
}

/// Immutable, queryable zone contents. Servers swap whole snapshots.
#[derive(Debug, Clone)]
pub struct ZoneData {
    pub origin: Name,
    pub zone_level: u32,
    pub soa: Record,
    records: BTreeMap<(Name, RType), Vec<Record>>,
    pub delegations: BTreeMap<Name, Delegation>,
}

/// Outcome of a lookup, mirroring what a Vanilla-DNS authoritative server
/// would put on the wire.
#[derive(Debug, Clone)]
pub enum Lookup {
    /// Authoritative answer records (possibly via a CNAME chain).
    Answer(Vec<Record>),
    /// Referral to a delegated child zone.
    Referral { child: Name, ns_records: Vec<Record>, glue: Vec<Record> },
    /// Name exists but has no records of the requested type.
    NoData,
    NxDomain,
}

impl ZoneData {
    /// Parses a zone file plus its key sidecar. Sidecar lines have the form
    /// `child <name> w <hex33> [w <hex33>] A <hex32>`; every zone cut found
    /// in the zone file must have one.
    pub fn load(
        origin: &Name,
        zone_level: u32,
        zone_file: &str,
        sidecar: &str,
    ) -> Result<ZoneData, ZoneError> {
        let mut records: BTreeMap<(Name, RType), Vec<Record>> = BTreeMap::new();
        let mut soa: Option<Record> = None;
        let mut default_ttl = 300u32;

        for (idx, raw) in zone_file.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split(';').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut tokens: Vec<&str> = line.split_whitespace().collect();
            if tokens[0] == "$TTL" {
                default_ttl = tokens
                    .get(1)
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| parse_err(line_no, "bad $TTL"))?;
                continue;
            }
            if tokens[0] == "$ORIGIN" {
                // The caller supplies the origin; accept a matching directive.
                continue;
            }
            let owner = Self::resolve_name(tokens[0], origin)
                .map_err(|e| parse_err(line_no, format!("bad owner name: {e}")))?;
            if !owner.is_within(origin) {
                return Err(ZoneError::OutOfZone(owner));
            }
            tokens.remove(0);
            let mut ttl = default_ttl;
            if let Some(t) = tokens.first().and_then(|t| t.parse::<u32>().ok()) {
                ttl = t;
                tokens.remove(0);
            }
            if tokens.first() == Some(&"IN") {
                tokens.remove(0);
            }
            let type_token = *tokens
                .first()
                .ok_or_else(|| parse_err(line_no, "missing record type"))?;
            let rtype = RType::parse(type_token).ok_or_else(|| ZoneError::UnknownRecordType {
                line: line_no,
                rtype: type_token.to_string(),
            })?;
            let rdata_tokens = &tokens[1..];
            let rdata = Self::parse_rdata(rtype, rdata_tokens, origin)
                .map_err(|msg| parse_err(line_no, msg))?;
            let record = Record { name: owner.clone(), ttl, rdata };
            if rtype == RType::Soa {
                if soa.is_some() {
                    return Err(ZoneError::DuplicateSoa(line_no));
                }
                soa = Some(record.clone());
            }
            records.entry((owner, rtype)).or_default().push(record);
        }

        let soa = soa.ok_or(ZoneError::MissingSoa)?;
        let child_keys = Self::parse_sidecar(sidecar)?;

        // Zone cuts: NS sets owned by a name other than the origin.
        let mut delegations = BTreeMap::new();
        for ((name, rtype), set) in &records {
            if *rtype != RType::Ns || name == origin {
                continue;
            }
            let ns_names: Vec<Name> = set
                .iter()
                .filter_map(|r| match &r.rdata {
                    RData::Ns(n) => Some(n.clone()),
                    _ => None,
                })
                .collect();
            let keys = child_keys
                .get(name)
                .cloned()
                .ok_or_else(|| ZoneError::MissingChildKeys(name.clone()))?;
            delegations.insert(name.clone(), Delegation { ns_names, keys });
        }

        Ok(ZoneData {
            origin: origin.clone(),
            zone_level,
            soa,
            records,
            delegations,
        })
    }

    fn resolve_name(token: &str, origin: &Name) -> Result<Name, crate::dns::DnsError> {
        if token == "@" {
            return Ok(origin.clone());
        }
        if token.ends_with('.') || origin.is_root() {
            Name::parse(token)
        } else {
            Name::parse(&format!("{token}.{}", origin.as_str()))
        }
    }

    fn parse_rdata(rtype: RType, tokens: &[&str], origin: &Name) -> Result<RData, String> {
        let need = |n: usize| -> Result<(), String> {
            if tokens.len() < n {
                Err(format!("{rtype} record needs {n} field(s)"))
            } else {
                Ok(())
            }
        };
        match rtype {
            RType::A => {
                need(1)?;
                Ok(RData::A(tokens[0].parse().map_err(|_| "bad IPv4 address")?))
            }
            RType::Aaaa => {
                need(1)?;
                Ok(RData::Aaaa(tokens[0].parse().map_err(|_| "bad IPv6 address")?))
            }
            RType::Ns => {
                need(1)?;
                let name = Self::resolve_name(tokens[0], origin).map_err(|e| e.to_string())?;
                Ok(RData::Ns(name))
            }
            RType::Cname => {
                need(1)?;
                let name = Self::resolve_name(tokens[0], origin).map_err(|e| e.to_string())?;
                Ok(RData::Cname(name))
            }
            RType::Soa => {
                need(7)?;
                let mname = Self::resolve_name(tokens[0], origin).map_err(|e| e.to_string())?;
                let rname = Self::resolve_name(tokens[1], origin).map_err(|e| e.to_string())?;
                let nums: Vec<u32> = tokens[2..7]
                    .iter()
                    .map(|t| t.parse().map_err(|_| "bad SOA number".to_string()))
                    .collect::<Result<_, _>>()?;
                Ok(RData::Soa(SoaData {
                    mname,
                    rname,
                    serial: nums[0],
                    refresh: nums[1],
                    retry: nums[2],
                    expire: nums[3],
                    minimum: nums[4],
                }))
            }
            RType::Txt => {
                need(1)?;
                let joined = tokens.join(" ");
                let text = joined.trim_matches('"');
                // Chunk into 255-byte character-strings.
                let strings = text
                    .as_bytes()
                    .chunks(255)
                    .map(|c| c.to_vec())
                    .collect::<Vec<_>>();
                Ok(RData::Txt(if strings.is_empty() {
                    vec![vec![]]
                } else {
                    strings
                }))
            }
            RType::Sig => Err("SIG records are generated, not loaded".into()),
        }
    }

    fn parse_sidecar(sidecar: &str) -> Result<BTreeMap<Name, ChildZoneKeys>, ZoneError> {
        let mut out = BTreeMap::new();
        for (idx, raw) in sidecar.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let tokens: Vec<&str> = line.split_whitespace().collect();
            if tokens[0] != "child" || tokens.len() < 6 {
                return Err(parse_err(line_no, "expected: child <name> w <hex> [w <hex>] A <hex>"));
            }
            let name = Name::parse(tokens[1]).map_err(|e| parse_err(line_no, e.to_string()))?;
            let mut signing = Vec::new();
            let mut agreement = None;
            let mut i = 2;
            while i + 1 < tokens.len() {
                match tokens[i] {
                    "w" => signing.push(
                        VerifyKey::from_hex(tokens[i + 1])
                            .map_err(|_| parse_err(line_no, "bad signing key hex"))?,
                    ),
                    "A" => {
                        agreement = Some(
                            AgreementPublic::from_hex(tokens[i + 1])
                                .map_err(|_| parse_err(line_no, "bad agreement key hex"))?,
                        )
                    }
                    other => return Err(parse_err(line_no, format!("unexpected token `{other}`"))),
                }
                i += 2;
            }
            if signing.is_empty() || signing.len() > 2 {
                return Err(parse_err(line_no, "need one or two signing keys"));
            }
            let agreement = agreement.ok_or_else(|| parse_err(line_no, "missing agreement key"))?;
            out.insert(name, ChildZoneKeys { signing, agreement });
        }
        Ok(out)
    }

    /// Serializes child keys in sidecar format.
    pub fn sidecar_line(name: &Name, keys: &ChildZoneKeys) -> String {
        let ws: Vec<String> = keys.signing.iter().map(|w| format!("w {}", w.to_hex())).collect();
        format!("child {} {} A {}", name, ws.join(" "), keys.agreement.to_hex())
    }

    pub fn get_records(&self, name: &Name, rtype: RType) -> Option<&Vec<Record>> {
        self.records.get(&(name.clone(), rtype))
    }

    fn name_exists(&self, name: &Name) -> bool {
        self.records.keys().any(|(n, _)| n == name || n.is_within(name))
    }

    /// All (name, type) pairs with at least one record; used by test corpora.
    pub fn record_keys(&self) -> impl Iterator<Item = &(Name, RType)> {
        self.records.keys()
    }

    /// Replaces (or inserts) the published keys of a delegated child. Used by
    /// the zone owner during child key rotations.
    pub fn with_updated_delegation(&self, child: &Name, keys: ChildZoneKeys) -> ZoneData {
        let mut next = self.clone();
        if let Some(d) = next.delegations.get_mut(child) {
            d.keys = keys;
        }
        next
    }

    /// Vanilla-DNS lookup semantics over the zone contents.
    pub fn lookup(&self, question: &Question) -> Lookup {
        let name = &question.name;
        if !name.is_within(&self.origin) {
            return Lookup::NxDomain;
        }
        // A query at or below a zone cut is a referral, except for queries
        // for the delegation NS set itself which are answered from here.
        for (child, delegation) in &self.delegations {
            if name.is_within(child) && !(name == child && question.rtype == RType::Ns) {
                let ns_records = self
                    .get_records(child, RType::Ns)
                    .cloned()
                    .unwrap_or_default();
                let mut glue = Vec::new();
                for ns in &delegation.ns_names {
                    for rtype in [RType::A, RType::Aaaa] {
                        if let Some(set) = self.get_records(ns, rtype) {
                            glue.extend(set.iter().cloned());
                        }
                    }
                }
                return Lookup::Referral { child: child.clone(), ns_records, glue };
            }
        }
        if let Some(set) = self.get_records(name, question.rtype) {
            return Lookup::Answer(set.clone());
        }
        // CNAME chase within the zone.
        if question.rtype != RType::Cname {
            if let Some(cnames) = self.get_records(name, RType::Cname) {
                let mut answer = cnames.clone();
                if let Some(RData::Cname(target)) = cnames.first().map(|r| &r.rdata) {
                    if let Some(set) = self.get_records(target, question.rtype) {
                        answer.extend(set.iter().cloned());
                    }
                }
                return Lookup::Answer(answer);
            }
        }
        if self.name_exists(name) {
            Lookup::NoData
        } else {
            Lookup::NxDomain
        }
    }

    /// Builds the authoritative Vanilla-DNS response for a query message.
    pub fn respond(&self, query: &Message) -> Message {
        let Some(question) = query.questions.first() else {
            return Message::response_to(query, Rcode::FormErr, false);
        };
        match self.lookup(question) {
            Lookup::Answer(records) => {
                let mut resp = Message::response_to(query, Rcode::NoError, true);
                resp.answers = records;
                resp
            }
            Lookup::Referral { ns_records, glue, .. } => {
                let mut resp = Message::response_to(query, Rcode::NoError, false);
                resp.authorities = ns_records;
                resp.additionals = glue;
                resp
            }
            Lookup::NoData => {
                let mut resp = Message::response_to(query, Rcode::NoError, true);
                resp.authorities = vec![self.soa.clone()];
                resp
            }
            Lookup::NxDomain => {
                let mut resp = Message::response_to(query, Rcode::NxDomain, true);
                resp.authorities = vec![self.soa.clone()];
                resp
            }
        }
    }
}

/// Answers raw datagrams with plain DNS. The no-security baseline.
pub struct VanillaResponder {
    zone: Arc<ZoneData>,
}

impl VanillaResponder {
    pub fn new(zone: Arc<ZoneData>) -> Self {
        Self { zone }
    }

    pub fn handle(&self, datagram: &[u8]) -> Option<Vec<u8>> {
        let query = Message::decode(datagram).ok()?;
        if query.is_response {
            return None;
        }
        Some(self.zone.respond(&query).encode())
    }
}

/// Answers with plain DNS plus one pre-computed signature record per answer
/// record, the way a server serving pre-signed zone data does. No private
/// key is needed (or held) at serve time.
pub struct PresignedResponder {
    zone: Arc<ZoneData>,
    signatures: BTreeMap<(Name, RType), Vec<Record>>,
}

impl PresignedResponder {
    /// Signs every record set up front with the given zone key.
    pub fn new(zone: Arc<ZoneData>, signer: &SigningKeypair) -> Self {
        let mut signatures: BTreeMap<(Name, RType), Vec<Record>> = BTreeMap::new();
        for key in zone.record_keys() {
            let set = zone.get_records(&key.0, key.1).unwrap();
            let sigs = set
                .iter()
                .map(|record| {
                    let mut canonical = Vec::new();
                    canonical.extend_from_slice(record.name.as_str().as_bytes());
                    canonical.extend_from_slice(&record.rdata.rtype().code().to_be_bytes());
                    let mut rdata = Vec::new();
                    {
                        // Reuse the wire encoding of the record as signed bytes.
                        let msg = Message {
                            id: 0,
                            is_response: true,
                            authoritative: true,
                            recursion_desired: false,
                            rcode: Rcode::NoError,
                            questions: vec![],
                            answers: vec![record.clone()],
                            authorities: vec![],
                            additionals: vec![],
                        };
                        rdata.extend_from_slice(&msg.encode());
                    }
                    canonical.extend_from_slice(&rdata);
                    let sig = signer.sign(&canonical);
                    // RRSIG-shaped rdata: type covered, algorithm, original
                    // TTL, expiry window, key tag, then the raw signature.
                    let mut blob = Vec::with_capacity(18 + 64);
                    blob.extend_from_slice(&record.rdata.rtype().code().to_be_bytes());
                    blob.push(13); // ECDSA P-256 / SHA-256
                    blob.push(record.name.label_count() as u8);
                    blob.extend_from_slice(&record.ttl.to_be_bytes());
                    blob.extend_from_slice(&0u32.to_be_bytes());
                    blob.extend_from_slice(&u32::MAX.to_be_bytes());
                    blob.extend_from_slice(&0u16.to_be_bytes());
                    blob.extend_from_slice(sig.as_bytes());
                    Record {
                        name: record.name.clone(),
                        ttl: record.ttl,
                        rdata: RData::Sig(blob),
                    }
                })
                .collect();
            signatures.insert(key.clone(), sigs);
        }
        Self { zone, signatures }
    }

    pub fn handle(&self, datagram: &[u8]) -> Option<Vec<u8>> {
        let query = Message::decode(datagram).ok()?;
        if query.is_response {
            return None;
        }
        let mut resp = self.zone.respond(&query);
        let mut sigs = Vec::new();
        for record in resp.answers.iter().chain(&resp.authorities) {
            if let Some(set) = self.signatures.get(&(record.name.clone(), record.rdata.rtype())) {
                sigs.extend(set.iter().cloned());
            }
        }
        resp.answers.extend(sigs);
        Some(resp.encode())
    }
}

/// Convenience: generate fresh child keys for tests and provisioning.
pub fn fresh_child_keys() -> ChildZoneKeys {
    ChildZoneKeys {
        signing: vec![SigningKeypair::generate().public()],
        agreement: crypto::gen_agreement_keypair().public,
    }
}
