//! The secure-envelope wire format, version 1. Plain DNS messages ride as
//! opaque payloads; everything cryptographic is framed around them with
//! fixed-width fields so the per-response byte overhead is a constant,
//! independent of the answer inside.
//!
//! Datagram layouts (all integers big-endian):
//!
//! ```text
//! query, plain mode      magic(2) ver(1) kind(1)=0  eph_pub(32)  dns_query
//! query, private mode    magic(2) ver(1) kind(1)=1  eph_pub(32)  r_q(24)  ct(dns_query)+tag(16)
//! response               magic(2) ver(1) kind(1)=2  eph_pub(32)  r_a(16)  ct(inner)+tag(16)
//!
//! inner (inside the response ciphertext):
//!     dns_len(2)  dns_response  signed_credential(113)  eph_sig(64)
//!     child_key_count(1)  [child_signing(33) x count]  [child_agreement(32) if count > 0]
//! ```
//!
//! A non-delegating response is exactly 248 bytes larger than the DNS
//! response it carries; a delegating response 313. A delegating response
//! written while the child zone rotates its signing key carries a second
//! 33-byte verify key (346). These constants are frozen; they are the
//! protocol's amplification bound.

use thiserror::Error;

use crate::crypto::{
    self, AgreementPublic, AuthError, KdfLabel, Nonce, SharedSecret, Sig, VerifyKey,
    AEAD_TAG_LEN, AGREEMENT_KEY_LEN, NONCE_LEN, SIGNATURE_LEN, VERIFY_KEY_LEN,
};
use crate::delegation::{SignedShortTermKeyStructure, SIGNED_LEN};

pub const MAGIC: [u8; 2] = [0xd5, 0x2b];
pub const VERSION: u8 = 1;

const KIND_QUERY_PLAIN: u8 = 0;
const KIND_QUERY_PRIVATE: u8 = 1;
const KIND_RESPONSE: u8 = 2;

pub const HEADER_LEN: usize = 4;
/// Response KDF randomizer width on the wire.
pub const RESPONSE_NONCE_LEN: usize = 16;

/// Envelope bytes added to a plain-mode query around its DNS payload.
pub const QUERY_PLAIN_OVERHEAD: usize = HEADER_LEN + AGREEMENT_KEY_LEN; // 36
/// Envelope bytes added to a private-mode query around its DNS payload.
pub const QUERY_PRIVATE_OVERHEAD: usize =
    HEADER_LEN + AGREEMENT_KEY_LEN + NONCE_LEN + AEAD_TAG_LEN; // 76
/// Envelope bytes added to a non-delegating response around its DNS payload.
pub const RESPONSE_OVERHEAD: usize = HEADER_LEN
    + AGREEMENT_KEY_LEN
    + RESPONSE_NONCE_LEN
    + AEAD_TAG_LEN
    + 2
    + SIGNED_LEN
    + SIGNATURE_LEN
    + 1; // 248
/// Envelope bytes added to a delegating response.
pub const RESPONSE_OVERHEAD_DELEGATING: usize =
    RESPONSE_OVERHEAD + VERIFY_KEY_LEN + AGREEMENT_KEY_LEN; // 313

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown message kind {0}")]
    BadMode(u8),
    #[error("datagram truncated at byte {0}")]
    Truncated(usize),
    #[error("trailing bytes after message")]
    TrailingBytes,
    #[error("empty payload")]
    EmptyPayload,
    #[error("inconsistent delegation fields")]
    Inconsistent,
}

impl From<WireError> for EncodeError {
    fn from(e: WireError) -> Self {
        EncodeError::Wire(e)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncodeError {
    #[error(transparent)]
    Wire(WireError),
    #[error("payload too large for a 16-bit length prefix")]
    PayloadTooLarge,
}

/// A parsed query envelope.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Query {
    Plain {
        resolver_ephemeral: AgreementPublic,
        dns_query: Vec<u8>,
    },
    Private {
        resolver_ephemeral: AgreementPublic,
        query_nonce: Nonce,
        ciphertext: Vec<u8>,
    },
}

impl Query {
    pub fn resolver_ephemeral(&self) -> &AgreementPublic {
        match self {
            Query::Plain { resolver_ephemeral, .. } | Query::Private { resolver_ephemeral, .. } => {
                resolver_ephemeral
            }
        }
    }
}

/// Child-zone keys carried in a delegating response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChildKeys {
    pub signing: Vec<VerifyKey>,
    pub agreement: AgreementPublic,
}

/// Decrypted contents of a response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResponseInner {
    pub dns_response: Vec<u8>,
    pub credential: SignedShortTermKeyStructure,
    /// Signature over the server's ephemeral public key, under the
    /// credential's short-term key.
    pub ephemeral_sig: Sig,
    pub child_keys: Option<ChildKeys>,
}

/// The plaintext-visible part of a response envelope.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResponseEnvelope {
    pub server_ephemeral: AgreementPublic,
    pub response_nonce: [u8; RESPONSE_NONCE_LEN],
    pub ciphertext: Vec<u8>,
}

fn header(kind: u8) -> [u8; HEADER_LEN] {
    [MAGIC[0], MAGIC[1], VERSION, kind]
}

fn check_header(bytes: &[u8], expected_kinds: &[u8]) -> Result<u8, WireError> {
    if bytes.len() < HEADER_LEN {
        return Err(WireError::Truncated(bytes.len()));
    }
    if bytes[0..2] != MAGIC {
        return Err(WireError::BadMagic);
    }
    if bytes[2] != VERSION {
        return Err(WireError::BadVersion(bytes[2]));
    }
    if !expected_kinds.contains(&bytes[3]) {
        return Err(WireError::BadMode(bytes[3]));
    }
    Ok(bytes[3])
}

pub fn encode_query_plain(
    resolver_ephemeral: &AgreementPublic,
    dns_query: &[u8],
) -> Result<Vec<u8>, EncodeError> {
    if dns_query.is_empty() {
        return Err(WireError::EmptyPayload.into());
    }
    let mut out = Vec::with_capacity(QUERY_PLAIN_OVERHEAD + dns_query.len());
    out.extend_from_slice(&header(KIND_QUERY_PLAIN));
    out.extend_from_slice(resolver_ephemeral.as_bytes());
    out.extend_from_slice(dns_query);
    Ok(out)
}

/// Encrypts the DNS query under the query-direction master secret and frames
/// it. `r_q` salts the KDF and rides in the clear.
pub fn seal_query_private(
    resolver_ephemeral: &AgreementPublic,
    query_master: &SharedSecret,
    query_nonce: &Nonce,
    dns_query: &[u8],
) -> Result<Vec<u8>, EncodeError> {
    if dns_query.is_empty() {
        return Err(WireError::EmptyPayload.into());
    }
    let ciphertext = crypto::seal(query_master, query_nonce.as_bytes(), KdfLabel::Query, dns_query);
    let mut out = Vec::with_capacity(QUERY_PRIVATE_OVERHEAD + dns_query.len());
    out.extend_from_slice(&header(KIND_QUERY_PRIVATE));
    out.extend_from_slice(resolver_ephemeral.as_bytes());
    out.extend_from_slice(query_nonce.as_bytes());
    out.extend_from_slice(&ciphertext);
    Ok(out)
}

/// Parses a query envelope. Total on arbitrary input: errors, never panics.
pub fn decode_query(bytes: &[u8]) -> Result<Query, WireError> {
    let kind = check_header(bytes, &[KIND_QUERY_PLAIN, KIND_QUERY_PRIVATE])?;
    let mut pos = HEADER_LEN;
    let eph: [u8; AGREEMENT_KEY_LEN] = bytes
        .get(pos..pos + AGREEMENT_KEY_LEN)
        .ok_or(WireError::Truncated(bytes.len()))?
        .try_into()
        .unwrap();
    pos += AGREEMENT_KEY_LEN;
    let resolver_ephemeral = AgreementPublic(eph);
    match kind {
        KIND_QUERY_PLAIN => {
            let dns_query = bytes[pos..].to_vec();
            if dns_query.is_empty() {
                return Err(WireError::EmptyPayload);
            }
            Ok(Query::Plain { resolver_ephemeral, dns_query })
        }
        _ => {
            let nonce: [u8; NONCE_LEN] = bytes
                .get(pos..pos + NONCE_LEN)
                .ok_or(WireError::Truncated(bytes.len()))?
                .try_into()
                .unwrap();
            pos += NONCE_LEN;
            let ciphertext = bytes[pos..].to_vec();
            if ciphertext.len() < AEAD_TAG_LEN + 1 {
                return Err(WireError::EmptyPayload);
            }
            Ok(Query::Private {
                resolver_ephemeral,
                query_nonce: Nonce(nonce),
                ciphertext,
            })
        }
    }
}

/// Decrypts a private-mode query payload.
pub fn open_query_private(
    query_master: &SharedSecret,
    query_nonce: &Nonce,
    ciphertext: &[u8],
) -> Result<Vec<u8>, AuthError> {
    crypto::open(query_master, query_nonce.as_bytes(), KdfLabel::Query, ciphertext)
}

/// Serializes the inner response plaintext.
pub fn encode_inner(inner: &ResponseInner) -> Result<Vec<u8>, EncodeError> {
    if inner.dns_response.len() > u16::MAX as usize {
        return Err(EncodeError::PayloadTooLarge);
    }
    if let Some(keys) = &inner.child_keys {
        if keys.signing.is_empty() || keys.signing.len() > 2 {
            return Err(WireError::Inconsistent.into());
        }
    }
    let mut out = Vec::with_capacity(inner.dns_response.len() + 2 + SIGNED_LEN + SIGNATURE_LEN + 1);
    out.extend_from_slice(&(inner.dns_response.len() as u16).to_be_bytes());
    out.extend_from_slice(&inner.dns_response);
    out.extend_from_slice(&inner.credential.encode());
    out.extend_from_slice(inner.ephemeral_sig.as_bytes());
    match &inner.child_keys {
        None => out.push(0),
        Some(keys) => {
            out.push(keys.signing.len() as u8);
            for w in &keys.signing {
                out.extend_from_slice(w.as_bytes());
            }
            out.extend_from_slice(keys.agreement.as_bytes());
        }
    }
    Ok(out)
}

/// Parses the inner response plaintext. Strict: every byte accounted for.
pub fn decode_inner(bytes: &[u8]) -> Result<ResponseInner, WireError> {
    let len_bytes = bytes.get(..2).ok_or(WireError::Truncated(bytes.len()))?;
    let dns_len = u16::from_be_bytes(len_bytes.try_into().unwrap()) as usize;
    let mut pos = 2usize;
    let dns_response = bytes
        .get(pos..pos + dns_len)
        .ok_or(WireError::Truncated(bytes.len()))?
        .to_vec();
    pos += dns_len;
    let credential_bytes = bytes
        .get(pos..pos + SIGNED_LEN)
        .ok_or(WireError::Truncated(bytes.len()))?;
    let credential =
        SignedShortTermKeyStructure::decode(credential_bytes).ok_or(WireError::Inconsistent)?;
    pos += SIGNED_LEN;
    let sig_bytes: [u8; SIGNATURE_LEN] = bytes
        .get(pos..pos + SIGNATURE_LEN)
        .ok_or(WireError::Truncated(bytes.len()))?
        .try_into()
        .unwrap();
    pos += SIGNATURE_LEN;
    let count = *bytes.get(pos).ok_or(WireError::Truncated(bytes.len()))?;
    pos += 1;
    let child_keys = match count {
        0 => None,
        1 | 2 => {
            let mut signing = Vec::with_capacity(count as usize);
            for _ in 0..count {
                let w: [u8; VERIFY_KEY_LEN] = bytes
                    .get(pos..pos + VERIFY_KEY_LEN)
                    .ok_or(WireError::Truncated(bytes.len()))?
                    .try_into()
                    .unwrap();
                signing.push(VerifyKey(w));
                pos += VERIFY_KEY_LEN;
            }
            let a: [u8; AGREEMENT_KEY_LEN] = bytes
                .get(pos..pos + AGREEMENT_KEY_LEN)
                .ok_or(WireError::Truncated(bytes.len()))?
                .try_into()
                .unwrap();
            pos += AGREEMENT_KEY_LEN;
            Some(ChildKeys { signing, agreement: AgreementPublic(a) })
        }
        _ => return Err(WireError::Inconsistent),
    };
    if pos != bytes.len() {
        return Err(WireError::TrailingBytes);
    }
    Ok(ResponseInner {
        dns_response,
        credential,
        ephemeral_sig: Sig(sig_bytes),
        child_keys,
    })
}

/// Encrypts the inner plaintext under the response-direction master secret
/// and frames the full response datagram.
pub fn seal_response(
    inner: &ResponseInner,
    server_ephemeral: &AgreementPublic,
    response_master: &SharedSecret,
    response_nonce: &[u8; RESPONSE_NONCE_LEN],
) -> Result<Vec<u8>, EncodeError> {
    let plaintext = encode_inner(inner)?;
    let ciphertext = crypto::seal(response_master, response_nonce, KdfLabel::Response, &plaintext);
    let mut out = Vec::with_capacity(HEADER_LEN + AGREEMENT_KEY_LEN + RESPONSE_NONCE_LEN + ciphertext.len());
    out.extend_from_slice(&header(KIND_RESPONSE));
    out.extend_from_slice(server_ephemeral.as_bytes());
    out.extend_from_slice(response_nonce);
    out.extend_from_slice(&ciphertext);
    Ok(out)
}

/// Parses the plaintext-visible part of a response envelope.
pub fn decode_response_envelope(bytes: &[u8]) -> Result<ResponseEnvelope, WireError> {
    check_header(bytes, &[KIND_RESPONSE])?;
    let mut pos = HEADER_LEN;
    let eph: [u8; AGREEMENT_KEY_LEN] = bytes
        .get(pos..pos + AGREEMENT_KEY_LEN)
        .ok_or(WireError::Truncated(bytes.len()))?
        .try_into()
        .unwrap();
    pos += AGREEMENT_KEY_LEN;
    let nonce: [u8; RESPONSE_NONCE_LEN] = bytes
        .get(pos..pos + RESPONSE_NONCE_LEN)
        .ok_or(WireError::Truncated(bytes.len()))?
        .try_into()
        .unwrap();
    pos += RESPONSE_NONCE_LEN;
    let ciphertext = bytes[pos..].to_vec();
    if ciphertext.len() < AEAD_TAG_LEN {
        return Err(WireError::Truncated(bytes.len()));
    }
    Ok(ResponseEnvelope {
        server_ephemeral: AgreementPublic(eph),
        response_nonce: nonce,
        ciphertext,
    })
}

/// Decrypts and parses a response envelope. Authentication failures pass
/// through untouched; framing problems inside an authentic plaintext are
/// wire errors.
pub fn open_response(
    envelope: &ResponseEnvelope,
    response_master: &SharedSecret,
) -> Result<ResponseInner, OpenError> {
    let plaintext = crypto::open(
        response_master,
        &envelope.response_nonce,
        KdfLabel::Response,
        &envelope.ciphertext,
    )
    .map_err(OpenError::Auth)?;
    decode_inner(&plaintext).map_err(OpenError::Wire)
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OpenError {
    #[error(transparent)]
    Auth(AuthError),
    #[error(transparent)]
    Wire(WireError),
}
