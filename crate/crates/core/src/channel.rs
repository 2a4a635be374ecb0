//! The mutually authenticated control channel between a zone's nameservers
//! and its key server. Static-static X25519 between pre-provisioned channel
//! keys, authenticated encryption with a fresh random salt per message, and
//! a strictly increasing counter inside the ciphertext for replay rejection.
//! No extra PKI: the channel uses the same primitives as the protocol.
//!
//! Framing: `magic(2) ver(1) sender_id(4) salt(24) ct(counter(8) || body)+tag(16)`.
//! Nameservers use their nameserver ID as sender id; the key server uses
//! [`KEY_SERVER_SENDER`]. The body is a tagged control message.

use thiserror::Error;

use crate::crypto::{
    self, AgreementPrivate, AgreementPublic, KdfLabel, Nonce, SharedSecret, NONCE_LEN,
};
use crate::delegation::{
    RejectReason, ShortTermKeyStructure, SignedShortTermKeyStructure, SIGNED_LEN, STRUCTURE_LEN,
};

pub const CHANNEL_MAGIC: [u8; 2] = [0xd5, 0xc4];
pub const CHANNEL_VERSION: u8 = 1;
pub const KEY_SERVER_SENDER: u32 = u32::MAX;

const HEADER_LEN: usize = 2 + 1 + 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ChannelError {
    #[error("not a channel datagram")]
    BadMagic,
    #[error("unsupported channel version")]
    BadVersion,
    #[error("channel datagram truncated")]
    Truncated,
    #[error("sender is not registered")]
    UnknownSender,
    #[error("authentication failed")]
    Auth,
    #[error("stale counter: message replayed or out of order")]
    Replay,
    #[error("malformed control message")]
    Malformed,
}

/// Control messages carried over the channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ControlMessage {
    /// Nameserver asks the key server to sign a credential structure.
    SignRequest(ShortTermKeyStructure),
    /// Key server returns the signed credential.
    SignResponse(SignedShortTermKeyStructure),
    /// Key server refuses to sign.
    SignReject(RejectKind),
    /// Key server installs a long-term agreement private key generation.
    InstallAgreementKey { generation: u32, private: [u8; 32] },
    /// Key server removes an agreement key generation.
    RemoveAgreementKey { generation: u32 },
    /// Generic acknowledgement (echoes the generation acted on).
    Ack { generation: u32 },
}

/// Wire-stable encoding of issuance rejections.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectKind {
    UnknownNameserver,
    Policy(RejectReason),
}

impl ControlMessage {
    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            ControlMessage::SignRequest(s) => {
                out.push(1);
                out.extend_from_slice(&s.canonical_serialize());
            }
            ControlMessage::SignResponse(s) => {
                out.push(2);
                out.extend_from_slice(&s.encode());
            }
            ControlMessage::SignReject(kind) => {
                out.push(3);
                out.push(match kind {
                    RejectKind::UnknownNameserver => 0,
                    RejectKind::Policy(RejectReason::Expired) => 1,
                    RejectKind::Policy(RejectReason::InceptionInFuture) => 2,
                    RejectKind::Policy(RejectReason::EmptyWindow) => 3,
                    RejectKind::Policy(RejectReason::LifetimeExceedsPolicy) => 4,
                    RejectKind::Policy(RejectReason::LevelMismatch) => 5,
                });
            }
            ControlMessage::InstallAgreementKey { generation, private } => {
                out.push(4);
                out.extend_from_slice(&generation.to_be_bytes());
                out.extend_from_slice(private);
            }
            ControlMessage::RemoveAgreementKey { generation } => {
                out.push(5);
                out.extend_from_slice(&generation.to_be_bytes());
            }
            ControlMessage::Ack { generation } => {
                out.push(6);
                out.extend_from_slice(&generation.to_be_bytes());
            }
        }
        out
    }

    fn decode(bytes: &[u8]) -> Result<ControlMessage, ChannelError> {
        let (&tag, rest) = bytes.split_first().ok_or(ChannelError::Malformed)?;
        Ok(match tag {
            1 => {
                if rest.len() != STRUCTURE_LEN {
                    return Err(ChannelError::Malformed);
                }
                ControlMessage::SignRequest(
                    ShortTermKeyStructure::decode(rest).ok_or(ChannelError::Malformed)?,
                )
            }
            2 => {
                if rest.len() != SIGNED_LEN {
                    return Err(ChannelError::Malformed);
                }
                ControlMessage::SignResponse(
                    SignedShortTermKeyStructure::decode(rest).ok_or(ChannelError::Malformed)?,
                )
            }
            3 => {
                let kind = match rest.first() {
                    Some(0) => RejectKind::UnknownNameserver,
                    Some(1) => RejectKind::Policy(RejectReason::Expired),
                    Some(2) => RejectKind::Policy(RejectReason::InceptionInFuture),
                    Some(3) => RejectKind::Policy(RejectReason::EmptyWindow),
                    Some(4) => RejectKind::Policy(RejectReason::LifetimeExceedsPolicy),
                    Some(5) => RejectKind::Policy(RejectReason::LevelMismatch),
                    _ => return Err(ChannelError::Malformed),
                };
                ControlMessage::SignReject(kind)
            }
            4 => {
                if rest.len() != 4 + 32 {
                    return Err(ChannelError::Malformed);
                }
                ControlMessage::InstallAgreementKey {
                    generation: u32::from_be_bytes(rest[..4].try_into().unwrap()),
                    private: rest[4..].try_into().unwrap(),
                }
            }
            5 => {
                if rest.len() != 4 {
                    return Err(ChannelError::Malformed);
                }
                ControlMessage::RemoveAgreementKey {
                    generation: u32::from_be_bytes(rest.try_into().unwrap()),
                }
            }
            6 => {
                if rest.len() != 4 {
                    return Err(ChannelError::Malformed);
                }
                ControlMessage::Ack { generation: u32::from_be_bytes(rest.try_into().unwrap()) }
            }
            _ => return Err(ChannelError::Malformed),
        })
    }
}

/// Returns true if the datagram carries the channel magic; servers demux
/// control traffic from query traffic with this.
pub fn is_channel_datagram(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0..2] == CHANNEL_MAGIC
}

/// One endpoint of the channel: our static private key, the peer's static
/// public key, and a send counter.
pub struct ChannelEndpoint {
    sender_id: u32,
    shared: SharedSecret,
    next_counter: u64,
}

impl ChannelEndpoint {
    pub fn new(
        sender_id: u32,
        our_private: &AgreementPrivate,
        peer_public: &AgreementPublic,
    ) -> Result<Self, crypto::CryptoError> {
        Ok(Self {
            sender_id,
            shared: crypto::dh(our_private, peer_public)?,
            next_counter: 1,
        })
    }

    /// Restores the send counter after a restart.
    pub fn resume_counter(&mut self, next: u64) {
        self.next_counter = next;
    }

    pub fn seal(&mut self, message: &ControlMessage) -> Vec<u8> {
        let counter = self.next_counter;
        self.next_counter += 1;
        let salt = Nonce::fresh();
        let mut plaintext = Vec::with_capacity(8 + 64);
        plaintext.extend_from_slice(&counter.to_be_bytes());
        plaintext.extend_from_slice(&message.encode());
        let ciphertext = crypto::seal(&self.shared, salt.as_bytes(), KdfLabel::Channel, &plaintext);
        let mut out = Vec::with_capacity(HEADER_LEN + NONCE_LEN + ciphertext.len());
        out.extend_from_slice(&CHANNEL_MAGIC);
        out.push(CHANNEL_VERSION);
        out.extend_from_slice(&self.sender_id.to_be_bytes());
        out.extend_from_slice(salt.as_bytes());
        out.extend_from_slice(&ciphertext);
        out
    }
}

/// Sender id claimed by a channel datagram, readable before authentication.
pub fn peek_sender(bytes: &[u8]) -> Result<u32, ChannelError> {
    if bytes.len() < HEADER_LEN + NONCE_LEN {
        return Err(if is_channel_datagram(bytes) {
            ChannelError::Truncated
        } else {
            ChannelError::BadMagic
        });
    }
    if bytes[0..2] != CHANNEL_MAGIC {
        return Err(ChannelError::BadMagic);
    }
    if bytes[2] != CHANNEL_VERSION {
        return Err(ChannelError::BadVersion);
    }
    Ok(u32::from_be_bytes(bytes[3..7].try_into().unwrap()))
}

/// Authenticates and decrypts a channel datagram with the given shared
/// secret. Enforces `counter > last_counter`; returns the new counter.
pub fn open(
    bytes: &[u8],
    shared: &SharedSecret,
    last_counter: u64,
) -> Result<(ControlMessage, u64), ChannelError> {
    peek_sender(bytes)?;
    let salt = &bytes[HEADER_LEN..HEADER_LEN + NONCE_LEN];
    let ciphertext = &bytes[HEADER_LEN + NONCE_LEN..];
    let plaintext = crypto::open(shared, salt, KdfLabel::Channel, ciphertext)
        .map_err(|_| ChannelError::Auth)?;
    if plaintext.len() < 8 {
        return Err(ChannelError::Malformed);
    }
    let counter = u64::from_be_bytes(plaintext[..8].try_into().unwrap());
    if counter <= last_counter {
        return Err(ChannelError::Replay);
    }
    let message = ControlMessage::decode(&plaintext[8..])?;
    Ok((message, counter))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::gen_agreement_keypair;

    fn endpoints() -> (ChannelEndpoint, ChannelEndpoint, SharedSecret, SharedSecret) {
        let ns = gen_agreement_keypair();
        let ks = gen_agreement_keypair();
        let ns_end = ChannelEndpoint::new(7, &ns.private, &ks.public).unwrap();
        let ks_end = ChannelEndpoint::new(KEY_SERVER_SENDER, &ks.private, &ns.public).unwrap();
        let ks_view = crypto::dh(&ks.private, &ns.public).unwrap();
        let ns_view = crypto::dh(&ns.private, &ks.public).unwrap();
        (ns_end, ks_end, ks_view, ns_view)
    }

    #[test]
    fn request_round_trip_and_counter_advance() {
        let (mut ns_end, _, ks_view, _) = endpoints();
        let msg = ControlMessage::Ack { generation: 3 };
        let d1 = ns_end.seal(&msg);
        assert_eq!(peek_sender(&d1).unwrap(), 7);
        let (got, c1) = open(&d1, &ks_view, 0).unwrap();
        assert_eq!(got, msg);
        assert_eq!(c1, 1);
        let d2 = ns_end.seal(&msg);
        let (_, c2) = open(&d2, &ks_view, c1).unwrap();
        assert_eq!(c2, 2);
    }

    #[test]
    fn replayed_datagram_is_rejected() {
        let (mut ns_end, _, ks_view, _) = endpoints();
        let d = ns_end.seal(&ControlMessage::Ack { generation: 1 });
        let (_, c) = open(&d, &ks_view, 0).unwrap();
        assert_eq!(open(&d, &ks_view, c), Err(ChannelError::Replay));
    }

    #[test]
    fn tampered_datagram_fails_auth() {
        let (mut ns_end, _, ks_view, _) = endpoints();
        let mut d = ns_end.seal(&ControlMessage::Ack { generation: 1 });
        let last = d.len() - 1;
        d[last] ^= 1;
        assert_eq!(open(&d, &ks_view, 0), Err(ChannelError::Auth));
    }

    #[test]
    fn wrong_peer_key_fails_auth() {
        let (mut ns_end, _, _, _) = endpoints();
        let stranger = gen_agreement_keypair();
        let other = gen_agreement_keypair();
        let wrong = crypto::dh(&stranger.private, &other.public).unwrap();
        let d = ns_end.seal(&ControlMessage::Ack { generation: 1 });
        assert_eq!(open(&d, &wrong, 0), Err(ChannelError::Auth));
    }

    #[test]
    fn control_messages_round_trip() {
        let messages = [
            ControlMessage::SignRequest(ShortTermKeyStructure {
                inception: 1,
                expiration: 2,
                stk_public_key: crate::crypto::VerifyKey([3u8; 33]),
                nameserver_id: 4,
                zone_level: 5,
            }),
            ControlMessage::SignReject(RejectKind::UnknownNameserver),
            ControlMessage::SignReject(RejectKind::Policy(RejectReason::LevelMismatch)),
            ControlMessage::InstallAgreementKey { generation: 9, private: [7u8; 32] },
            ControlMessage::RemoveAgreementKey { generation: 9 },
            ControlMessage::Ack { generation: 9 },
        ];
        for msg in messages {
            assert_eq!(ControlMessage::decode(&msg.encode()).unwrap(), msg);
        }
    }

    #[test]
    fn channel_magic_demuxes_from_protocol_traffic() {
        let (mut ns_end, _, _, _) = endpoints();
        let d = ns_end.seal(&ControlMessage::Ack { generation: 0 });
        assert!(is_channel_datagram(&d));
        assert!(!is_channel_datagram(&crate::wire::MAGIC));
    }
}
