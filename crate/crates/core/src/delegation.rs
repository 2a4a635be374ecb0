//! Short-term nameserver credentials. A zone's key server signs a small
//! fixed-width structure binding a nameserver's short-term verify key to a
//! lifetime, a nameserver ID, and the zone level. Expiry is the only
//! revocation mechanism: there are no revocation lists anywhere.

use thiserror::Error;

use crate::crypto::{self, Sig, SigningKeypair, VerifyKey, SIGNATURE_LEN, VERIFY_KEY_LEN};

/// inception(4) + expiration(4) + key(33) + nameserver_id(4) + zone_level(4)
pub const STRUCTURE_LEN: usize = 4 + 4 + VERIFY_KEY_LEN + 4 + 4;
/// Structure plus its 64-byte signature.
pub const SIGNED_LEN: usize = STRUCTURE_LEN + SIGNATURE_LEN;

/// Default credential lifetime: 6 hours.
pub const DEFAULT_LIFETIME_SECS: u32 = 6 * 3600;
/// Policy ceiling on credential lifetime: 24 hours.
pub const MAX_LIFETIME_SECS: u32 = 86_400;
/// Clock-skew tolerance applied on both validity bounds.
pub const DEFAULT_SKEW_SECS: u32 = 120;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    #[error("credential already expired")]
    Expired,
    #[error("inception is too far in the future")]
    InceptionInFuture,
    #[error("inception is not before expiration")]
    EmptyWindow,
    #[error("lifetime exceeds the policy maximum")]
    LifetimeExceedsPolicy,
    #[error("zone level does not match the issuing zone")]
    LevelMismatch,
}

#[derive(Debug, Error, PartialEq, Eq, Clone, Copy)]
pub enum Invalid {
    #[error("signature does not verify under the zone key")]
    BadSignature,
    #[error("credential expired")]
    Expired,
    #[error("credential not yet valid")]
    NotYetValid,
}

/// The unsigned credential contents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShortTermKeyStructure {
    pub inception: u32,
    pub expiration: u32,
    pub stk_public_key: VerifyKey,
    pub nameserver_id: u32,
    pub zone_level: u32,
}

impl ShortTermKeyStructure {
    /// Fixed 49-byte big-endian layout; bijective with [`decode`].
    ///
    /// [`decode`]: ShortTermKeyStructure::decode
    pub fn canonical_serialize(&self) -> [u8; STRUCTURE_LEN] {
        let mut out = [0u8; STRUCTURE_LEN];
        out[0..4].copy_from_slice(&self.inception.to_be_bytes());
        out[4..8].copy_from_slice(&self.expiration.to_be_bytes());
        out[8..41].copy_from_slice(self.stk_public_key.as_bytes());
        out[41..45].copy_from_slice(&self.nameserver_id.to_be_bytes());
        out[45..49].copy_from_slice(&self.zone_level.to_be_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Option<ShortTermKeyStructure> {
        if bytes.len() != STRUCTURE_LEN {
            return None;
        }
        let mut key = [0u8; VERIFY_KEY_LEN];
        key.copy_from_slice(&bytes[8..41]);
        Some(ShortTermKeyStructure {
            inception: u32::from_be_bytes(bytes[0..4].try_into().unwrap()),
            expiration: u32::from_be_bytes(bytes[4..8].try_into().unwrap()),
            stk_public_key: VerifyKey(key),
            nameserver_id: u32::from_be_bytes(bytes[41..45].try_into().unwrap()),
            zone_level: u32::from_be_bytes(bytes[45..49].try_into().unwrap()),
        })
    }
}

/// A credential signed by the zone's long-term signing key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SignedShortTermKeyStructure {
    pub structure: ShortTermKeyStructure,
    pub signature: Sig,
}

impl SignedShortTermKeyStructure {
    pub fn encode(&self) -> [u8; SIGNED_LEN] {
        let mut out = [0u8; SIGNED_LEN];
        out[..STRUCTURE_LEN].copy_from_slice(&self.structure.canonical_serialize());
        out[STRUCTURE_LEN..].copy_from_slice(self.signature.as_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Option<SignedShortTermKeyStructure> {
        if bytes.len() != SIGNED_LEN {
            return None;
        }
        let structure = ShortTermKeyStructure::decode(&bytes[..STRUCTURE_LEN])?;
        let mut sig = [0u8; SIGNATURE_LEN];
        sig.copy_from_slice(&bytes[STRUCTURE_LEN..]);
        Some(SignedShortTermKeyStructure { structure, signature: Sig(sig) })
    }
}

/// Issuance policy applied by the key server.
#[derive(Debug, Clone, Copy)]
pub struct IssuePolicy {
    pub max_lifetime_secs: u32,
    pub max_skew_secs: u32,
    pub zone_level: u32,
}

impl IssuePolicy {
    pub fn new(zone_level: u32) -> Self {
        Self {
            max_lifetime_secs: MAX_LIFETIME_SECS,
            max_skew_secs: DEFAULT_SKEW_SECS,
            zone_level,
        }
    }
}

/// Signs a credential after policy checks. The caller has already
/// authenticated the requesting nameserver.
pub fn issue(
    structure: ShortTermKeyStructure,
    zone_signing_key: &SigningKeypair,
    now_secs: u64,
    policy: &IssuePolicy,
) -> Result<SignedShortTermKeyStructure, RejectReason> {
    if structure.inception >= structure.expiration {
        return Err(RejectReason::EmptyWindow);
    }
    if u64::from(structure.expiration) <= now_secs {
        return Err(RejectReason::Expired);
    }
    if u64::from(structure.inception) > now_secs + u64::from(policy.max_skew_secs) {
        return Err(RejectReason::InceptionInFuture);
    }
    if structure.expiration - structure.inception > policy.max_lifetime_secs {
        return Err(RejectReason::LifetimeExceedsPolicy);
    }
    if structure.zone_level != policy.zone_level {
        return Err(RejectReason::LevelMismatch);
    }
    let signature = zone_signing_key.sign(&structure.canonical_serialize());
    Ok(SignedShortTermKeyStructure { structure, signature })
}

/// Resolver-side validation: signature under the zone verify key plus the
/// skewed time window. Nameserver ID and zone level are exposed to the
/// caller, not judged here.
pub fn validate(
    signed: &SignedShortTermKeyStructure,
    zone_verify_key: &VerifyKey,
    now_secs: u64,
    skew_secs: u32,
) -> Result<(), Invalid> {
    let serialized = signed.structure.canonical_serialize();
    if !crypto::verify(&serialized, &signed.signature, zone_verify_key) {
        return Err(Invalid::BadSignature);
    }
    let skew = u64::from(skew_secs);
    if now_secs + skew < u64::from(signed.structure.inception) {
        return Err(Invalid::NotYetValid);
    }
    if now_secs > u64::from(signed.structure.expiration) + skew {
        return Err(Invalid::Expired);
    }
    Ok(())
}

/// Validation against the set of currently published zone keys (two during a
/// signing-key rotation). Valid if any key accepts; time errors win over
/// signature errors so expiry is reported precisely.
pub fn validate_any(
    signed: &SignedShortTermKeyStructure,
    zone_verify_keys: &[VerifyKey],
    now_secs: u64,
    skew_secs: u32,
) -> Result<(), Invalid> {
    let mut last = Invalid::BadSignature;
    for key in zone_verify_keys {
        match validate(signed, key, now_secs, skew_secs) {
            Ok(()) => return Ok(()),
            Err(Invalid::BadSignature) => {}
            Err(time_error) => last = time_error,
        }
    }
    Err(last)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_structure(now: u64, key: VerifyKey) -> ShortTermKeyStructure {
        ShortTermKeyStructure {
            inception: now as u32,
            expiration: now as u32 + DEFAULT_LIFETIME_SECS,
            stk_public_key: key,
            nameserver_id: 1,
            zone_level: 0,
        }
    }

    #[test]
    fn serialization_is_49_bytes_and_round_trips() {
        let s = sample_structure(1_700_000_000, SigningKeypair::generate().public());
        let bytes = s.canonical_serialize();
        assert_eq!(bytes.len(), 49);
        assert_eq!(ShortTermKeyStructure::decode(&bytes).unwrap(), s);
    }

    #[test]
    fn zero_structure_serialization_prefix() {
        let s = ShortTermKeyStructure {
            inception: 0,
            expiration: 1,
            stk_public_key: VerifyKey([0u8; 33]),
            nameserver_id: 0,
            zone_level: 0,
        };
        let bytes = s.canonical_serialize();
        assert_eq!(bytes.len(), 49);
        assert_eq!(&bytes[..8], &[0, 0, 0, 0, 0, 0, 0, 1]);
    }

    #[test]
    fn issue_then_validate_holds_across_the_window() {
        let zone_key = SigningKeypair::generate();
        let ns_key = SigningKeypair::generate();
        let now = 1_700_000_000u64;
        let structure = sample_structure(now, ns_key.public());
        let signed = issue(structure, &zone_key, now, &IssuePolicy::new(0)).unwrap();
        for t in [now, now + 1, now + u64::from(DEFAULT_LIFETIME_SECS)] {
            assert_eq!(validate(&signed, &zone_key.public(), t, DEFAULT_SKEW_SECS), Ok(()));
        }
    }

    #[test]
    fn expired_structure_is_rejected_at_issue() {
        let zone_key = SigningKeypair::generate();
        let now = 1_700_000_000u64;
        let mut structure = sample_structure(now - 10_000, SigningKeypair::generate().public());
        structure.expiration = (now - 1) as u32;
        assert_eq!(
            issue(structure, &zone_key, now, &IssuePolicy::new(0)),
            Err(RejectReason::Expired)
        );
    }

    #[test]
    fn level_mismatch_is_rejected_at_issue() {
        let zone_key = SigningKeypair::generate();
        let now = 1_700_000_000u64;
        let mut structure = sample_structure(now, SigningKeypair::generate().public());
        structure.zone_level = 3;
        assert_eq!(
            issue(structure, &zone_key, now, &IssuePolicy::new(0)),
            Err(RejectReason::LevelMismatch)
        );
    }

    #[test]
    fn over_long_lifetime_rejected() {
        let zone_key = SigningKeypair::generate();
        let now = 1_700_000_000u64;
        let mut structure = sample_structure(now, SigningKeypair::generate().public());
        structure.expiration = structure.inception + MAX_LIFETIME_SECS + 1;
        assert_eq!(
            issue(structure, &zone_key, now, &IssuePolicy::new(0)),
            Err(RejectReason::LifetimeExceedsPolicy)
        );
    }

    #[test]
    fn expiry_boundary_with_default_skew() {
        let zone_key = SigningKeypair::generate();
        let now = 1_700_000_000u64;
        let structure = sample_structure(now, SigningKeypair::generate().public());
        let signed = issue(structure, &zone_key, now, &IssuePolicy::new(0)).unwrap();
        let expiration = u64::from(structure.expiration);
        assert_eq!(
            validate(&signed, &zone_key.public(), expiration + 120, DEFAULT_SKEW_SECS),
            Ok(())
        );
        assert_eq!(
            validate(&signed, &zone_key.public(), expiration + 121, DEFAULT_SKEW_SECS),
            Err(Invalid::Expired)
        );
    }

    #[test]
    fn not_yet_valid_boundary() {
        let zone_key = SigningKeypair::generate();
        let now = 1_700_000_000u64;
        let structure = sample_structure(now, SigningKeypair::generate().public());
        let signed = issue(structure, &zone_key, now, &IssuePolicy::new(0)).unwrap();
        assert_eq!(
            validate(&signed, &zone_key.public(), now - 121, DEFAULT_SKEW_SECS),
            Err(Invalid::NotYetValid)
        );
        assert_eq!(validate(&signed, &zone_key.public(), now - 120, DEFAULT_SKEW_SECS), Ok(()));
    }

    #[test]
    fn wrong_zone_key_is_bad_signature() {
        let zone_key = SigningKeypair::generate();
        let other_zone = SigningKeypair::generate();
        let now = 1_700_000_000u64;
        let structure = sample_structure(now, SigningKeypair::generate().public());
        let signed = issue(structure, &zone_key, now, &IssuePolicy::new(0)).unwrap();
        assert_eq!(
            validate(&signed, &other_zone.public(), now, DEFAULT_SKEW_SECS),
            Err(Invalid::BadSignature)
        );
    }

    #[test]
    fn validate_any_accepts_either_rotation_key() {
        let old_key = SigningKeypair::generate();
        let new_key = SigningKeypair::generate();
        let now = 1_700_000_000u64;
        let structure = sample_structure(now, SigningKeypair::generate().public());
        let signed_old = issue(structure, &old_key, now, &IssuePolicy::new(0)).unwrap();
        let both = [old_key.public(), new_key.public()];
        assert_eq!(validate_any(&signed_old, &both, now, DEFAULT_SKEW_SECS), Ok(()));
        assert_eq!(
            validate_any(&signed_old, &[new_key.public()], now, DEFAULT_SKEW_SECS),
            Err(Invalid::BadSignature)
        );
    }

    #[test]
    fn signed_encoding_is_113_bytes() {
        let zone_key = SigningKeypair::generate();
        let now = 1_700_000_000u64;
        let structure = sample_structure(now, SigningKeypair::generate().public());
        let signed = issue(structure, &zone_key, now, &IssuePolicy::new(0)).unwrap();
        let bytes = signed.encode();
        assert_eq!(bytes.len(), 113);
        assert_eq!(SignedShortTermKeyStructure::decode(&bytes).unwrap(), signed);
    }

    proptest! {
        #[test]
        fn issue_validate_closure_over_the_window(
            lifetime in 1u32..=MAX_LIFETIME_SECS,
            offset_num in 0u64..=1000,
        ) {
            let zone_key = SigningKeypair::generate();
            let now = 1_700_000_000u64;
            let structure = ShortTermKeyStructure {
                inception: now as u32,
                expiration: now as u32 + lifetime,
                stk_public_key: VerifyKey([0x02u8; 33]),
                nameserver_id: 7,
                zone_level: 1,
            };
            let signed = issue(structure, &zone_key, now, &IssuePolicy::new(1)).unwrap();
            let t = now + offset_num * u64::from(lifetime) / 1000;
            prop_assert_eq!(validate(&signed, &zone_key.public(), t, DEFAULT_SKEW_SECS), Ok(()));
        }

        #[test]
        fn canonical_serialization_is_injective(
            a in any::<(u32, u32, u8, u32, u32)>(),
            b in any::<(u32, u32, u8, u32, u32)>(),
        ) {
            let mk = |(inc, exp, kb, id, lvl): (u32, u32, u8, u32, u32)| ShortTermKeyStructure {
                inception: inc,
                expiration: exp,
                stk_public_key: VerifyKey([kb; 33]),
                nameserver_id: id,
                zone_level: lvl,
            };
            let (sa, sb) = (mk(a), mk(b));
            prop_assert_eq!(sa == sb, sa.canonical_serialize() == sb.canonical_serialize());
            prop_assert_eq!(ShortTermKeyStructure::decode(&sa.canonical_serialize()).unwrap(), sa);
        }
    }
}
