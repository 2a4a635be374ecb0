//! The cryptographic contract the rest of the protocol is built on: P-256
//! ECDSA signatures with SHA-256, X25519 key agreement, HKDF-SHA256 key
//! derivation, and XChaCha20-Poly1305 authenticated encryption.
//!
//! Algorithms are pinned, not negotiable. Algorithm agility is exactly the
//! failure mode this protocol avoids: a message that cannot be verified is
//! invalid, never "unsupported".
//!
//! The key-derivation convention: every encrypted message carries a fresh
//! random value `r` which is used as the HKDF salt. The HKDF output is
//! expanded to 56 bytes, split into a 32-byte cipher key and a 24-byte AEAD
//! nonce. Because (master, r, label) never repeats, derived keys and nonces
//! are single-use even when one side reuses its agreement keypair across
//! messages.

use p256::ecdsa::signature::{Signer, Verifier};
use p256::ecdsa::{Signature, SigningKey, VerifyingKey};
use rand::rngs::OsRng;
use rand::RngCore;
use thiserror::Error;
use zeroize::{Zeroize, ZeroizeOnDrop};

use chacha20poly1305::aead::Aead;
use chacha20poly1305::{KeyInit, XChaCha20Poly1305, XNonce};
use hkdf::Hkdf;
use sha2::Sha256;

/// Compressed SEC1 encoding of a P-256 point.
pub const VERIFY_KEY_LEN: usize = 33;
/// Raw `r || s` scalars, each 32 bytes big-endian.
pub const SIGNATURE_LEN: usize = 64;
/// X25519 group element / scalar.
pub const AGREEMENT_KEY_LEN: usize = 32;
/// Random value carried next to each ciphertext; salts the KDF.
pub const NONCE_LEN: usize = 24;
/// Poly1305 authentication tag appended to every ciphertext.
pub const AEAD_TAG_LEN: usize = 16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("malformed or weak public agreement key")]
    WeakPublicKey,
    #[error("malformed verify key encoding")]
    BadVerifyKey,
}

/// Authenticated decryption failed. Deliberately carries no detail: the
/// caller discards the message no matter what went wrong.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuthError;

impl std::fmt::Display for AuthError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "authenticated decryption failed")
    }
}

impl std::error::Error for AuthError {}

/// Public half of a signing keypair, compressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VerifyKey(pub [u8; VERIFY_KEY_LEN]);

impl VerifyKey {
    pub fn as_bytes(&self) -> &[u8; VERIFY_KEY_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
        let bytes = hex::decode(s).map_err(|_| CryptoError::BadVerifyKey)?;
        let arr: [u8; VERIFY_KEY_LEN] = bytes.try_into().map_err(|_| CryptoError::BadVerifyKey)?;
        Ok(VerifyKey(arr))
    }
}

/// A 64-byte fixed-width signature. No DER: the wire layout depends on every
/// signature being exactly this size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sig(pub [u8; SIGNATURE_LEN]);

impl Sig {
    pub fn as_bytes(&self) -> &[u8; SIGNATURE_LEN] {
        &self.0
    }
}

/// An ECDSA P-256 signing keypair. The public key is derived from the
/// private scalar, so the two halves can never disagree.
#[derive(Clone)]
pub struct SigningKeypair {
    private: SigningKey,
    public: VerifyKey,
}

impl std::fmt::Debug for SigningKeypair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SigningKeypair")
            .field("public", &self.public.to_hex())
            .finish_non_exhaustive()
    }
}

impl SigningKeypair {
    pub fn generate() -> Self {
        let private = SigningKey::random(&mut OsRng);
        Self::from_signing_key(private)
    }

    fn from_signing_key(private: SigningKey) -> Self {
        let point = VerifyingKey::from(&private).to_encoded_point(true);
        let mut public = [0u8; VERIFY_KEY_LEN];
        public.copy_from_slice(point.as_bytes());
        Self {
            private,
            public: VerifyKey(public),
        }
    }

    pub fn from_private_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let private = SigningKey::from_slice(bytes).map_err(|_| CryptoError::BadVerifyKey)?;
        Ok(Self::from_signing_key(private))
    }

    pub fn private_bytes(&self) -> [u8; 32] {
        self.private.to_bytes().into()
    }

    pub fn public(&self) -> VerifyKey {
        self.public
    }

    /// Signs arbitrary bytes, the empty message included.
    pub fn sign(&self, message: &[u8]) -> Sig {
        let sig: Signature = self.private.sign(message);
        Sig(sig.to_bytes().into())
    }
}

/// Returns true iff `sig` is a valid signature over `message` under `key`.
/// Malformed keys or signatures verify false rather than erroring: a message
/// that cannot be checked is treated exactly like a message that fails the
/// check.
pub fn verify(message: &[u8], sig: &Sig, key: &VerifyKey) -> bool {
    let Ok(vk) = VerifyingKey::from_sec1_bytes(&key.0) else {
        return false;
    };
    let Ok(sig) = Signature::from_slice(&sig.0) else {
        return false;
    };
    vk.verify(message, &sig).is_ok()
}

/// Private half of an X25519 keypair. Zeroized on drop; ephemeral resolver
/// keys must not outlive their resolution.
#[derive(Clone, Zeroize, ZeroizeOnDrop)]
pub struct AgreementPrivate([u8; AGREEMENT_KEY_LEN]);

impl std::fmt::Debug for AgreementPrivate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("AgreementPrivate(..)")
    }
}

/// Public half of an X25519 keypair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AgreementPublic(pub [u8; AGREEMENT_KEY_LEN]);

impl AgreementPublic {
    pub fn as_bytes(&self) -> &[u8; AGREEMENT_KEY_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
        let bytes = hex::decode(s).map_err(|_| CryptoError::WeakPublicKey)?;
        let arr: [u8; AGREEMENT_KEY_LEN] =
            bytes.try_into().map_err(|_| CryptoError::WeakPublicKey)?;
        Ok(AgreementPublic(arr))
    }
}

impl AgreementPrivate {
    pub fn from_bytes(bytes: [u8; AGREEMENT_KEY_LEN]) -> Self {
        Self(bytes)
    }

    pub fn to_bytes(&self) -> [u8; AGREEMENT_KEY_LEN] {
        self.0
    }

    pub fn public(&self) -> AgreementPublic {
        AgreementPublic(x25519_dalek::x25519(
            self.0,
            x25519_dalek::X25519_BASEPOINT_BYTES,
        ))
    }
}

/// An X25519 keypair for Diffie-Hellman agreement.
#[derive(Debug, Clone)]
pub struct AgreementKeypair {
    pub private: AgreementPrivate,
    pub public: AgreementPublic,
}

pub fn gen_agreement_keypair() -> AgreementKeypair {
    let mut secret = [0u8; AGREEMENT_KEY_LEN];
    OsRng.fill_bytes(&mut secret);
    let private = AgreementPrivate::from_bytes(secret);
    let public = private.public();
    AgreementKeypair { private, public }
}

/// A 32-byte Diffie-Hellman master secret. Never serialized; consumed by the
/// KDF only.
#[derive(Clone, Zeroize, ZeroizeOnDrop)]
pub struct SharedSecret([u8; 32]);

impl std::fmt::Debug for SharedSecret {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SharedSecret(..)")
    }
}

/// X25519 agreement. Rejects degenerate inputs: the all-zero public key and
/// any low-order point whose shared output would be all zeros.
pub fn dh(private: &AgreementPrivate, public: &AgreementPublic) -> Result<SharedSecret, CryptoError> {
    if public.0 == [0u8; AGREEMENT_KEY_LEN] {
        return Err(CryptoError::WeakPublicKey);
    }
    let shared = x25519_dalek::x25519(private.0, public.0);
    if shared == [0u8; 32] {
        return Err(CryptoError::WeakPublicKey);
    }
    Ok(SharedSecret(shared))
}

/// Fresh random value carried beside ciphertexts; used as the KDF salt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Nonce(pub [u8; NONCE_LEN]);

impl Nonce {
    pub fn fresh() -> Self {
        let mut bytes = [0u8; NONCE_LEN];
        OsRng.fill_bytes(&mut bytes);
        Nonce(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; NONCE_LEN] {
        &self.0
    }
}

/// KDF context labels. Query and response directions must never share a key
/// even when the master secret and salt coincide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KdfLabel {
    Query,
    Response,
    Channel,
}

impl KdfLabel {
    fn as_bytes(self) -> &'static [u8] {
        match self {
            KdfLabel::Query => b"dnssecplus/query",
            KdfLabel::Response => b"dnssecplus/response",
            KdfLabel::Channel => b"dnssecplus/channel",
        }
    }
}

/// A derived 32-byte cipher key.
#[derive(Clone, Zeroize, ZeroizeOnDrop)]
pub struct SymmetricKey([u8; 32]);

impl std::fmt::Debug for SymmetricKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SymmetricKey(..)")
    }
}

fn expand(master: &SharedSecret, salt: &[u8], label: KdfLabel) -> ([u8; 32], [u8; NONCE_LEN]) {
    let hk = Hkdf::<Sha256>::new(Some(salt), &master.0);
    let mut okm = [0u8; 32 + NONCE_LEN];
    hk.expand(label.as_bytes(), &mut okm)
        .expect("56 bytes is far below the HKDF output limit");
    let mut key = [0u8; 32];
    key.copy_from_slice(&okm[..32]);
    let mut nonce = [0u8; NONCE_LEN];
    nonce.copy_from_slice(&okm[32..]);
    okm.zeroize();
    (key, nonce)
}

/// Derives the message cipher key for (master, salt, label). Deterministic;
/// distinct salts or labels give independent keys.
pub fn derive_key(master: &SharedSecret, salt: &[u8], label: KdfLabel) -> SymmetricKey {
    SymmetricKey(expand(master, salt, label).0)
}

/// Encrypts with an explicit 24-byte nonce. The nonce must be fresh for the
/// key; [`seal`] takes care of that and is what the protocol paths use.
pub fn aead_encrypt(key: &SymmetricKey, plaintext: &[u8], nonce: &Nonce) -> Vec<u8> {
    let cipher = XChaCha20Poly1305::new((&key.0).into());
    cipher
        .encrypt(XNonce::from_slice(&nonce.0), plaintext)
        .expect("XChaCha20-Poly1305 encryption is infallible for in-memory buffers")
}

/// Decrypts and authenticates. Any tampering, wrong key, or wrong nonce
/// yields [`AuthError`]; the caller discards the message.
pub fn aead_decrypt(key: &SymmetricKey, ciphertext: &[u8], nonce: &Nonce) -> Result<Vec<u8>, AuthError> {
    let cipher = XChaCha20Poly1305::new((&key.0).into());
    cipher
        .decrypt(XNonce::from_slice(&nonce.0), ciphertext)
        .map_err(|_| AuthError)
}

/// Derives key and AEAD nonce from (master, salt, label) and encrypts.
/// Ciphertext length is plaintext length + [`AEAD_TAG_LEN`].
pub fn seal(master: &SharedSecret, salt: &[u8], label: KdfLabel, plaintext: &[u8]) -> Vec<u8> {
    let (key, nonce) = expand(master, salt, label);
    aead_encrypt(&SymmetricKey(key), plaintext, &Nonce(nonce))
}

/// Inverse of [`seal`].
pub fn open(
    master: &SharedSecret,
    salt: &[u8],
    label: KdfLabel,
    ciphertext: &[u8],
) -> Result<Vec<u8>, AuthError> {
    let (key, nonce) = expand(master, salt, label);
    aead_decrypt(&SymmetricKey(key), ciphertext, &Nonce(nonce))
}

/// Fills a buffer from the OS entropy source.
pub fn random_bytes<const N: usize>() -> [u8; N] {
    let mut bytes = [0u8; N];
    OsRng.fill_bytes(&mut bytes);
    bytes
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sign_verify_round_trip() {
        let kp = SigningKeypair::generate();
        let sig = kp.sign(b"abc");
        assert!(verify(b"abc", &sig, &kp.public()));
    }

    #[test]
    fn successive_keypairs_are_distinct() {
        let a = SigningKeypair::generate();
        let b = SigningKeypair::generate();
        assert_ne!(a.public(), b.public());
    }

    #[test]
    fn public_key_is_33_byte_compressed_point() {
        let kp = SigningKeypair::generate();
        assert_eq!(kp.public().as_bytes().len(), 33);
        // Compressed SEC1 points start with 0x02 or 0x03.
        assert!(matches!(kp.public().as_bytes()[0], 0x02 | 0x03));
    }

    #[test]
    fn signing_keypair_round_trips_through_private_bytes() {
        let kp = SigningKeypair::generate();
        let restored = SigningKeypair::from_private_bytes(&kp.private_bytes()).unwrap();
        assert_eq!(kp.public(), restored.public());
    }

    #[test]
    fn empty_message_signs_and_verifies() {
        let kp = SigningKeypair::generate();
        let sig = kp.sign(b"");
        assert!(verify(b"", &sig, &kp.public()));
    }

    #[test]
    fn appended_byte_breaks_verification() {
        let kp = SigningKeypair::generate();
        let sig = kp.sign(b"message");
        assert!(!verify(b"message\x00", &sig, &kp.public()));
    }

    #[test]
    fn wrong_key_rejects() {
        let kp = SigningKeypair::generate();
        let other = SigningKeypair::generate();
        let sig = kp.sign(b"m");
        assert!(!verify(b"m", &sig, &other.public()));
    }

    #[test]
    fn zero_signature_rejects_without_panic() {
        let kp = SigningKeypair::generate();
        assert!(!verify(b"m", &Sig([0u8; 64]), &kp.public()));
    }

    #[test]
    fn garbage_verify_key_rejects_without_panic() {
        let kp = SigningKeypair::generate();
        let sig = kp.sign(b"m");
        assert!(!verify(b"m", &sig, &VerifyKey([0xffu8; 33])));
    }

    #[test]
    fn single_bit_mutations_reject() {
        let kp = SigningKeypair::generate();
        let msg = b"the quick brown fox".to_vec();
        let sig = kp.sign(&msg);
        for byte in 0..msg.len() {
            let mut m = msg.clone();
            m[byte] ^= 1;
            assert!(!verify(&m, &sig, &kp.public()), "message bit flip accepted");
        }
        for byte in 0..SIGNATURE_LEN {
            let mut s = sig;
            s.0[byte] ^= 1;
            assert!(!verify(&msg, &s, &kp.public()), "signature bit flip accepted");
        }
    }

    #[test]
    fn dh_symmetry_over_1000_pairs() {
        for _ in 0..1000 {
            let a = gen_agreement_keypair();
            let b = gen_agreement_keypair();
            let ab = dh(&a.private, &b.public).unwrap();
            let ba = dh(&b.private, &a.public).unwrap();
            assert_eq!(ab.0, ba.0);
        }
    }

    #[test]
    fn agreement_public_is_32_bytes_and_distinct() {
        let a = gen_agreement_keypair();
        let b = gen_agreement_keypair();
        assert_eq!(a.public.as_bytes().len(), 32);
        assert_ne!(a.public, b.public);
    }

    #[test]
    fn dh_rejects_zero_point() {
        let a = gen_agreement_keypair();
        assert_eq!(
            dh(&a.private, &AgreementPublic([0u8; 32])).unwrap_err(),
            CryptoError::WeakPublicKey
        );
    }

    #[test]
    fn dh_distinct_peers_give_distinct_secrets() {
        let a = gen_agreement_keypair();
        for _ in 0..100 {
            let b = gen_agreement_keypair();
            let c = gen_agreement_keypair();
            assert_ne!(dh(&a.private, &b.public).unwrap().0, dh(&a.private, &c.public).unwrap().0);
        }
    }

    #[test]
    fn derive_key_is_deterministic() {
        let a = gen_agreement_keypair();
        let b = gen_agreement_keypair();
        let master = dh(&a.private, &b.public).unwrap();
        let r = Nonce::fresh();
        let k1 = derive_key(&master, r.as_bytes(), KdfLabel::Query);
        let k2 = derive_key(&master, r.as_bytes(), KdfLabel::Query);
        assert_eq!(k1.0, k2.0);
    }

    #[test]
    fn derive_key_separates_nonces_and_labels() {
        let a = gen_agreement_keypair();
        let b = gen_agreement_keypair();
        let master = dh(&a.private, &b.public).unwrap();
        let r1 = Nonce::fresh();
        let r2 = Nonce::fresh();
        let q1 = derive_key(&master, r1.as_bytes(), KdfLabel::Query);
        let q2 = derive_key(&master, r2.as_bytes(), KdfLabel::Query);
        assert_ne!(q1.0, q2.0, "different salts must give different keys");
        let resp = derive_key(&master, r1.as_bytes(), KdfLabel::Response);
        assert_ne!(q1.0, resp.0, "labels must separate key domains");
    }

    #[test]
    fn aead_tag_is_16_bytes() {
        let key = SymmetricKey(random_bytes::<32>());
        let nonce = Nonce::fresh();
        for len in [0usize, 1, 17, 301] {
            let pt = vec![0xa5u8; len];
            let ct = aead_encrypt(&key, &pt, &nonce);
            assert_eq!(ct.len(), len + AEAD_TAG_LEN);
        }
    }

    #[test]
    fn aead_wrong_nonce_rejects() {
        let key = SymmetricKey(random_bytes::<32>());
        let n1 = Nonce::fresh();
        let n2 = Nonce::fresh();
        let ct = aead_encrypt(&key, b"payload", &n1);
        assert_eq!(aead_decrypt(&key, &ct, &n2), Err(AuthError));
        assert_ne!(
            aead_encrypt(&key, b"payload", &n1),
            aead_encrypt(&key, b"payload", &n2)
        );
    }

    #[test]
    fn seal_open_round_trip_and_direction_separation() {
        let a = gen_agreement_keypair();
        let b = gen_agreement_keypair();
        let master = dh(&a.private, &b.public).unwrap();
        let r = random_bytes::<16>();
        let ct = seal(&master, &r, KdfLabel::Response, b"inner");
        assert_eq!(open(&master, &r, KdfLabel::Response, &ct).unwrap(), b"inner");
        assert_eq!(open(&master, &r, KdfLabel::Query, &ct), Err(AuthError));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1024))]

        #[test]
        fn aead_round_trip(pt in proptest::collection::vec(any::<u8>(), 0..4096)) {
            let key = SymmetricKey([7u8; 32]);
            let nonce = Nonce([3u8; NONCE_LEN]);
            let ct = aead_encrypt(&key, &pt, &nonce);
            prop_assert_eq!(ct.len(), pt.len() + AEAD_TAG_LEN);
            prop_assert_eq!(aead_decrypt(&key, &ct, &nonce).unwrap(), pt);
        }

        #[test]
        fn aead_rejects_any_single_byte_tamper(
            pt in proptest::collection::vec(any::<u8>(), 0..512),
            pos_seed in any::<usize>(),
            bit in 0u8..8,
        ) {
            let key = SymmetricKey([9u8; 32]);
            let nonce = Nonce([1u8; NONCE_LEN]);
            let mut ct = aead_encrypt(&key, &pt, &nonce);
            let pos = pos_seed % ct.len();
            ct[pos] ^= 1 << bit;
            prop_assert_eq!(aead_decrypt(&key, &ct, &nonce), Err(AuthError));
        }
    }
}
