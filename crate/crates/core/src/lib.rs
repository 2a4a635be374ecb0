//! A stage-2 DNS security protocol: recursive resolvers and authoritative
//! nameservers exchange encrypted, authenticated DNS messages in a single
//! round trip, rooted in a DNSSEC-like chain of trust, without ever placing
//! a zone's long-term signing key on its nameservers.
//!
//! Each zone runs a central key server holding the long-term signing key.
//! Nameservers hold only short-lived credentials — a 49-byte key structure
//! signed by the key server — plus the zone-wide agreement key that lets
//! them decrypt privacy-mode queries. Resolvers walk the hierarchy from the
//! root trust anchors, learning each child zone's long-term public keys
//! from its parent's delegating responses, and verify every response
//! end-to-end before caching anything. Verification failures terminate the
//! resolution and discard the response: the protocol fails closed.
//!
//! Module map:
//! - [`crypto`]: pinned primitives (ECDSA P-256/SHA-256, X25519,
//!   XChaCha20-Poly1305, HKDF-SHA256)
//! - [`dns`] / [`zone`]: the embedded Vanilla-DNS payload format, zone files
//!   and lookup, plus the plain and pre-signed baseline responders
//! - [`delegation`]: the short-term credential and its validation
//! - [`wire`]: the secure envelope formats (constant 248/313-byte response
//!   overhead)
//! - [`channel`]: the authenticated nameserver ↔ key-server control channel
//! - [`keyserver`], [`nameserver`], [`resolver`]: the three protocol roles
//! - [`testnet`]: an in-process multi-zone harness with a simulated clock,
//!   attack scenarios, overhead measurement, and processing benchmarks

pub mod channel;
pub mod clock;
pub mod crypto;
pub mod delegation;
pub mod dns;
pub mod keyserver;
pub mod nameserver;
pub mod resolver;
pub mod testnet;
pub mod transport;
pub mod wire;
pub mod zone;
