//! On-path attack scenarios. Every scenario mutates raw datagrams (or stands
//! up a rogue server) and then checks two things: the resolver failed with a
//! typed reason, and its cache is bit-identical to the pre-attack state. An
//! attack that is not rejected is a test failure, not an error.

use std::sync::Arc;

use crate::clock::Clock;
use crate::crypto::{self, SigningKeypair};
use crate::delegation::{self, IssuePolicy, ShortTermKeyStructure, SignedShortTermKeyStructure};
use crate::dns::{Message, Name, RType};
use crate::resolver::{Mode, ResolveError, Resolver};
use crate::wire::{self, ChildKeys, ResponseInner, RESPONSE_NONCE_LEN};
use crate::transport::Transport;
use crate::zone::ZoneData;

use super::{DatagramHandler, Interceptor, TapAction, Testnet};

/// Which datagram a bit-flip lands on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipTarget {
    Query,
    Response,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttackScript {
    /// Replays a captured response from an earlier session into a fresh one.
    ReplayPrevSession,
    /// Flips one bit at the given offset of a datagram in flight.
    BitFlip { offset: usize, target: FlipTarget },
    /// A rogue server answers with a credential its own key signed.
    CredentialSubstitute,
    /// A stale server answers with a genuinely issued but expired credential.
    ExpiredCredential,
    /// A man-in-the-middle re-encrypts the delegating response with its own
    /// ephemeral key and swaps in its own child zone keys.
    ChildKeySwap,
    /// Answers a privacy-mode query with a plausible plain DNS response.
    DowngradeToPlaintext,
}

impl AttackScript {
    pub fn name(&self) -> String {
        match self {
            AttackScript::ReplayPrevSession => "replay-prev-session".into(),
            AttackScript::BitFlip { offset, target } => {
                let side = match target {
                    FlipTarget::Query => "query",
                    FlipTarget::Response => "response",
                };
                format!("bit-flip-{side}@{offset}")
            }
            AttackScript::CredentialSubstitute => "credential-substitute".into(),
            AttackScript::ExpiredCredential => "expired-credential".into(),
            AttackScript::ChildKeySwap => "child-key-swap".into(),
            AttackScript::DowngradeToPlaintext => "downgrade-to-plaintext".into(),
        }
    }
}

#[derive(Debug)]
pub struct AttackOutcome {
    pub script: String,
    /// The resolution failed with a typed reason.
    pub rejected: bool,
    pub failure: Option<ResolveError>,
    /// The resolver cache is unchanged from its pre-attack fingerprint.
    pub cache_unchanged: bool,
}

impl AttackOutcome {
    pub fn attack_defeated(&self) -> bool {
        self.rejected && self.cache_unchanged
    }

    pub fn log_line(&self) -> String {
        format!(
            "{} scenario={} failure={} cache_delta={}",
            if self.attack_defeated() { "REJECTED" } else { "ACCEPTED" },
            self.script,
            self.failure.as_ref().map(|f| format!("{f:?}")).unwrap_or_else(|| "none".into()),
            if self.cache_unchanged { "empty" } else { "MUTATED" },
        )
    }
}

struct ReplaceResponse {
    payload: Vec<u8>,
}

impl Interceptor for ReplaceResponse {
    fn on_response(&mut self, _dest: &str, _datagram: &[u8]) -> TapAction {
        TapAction::Replace(self.payload.clone())
    }
}

struct FlipBit {
    offset: usize,
    target: FlipTarget,
}

impl Interceptor for FlipBit {
    fn on_query(&mut self, _dest: &str, datagram: &[u8]) -> TapAction {
        if self.target != FlipTarget::Query || datagram.is_empty() {
            return TapAction::Pass;
        }
        let mut bytes = datagram.to_vec();
        let idx = self.offset % bytes.len();
        bytes[idx] ^= 1 << (self.offset % 8);
        TapAction::Replace(bytes)
    }

    fn on_response(&mut self, _dest: &str, datagram: &[u8]) -> TapAction {
        if self.target != FlipTarget::Response || datagram.is_empty() {
            return TapAction::Pass;
        }
        let mut bytes = datagram.to_vec();
        let idx = self.offset % bytes.len();
        bytes[idx] ^= 1 << (self.offset % 8);
        TapAction::Replace(bytes)
    }
}

/// A server the adversary controls: it answers protocol queries with its own
/// key material and whatever credential it was given.
pub struct RogueServer {
    credential: SignedShortTermKeyStructure,
    stk_private: SigningKeypair,
    zone: Arc<ZoneData>,
    /// Child keys to inject into delegating responses (the swap payload).
    inject_child_keys: Option<ChildKeys>,
}

impl RogueServer {
    pub fn new(
        credential: SignedShortTermKeyStructure,
        stk_private: SigningKeypair,
        zone: Arc<ZoneData>,
    ) -> RogueServer {
        RogueServer { credential, stk_private, zone, inject_child_keys: None }
    }

    fn respond(&self, datagram: &[u8]) -> Option<Vec<u8>> {
        let query = wire::decode_query(datagram).ok()?;
        let resolver_ephemeral = *query.resolver_ephemeral();
        // The rogue cannot decrypt privacy-mode queries without the zone
        // agreement key; it answers with a generic payload in that case.
        let dns_response = match &query {
            wire::Query::Plain { dns_query, .. } => match Message::decode(dns_query) {
                Ok(message) => self.zone.respond(&message).encode(),
                Err(_) => Message::query(0, Name::root(), RType::A).encode(),
            },
            wire::Query::Private { .. } => Message::query(0, Name::root(), RType::A).encode(),
        };
        let ephemeral = crypto::gen_agreement_keypair();
        let ephemeral_sig = self.stk_private.sign(ephemeral.public.as_bytes());
        let master = crypto::dh(&ephemeral.private, &resolver_ephemeral).ok()?;
        let nonce = crypto::random_bytes::<RESPONSE_NONCE_LEN>();
        let inner = ResponseInner {
            dns_response,
            credential: self.credential,
            ephemeral_sig,
            child_keys: self.inject_child_keys.clone(),
        };
        wire::seal_response(&inner, &ephemeral.public, &master, &nonce).ok()
    }
}

impl DatagramHandler for RogueServer {
    fn handle(&self, datagram: &[u8], _src: &str) -> Option<Vec<u8>> {
        self.respond(datagram)
    }
}

/// Runs one scenario against a warmed resolver and reports the outcome.
pub fn run_attack(testnet: &Testnet, script: AttackScript) -> AttackOutcome {
    let resolver = testnet.resolver();
    let transport = testnet.transport();
    let warm = Name::parse("www.example.com").unwrap();
    let target = Name::parse("note.example.com").unwrap();

    match script {
        AttackScript::ReplayPrevSession => {
            // Session 1 (warm-up brings the resolution to one exchange).
            resolver.resolve(&warm, RType::A, Mode::Private, transport).result.unwrap();
            // Session 2: capture the honest response for the target name.
            testnet.router.clear_log();
            struct Capture(Arc<std::sync::Mutex<Vec<u8>>>);
            impl Interceptor for Capture {
                fn on_response(&mut self, _dest: &str, datagram: &[u8]) -> TapAction {
                    *self.0.lock().unwrap() = datagram.to_vec();
                    TapAction::Pass
                }
            }
            let captured = Arc::new(std::sync::Mutex::new(Vec::new()));
            testnet.router.set_interceptor(Some(Box::new(Capture(captured.clone()))));
            let fresh_target = Name::parse("txt2.example.com").unwrap();
            // This name may or may not exist; the datagram is what matters.
            let _ = resolver.resolve(&fresh_target, RType::A, Mode::Private, transport);
            let captured_bytes = captured.lock().unwrap().clone();
            // Session 3: fresh ephemeral key, replayed old response.
            finish_with_interceptor(
                testnet,
                &resolver,
                &target,
                Mode::Private,
                script.name(),
                Box::new(ReplaceResponse { payload: captured_bytes }),
            )
        }
        AttackScript::BitFlip { offset, target: flip_target } => {
            resolver.resolve(&warm, RType::A, Mode::Private, transport).result.unwrap();
            finish_with_interceptor(
                testnet,
                &resolver,
                &target,
                Mode::Private,
                script.name(),
                Box::new(FlipBit { offset, target: flip_target }),
            )
        }
        AttackScript::CredentialSubstitute => {
            resolver.resolve(&warm, RType::A, Mode::Private, transport).result.unwrap();
            // Rogue zone key signs a fresh credential for the rogue server.
            let rogue_zone_key = SigningKeypair::generate();
            let stk = SigningKeypair::generate();
            let now = testnet.clock.now_secs();
            let structure = ShortTermKeyStructure {
                inception: now as u32,
                expiration: now as u32 + 3600,
                stk_public_key: stk.public(),
                nameserver_id: 1,
                zone_level: 2,
            };
            let credential =
                delegation::issue(structure, &rogue_zone_key, now, &IssuePolicy::new(2)).unwrap();
            let zone = testnet.zone("example.com.").nameservers[0].zone_snapshot();
            let rogue = RogueServer::new(credential, stk, zone);
            run_with_rogue_endpoint(testnet, &resolver, &target, script.name(), rogue)
        }
        AttackScript::ExpiredCredential => {
            resolver.resolve(&warm, RType::A, Mode::Private, transport).result.unwrap();
            // A genuinely issued credential that has since expired: the
            // rogue is a stale zone nameserver still answering.
            let handle = testnet.zone("example.com.");
            let stk = SigningKeypair::generate();
            let now = testnet.clock.now_secs();
            let lifetime = 600u32;
            let structure = ShortTermKeyStructure {
                inception: now as u32,
                expiration: now as u32 + lifetime,
                stk_public_key: stk.public(),
                nameserver_id: 1,
                zone_level: 2,
            };
            let credential = handle
                .keyserver
                .handle_signing_request(1, structure)
                .expect("key server signs for its registered nameserver");
            // Keep honest servers alive across the clock jump, then expire
            // the captured credential past the skew allowance.
            testnet.clock.advance_secs(u64::from(lifetime) / 2);
            testnet.tick_all();
            testnet.clock.advance_secs(u64::from(lifetime) / 2 + 121);
            testnet.tick_all();
            // Re-warm: the jump expired cached NS records, and the attacked
            // resolution must stay a single exchange for an exact cache diff.
            resolver.resolve(&warm, RType::A, Mode::Private, transport).result.unwrap();
            let zone = handle.nameservers[0].zone_snapshot();
            let rogue = RogueServer::new(credential, stk, zone);
            run_with_rogue_endpoint(testnet, &resolver, &target, script.name(), rogue)
        }
        AttackScript::ChildKeySwap => {
            // The adversary first acts as an ordinary client to obtain the
            // root server's (public) credential from a session of its own.
            let root_ns = testnet.zone(".").ns_names[0].clone();
            let eavesdrop_eph = crypto::gen_agreement_keypair();
            let probe = Message::query(1, Name::parse("com.").unwrap(), RType::Ns).encode();
            let probe_datagram =
                wire::encode_query_plain(&eavesdrop_eph.public, &probe).unwrap();
            let reply = transport.exchange(root_ns.as_str(), &probe_datagram).unwrap();
            let envelope = wire::decode_response_envelope(&reply).unwrap();
            let master = crypto::dh(&eavesdrop_eph.private, &envelope.server_ephemeral).unwrap();
            let root_credential = wire::open_response(&envelope, &master).unwrap().credential;

            // Forge a delegating root response substituting attacker keys
            // for the TLD's. Everything verifies except the ephemeral
            // signature, which the attacker cannot produce.
            let attacker_signing = SigningKeypair::generate();
            let attacker_agreement = crypto::gen_agreement_keypair();
            let root_zone = testnet.zone(".").nameservers[0].zone_snapshot();
            let rogue = RogueServer {
                credential: root_credential,
                stk_private: attacker_signing.clone(),
                zone: root_zone,
                inject_child_keys: Some(ChildKeys {
                    signing: vec![attacker_signing.public()],
                    agreement: attacker_agreement.public,
                }),
            };
            // Cold resolver: the swap targets the first (root) exchange.
            let cold = testnet.resolver();
            let before = cold.cache_fingerprint();
            testnet.router.register(root_ns.as_str(), Arc::new(rogue));
            let outcome = cold.resolve(&target, RType::A, Mode::Private, transport);
            restore_zone_endpoint(testnet, ".", 0);
            let after = cold.cache_fingerprint();
            AttackOutcome {
                script: script.name(),
                rejected: outcome.result.is_err(),
                failure: outcome.result.err(),
                cache_unchanged: before == after,
            }
        }
        AttackScript::DowngradeToPlaintext => {
            resolver.resolve(&warm, RType::A, Mode::Private, transport).result.unwrap();
            // A plausible plaintext answer for the target query.
            let zone = testnet.zone("example.com.").nameservers[0].zone_snapshot();
            let plain = zone.respond(&Message::query(7, target.clone(), RType::A)).encode();
            finish_with_interceptor(
                testnet,
                &resolver,
                &target,
                Mode::Private,
                script.name(),
                Box::new(ReplaceResponse { payload: plain }),
            )
        }
    }
}

/// Installs the interceptor, runs the target resolution, and grades it.
fn finish_with_interceptor(
    testnet: &Testnet,
    resolver: &Resolver,
    target: &Name,
    mode: Mode,
    script: String,
    interceptor: Box<dyn Interceptor>,
) -> AttackOutcome {
    let before = resolver.cache_fingerprint();
    testnet.router.set_interceptor(Some(interceptor));
    let outcome = resolver.resolve(target, RType::A, mode, testnet.transport());
    testnet.router.set_interceptor(None);
    let after = resolver.cache_fingerprint();
    AttackOutcome {
        script,
        rejected: outcome.result.is_err(),
        failure: outcome.result.err(),
        cache_unchanged: before == after,
    }
}

/// Swaps the SLD's first nameserver for a rogue endpoint, resolves, swaps
/// back.
fn run_with_rogue_endpoint(
    testnet: &Testnet,
    resolver: &Resolver,
    target: &Name,
    script: String,
    rogue: RogueServer,
) -> AttackOutcome {
    let endpoint = testnet.zone("example.com.").ns_names[0].clone();
    let before = resolver.cache_fingerprint();
    testnet.router.register(endpoint.as_str(), Arc::new(rogue));
    let outcome = resolver.resolve(target, RType::A, Mode::Private, testnet.transport());
    restore_zone_endpoint(testnet, "example.com.", 0);
    let after = resolver.cache_fingerprint();
    AttackOutcome {
        script,
        rejected: outcome.result.is_err(),
        failure: outcome.result.err(),
        cache_unchanged: before == after,
    }
}

fn restore_zone_endpoint(testnet: &Testnet, zone: &str, ns_index: usize) {
    let handle = testnet.zone(zone);
    let name = handle.ns_names[ns_index].clone();
    let ns = handle.nameservers[ns_index].clone();
    testnet.router.register(name.as_str(), ns);
}

/// The full named scenario list (bit-flip offsets are swept separately).
pub fn standard_scenarios() -> Vec<AttackScript> {
    vec![
        AttackScript::ReplayPrevSession,
        AttackScript::BitFlip { offset: 0, target: FlipTarget::Response },
        AttackScript::BitFlip { offset: 40, target: FlipTarget::Response },
        AttackScript::BitFlip { offset: 300, target: FlipTarget::Response },
        AttackScript::BitFlip { offset: 10, target: FlipTarget::Query },
        AttackScript::CredentialSubstitute,
        AttackScript::ExpiredCredential,
        AttackScript::ChildKeySwap,
        AttackScript::DowngradeToPlaintext,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resolver::AuthFailure;
    use crate::testnet::TestnetSpec;

    fn expect_defeated(script: AttackScript) -> AttackOutcome {
        let testnet = Testnet::build(TestnetSpec::three_level("")).unwrap();
        let outcome = run_attack(&testnet, script);
        assert!(outcome.attack_defeated(), "attack got through: {}", outcome.log_line());
        outcome
    }

    #[test]
    fn replayed_responses_from_prior_sessions_are_rejected() {
        let outcome = expect_defeated(AttackScript::ReplayPrevSession);
        assert_eq!(outcome.failure, Some(ResolveError::Auth(AuthFailure::DecryptFailed)));
    }

    #[test]
    fn response_bit_flips_are_rejected() {
        for offset in [0, 3, 39, 52, 90, 250] {
            expect_defeated(AttackScript::BitFlip { offset, target: FlipTarget::Response });
        }
    }

    #[test]
    fn query_bit_flips_are_rejected() {
        for offset in [0, 5, 40, 70] {
            expect_defeated(AttackScript::BitFlip { offset, target: FlipTarget::Query });
        }
    }

    #[test]
    fn substituted_credentials_are_rejected() {
        let outcome = expect_defeated(AttackScript::CredentialSubstitute);
        assert_eq!(
            outcome.failure,
            Some(ResolveError::Auth(AuthFailure::CredentialBadSig))
        );
    }

    #[test]
    fn expired_credentials_are_rejected() {
        let outcome = expect_defeated(AttackScript::ExpiredCredential);
        assert_eq!(
            outcome.failure,
            Some(ResolveError::Auth(AuthFailure::CredentialExpired))
        );
    }

    #[test]
    fn child_key_swaps_fail_the_ephemeral_signature() {
        let outcome = expect_defeated(AttackScript::ChildKeySwap);
        assert_eq!(
            outcome.failure,
            Some(ResolveError::Auth(AuthFailure::EphemeralSigInvalid))
        );
    }

    #[test]
    fn plaintext_downgrades_are_rejected() {
        let outcome = expect_defeated(AttackScript::DowngradeToPlaintext);
        assert!(matches!(outcome.failure, Some(ResolveError::Wire(_))));
    }
}
