//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line (run with `--nocapture` to see them). These are the
//! properties the protocol exists to provide; every tolerance is pinned
//! here, not calibrated later.

use std::sync::{Arc, Mutex, MutexGuard};

use dnssecplus::clock::Clock;
use dnssecplus::crypto;
use dnssecplus::dns::{Message, Name, RType};
use dnssecplus::resolver::{CachePolicy, Mode, ResolveError};
use dnssecplus::testnet::attack::{run_attack, standard_scenarios, AttackScript, FlipTarget};
use dnssecplus::testnet::bench::{bench_processing, BenchConfig, Scheme};
use dnssecplus::testnet::{RotationKind, Testnet, TestnetSpec, ZoneSetup};
use dnssecplus::transport::Transport;
use dnssecplus::wire;
use dnssecplus::zone::PresignedResponder;

fn pass(criterion: u32, name: &str) {
    println!("acceptance criterion {criterion} ({name}): PASS");
}

/// The latency criterion measures wall time, so the suite runs one test at
/// a time.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

/// A hierarchy with one-letter zone labels so tiny DNS payload targets are
/// reachable: `.` → `x.` → `a.x.`, plus a second TLD child `b.x.`.
fn short_name_testnet() -> Testnet {
    let mut sld = ZoneSetup::new("a.x.", 2);
    let t50_pad = "y".repeat(5);
    let t500_pad = "y".repeat(452);
    let t4000_pad = "y".repeat(3936);
    sld.extra_records = format!(
        "q IN A 192.0.2.1\n\
         t50 IN TXT \"{t50_pad}\"\n\
         t500 IN TXT \"{t500_pad}\"\n\
         t4000 IN TXT \"{t4000_pad}\"\n\
         m IN A 192.0.2.11\nm IN A 192.0.2.12\nm IN A 192.0.2.13\nm IN A 192.0.2.14\nm IN A 192.0.2.15\n\
         big IN A 203.0.113.1\nbig IN A 203.0.113.2\nbig IN A 203.0.113.3\nbig IN A 203.0.113.4\nbig IN A 203.0.113.5\n\
         big IN A 203.0.113.6\nbig IN A 203.0.113.7\nbig IN A 203.0.113.8\nbig IN A 203.0.113.9\nbig IN A 203.0.113.10\n\
         big IN A 203.0.113.11\nbig IN A 203.0.113.12\nbig IN A 203.0.113.13\nbig IN A 203.0.113.14\nbig IN A 203.0.113.15\n\
         big IN A 203.0.113.16\nbig IN A 203.0.113.17\nbig IN A 203.0.113.18\nbig IN A 203.0.113.19\nbig IN A 203.0.113.20\n"
    );
    let mut second_child = ZoneSetup::new("b.x.", 2);
    second_child.ns_count = 2;
    let spec = TestnetSpec {
        zones: vec![
            ZoneSetup::new(".", 0),
            ZoneSetup::new("x.", 1),
            sld,
            second_child,
        ],
        ..TestnetSpec::three_level("")
    };
    Testnet::build(spec).expect("short-name testnet builds")
}

#[test]
fn criterion_1_constant_overhead() {
    let _serial = serial();
    let testnet = short_name_testnet();

    // The padded TXT answers produce DNS payloads of exactly these sizes.
    let cases = [("t50.a.x.", RType::Txt, 50), ("t500.a.x.", RType::Txt, 500), ("t4000.a.x.", RType::Txt, 4000)];
    for (name, rtype, expected_payload) in cases {
        let row = testnet
            .measure_overhead("a.x.", &Name::parse(name).unwrap(), rtype)
            .unwrap();
        assert_eq!(row.dns_payload, expected_payload, "payload size for {name}");
        assert_eq!(row.overhead, 248, "non-delegating overhead for {name}");
        assert!(!row.delegating);
    }

    // Invariant across NXDOMAIN and multi-record answers.
    for (name, rtype) in [("nope.a.x.", RType::A), ("m.a.x.", RType::A)] {
        let row = testnet
            .measure_overhead("a.x.", &Name::parse(name).unwrap(), rtype)
            .unwrap();
        assert_eq!(row.overhead, 248, "overhead for {name}");
    }

    // Delegating responses from both ancestor zones, across referral sizes
    // (a.x. has one nameserver, b.x. two).
    for (zone, name) in [(".", "t50.a.x."), ("x.", "t50.a.x."), ("x.", "c.b.x."), ("x.", "t4000.a.x.")] {
        let row = testnet
            .measure_overhead(zone, &Name::parse(name).unwrap(), RType::A)
            .unwrap();
        assert!(row.delegating, "referral expected from {zone} for {name}");
        assert_eq!(row.overhead, 313, "delegating overhead at {zone} for {name}");
    }

    // The frozen constants sit within ±8 of the design targets ~245/~310.
    assert!((248i64 - 245).abs() <= 8);
    assert!((313i64 - 310).abs() <= 8);
    pass(1, "constant overhead 248/313");
}

#[test]
fn criterion_2_amplification_bound() {
    let _serial = serial();
    let testnet = short_name_testnet();
    let handle = testnet.zone("a.x.");
    let ns = handle.ns_names[0].as_str();

    // Minimal plain-mode query: a bare 12-byte DNS header inside the
    // envelope (48 bytes on the wire).
    let ephemeral = crypto::gen_agreement_keypair();
    let minimal = wire::encode_query_plain(&ephemeral.public, &[0u8; 12]).unwrap();
    assert_eq!(minimal.len(), 48);
    let reply = testnet.router.exchange(ns, &minimal).unwrap();
    let amplification = reply.len() as f64 / minimal.len() as f64;
    assert!(
        amplification <= 8.0,
        "minimal-query amplification {amplification:.2} exceeds 8"
    );

    // Single-record answers stay bounded too.
    for (name, rtype) in [("q.a.x.", RType::A), ("t50.a.x.", RType::Txt)] {
        let eph = crypto::gen_agreement_keypair();
        let dns = Message::query(1, Name::parse(name).unwrap(), rtype).encode();
        let query = wire::encode_query_plain(&eph.public, &dns).unwrap();
        let reply = testnet.router.exchange(ns, &query).unwrap();
        let factor = reply.len() as f64 / query.len() as f64;
        assert!(factor <= 8.0, "amplification {factor:.2} for {name} exceeds 8");
    }

    // Contrast: a pre-signed baseline serving 20 records with per-record
    // signatures amplifies a plain query by well over 20x.
    let zone = handle.nameservers[0].zone_snapshot();
    let baseline = PresignedResponder::new(zone, &crypto::SigningKeypair::generate());
    let plain_query = Message::query(2, Name::parse("big.a.x.").unwrap(), RType::A).encode();
    let baseline_reply = baseline.handle(&plain_query).unwrap();
    let baseline_amplification = baseline_reply.len() as f64 / plain_query.len() as f64;
    assert!(
        baseline_amplification > 20.0,
        "baseline amplification {baseline_amplification:.2} should exceed 20"
    );
    pass(2, "amplification <= 8x vs baseline > 20x");
}

#[test]
fn criterion_3_single_round_trip() {
    let _serial = serial();
    let testnet = Testnet::build(TestnetSpec::three_level("")).unwrap();
    let resolver = testnet.resolver();
    let transport = testnet.transport();

    testnet.router.clear_log();
    let cold = resolver.resolve(
        &Name::parse("www.example.com").unwrap(),
        RType::A,
        Mode::Private,
        transport,
    );
    cold.result.expect("cold resolution succeeds");
    assert_eq!(cold.exchanges, 3, "cold three-level resolution is 3 exchanges");
    assert_eq!(testnet.router.query_exchange_count(), 3);

    testnet.router.clear_log();
    let warm = resolver.resolve(
        &Name::parse("note.example.com").unwrap(),
        RType::Txt,
        Mode::Private,
        transport,
    );
    warm.result.expect("warm resolution succeeds");
    assert_eq!(warm.exchanges, 1, "warm zone-key cache resolves in 1 exchange");
    assert_eq!(testnet.router.query_exchange_count(), 1);
    pass(3, "single round-trip per zone");
}

#[test]
fn criterion_4_fail_closed_attack_suite() {
    let _serial = serial();
    let testnet = Testnet::build(TestnetSpec::three_level("")).unwrap();

    let mut failures = Vec::new();
    for script in standard_scenarios() {
        let outcome = run_attack(&testnet, script);
        if !outcome.attack_defeated() {
            failures.push(outcome.log_line());
        }
    }

    // Every-offset bit-flip sweep over one full exchange in each direction.
    // Measure the honest datagram sizes first.
    let probe = run_attack(&testnet, AttackScript::BitFlip { offset: 0, target: FlipTarget::Response });
    assert!(probe.rejected);
    let resolver = testnet.resolver();
    resolver
        .resolve(&Name::parse("www.example.com").unwrap(), RType::A, Mode::Private, testnet.transport())
        .result
        .unwrap();
    testnet.router.clear_log();
    resolver
        .resolve(&Name::parse("note.example.com").unwrap(), RType::A, Mode::Private, testnet.transport())
        .result
        .unwrap();
    let log = testnet.router.take_log();
    let exchange = log.iter().find(|e| !e.channel).expect("one warm exchange");
    let query_len = exchange.query_len;
    let response_len = exchange.response_len.expect("honest response present");
    assert!(query_len <= 512 && response_len <= 512, "sweep covers whole datagrams");

    for offset in 0..response_len {
        let outcome = run_attack(&testnet, AttackScript::BitFlip { offset, target: FlipTarget::Response });
        if !outcome.attack_defeated() {
            failures.push(outcome.log_line());
        }
    }
    for offset in 0..query_len {
        let outcome = run_attack(&testnet, AttackScript::BitFlip { offset, target: FlipTarget::Query });
        if !outcome.attack_defeated() {
            failures.push(outcome.log_line());
        }
    }

    assert!(
        failures.is_empty(),
        "{} attack(s) not rejected cleanly:\n{}",
        failures.len(),
        failures.join("\n")
    );
    pass(4, "100% of attacks rejected, zero cache mutation");
}

/// Compressed-time policy for rotation runs: small TTLs, small skew.
fn rotation_spec(zero_waits: bool) -> TestnetSpec {
    TestnetSpec {
        stk_lifetime_secs: 120,
        max_skew_secs: 5,
        cache_policy: CachePolicy::new(vec![(0, 120), (1, 60), (2, 30)]).unwrap(),
        rotation_wait_secs_override: if zero_waits { Some(0) } else { None },
        ..TestnetSpec::three_level("")
    }
}

/// Runs background resolutions at 10/s of simulated time while pumping a
/// rotation to completion; returns the failure log lines.
fn rotation_liveness(kind: RotationKind) -> Vec<String> {
    let testnet = Testnet::build(rotation_spec(false)).unwrap();
    let sld = Name::parse("example.com").unwrap();
    let persistent = testnet.resolver();
    let transport = testnet.transport();

    // Prime the persistent resolver's caches.
    persistent
        .resolve(&Name::parse("www.example.com").unwrap(), RType::A, Mode::Private, transport)
        .result
        .unwrap();

    let handle = testnet.zone("example.com.");
    match kind {
        RotationKind::Agreement => handle.keyserver.begin_agreement_rotation().unwrap(),
        RotationKind::Signing => handle.keyserver.begin_signing_rotation().unwrap(),
    }

    let mut failures = Vec::new();
    let mut step = 0u64;
    let mut done_at: Option<u64> = None;
    loop {
        testnet.clock.advance_millis(100);
        testnet.tick_all();
        let action = testnet.pump_rotation(&sld, kind);
        if matches!(action, dnssecplus::keyserver::RotationAction::Complete) && done_at.is_none() {
            done_at = Some(step);
        }
        // 10 resolutions per simulated second; a unique name each time so
        // every probe exercises the network path, alternating modes, with a
        // periodic cold-cache resolver joining in.
        let mode = if step.is_multiple_of(2) { Mode::Private } else { Mode::Plain };
        let name = Name::parse(&format!("r{step}.example.com")).unwrap();
        let outcome = persistent.resolve(&name, RType::A, mode, transport);
        if let Err(e) = &outcome.result {
            failures.push(format!("step {step} persistent {mode:?}: {e:?}"));
        }
        if step.is_multiple_of(100) {
            let cold = testnet.resolver();
            let cold_name = Name::parse(&format!("c{step}.example.com")).unwrap();
            let outcome = cold.resolve(&cold_name, RType::A, Mode::Private, transport);
            if let Err(e) = &outcome.result {
                failures.push(format!("step {step} cold: {e:?}"));
            }
        }
        // Run well past completion so post-rotation state is exercised too.
        if let Some(done) = done_at {
            if step > done + 100 {
                break;
            }
        }
        step += 1;
        assert!(step < 60_000, "rotation never completed");
    }
    failures
}

#[test]
fn criterion_5_rotation_liveness() {
    let _serial = serial();
    // Both rotation procedures complete under continuous load with zero
    // resolution failures.
    let agreement_failures = rotation_liveness(RotationKind::Agreement);
    assert!(
        agreement_failures.is_empty(),
        "agreement rotation caused failures:\n{}",
        agreement_failures.join("\n")
    );
    let signing_failures = rotation_liveness(RotationKind::Signing);
    assert!(
        signing_failures.is_empty(),
        "signing rotation caused failures:\n{}",
        signing_failures.join("\n")
    );

    // Negative: skipping the mandated waits breaks live resolvers.
    {
        let testnet = Testnet::build(rotation_spec(true)).unwrap();
        let sld = Name::parse("example.com").unwrap();
        let resolver = testnet.resolver();
        resolver
            .resolve(&Name::parse("www.example.com").unwrap(), RType::A, Mode::Private, testnet.transport())
            .result
            .unwrap();
        testnet.zone("example.com.").keyserver.begin_agreement_rotation().unwrap();
        let action = testnet.pump_rotation(&sld, RotationKind::Agreement);
        assert!(matches!(action, dnssecplus::keyserver::RotationAction::Complete));
        // The resolver's cached agreement key was never given time to
        // expire; its next encrypted query is undecryptable.
        let outcome = resolver.resolve(
            &Name::parse("skipped.example.com").unwrap(),
            RType::A,
            Mode::Private,
            testnet.transport(),
        );
        assert!(outcome.result.is_err(), "skipping the agreement wait must break resolution");
    }
    {
        let testnet = Testnet::build(rotation_spec(true)).unwrap();
        let sld = Name::parse("example.com").unwrap();
        let resolver = testnet.resolver();
        resolver
            .resolve(&Name::parse("www.example.com").unwrap(), RType::A, Mode::Private, testnet.transport())
            .result
            .unwrap();
        testnet.zone("example.com.").keyserver.begin_signing_rotation().unwrap();
        let action = testnet.pump_rotation(&sld, RotationKind::Signing);
        assert!(matches!(action, dnssecplus::keyserver::RotationAction::Complete));
        // Issuance switched with no cache wait: a refreshed credential
        // cannot validate against the resolver's cached old key.
        for ns in &testnet.zone("example.com.").nameservers {
            ns.refresh_credential().unwrap();
        }
        let outcome = resolver.resolve(
            &Name::parse("skipped.example.com").unwrap(),
            RType::A,
            Mode::Plain,
            testnet.transport(),
        );
        assert_eq!(
            outcome.result.err(),
            Some(ResolveError::Auth(dnssecplus::resolver::AuthFailure::CredentialBadSig)),
            "skipping the signing wait must break validation"
        );
    }
    pass(5, "rotation liveness, and the waits are necessary");
}

#[test]
fn criterion_6_processing_latency_shape() {
    let _serial = serial();
    let config = BenchConfig::default();
    let report = bench_processing(&config).expect("benchmark runs");

    for &mtu in &config.mtus {
        for scheme in Scheme::all() {
            let cell = report.cell(scheme, mtu).expect("cell present");
            assert!(
                cell.samples_us.len() >= 1000,
                "need >=1000 samples, got {} for {}@{}",
                cell.samples_us.len(),
                scheme.label(),
                mtu
            );
        }
        let secure = report.cell(Scheme::DnssecPlus, mtu).unwrap();
        let plain = report.cell(Scheme::Vanilla, mtu).unwrap();
        let p90 = secure.quantile_us(0.90);
        assert!(p90 < 2_000, "p90 {}us >= 2ms at mtu {mtu}", p90);
        assert!(
            plain.quantile_us(0.50) < secure.quantile_us(0.50),
            "plain DNS p50 must undercut the secure path at mtu {mtu}"
        );
    }
    let presigned_1500 = report.cell(Scheme::Presigned, 1500).unwrap().quantile_us(0.50) as f64;
    let presigned_200 = report.cell(Scheme::Presigned, 200).unwrap().quantile_us(0.50) as f64;
    assert!(
        presigned_200 < 2.0 * presigned_1500,
        "pre-signed p50 degraded {presigned_200} vs {presigned_1500} (>=2x) between mtu 1500 and 200"
    );
    eprintln!("{}", report.summary());
    pass(6, "latency shape: p90 < 2ms, plain < secure, fragmentation marginal");
}

#[test]
fn criterion_7_oracle_equivalence() {
    let _serial = serial();
    let mut sld = ZoneSetup::new("example.com.", 2);
    let mut com = ZoneSetup::new("com.", 1);
    let mut root = ZoneSetup::new(".", 0);
    let mut extra_sld = String::new();
    for i in 0..40 {
        extra_sld.push_str(&format!("h{i} IN A 192.0.2.{}\n", (i % 250) + 1));
        extra_sld.push_str(&format!("d{i} IN TXT \"payload number {i}\"\n"));
    }
    sld.extra_records = extra_sld;
    let mut extra_com = String::new();
    for i in 0..30 {
        extra_com.push_str(&format!("e{i}.com. IN A 198.51.100.{}\n", (i % 250) + 1));
        extra_com.push_str(&format!("f{i}.com. IN TXT \"tld data {i}\"\n"));
    }
    com.extra_records = extra_com;
    let mut extra_root = String::new();
    for i in 0..30 {
        extra_root.push_str(&format!("g{i}.zz. IN A 203.0.113.{}\n", (i % 250) + 1));
        extra_root.push_str(&format!("k{i}.zz. IN TXT \"root data {i}\"\n"));
    }
    root.extra_records = extra_root;
    let spec = TestnetSpec { zones: vec![root, com, sld], ..TestnetSpec::three_level("") };
    let testnet = Testnet::build(spec).unwrap();

    // Corpus: every (name, type) with records in any zone, plus misses.
    let mut corpus: Vec<(Name, RType)> = Vec::new();
    for zone in &testnet.zones {
        let data = zone.nameservers[0].zone_snapshot();
        for key in data.record_keys() {
            corpus.push(key.clone());
        }
    }
    for i in 0..20 {
        corpus.push((Name::parse(&format!("miss{i}.example.com")).unwrap(), RType::A));
        corpus.push((Name::parse(&format!("miss{i}.com")).unwrap(), RType::Txt));
    }
    corpus.sort();
    corpus.dedup();
    assert!(corpus.len() >= 200, "corpus has {} entries", corpus.len());

    let resolver = testnet.resolver();
    let mut checked = 0usize;
    for (i, (name, rtype)) in corpus.iter().enumerate() {
        let mode = if i % 2 == 0 { Mode::Private } else { Mode::Plain };
        let outcome = resolver.resolve(name, *rtype, mode, testnet.transport());
        let answer = match outcome.result {
            Ok(a) => a,
            Err(e) => panic!("resolution of {name} {rtype} failed: {e:?}"),
        };
        let Some(payload) = answer.dns_payload else {
            continue; // cache hit: authenticated payload already compared
        };
        // Oracle: the deepest zone containing the name answers the same
        // question directly, in the clear.
        let authoritative = testnet
            .zones
            .iter()
            .filter(|z| name.is_within(&z.name))
            .max_by_key(|z| z.level)
            .expect("some zone contains every name");
        let zone_data = authoritative.nameservers[0].zone_snapshot();
        let received = Message::decode(&payload).expect("payload parses");
        let mut expected = zone_data.respond(&Message::query(received.id, name.clone(), *rtype));
        expected.recursion_desired = received.recursion_desired;
        assert_eq!(
            payload,
            expected.encode(),
            "decrypted payload differs from the vanilla oracle for {name} {rtype} ({mode:?})"
        );
        checked += 1;
    }
    assert!(checked >= 200, "only {checked} corpus entries hit the network");
    pass(7, "decrypted payloads byte-equal the vanilla oracle");
}

#[test]
fn criterion_8_credential_lifecycle() {
    let _serial = serial();
    let spec = TestnetSpec { stk_lifetime_secs: 600, ..TestnetSpec::three_level("") };
    let testnet = Testnet::build(spec).unwrap();
    let resolver = testnet.resolver();
    let transport = testnet.transport();
    let handle = testnet.zone("example.com.");

    // A stale server will need a genuinely issued credential later.
    let stale_key = crypto::SigningKeypair::generate();
    let now = testnet.clock.now_secs();
    let stale_credential = handle
        .keyserver
        .handle_signing_request(
            1,
            dnssecplus::delegation::ShortTermKeyStructure {
                inception: now as u32,
                expiration: now as u32 + 600,
                stk_public_key: stale_key.public(),
                nameserver_id: 1,
                zone_level: 2,
            },
        )
        .unwrap();
    let expiration = u64::from(stale_credential.structure.expiration);

    // Warm up, then halt the key server.
    resolver
        .resolve(&Name::parse("www.example.com").unwrap(), RType::A, Mode::Private, transport)
        .result
        .unwrap();
    testnet.router.deregister(&handle.keyserver_address);

    // Right up to expiration the nameserver answers and the resolver
    // accepts (probes use unique names to stay on the network path).
    let until_expiry = expiration - testnet.clock.now_secs();
    testnet.clock.advance_secs(until_expiry);
    let at_expiry = resolver.resolve(
        &Name::parse("probe1.example.com").unwrap(),
        RType::A,
        Mode::Private,
        transport,
    );
    assert!(at_expiry.result.is_ok(), "server answers at expiration + 0s");

    // One second later: fail closed, and at every later point too.
    for (i, advance) in [(2, 1u64), (3, 59), (4, 61)] {
        testnet.clock.advance_secs(advance);
        let outcome = resolver.resolve(
            &Name::parse(&format!("probe{i}.example.com")).unwrap(),
            RType::A,
            Mode::Private,
            transport,
        );
        assert_eq!(
            outcome.result.err(),
            Some(ResolveError::Timeout),
            "server must stay silent after expiration (now = expiration + {}s)",
            testnet.clock.now_secs() - expiration
        );
    }

    // Independence: a stale server that ignores expiry and answers anyway
    // is rejected by the resolver's own credential check.
    assert!(testnet.clock.now_secs() > expiration + 120, "past the skew window");
    let rogue = dnssecplus::testnet::StaleServer::new(
        stale_credential,
        stale_key,
        handle.nameservers[0].zone_snapshot(),
    );
    let target = handle.ns_names[0].clone();
    testnet.router.register(target.as_str(), Arc::new(rogue));
    let late = resolver.resolve(
        &Name::parse("probe9.example.com").unwrap(),
        RType::A,
        Mode::Private,
        transport,
    );
    assert_eq!(
        late.result.err(),
        Some(ResolveError::Auth(dnssecplus::resolver::AuthFailure::CredentialExpired)),
        "late responses are independently rejected"
    );
    pass(8, "credential lifecycle fails closed on both sides");
}
