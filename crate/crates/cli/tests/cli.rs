//! End-to-end tests of the command-line tools, including a real key server
//! and nameserver exchanging datagrams over UDP loopback.

use std::net::UdpSocket;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

fn binary() -> PathBuf {
    let mut path = std::env::current_exe().unwrap();
    path.pop(); // deps/
    path.pop(); // debug/
    path.push("dnssecplus");
    path
}

fn run(args: &[&str]) -> (i32, String, String) {
    let output = Command::new(binary())
        .args(args)
        .output()
        .expect("binary runs");
    (
        output.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&output.stdout).to_string(),
        String::from_utf8_lossy(&output.stderr).to_string(),
    )
}

fn free_port() -> u16 {
    UdpSocket::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn keygen(kind: &str, path: &Path) -> String {
    let (code, stdout, stderr) = run(&["keygen", "--kind", kind, "--out", path.to_str().unwrap()]);
    assert_eq!(code, 0, "keygen failed: {stderr}");
    stdout.trim().to_string()
}

struct KillOnDrop(Child);

impl Drop for KillOnDrop {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn keygen_writes_restricted_key_and_respects_force() {
    let dir = tempfile::tempdir().unwrap();
    let key = dir.path().join("zone.key");
    let public = keygen("zone-signing", &key);
    assert_eq!(public.len(), 66, "compressed signing public key is 33 bytes hex");
    let first_private = std::fs::read_to_string(&key).unwrap();
    assert_eq!(first_private.trim().len(), 64);
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        let mode = std::fs::metadata(&key).unwrap().permissions().mode();
        assert_eq!(mode & 0o777, 0o600, "private key file is mode-restricted");
    }

    // Re-running without --force leaves the file untouched.
    let (code, _, stderr) = run(&["keygen", "--kind", "zone-signing", "--out", key.to_str().unwrap()]);
    assert_eq!(code, 5, "exists-without-force is a config error: {stderr}");
    assert_eq!(std::fs::read_to_string(&key).unwrap(), first_private);

    let (code, stdout, _) =
        run(&["keygen", "--kind", "zone-signing", "--out", key.to_str().unwrap(), "--force"]);
    assert_eq!(code, 0);
    assert_ne!(stdout.trim(), public);

    let agree_path = dir.path().join("agree.key");
    let agreement_public = keygen("zone-agreement", &agree_path);
    assert_eq!(agreement_public.len(), 64, "agreement public key is 32 bytes hex");

    // showkey recovers the public from the stored private key.
    let (code, stdout, _) =
        run(&["showkey", "--kind", "zone-agreement", "--key", agree_path.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert_eq!(stdout.trim(), agreement_public);
}

#[test]
fn daemons_answer_an_end_to_end_query() {
    let dir = tempfile::tempdir().unwrap();
    let signing_key = dir.path().join("signing.key");
    let agreement_key = dir.path().join("agreement.key");
    let ks_channel_key = dir.path().join("ks-channel.key");
    let ns_channel_key = dir.path().join("ns-channel.key");
    let signing_pub = keygen("zone-signing", &signing_key);
    let agreement_pub = keygen("zone-agreement", &agreement_key);
    let ks_channel_pub = keygen("channel", &ks_channel_key);
    let ns_channel_pub = keygen("channel", &ns_channel_key);

    let ks_port = free_port();
    let ns_port = free_port();

    let zone_file = dir.path().join("root.zone");
    std::fs::write(
        &zone_file,
        "$TTL 300\n\
         . IN SOA ns1.root. admin.root. 1 3600 600 86400 60\n\
         . IN NS ns1.root.\n\
         ns1.root. IN A 127.0.0.1\n\
         www.test. IN A 192.0.2.55\n",
    )
    .unwrap();
    let registrations = dir.path().join("registrations");
    std::fs::write(
        &registrations,
        format!("ns 1 {ns_channel_pub} 127.0.0.1:{ns_port}\n"),
    )
    .unwrap();
    let anchors = dir.path().join("anchors");
    std::fs::write(
        &anchors,
        format!("root w {signing_pub} A {agreement_pub}\nns 127.0.0.1:{ns_port}\n"),
    )
    .unwrap();
    let journal = dir.path().join("journal");

    let _ks = KillOnDrop(
        Command::new(binary())
            .args([
                "serve-keyserver",
                "--zone",
                ".",
                "--level",
                "0",
                "--listen",
                &format!("127.0.0.1:{ks_port}"),
                "--journal",
                journal.to_str().unwrap(),
                "--signing-key",
                signing_key.to_str().unwrap(),
                "--agreement-key",
                agreement_key.to_str().unwrap(),
                "--channel-key",
                ks_channel_key.to_str().unwrap(),
                "--registrations",
                registrations.to_str().unwrap(),
            ])
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .unwrap(),
    );
    let _ns = KillOnDrop(
        Command::new(binary())
            .args([
                "serve-ns",
                "--zone",
                ".",
                "--level",
                "0",
                "--zone-file",
                zone_file.to_str().unwrap(),
                "--listen",
                &format!("127.0.0.1:{ns_port}"),
                "--ns-id",
                "1",
                "--keyserver",
                &format!("127.0.0.1:{ks_port}"),
                "--channel-key",
                ns_channel_key.to_str().unwrap(),
                "--keyserver-pub",
                &ks_channel_pub,
            ])
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .unwrap(),
    );

    // Poll until the pipeline is up (credential issued, agreement key
    // provisioned) or the deadline passes.
    let deadline = Instant::now() + Duration::from_secs(20);
    let mut last = (1, String::new(), String::new());
    while Instant::now() < deadline {
        last = run(&[
            "query",
            "www.test.",
            "A",
            "--mode",
            "private",
            "--anchors",
            anchors.to_str().unwrap(),
            "--trace",
            "--timeout-ms",
            "500",
        ]);
        if last.0 == 0 {
            break;
        }
        std::thread::sleep(Duration::from_millis(300));
    }
    assert_eq!(last.0, 0, "query never succeeded; stderr: {}", last.2);
    assert!(last.1.contains("192.0.2.55"), "stdout: {}", last.1);
    assert!(last.2.contains("verified=true"), "trace shows verification: {}", last.2);

    // Plain mode works against the same daemons.
    let (code, stdout, _) = run(&[
        "query",
        "www.test.",
        "A",
        "--mode",
        "plain",
        "--anchors",
        anchors.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    assert!(stdout.contains("192.0.2.55"));

    // A missing name is a successful negative answer.
    let (code, stdout, _) = run(&[
        "query",
        "missing.test.",
        "A",
        "--anchors",
        anchors.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    assert!(stdout.contains("NXDOMAIN"));

    // Wrong trust anchors: typed auth failure, exit 2.
    let bad_anchors = dir.path().join("bad-anchors");
    let other_signing = keygen("zone-signing", &dir.path().join("other.key"));
    std::fs::write(
        &bad_anchors,
        format!("root w {other_signing} A {agreement_pub}\nns 127.0.0.1:{ns_port}\n"),
    )
    .unwrap();
    let (code, _, stderr) = run(&[
        "query",
        "www.test.",
        "A",
        "--mode",
        "plain",
        "--anchors",
        bad_anchors.to_str().unwrap(),
    ]);
    assert_eq!(code, 2, "bad anchors must fail closed: {stderr}");
    assert!(stderr.contains("credential"), "names the failed check: {stderr}");
}

#[test]
fn bench_flags_validate_and_produce_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let (code, stdout, stderr) = run(&[
        "bench",
        "--mtus",
        "1500,200",
        "--n",
        "5",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "bench failed: {stderr}");
    assert!(stdout.contains("p50_us"));
    let written = std::fs::read_to_string(&csv).unwrap();
    assert!(written.starts_with("scheme,mtu,sample_us"));
    assert_eq!(written.lines().count(), 1 + 2 * 3 * 5);

    let (code, _, _) = run(&["bench", "--n", "0"]);
    assert_eq!(code, 5, "zero queries is a config error");
}

#[test]
fn attack_suite_reports_all_rejected() {
    let (code, stdout, stderr) = run(&["attack", "--all"]);
    assert_eq!(code, 0, "attack run failed: {stderr}");
    let rejected = stdout.lines().filter(|l| l.starts_with("REJECTED")).count();
    assert!(rejected >= 9, "expected every scenario rejected:\n{stdout}");
    assert!(!stdout.contains("ACCEPTED"));

    let (code, _, _) = run(&["attack"]);
    assert_eq!(code, 5, "missing scenario selection is a config error");
}
