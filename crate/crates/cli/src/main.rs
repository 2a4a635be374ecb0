//! Operator tools: a dig-like query client, the nameserver and key-server
//! daemons, key generation, and the self-contained benchmark and attack
//! runners.
//!
//! Exit codes are stable for scripting: 0 success (including negative DNS
//! answers), 2 authentication failure, 3 timeout, 4 wire/format error,
//! 5 configuration or usage error.

use std::fs;
use std::net::UdpSocket;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};

use dnssecplus::clock::SystemClock;
use dnssecplus::crypto::{self, AgreementPrivate, AgreementPublic, SigningKeypair};
use dnssecplus::dns::{Name, RData, RType};
use dnssecplus::keyserver::{KeyServer, KeyServerConfig, NameserverRegistration};
use dnssecplus::nameserver::{ModeSupport, Nameserver, NameserverConfig};
use dnssecplus::resolver::{Mode, ResolveError, Resolver, ResolverConfig, TrustAnchor};
use dnssecplus::testnet::attack::{run_attack, standard_scenarios};
use dnssecplus::testnet::bench::{bench_processing, BenchConfig, Scheme};
use dnssecplus::testnet::{Testnet, TestnetSpec};
use dnssecplus::transport::UdpTransport;
use dnssecplus::zone::ZoneData;

const EXIT_AUTH: u8 = 2;
const EXIT_TIMEOUT: u8 = 3;
const EXIT_WIRE: u8 = 4;
const EXIT_CONFIG: u8 = 5;

#[derive(Parser)]
#[command(name = "dnssecplus", version, about = "Secure stage-2 DNS tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum QueryMode {
    Plain,
    Private,
}

#[derive(Clone, Copy, ValueEnum)]
enum KeyKind {
    ZoneSigning,
    ZoneAgreement,
    Channel,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeSupportArg {
    Both,
    PrivacyOnly,
}

#[derive(Subcommand)]
enum Command {
    /// Resolve a name through the secure hierarchy and print the answer.
    Query {
        name: String,
        #[arg(default_value = "A")]
        rtype: String,
        #[arg(long, value_enum, default_value_t = QueryMode::Private)]
        mode: QueryMode,
        /// Trust-anchor file (`root w <hex> A <hex>` plus `ns <addr>` hints).
        #[arg(long)]
        anchors: PathBuf,
        /// Root server address, overriding anchor-file hints.
        #[arg(long)]
        server: Option<String>,
        /// Nameserver address book (`ns <name> <ip:port>` lines).
        #[arg(long)]
        ns_map: Option<PathBuf>,
        #[arg(long)]
        trace: bool,
        #[arg(long, default_value_t = 2000)]
        timeout_ms: u64,
    },
    /// Generate a keypair: private key to a file, public key to stdout.
    Keygen {
        #[arg(long, value_enum)]
        kind: KeyKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Print the public key of a stored private key.
    Showkey {
        #[arg(long, value_enum)]
        kind: KeyKind,
        #[arg(long)]
        key: PathBuf,
    },
    /// Run an authoritative nameserver.
    ServeNs {
        #[arg(long)]
        zone: String,
        #[arg(long)]
        level: u32,
        #[arg(long)]
        zone_file: PathBuf,
        /// Child zone key sidecar (`child <name> w <hex> A <hex>` lines).
        #[arg(long)]
        sidecar_keys: Option<PathBuf>,
        #[arg(long)]
        listen: String,
        #[arg(long)]
        ns_id: u32,
        /// Key server address.
        #[arg(long)]
        keyserver: String,
        /// This nameserver's channel private key file.
        #[arg(long)]
        channel_key: PathBuf,
        /// The key server's channel public key (hex).
        #[arg(long)]
        keyserver_pub: String,
        #[arg(long, value_enum, default_value_t = ModeSupportArg::Both)]
        mode_support: ModeSupportArg,
        /// Also answer plain DNS datagrams (off by default: fail closed).
        #[arg(long)]
        dual_stack: bool,
        /// Ephemeral-key reuse window in seconds (0 disables reuse).
        #[arg(long, default_value_t = 0)]
        reuse_window: u64,
        /// Responses per source per second (0 disables limiting).
        #[arg(long, default_value_t = 0)]
        rate_limit: u32,
        #[arg(long, default_value_t = 21600)]
        stk_lifetime: u32,
    },
    /// Run a zone key server.
    ServeKeyserver {
        #[arg(long)]
        zone: String,
        #[arg(long)]
        level: u32,
        #[arg(long)]
        listen: String,
        #[arg(long)]
        journal: PathBuf,
        #[arg(long, default_value_t = 86400)]
        stk_lifetime: u32,
        #[arg(long, default_value_t = 120)]
        max_skew: u32,
        #[arg(long, default_value_t = 86400)]
        key_ttl: u64,
        /// Zone long-term signing private key file.
        #[arg(long)]
        signing_key: PathBuf,
        /// Zone long-term agreement private key file.
        #[arg(long)]
        agreement_key: PathBuf,
        /// Key server channel private key file.
        #[arg(long)]
        channel_key: PathBuf,
        /// Registered nameservers (`ns <id> <channel_pub_hex> <addr>` lines).
        #[arg(long)]
        registrations: PathBuf,
    },
    /// Run the server-processing benchmark on a self-contained testnet.
    Bench {
        #[arg(long, default_value = "1500,1000,500,200", value_delimiter = ',')]
        mtus: Vec<usize>,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// CSV output path (`scheme,mtu,sample_us`).
        #[arg(long, default_value = "bench.csv")]
        out: PathBuf,
    },
    /// Run the attack suite on a self-contained testnet.
    Attack {
        /// Run every scenario.
        #[arg(long)]
        all: bool,
        /// Run one scenario by name.
        #[arg(long)]
        scenario: Option<String>,
        /// Also write outcome lines to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_millis()
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}

fn run(command: Command) -> Result<ExitCode, String> {
    match command {
        Command::Query { name, rtype, mode, anchors, server, ns_map, trace, timeout_ms } => {
            cmd_query(&name, &rtype, mode, &anchors, server, ns_map, trace, timeout_ms)
        }
        Command::Keygen { kind, out, force } => cmd_keygen(kind, &out, force),
        Command::Showkey { kind, key } => cmd_showkey(kind, &key),
        Command::ServeNs {
            zone,
            level,
            zone_file,
            sidecar_keys,
            listen,
            ns_id,
            keyserver,
            channel_key,
            keyserver_pub,
            mode_support,
            dual_stack,
            reuse_window,
            rate_limit,
            stk_lifetime,
        } => cmd_serve_ns(ServeNsArgs {
            zone,
            level,
            zone_file,
            sidecar_keys,
            listen,
            ns_id,
            keyserver,
            channel_key,
            keyserver_pub,
            mode_support,
            dual_stack,
            reuse_window,
            rate_limit,
            stk_lifetime,
        }),
        Command::ServeKeyserver {
            zone,
            level,
            listen,
            journal,
            stk_lifetime,
            max_skew,
            key_ttl,
            signing_key,
            agreement_key,
            channel_key,
            registrations,
        } => cmd_serve_keyserver(ServeKsArgs {
            zone,
            level,
            listen,
            journal,
            stk_lifetime,
            max_skew,
            key_ttl,
            signing_key,
            agreement_key,
            channel_key,
            registrations,
        }),
        Command::Bench { mtus, n, out } => cmd_bench(mtus, n, &out),
        Command::Attack { all, scenario, out } => cmd_attack(all, scenario, out),
    }
}

// --- query -------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn cmd_query(
    name: &str,
    rtype: &str,
    mode: QueryMode,
    anchors_path: &Path,
    server: Option<String>,
    ns_map: Option<PathBuf>,
    trace: bool,
    timeout_ms: u64,
) -> Result<ExitCode, String> {
    let name = Name::parse(name).map_err(|e| format!("bad name: {e}"))?;
    let rtype = RType::parse(rtype).ok_or_else(|| format!("unsupported record type `{rtype}`"))?;
    let anchor_text =
        fs::read_to_string(anchors_path).map_err(|e| format!("anchors file: {e}"))?;
    let mut anchors = TrustAnchor::parse(&anchor_text).map_err(|e| e.to_string())?;
    if let Some(server) = server {
        anchors.root_ns = vec![server];
    }
    if anchors.root_ns.is_empty() {
        return Err("no root server: add `ns <addr>` lines to the anchors file or pass --server".into());
    }
    let mut transport = UdpTransport::new(Duration::from_millis(timeout_ms));
    if let Some(path) = ns_map {
        let text = fs::read_to_string(&path).map_err(|e| format!("ns-map file: {e}"))?;
        transport.load_address_book(&text).map_err(|e| e.to_string())?;
    }
    let resolver = Resolver::new(anchors, ResolverConfig::default(), Arc::new(SystemClock));
    let mode = match mode {
        QueryMode::Plain => Mode::Plain,
        QueryMode::Private => Mode::Private,
    };
    let outcome = resolver.resolve(&name, rtype, mode, &transport);

    if trace {
        for hop in &outcome.trace {
            eprintln!(
                "; zone {} via {} round_trips={} verified={} credential_expires={} ns_id={}",
                hop.zone,
                hop.nameserver,
                hop.round_trips,
                hop.verified,
                hop.credential_expiration,
                hop.nameserver_id
            );
        }
        eprintln!("; exchanges: {}", outcome.exchanges);
    }

    match outcome.result {
        Ok(answer) => {
            match answer.rcode {
                dnssecplus::dns::Rcode::NxDomain => println!("NXDOMAIN {name}"),
                _ if answer.records.is_empty() => println!("NODATA {name}"),
                _ => {
                    for record in &answer.records {
                        println!("{}", format_record(record));
                    }
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => {
            eprintln!("resolution failed: {e}");
            Ok(ExitCode::from(match e {
                ResolveError::Auth(_) => EXIT_AUTH,
                ResolveError::Timeout => EXIT_TIMEOUT,
                ResolveError::Wire(_) => EXIT_WIRE,
                ResolveError::ServFail(_) => EXIT_CONFIG,
            }))
        }
    }
}

fn format_record(record: &dnssecplus::dns::Record) -> String {
    let rdata = match &record.rdata {
        RData::A(ip) => ip.to_string(),
        RData::Aaaa(ip) => ip.to_string(),
        RData::Ns(n) | RData::Cname(n) => n.to_string(),
        RData::Soa(soa) => format!("{} {} {}", soa.mname, soa.rname, soa.serial),
        RData::Txt(strings) => strings
            .iter()
            .map(|s| format!("\"{}\"", String::from_utf8_lossy(s)))
            .collect::<Vec<_>>()
            .join(" "),
        RData::Sig(blob) => format!("({} signature bytes)", blob.len()),
    };
    format!("{}\t{}\t{}\t{}", record.name, record.ttl, record.rdata.rtype(), rdata)
}

// --- keygen --------------------------------------------------------------

fn cmd_keygen(kind: KeyKind, out: &Path, force: bool) -> Result<ExitCode, String> {
    if out.exists() && !force {
        return Err(format!("{} exists; pass --force to overwrite", out.display()));
    }
    let (private_hex, public_hex) = match kind {
        KeyKind::ZoneSigning => {
            let keypair = SigningKeypair::generate();
            (hex::encode(keypair.private_bytes()), keypair.public().to_hex())
        }
        KeyKind::ZoneAgreement | KeyKind::Channel => {
            let keypair = crypto::gen_agreement_keypair();
            (hex::encode(keypair.private.to_bytes()), keypair.public.to_hex())
        }
    };
    fs::write(out, format!("{private_hex}\n")).map_err(|e| e.to_string())?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(out, fs::Permissions::from_mode(0o600)).map_err(|e| e.to_string())?;
    }
    println!("{public_hex}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_showkey(kind: KeyKind, key: &Path) -> Result<ExitCode, String> {
    let bytes = read_hex_file(key)?;
    let public = match kind {
        KeyKind::ZoneSigning => SigningKeypair::from_private_bytes(&bytes)
            .map_err(|e| e.to_string())?
            .public()
            .to_hex(),
        KeyKind::ZoneAgreement | KeyKind::Channel => {
            let scalar: [u8; 32] =
                bytes.try_into().map_err(|_| "expected a 32-byte key".to_string())?;
            AgreementPrivate::from_bytes(scalar).public().to_hex()
        }
    };
    println!("{public}");
    Ok(ExitCode::SUCCESS)
}

fn read_hex_file(path: &Path) -> Result<Vec<u8>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    hex::decode(text.trim()).map_err(|e| format!("{}: bad hex: {e}", path.display()))
}

fn read_agreement_private(path: &Path) -> Result<AgreementPrivate, String> {
    let bytes: [u8; 32] = read_hex_file(path)?
        .try_into()
        .map_err(|_| format!("{}: expected 32 bytes", path.display()))?;
    Ok(AgreementPrivate::from_bytes(bytes))
}

// --- daemons --------------------------------------------------------------

struct ServeNsArgs {
    zone: String,
    level: u32,
    zone_file: PathBuf,
    sidecar_keys: Option<PathBuf>,
    listen: String,
    ns_id: u32,
    keyserver: String,
    channel_key: PathBuf,
    keyserver_pub: String,
    mode_support: ModeSupportArg,
    dual_stack: bool,
    reuse_window: u64,
    rate_limit: u32,
    stk_lifetime: u32,
}

fn cmd_serve_ns(args: ServeNsArgs) -> Result<ExitCode, String> {
    let zone_name = Name::parse(&args.zone).map_err(|e| format!("bad zone: {e}"))?;
    let zone_text =
        fs::read_to_string(&args.zone_file).map_err(|e| format!("zone file: {e}"))?;
    let sidecar_text = match &args.sidecar_keys {
        Some(path) => fs::read_to_string(path).map_err(|e| format!("sidecar: {e}"))?,
        None => String::new(),
    };
    let zone = ZoneData::load(&zone_name, args.level, &zone_text, &sidecar_text)
        .map_err(|e| format!("zone load: {e}"))?;
    let channel_private = read_agreement_private(&args.channel_key)?;
    let keyserver_pub =
        AgreementPublic::from_hex(args.keyserver_pub.trim()).map_err(|e| e.to_string())?;

    let mut config = NameserverConfig::new(args.ns_id, zone_name, args.level, args.keyserver);
    config.stk_lifetime_secs = args.stk_lifetime;
    config.mode_support = match args.mode_support {
        ModeSupportArg::Both => ModeSupport::Both,
        ModeSupportArg::PrivacyOnly => ModeSupport::PrivacyOnly,
    };
    config.dual_stack = args.dual_stack;
    config.reuse_window_secs = (args.reuse_window > 0).then_some(args.reuse_window);
    config.rate_limit_per_sec = (args.rate_limit > 0).then_some(args.rate_limit);

    let transport = Arc::new(UdpTransport::new(Duration::from_secs(2)));
    let ns = Arc::new(
        Nameserver::new(
            config,
            Arc::new(zone),
            channel_private,
            &keyserver_pub,
            transport,
            Arc::new(SystemClock),
        )
        .map_err(|e| e.to_string())?,
    );

    let socket = UdpSocket::bind(&args.listen).map_err(|e| format!("bind {}: {e}", args.listen))?;
    log::info!("nameserver listening on {}", args.listen);
    if let Err(e) = ns.refresh_credential() {
        log::warn!("starting degraded, no credential yet: {e}");
    }

    // Maintenance timer: refresh checks once a second.
    let ns_tick = ns.clone();
    std::thread::spawn(move || loop {
        std::thread::sleep(Duration::from_secs(1));
        ns_tick.maybe_refresh();
    });

    let mut buf = vec![0u8; 65_535];
    loop {
        let (len, from) = match socket.recv_from(&mut buf) {
            Ok(pair) => pair,
            Err(e) => {
                log::error!("recv: {e}");
                continue;
            }
        };
        if let Some(reply) = ns.handle_datagram(&buf[..len], &from.ip().to_string()) {
            if let Err(e) = socket.send_to(&reply, from) {
                log::error!("send to {from}: {e}");
            }
        }
    }
}

struct ServeKsArgs {
    zone: String,
    level: u32,
    listen: String,
    journal: PathBuf,
    stk_lifetime: u32,
    max_skew: u32,
    key_ttl: u64,
    signing_key: PathBuf,
    agreement_key: PathBuf,
    channel_key: PathBuf,
    registrations: PathBuf,
}

fn cmd_serve_keyserver(args: ServeKsArgs) -> Result<ExitCode, String> {
    let zone_name = Name::parse(&args.zone).map_err(|e| format!("bad zone: {e}"))?;
    let signing = SigningKeypair::from_private_bytes(&read_hex_file(&args.signing_key)?)
        .map_err(|e| format!("signing key: {e}"))?;
    let agreement_private = read_agreement_private(&args.agreement_key)?;
    let agreement = crypto::AgreementKeypair {
        public: agreement_private.public(),
        private: agreement_private,
    };
    let channel_private = read_agreement_private(&args.channel_key)?;
    let channel = crypto::AgreementKeypair {
        public: channel_private.public(),
        private: channel_private,
    };

    let config = KeyServerConfig {
        zone_name,
        zone_level: args.level,
        max_stk_lifetime_secs: args.stk_lifetime,
        max_skew_secs: args.max_skew,
        published_key_ttl_secs: args.key_ttl,
        rotation_wait_override_secs: None,
    };
    let ks = Arc::new(
        KeyServer::new(config, signing, agreement, channel, Arc::new(SystemClock))
            .with_journal(&args.journal)
            .map_err(|e| e.to_string())?,
    );

    let registrations_text =
        fs::read_to_string(&args.registrations).map_err(|e| format!("registrations: {e}"))?;
    let already_known = ks.registered_ids();
    for line in registrations_text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 4 || tokens[0] != "ns" {
            return Err(format!("bad registration line: `{line}`"));
        }
        let nameserver_id: u32 =
            tokens[1].parse().map_err(|_| format!("bad nameserver id `{}`", tokens[1]))?;
        if already_known.contains(&nameserver_id) {
            continue; // restored from the journal
        }
        let channel_static_pub =
            AgreementPublic::from_hex(tokens[2]).map_err(|e| e.to_string())?;
        ks.register_nameserver(NameserverRegistration {
            nameserver_id,
            channel_static_pub,
            address: tokens[3].to_string(),
        })
        .map_err(|e| e.to_string())?;
    }

    let socket = UdpSocket::bind(&args.listen).map_err(|e| format!("bind {}: {e}", args.listen))?;
    log::info!("key server listening on {}", args.listen);

    // Push the zone agreement key to registered nameservers until each acks.
    let provisioner = ks.clone();
    std::thread::spawn(move || {
        let transport = UdpTransport::new(Duration::from_secs(2));
        loop {
            match provisioner.provision_all(&transport) {
                Ok(()) => {
                    log::info!("all nameservers provisioned");
                    break;
                }
                Err(e) => {
                    log::warn!("provisioning incomplete, retrying: {e}");
                    std::thread::sleep(Duration::from_secs(2));
                }
            }
        }
    });

    let mut buf = vec![0u8; 65_535];
    loop {
        let (len, from) = match socket.recv_from(&mut buf) {
            Ok(pair) => pair,
            Err(e) => {
                log::error!("recv: {e}");
                continue;
            }
        };
        if let Some(reply) = ks.handle_channel_datagram(&buf[..len]) {
            if let Err(e) = socket.send_to(&reply, from) {
                log::error!("send to {from}: {e}");
            }
        }
    }
}

// --- bench / attack ---------------------------------------------------------

fn cmd_bench(mtus: Vec<usize>, n: usize, out: &Path) -> Result<ExitCode, String> {
    if n == 0 {
        return Err("--n must be at least 1".into());
    }
    if mtus.is_empty() || mtus.iter().any(|&m| m < 100) {
        return Err("--mtus must list values of at least 100".into());
    }
    let config = BenchConfig { mtus, queries_per_cell: n, schemes: Scheme::all() };
    let report = bench_processing(&config)?;
    fs::write(out, report.to_csv()).map_err(|e| e.to_string())?;
    print!("{}", report.summary());
    println!("csv written to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_attack(all: bool, scenario: Option<String>, out: Option<PathBuf>) -> Result<ExitCode, String> {
    let scripts = if let Some(wanted) = scenario {
        let scripts: Vec<_> = standard_scenarios()
            .into_iter()
            .filter(|s| s.name().starts_with(&wanted))
            .collect();
        if scripts.is_empty() {
            return Err(format!(
                "unknown scenario `{wanted}`; known: {}",
                standard_scenarios()
                    .iter()
                    .map(|s| s.name())
                    .collect::<Vec<_>>()
                    .join(", ")
            ));
        }
        scripts
    } else if all {
        standard_scenarios()
    } else {
        return Err("pass --all or --scenario <name>".into());
    };

    let testnet = Testnet::build(TestnetSpec::three_level("")).map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    let mut all_defeated = true;
    for script in scripts {
        let outcome = run_attack(&testnet, script);
        all_defeated &= outcome.attack_defeated();
        println!("{}", outcome.log_line());
        lines.push(outcome.log_line());
    }
    if let Some(path) = out {
        fs::write(&path, lines.join("\n") + "\n").map_err(|e| e.to_string())?;
    }
    Ok(if all_defeated { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
