//! Server-processing-latency benchmark. Three schemes answer the same query
//! stream over UDP loopback: plain DNS, pre-signed DNS (per-record
//! signatures precomputed, no crypto at serve time), and the full secure
//! protocol. The harness emulates interface MTUs by fragmenting each
//! response before it leaves the server; a sample is the time from query
//! arrival to the last fragment leaving, matching how such latency is
//! measured at the network layer.

use std::net::UdpSocket;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crate::crypto::{self, Nonce};
use crate::dns::{Message, Name, RType};
use crate::wire;
use crate::zone::{PresignedResponder, VanillaResponder};

use super::{DatagramHandler, Testnet, TestnetSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    Vanilla,
    Presigned,
    DnssecPlus,
}

impl Scheme {
    pub fn label(&self) -> &'static str {
        match self {
            Scheme::Vanilla => "vanilla",
            Scheme::Presigned => "presigned",
            Scheme::DnssecPlus => "dnssecplus",
        }
    }

    pub fn all() -> Vec<Scheme> {
        vec![Scheme::Vanilla, Scheme::Presigned, Scheme::DnssecPlus]
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub mtus: Vec<usize>,
    pub queries_per_cell: usize,
    pub schemes: Vec<Scheme>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            mtus: vec![1500, 1000, 500, 200],
            queries_per_cell: 1000,
            schemes: Scheme::all(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchCell {
    pub scheme: &'static str,
    pub mtu: usize,
    pub samples_us: Vec<u64>,
}

impl BenchCell {
    pub fn quantile_us(&self, q: f64) -> u64 {
        let mut sorted = self.samples_us.clone();
        sorted.sort_unstable();
        if sorted.is_empty() {
            return 0;
        }
        let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
        sorted[idx]
    }
}

#[derive(Debug, Clone, Default)]
pub struct BenchReport {
    pub cells: Vec<BenchCell>,
}

impl BenchReport {
    pub fn cell(&self, scheme: Scheme, mtu: usize) -> Option<&BenchCell> {
        self.cells.iter().find(|c| c.scheme == scheme.label() && c.mtu == mtu)
    }

    /// One `scheme,mtu,sample_us` row per sample.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scheme,mtu,sample_us\n");
        for cell in &self.cells {
            for sample in &cell.samples_us {
                out.push_str(&format!("{},{},{}\n", cell.scheme, cell.mtu, sample));
            }
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = String::from("scheme      mtu    p50_us   p90_us   p99_us\n");
        for cell in &self.cells {
            out.push_str(&format!(
                "{:<10} {:>5} {:>8} {:>8} {:>8}\n",
                cell.scheme,
                cell.mtu,
                cell.quantile_us(0.50),
                cell.quantile_us(0.90),
                cell.quantile_us(0.99),
            ));
        }
        out
    }
}

const FRAG_MAGIC: [u8; 2] = [0xfa, 0x67];
const FRAG_HEADER_LEN: usize = 10;
/// Emulated IP + UDP header budget per fragment.
const NETWORK_HEADER_LEN: usize = 28;

/// Splits a payload into MTU-sized fragments, each carrying
/// `magic(2) id(4) index(2) count(2)`.
pub fn fragment(payload: &[u8], mtu: usize, id: u32) -> Vec<Vec<u8>> {
    let chunk = mtu
        .saturating_sub(NETWORK_HEADER_LEN + FRAG_HEADER_LEN)
        .max(8);
    let count = payload.len().div_ceil(chunk).max(1);
    let mut fragments = Vec::with_capacity(count);
    for (index, piece) in payload.chunks(chunk).enumerate() {
        let mut frame = Vec::with_capacity(FRAG_HEADER_LEN + piece.len());
        frame.extend_from_slice(&FRAG_MAGIC);
        frame.extend_from_slice(&id.to_be_bytes());
        frame.extend_from_slice(&(index as u16).to_be_bytes());
        frame.extend_from_slice(&(count as u16).to_be_bytes());
        frame.extend_from_slice(piece);
        fragments.push(frame);
    }
    if fragments.is_empty() {
        fragments.push({
            let mut frame = Vec::with_capacity(FRAG_HEADER_LEN);
            frame.extend_from_slice(&FRAG_MAGIC);
            frame.extend_from_slice(&id.to_be_bytes());
            frame.extend_from_slice(&0u16.to_be_bytes());
            frame.extend_from_slice(&1u16.to_be_bytes());
            frame
        });
    }
    fragments
}

pub fn parse_fragment(datagram: &[u8]) -> Option<(u32, u16, u16, &[u8])> {
    if datagram.len() < FRAG_HEADER_LEN || datagram[0..2] != FRAG_MAGIC {
        return None;
    }
    let id = u32::from_be_bytes(datagram[2..6].try_into().unwrap());
    let index = u16::from_be_bytes(datagram[6..8].try_into().unwrap());
    let count = u16::from_be_bytes(datagram[8..10].try_into().unwrap());
    Some((id, index, count, &datagram[FRAG_HEADER_LEN..]))
}

/// The single-zone world the benchmark queries: a root zone with 25 A names
/// and 25 TXT names of spread-out response sizes.
pub fn bench_testnet() -> Testnet {
    let mut extra = String::new();
    for i in 0..25 {
        extra.push_str(&format!("a{i}.bench. IN A 192.0.2.{}\n", i + 1));
    }
    for i in 0..25usize {
        let text = "x".repeat(72 * (i + 1));
        extra.push_str(&format!("t{i}.bench. IN TXT \"{text}\"\n"));
    }
    let mut root = super::ZoneSetup::new(".", 0);
    root.extra_records = extra;
    let spec = TestnetSpec {
        zones: vec![root],
        ..TestnetSpec::three_level("")
    };
    Testnet::build(spec).expect("bench testnet builds")
}

/// The query mix: 60% A (small responses), 40% TXT (fragmenting responses),
/// as (name, type) pairs.
pub fn bench_queries(n: usize) -> Vec<(Name, RType)> {
    (0..n)
        .map(|i| {
            if i % 5 < 3 {
                (Name::parse(&format!("a{}.bench.", i % 25)).unwrap(), RType::A)
            } else {
                (Name::parse(&format!("t{}.bench.", i % 25)).unwrap(), RType::Txt)
            }
        })
        .collect()
}

enum BenchHandler {
    Plain(VanillaResponder),
    Signed(PresignedResponder),
    Secure(Arc<crate::nameserver::Nameserver>),
}

impl BenchHandler {
    fn handle(&self, datagram: &[u8], src: &str) -> Option<Vec<u8>> {
        match self {
            BenchHandler::Plain(r) => r.handle(datagram),
            BenchHandler::Signed(r) => r.handle(datagram),
            BenchHandler::Secure(ns) => ns.handle(datagram, src),
        }
    }
}

/// Runs the full scheme × MTU matrix and collects server-side samples.
pub fn bench_processing(config: &BenchConfig) -> Result<BenchReport, String> {
    let testnet = bench_testnet();
    let zone = testnet.zones[0].nameservers[0].zone_snapshot();
    let agreement = testnet.anchors.root_agreement;
    let signer = crypto::SigningKeypair::generate();
    let queries = bench_queries(config.queries_per_cell);

    let mut report = BenchReport::default();
    for &scheme in &config.schemes {
        // Prebuild the client datagrams so client-side work stays off the
        // server-side clock.
        let datagrams: Vec<Vec<u8>> = queries
            .iter()
            .enumerate()
            .map(|(i, (name, rtype))| {
                let dns = Message::query(i as u16, name.clone(), *rtype).encode();
                match scheme {
                    Scheme::Vanilla | Scheme::Presigned => dns,
                    Scheme::DnssecPlus => {
                        let eph = crypto::gen_agreement_keypair();
                        let master = crypto::dh(&eph.private, &agreement)
                            .expect("anchor agreement key is valid");
                        wire::seal_query_private(&eph.public, &master, &Nonce::fresh(), &dns)
                            .expect("query seals")
                    }
                }
            })
            .collect();

        for &mtu in &config.mtus {
            let handler = match scheme {
                Scheme::Vanilla => BenchHandler::Plain(VanillaResponder::new(zone.clone())),
                Scheme::Presigned => {
                    BenchHandler::Signed(PresignedResponder::new(zone.clone(), &signer))
                }
                Scheme::DnssecPlus => {
                    BenchHandler::Secure(testnet.zones[0].nameservers[0].clone())
                }
            };
            let samples = run_cell(&handler, &datagrams, mtu)?;
            report.cells.push(BenchCell { scheme: scheme.label(), mtu, samples_us: samples });
        }
    }
    Ok(report)
}

fn run_cell(handler: &BenchHandler, datagrams: &[Vec<u8>], mtu: usize) -> Result<Vec<u64>, String> {
    let server = UdpSocket::bind("127.0.0.1:0").map_err(|e| e.to_string())?;
    let server_addr = server.local_addr().map_err(|e| e.to_string())?;
    server
        .set_read_timeout(Some(Duration::from_secs(10)))
        .map_err(|e| e.to_string())?;
    let client = UdpSocket::bind("127.0.0.1:0").map_err(|e| e.to_string())?;
    client
        .set_read_timeout(Some(Duration::from_secs(10)))
        .map_err(|e| e.to_string())?;

    let samples = Arc::new(Mutex::new(Vec::with_capacity(datagrams.len())));
    let stop = Arc::new(AtomicBool::new(false));
    let n = datagrams.len();

    std::thread::scope(|scope| -> Result<(), String> {
        let samples_ref = samples.clone();
        let stop_ref = stop.clone();
        let server_thread = scope.spawn(move || {
            let mut buf = vec![0u8; 65_535];
            let mut response_id = 0u32;
            for _ in 0..n {
                if stop_ref.load(Ordering::SeqCst) {
                    break;
                }
                let Ok((len, from)) = server.recv_from(&mut buf) else {
                    break;
                };
                let started = Instant::now();
                let Some(response) = handler.handle(&buf[..len], &from.to_string()) else {
                    continue;
                };
                response_id = response_id.wrapping_add(1);
                for frame in fragment(&response, mtu, response_id) {
                    let _ = server.send_to(&frame, from);
                }
                let elapsed = started.elapsed().as_micros() as u64;
                samples_ref.lock().unwrap().push(elapsed);
            }
        });

        let mut buf = vec![0u8; 65_535];
        for datagram in datagrams {
            client.send_to(datagram, server_addr).map_err(|e| e.to_string())?;
            let mut received = 0u16;
            let mut expected = 1u16;
            while received < expected {
                let (len, _) = client.recv_from(&mut buf).map_err(|e| {
                    stop.store(true, Ordering::SeqCst);
                    format!("bench client timed out: {e}")
                })?;
                let Some((_, _, count, _)) = parse_fragment(&buf[..len]) else {
                    continue;
                };
                expected = count.max(1);
                received += 1;
            }
        }
        server_thread.join().map_err(|_| "bench server thread panicked".to_string())?;
        Ok(())
    })?;

    let collected = Arc::try_unwrap(samples)
        .map_err(|_| "samples still shared".to_string())?
        .into_inner()
        .map_err(|e| e.to_string())?;
    Ok(collected)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fragmentation_covers_sizes_and_reassembles() {
        let payload: Vec<u8> = (0..2000u32).map(|i| i as u8).collect();
        for mtu in [1500usize, 1000, 500, 200] {
            let frames = fragment(&payload, mtu, 7);
            assert!(frames.iter().all(|f| f.len() + NETWORK_HEADER_LEN <= mtu));
            let mut rebuilt = Vec::new();
            let (_, _, count, _) = parse_fragment(&frames[0]).unwrap();
            assert_eq!(count as usize, frames.len());
            for frame in &frames {
                let (_, _, _, piece) = parse_fragment(frame).unwrap();
                rebuilt.extend_from_slice(piece);
            }
            assert_eq!(rebuilt, payload);
        }
    }

    #[test]
    fn small_payload_is_a_single_fragment_at_every_mtu() {
        let frames = fragment(&[1, 2, 3], 200, 1);
        assert_eq!(frames.len(), 1);
    }

    #[test]
    fn bench_matrix_smoke() {
        let config = BenchConfig {
            mtus: vec![1500, 200],
            queries_per_cell: 20,
            schemes: Scheme::all(),
        };
        let report = bench_processing(&config).unwrap();
        assert_eq!(report.cells.len(), 6);
        for cell in &report.cells {
            assert_eq!(cell.samples_us.len(), 20, "cell {}@{}", cell.scheme, cell.mtu);
        }
        let csv = report.to_csv();
        assert!(csv.starts_with("scheme,mtu,sample_us\n"));
        assert_eq!(csv.lines().count(), 1 + 6 * 20);
    }
}
