//! Datagram transport abstraction. A resolver performs exactly one
//! query/response exchange per contacted server, so the transport surface is
//! a single blocking round trip addressed by server name or literal
//! `ip:port`. The testnet provides an in-memory implementation; daemons and
//! the query tool use UDP.

use std::collections::HashMap;
use std::net::{SocketAddr, UdpSocket};
use std::time::Duration;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TransportError {
    #[error("no route to `{0}`")]
    Unreachable(String),
    #[error("timed out waiting for a response from `{0}`")]
    Timeout(String),
    #[error("transport io error: {0}")]
    Io(String),
}

pub trait Transport: Send + Sync {
    /// Sends one datagram and waits for one datagram back.
    fn exchange(&self, dest: &str, datagram: &[u8]) -> Result<Vec<u8>, TransportError>;
}

/// UDP transport with a name → address book. Destinations that parse as
/// `ip:port` bypass the book.
pub struct UdpTransport {
    addresses: HashMap<String, SocketAddr>,
    timeout: Duration,
}

impl UdpTransport {
    pub fn new(timeout: Duration) -> Self {
        Self { addresses: HashMap::new(), timeout }
    }

    pub fn register(&mut self, name: impl Into<String>, addr: SocketAddr) {
        self.addresses.insert(name.into(), addr);
    }

    /// Loads `ns <name> <ip:port>` lines.
    pub fn load_address_book(&mut self, text: &str) -> Result<(), TransportError> {
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let tokens: Vec<&str> = line.split_whitespace().collect();
            if tokens.len() != 3 || tokens[0] != "ns" {
                return Err(TransportError::Io(format!("bad address book line: `{line}`")));
            }
            let addr: SocketAddr = tokens[2]
                .parse()
                .map_err(|_| TransportError::Io(format!("bad address: `{}`", tokens[2])))?;
            self.register(tokens[1], addr);
        }
        Ok(())
    }

    fn resolve(&self, dest: &str) -> Result<SocketAddr, TransportError> {
        if let Some(addr) = self.addresses.get(dest) {
            return Ok(*addr);
        }
        dest.parse()
            .map_err(|_| TransportError::Unreachable(dest.to_string()))
    }
}

impl Transport for UdpTransport {
    fn exchange(&self, dest: &str, datagram: &[u8]) -> Result<Vec<u8>, TransportError> {
        let addr = self.resolve(dest)?;
        let socket = UdpSocket::bind(("0.0.0.0", 0)).map_err(|e| TransportError::Io(e.to_string()))?;
        socket
            .set_read_timeout(Some(self.timeout))
            .map_err(|e| TransportError::Io(e.to_string()))?;
        socket
            .send_to(datagram, addr)
            .map_err(|e| TransportError::Io(e.to_string()))?;
        let mut buf = vec![0u8; 65_535];
        loop {
            match socket.recv_from(&mut buf) {
                Ok((n, from)) => {
                    if from == addr {
                        buf.truncate(n);
                        return Ok(buf);
                    }
                }
                Err(e)
                    if e.kind() == std::io::ErrorKind::WouldBlock
                        || e.kind() == std::io::ErrorKind::TimedOut =>
                {
                    return Err(TransportError::Timeout(dest.to_string()));
                }
                Err(e) => return Err(TransportError::Io(e.to_string())),
            }
        }
    }
}
