//! Minimal Vanilla-DNS message codec: the standard header/question/record
//! wire format for the handful of record types the servers speak (A, AAAA,
//! NS, CNAME, SOA, TXT). DNS payloads ride opaquely inside the secure
//! envelope, so this codec is also what the plain-DNS baseline speaks.
//!
//! The encoder never emits name compression; the decoder follows compression
//! pointers (with a loop guard) so foreign messages still parse.

use std::fmt;
use std::net::{Ipv4Addr, Ipv6Addr};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DnsError {
    #[error("message truncated at offset {0}")]
    Truncated(usize),
    #[error("label exceeds 63 bytes or name exceeds 255 bytes")]
    BadName,
    #[error("compression pointer loop")]
    PointerLoop,
    #[error("unsupported record type {0}")]
    UnsupportedType(u16),
    #[error("record data malformed")]
    BadRdata,
    #[error("name contains invalid character")]
    BadText,
}

/// An absolute, lowercase domain name ("example.com." — the root is ".").
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Name(String);

impl Name {
    pub fn root() -> Self {
        Name(".".to_string())
    }

    /// Parses a presentation-format name; a missing trailing dot is added.
    pub fn parse(s: &str) -> Result<Self, DnsError> {
        let lower = s.trim().to_ascii_lowercase();
        if lower.is_empty() {
            return Err(DnsError::BadName);
        }
        if lower == "." {
            return Ok(Name::root());
        }
        let absolute = if lower.ends_with('.') {
            lower
        } else {
            format!("{lower}.")
        };
        let mut total = 0usize;
        for label in absolute.trim_end_matches('.').split('.') {
            if label.is_empty() || label.len() > 63 {
                return Err(DnsError::BadName);
            }
            if !label
                .bytes()
                .all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
            {
                return Err(DnsError::BadText);
            }
            total += label.len() + 1;
        }
        if total + 1 > 255 {
            return Err(DnsError::BadName);
        }
        Ok(Name(absolute))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_root(&self) -> bool {
        self.0 == "."
    }

    pub fn labels(&self) -> Vec<&str> {
        if self.is_root() {
            vec![]
        } else {
            self.0.trim_end_matches('.').split('.').collect()
        }
    }

    pub fn label_count(&self) -> usize {
        self.labels().len()
    }

    /// The name one label up; the root is its own parent.
    pub fn parent(&self) -> Name {
        let labels = self.labels();
        if labels.len() <= 1 {
            Name::root()
        } else {
            Name(format!("{}.", labels[1..].join(".")))
        }
    }

    /// True if `self` equals or falls under `ancestor`.
    pub fn is_within(&self, ancestor: &Name) -> bool {
        if ancestor.is_root() {
            return true;
        }
        self.0 == ancestor.0 || self.0.ends_with(&format!(".{}", ancestor.0))
    }

    fn encode(&self, out: &mut Vec<u8>) {
        for label in self.labels() {
            out.push(label.len() as u8);
            out.extend_from_slice(label.as_bytes());
        }
        out.push(0);
    }

    fn decode(buf: &[u8], mut pos: usize) -> Result<(Name, usize), DnsError> {
        let mut labels: Vec<String> = Vec::new();
        let mut jumps = 0usize;
        let mut end_after_first_jump: Option<usize> = None;
        loop {
            let len = *buf.get(pos).ok_or(DnsError::Truncated(pos))? as usize;
            if len & 0xc0 == 0xc0 {
                let lo = *buf.get(pos + 1).ok_or(DnsError::Truncated(pos + 1))? as usize;
                let target = ((len & 0x3f) << 8) | lo;
                if end_after_first_jump.is_none() {
                    end_after_first_jump = Some(pos + 2);
                }
                jumps += 1;
                if jumps > 32 {
                    return Err(DnsError::PointerLoop);
                }
                pos = target;
                continue;
            }
            pos += 1;
            if len == 0 {
                break;
            }
            if len > 63 {
                return Err(DnsError::BadName);
            }
            let raw = buf.get(pos..pos + len).ok_or(DnsError::Truncated(pos))?;
            let label = std::str::from_utf8(raw)
                .map_err(|_| DnsError::BadText)?
                .to_ascii_lowercase();
            labels.push(label);
            pos += len;
        }
        let name = if labels.is_empty() {
            Name::root()
        } else {
            Name::parse(&labels.join("."))?
        };
        Ok((name, end_after_first_jump.unwrap_or(pos)))
    }
}

impl fmt::Display for Name {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// The record types the servers understand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RType {
    A,
    Ns,
    Cname,
    Soa,
    Txt,
    Aaaa,
    /// Baseline per-record signature, appended by the pre-signed responder.
    Sig,
}

impl RType {
    pub fn code(self) -> u16 {
        match self {
            RType::A => 1,
            RType::Ns => 2,
            RType::Cname => 5,
            RType::Soa => 6,
            RType::Txt => 16,
            RType::Aaaa => 28,
            RType::Sig => 46,
        }
    }

    pub fn from_code(code: u16) -> Result<Self, DnsError> {
        Ok(match code {
            1 => RType::A,
            2 => RType::Ns,
            5 => RType::Cname,
            6 => RType::Soa,
            16 => RType::Txt,
            28 => RType::Aaaa,
            46 => RType::Sig,
            other => return Err(DnsError::UnsupportedType(other)),
        })
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s.to_ascii_uppercase().as_str() {
            "A" => RType::A,
            "NS" => RType::Ns,
            "CNAME" => RType::Cname,
            "SOA" => RType::Soa,
            "TXT" => RType::Txt,
            "AAAA" => RType::Aaaa,
            _ => return None,
        })
    }
}

impl fmt::Display for RType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RType::A => "A",
            RType::Ns => "NS",
            RType::Cname => "CNAME",
            RType::Soa => "SOA",
            RType::Txt => "TXT",
            RType::Aaaa => "AAAA",
            RType::Sig => "SIG",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SoaData {
    pub mname: Name,
    pub rname: Name,
    pub serial: u32,
    pub refresh: u32,
    pub retry: u32,
    pub expire: u32,
    pub minimum: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RData {
    A(Ipv4Addr),
    Aaaa(Ipv6Addr),
    Ns(Name),
    Cname(Name),
    Soa(SoaData),
    Txt(Vec<Vec<u8>>),
    /// Opaque signature blob for the pre-signed baseline.
    Sig(Vec<u8>),
}

impl RData {
    pub fn rtype(&self) -> RType {
        match self {
            RData::A(_) => RType::A,
            RData::Aaaa(_) => RType::Aaaa,
            RData::Ns(_) => RType::Ns,
            RData::Cname(_) => RType::Cname,
            RData::Soa(_) => RType::Soa,
            RData::Txt(_) => RType::Txt,
            RData::Sig(_) => RType::Sig,
        }
    }

    fn encode(&self, out: &mut Vec<u8>) {
        match self {
            RData::A(ip) => out.extend_from_slice(&ip.octets()),
            RData::Aaaa(ip) => out.extend_from_slice(&ip.octets()),
            RData::Ns(name) | RData::Cname(name) => name.encode(out),
            RData::Soa(soa) => {
                soa.mname.encode(out);
                soa.rname.encode(out);
                for v in [soa.serial, soa.refresh, soa.retry, soa.expire, soa.minimum] {
                    out.extend_from_slice(&v.to_be_bytes());
                }
            }
            RData::Txt(strings) => {
                for s in strings {
                    out.push(s.len() as u8);
                    out.extend_from_slice(s);
                }
            }
            RData::Sig(blob) => out.extend_from_slice(blob),
        }
    }

    fn decode(rtype: RType, buf: &[u8], start: usize, len: usize) -> Result<RData, DnsError> {
        let slice = buf
            .get(start..start + len)
            .ok_or(DnsError::Truncated(start))?;
        Ok(match rtype {
            RType::A => {
                let octets: [u8; 4] = slice.try_into().map_err(|_| DnsError::BadRdata)?;
                RData::A(Ipv4Addr::from(octets))
            }
            RType::Aaaa => {
                let octets: [u8; 16] = slice.try_into().map_err(|_| DnsError::BadRdata)?;
                RData::Aaaa(Ipv6Addr::from(octets))
            }
            RType::Ns => {
                let (name, end) = Name::decode(buf, start)?;
                if end > start + len {
                    return Err(DnsError::BadRdata);
                }
                RData::Ns(name)
            }
            RType::Cname => {
                let (name, end) = Name::decode(buf, start)?;
                if end > start + len {
                    return Err(DnsError::BadRdata);
                }
                RData::Cname(name)
            }
            RType::Soa => {
                let (mname, p1) = Name::decode(buf, start)?;
                let (rname, p2) = Name::decode(buf, p1)?;
                let rest = buf.get(p2..p2 + 20).ok_or(DnsError::Truncated(p2))?;
                let mut vals = [0u32; 5];
                for (i, chunk) in rest.chunks_exact(4).enumerate() {
                    vals[i] = u32::from_be_bytes(chunk.try_into().unwrap());
                }
                RData::Soa(SoaData {
                    mname,
                    rname,
                    serial: vals[0],
                    refresh: vals[1],
                    retry: vals[2],
                    expire: vals[3],
                    minimum: vals[4],
                })
            }
            RType::Txt => {
                let mut strings = Vec::new();
                let mut p = 0usize;
                while p < slice.len() {
                    let l = slice[p] as usize;
                    let s = slice.get(p + 1..p + 1 + l).ok_or(DnsError::BadRdata)?;
                    strings.push(s.to_vec());
                    p += 1 + l;
                }
                RData::Txt(strings)
            }
            RType::Sig => RData::Sig(slice.to_vec()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub name: Name,
    pub ttl: u32,
    pub rdata: RData,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Question {
    pub name: Name,
    pub rtype: RType,
}

/// DNS response codes used here.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rcode {
    NoError,
    FormErr,
    ServFail,
    NxDomain,
}

impl Rcode {
    fn code(self) -> u16 {
        match self {
            Rcode::NoError => 0,
            Rcode::FormErr => 1,
            Rcode::ServFail => 2,
            Rcode::NxDomain => 3,
        }
    }

    fn from_code(code: u16) -> Rcode {
        match code & 0xf {
            0 => Rcode::NoError,
            1 => Rcode::FormErr,
            3 => Rcode::NxDomain,
            _ => Rcode::ServFail,
        }
    }
}

const FLAG_QR: u16 = 0x8000;
const FLAG_AA: u16 = 0x0400;
const FLAG_RD: u16 = 0x0100;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub id: u16,
    pub is_response: bool,
    pub authoritative: bool,
    pub recursion_desired: bool,
    pub rcode: Rcode,
    pub questions: Vec<Question>,
    pub answers: Vec<Record>,
    pub authorities: Vec<Record>,
    pub additionals: Vec<Record>,
}

impl Message {
    pub fn query(id: u16, name: Name, rtype: RType) -> Message {
        Message {
            id,
            is_response: false,
            authoritative: false,
            recursion_desired: false,
            rcode: Rcode::NoError,
            questions: vec![Question { name, rtype }],
            answers: vec![],
            authorities: vec![],
            additionals: vec![],
        }
    }

    /// A response skeleton echoing the query's id and question.
    pub fn response_to(query: &Message, rcode: Rcode, authoritative: bool) -> Message {
        Message {
            id: query.id,
            is_response: true,
            authoritative,
            recursion_desired: query.recursion_desired,
            rcode,
            questions: query.questions.clone(),
            answers: vec![],
            authorities: vec![],
            additionals: vec![],
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64);
        out.extend_from_slice(&self.id.to_be_bytes());
        let mut flags = 0u16;
        if self.is_response {
            flags |= FLAG_QR;
        }
        if self.authoritative {
            flags |= FLAG_AA;
        }
        if self.recursion_desired {
            flags |= FLAG_RD;
        }
        flags |= self.rcode.code();
        out.extend_from_slice(&flags.to_be_bytes());
        out.extend_from_slice(&(self.questions.len() as u16).to_be_bytes());
        out.extend_from_slice(&(self.answers.len() as u16).to_be_bytes());
        out.extend_from_slice(&(self.authorities.len() as u16).to_be_bytes());
        out.extend_from_slice(&(self.additionals.len() as u16).to_be_bytes());
        for q in &self.questions {
            q.name.encode(&mut out);
            out.extend_from_slice(&q.rtype.code().to_be_bytes());
            out.extend_from_slice(&1u16.to_be_bytes());
        }
        for record in [&self.answers, &self.authorities, &self.additionals]
            .into_iter()
            .flatten()
        {
            record.name.encode(&mut out);
            out.extend_from_slice(&record.rdata.rtype().code().to_be_bytes());
            out.extend_from_slice(&1u16.to_be_bytes());
            out.extend_from_slice(&record.ttl.to_be_bytes());
            let mut rdata = Vec::new();
            record.rdata.encode(&mut rdata);
            out.extend_from_slice(&(rdata.len() as u16).to_be_bytes());
            out.extend_from_slice(&rdata);
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Message, DnsError> {
        let header = buf.get(..12).ok_or(DnsError::Truncated(0))?;
        let id = u16::from_be_bytes([header[0], header[1]]);
        let flags = u16::from_be_bytes([header[2], header[3]]);
        let counts: Vec<usize> = header[4..]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as usize)
            .collect();
        let mut pos = 12usize;
        let mut questions = Vec::with_capacity(counts[0]);
        for _ in 0..counts[0] {
            let (name, p) = Name::decode(buf, pos)?;
            let fixed = buf.get(p..p + 4).ok_or(DnsError::Truncated(p))?;
            let rtype = RType::from_code(u16::from_be_bytes([fixed[0], fixed[1]]))?;
            questions.push(Question { name, rtype });
            pos = p + 4;
        }
        let mut sections: [Vec<Record>; 3] = [vec![], vec![], vec![]];
        for (section, &count) in sections.iter_mut().zip(&counts[1..]) {
            for _ in 0..count {
                let (name, p) = Name::decode(buf, pos)?;
                let fixed = buf.get(p..p + 10).ok_or(DnsError::Truncated(p))?;
                let rtype = RType::from_code(u16::from_be_bytes([fixed[0], fixed[1]]))?;
                let ttl = u32::from_be_bytes([fixed[4], fixed[5], fixed[6], fixed[7]]);
                let rdlen = u16::from_be_bytes([fixed[8], fixed[9]]) as usize;
                let rdata = RData::decode(rtype, buf, p + 10, rdlen)?;
                section.push(Record { name, ttl, rdata });
                pos = p + 10 + rdlen;
            }
        }
        let [answers, authorities, additionals] = sections;
        Ok(Message {
            id,
            is_response: flags & FLAG_QR != 0,
            authoritative: flags & FLAG_AA != 0,
            recursion_desired: flags & FLAG_RD != 0,
            rcode: Rcode::from_code(flags),
            questions,
            answers,
            authorities,
            additionals,
        })
    }
}
