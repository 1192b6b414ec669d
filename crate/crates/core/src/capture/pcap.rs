//! Classic libpcap container: global header, per-record headers, and a writer.
//!
//! Both the microsecond (`0xa1b2c3d4`) and nanosecond (`0xa1b23c4d`) variants
//! are accepted in either byte order. Timestamps are normalised to whole
//! microseconds since the epoch.

use std::io::{self, Write};

use super::CaptureError;
use crate::Timestamp;

const MAGIC_MICROS: u32 = 0xa1b2_c3d4;
const MAGIC_NANOS: u32 = 0xa1b2_3c4d;
const GLOBAL_HEADER_LEN: usize = 24;
const RECORD_HEADER_LEN: usize = 16;

/// Link-layer header types understood by the packet decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkType {
    Ethernet,
    /// Linux cooked capture v1 (`DLT_LINUX_SLL`).
    LinuxSll,
    /// Linux cooked capture v2 (`DLT_LINUX_SLL2`).
    LinuxSll2,
    /// Bare IPv4/IPv6 without link header.
    RawIp,
}

impl LinkType {
    pub fn from_dlt(dlt: u32) -> Option<LinkType> {
        match dlt {
            1 => Some(LinkType::Ethernet),
            113 => Some(LinkType::LinuxSll),
            276 => Some(LinkType::LinuxSll2),
            101 | 228 | 229 => Some(LinkType::RawIp),
            _ => None,
        }
    }

    pub fn dlt(self) -> u32 {
        match self {
            LinkType::Ethernet => 1,
            LinkType::LinuxSll => 113,
            LinkType::LinuxSll2 => 276,
            LinkType::RawIp => 101,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Endian {
    Little,
    Big,
}

impl Endian {
    fn u32(self, b: &[u8]) -> u32 {
        let a = [b[0], b[1], b[2], b[3]];
        match self {
            Endian::Little => u32::from_le_bytes(a),
            Endian::Big => u32::from_be_bytes(a),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GlobalHeader {
    pub nanosecond: bool,
    pub snaplen: u32,
    pub link_type: LinkType,
}

/// One record as stored in the file. `data` may be shorter than `orig_len`
/// when the capture was cut at the snap length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawRecord<'a> {
    pub timestamp: Timestamp,
    pub orig_len: u32,
    pub data: &'a [u8],
}

impl RawRecord<'_> {
    pub fn is_truncated(&self) -> bool {
        (self.data.len() as u64) < u64::from(self.orig_len)
    }
}

/// Zero-copy reader over an in-memory capture.
pub struct PcapReader<'a> {
    header: GlobalHeader,
    endian: Endian,
    rest: &'a [u8],
    /// Set once a record header or body ran past the end of the input.
    pub cut_short: bool,
}

impl<'a> PcapReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Result<Self, CaptureError> {
        if bytes.len() < GLOBAL_HEADER_LEN {
            return Err(CaptureError::TruncatedGlobalHeader(bytes.len()));
        }
        let le = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
        let be = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
        let (endian, nanosecond) = match (le, be) {
            (MAGIC_MICROS, _) => (Endian::Little, false),
            (MAGIC_NANOS, _) => (Endian::Little, true),
            (_, MAGIC_MICROS) => (Endian::Big, false),
            (_, MAGIC_NANOS) => (Endian::Big, true),
            _ => return Err(CaptureError::BadMagic(le)),
        };
        let snaplen = endian.u32(&bytes[16..20]);
        // Upper 4 bits of the link-type word carry FCS information.
        let dlt = endian.u32(&bytes[20..24]) & 0x0fff_ffff;
        let link_type = LinkType::from_dlt(dlt).ok_or(CaptureError::UnsupportedLinkType(dlt))?;
        Ok(PcapReader {
            header: GlobalHeader {
                nanosecond,
                snaplen,
                link_type,
            },
            endian,
            rest: &bytes[GLOBAL_HEADER_LEN..],
            cut_short: false,
        })
    }

    pub fn header(&self) -> GlobalHeader {
        self.header
    }
}

impl<'a> Iterator for PcapReader<'a> {
    type Item = RawRecord<'a>;

    fn next(&mut self) -> Option<RawRecord<'a>> {
        if self.rest.is_empty() {
            return None;
        }
        if self.rest.len() < RECORD_HEADER_LEN {
            self.cut_short = true;
            self.rest = &[];
            return None;
        }
        let e = self.endian;
        let secs = e.u32(&self.rest[0..4]);
        let frac = e.u32(&self.rest[4..8]);
        let incl = e.u32(&self.rest[8..12]) as usize;
        let orig = e.u32(&self.rest[12..16]);
        let body = &self.rest[RECORD_HEADER_LEN..];
        if body.len() < incl {
            self.cut_short = true;
            self.rest = &[];
            return None;
        }
        let micros = if self.header.nanosecond {
            frac / 1000
        } else {
            frac
        };
        let timestamp = Timestamp::from_micros(i64::from(secs) * 1_000_000 + i64::from(micros));
        let (data, rest) = body.split_at(incl);
        self.rest = rest;
        Some(RawRecord {
            timestamp,
            orig_len: orig.max(incl as u32),
            data,
        })
    }
}

/// Writes little-endian microsecond pcap files.
pub struct PcapWriter<W: Write> {
    out: W,
    snaplen: u32,
}

impl<W: Write> PcapWriter<W> {
    pub fn new(mut out: W, link_type: LinkType, snaplen: u32) -> io::Result<Self> {
        let mut hdr = [0u8; GLOBAL_HEADER_LEN];
        hdr[0..4].copy_from_slice(&MAGIC_MICROS.to_le_bytes());
        hdr[4..6].copy_from_slice(&2u16.to_le_bytes());
        hdr[6..8].copy_from_slice(&4u16.to_le_bytes());
        hdr[16..20].copy_from_slice(&snaplen.to_le_bytes());
        hdr[20..24].copy_from_slice(&link_type.dlt().to_le_bytes());
        out.write_all(&hdr)?;
        Ok(PcapWriter { out, snaplen })
    }

    /// Appends one frame, cutting it at the snap length.
    pub fn write_frame(&mut self, timestamp: Timestamp, frame: &[u8]) -> io::Result<()> {
        self.write_frame_with_len(timestamp, frame, frame.len() as u32)
    }

    /// Appends a frame that may already be shorter than it was on the wire.
    pub fn write_frame_with_len(
        &mut self,
        timestamp: Timestamp,
        frame: &[u8],
        orig_len: u32,
    ) -> io::Result<()> {
        let incl = frame.len().min(self.snaplen as usize);
        let micros = timestamp.as_micros();
        let secs = micros.div_euclid(1_000_000) as u32;
        let frac = micros.rem_euclid(1_000_000) as u32;
        let mut hdr = [0u8; RECORD_HEADER_LEN];
        hdr[0..4].copy_from_slice(&secs.to_le_bytes());
        hdr[4..8].copy_from_slice(&frac.to_le_bytes());
        hdr[8..12].copy_from_slice(&(incl as u32).to_le_bytes());
        hdr[12..16].copy_from_slice(&orig_len.max(incl as u32).to_le_bytes());
        self.out.write_all(&hdr)?;
        self.out.write_all(&frame[..incl])
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
