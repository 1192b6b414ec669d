//! Link, network and transport header decoding into [`PacketRecord`]s.

use std::net::{IpAddr, Ipv4Addr, Ipv6Addr, SocketAddr};

use bitflags::bitflags;
use serde::{Deserialize, Serialize};

use super::pcap::LinkType;
use crate::Timestamp;

const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_IPV6: u16 = 0x86dd;
const ETHERTYPE_VLAN: u16 = 0x8100;
const ETHERTYPE_QINQ: u16 = 0x88a8;

pub const IPPROTO_TCP: u8 = 6;
pub const IPPROTO_UDP: u8 = 17;

/// The two ECN bits of the IP traffic-class / TOS byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum EcnCodepoint {
    #[default]
    NotEct,
    Ect1,
    Ect0,
    Ce,
}

impl EcnCodepoint {
    pub fn from_bits(bits: u8) -> EcnCodepoint {
        match bits & 0b11 {
            0b00 => EcnCodepoint::NotEct,
            0b01 => EcnCodepoint::Ect1,
            0b10 => EcnCodepoint::Ect0,
            _ => EcnCodepoint::Ce,
        }
    }

    pub fn bits(self) -> u8 {
        match self {
            EcnCodepoint::NotEct => 0b00,
            EcnCodepoint::Ect1 => 0b01,
            EcnCodepoint::Ect0 => 0b10,
            EcnCodepoint::Ce => 0b11,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transport {
    Tcp,
    Udp,
}

bitflags! {
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
    pub struct TcpFlags: u8 {
        const FIN = 0x01;
        const SYN = 0x02;
        const RST = 0x04;
        const PSH = 0x08;
        const ACK = 0x10;
        const URG = 0x20;
        const ECE = 0x40;
        const CWR = 0x80;
    }
}

/// A SACK block `[left, right)` in 32-bit sequence space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SackBlock {
    pub left: u32,
    pub right: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TcpTimestamp {
    pub val: u32,
    pub ecr: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TcpOptions {
    pub mss: Option<u16>,
    /// Shift count, clamped to 14.
    pub window_scale: Option<u8>,
    pub sack_permitted: bool,
    pub sack_blocks: Vec<SackBlock>,
    pub timestamp: Option<TcpTimestamp>,
}

pub const MAX_WINDOW_SHIFT: u8 = 14;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TcpSegment {
    pub seq: u32,
    pub ack: u32,
    pub flags: TcpFlags,
    pub window: u16,
    pub payload_len: u32,
    pub options: TcpOptions,
}

impl TcpSegment {
    /// Sequence space consumed: payload plus one for each of SYN and FIN.
    pub fn seq_len(&self) -> u32 {
        self.payload_len
            + u32::from(self.flags.contains(TcpFlags::SYN))
            + u32::from(self.flags.contains(TcpFlags::FIN))
    }
}

/// One captured IPv4/IPv6 packet carrying TCP or UDP.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketRecord {
    pub timestamp: Timestamp,
    /// IPv4 total length, or IPv6 payload length + 40.
    pub ip_total_length: u32,
    pub ecn: EcnCodepoint,
    pub transport: Transport,
    pub src: SocketAddr,
    pub dst: SocketAddr,
    pub tcp: Option<TcpSegment>,
    /// Set when the frame was cut by the snap length before the end of the
    /// transport header or payload.
    pub truncated: bool,
}

impl PacketRecord {
    pub fn tcp_payload_len(&self) -> u32 {
        self.tcp.as_ref().map_or(0, |t| t.payload_len)
    }

    pub fn is_data(&self) -> bool {
        self.tcp_payload_len() > 0
    }

    pub fn flags(&self) -> TcpFlags {
        self.tcp.as_ref().map_or(TcpFlags::empty(), |t| t.flags)
    }
}

/// Why a frame did not produce a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeSkip {
    /// Not IPv4/IPv6 (ARP, LLDP, ...).
    NonIp,
    /// IP packet without a decodable TCP/UDP header (ICMP, later fragments).
    NonTransport,
    Malformed,
}

fn be16(b: &[u8], at: usize) -> Option<u16> {
    Some(u16::from_be_bytes([*b.get(at)?, *b.get(at + 1)?]))
}

fn be32(b: &[u8], at: usize) -> Option<u32> {
    Some(u32::from_be_bytes([
        *b.get(at)?,
        *b.get(at + 1)?,
        *b.get(at + 2)?,
        *b.get(at + 3)?,
    ]))
}

/// Strips the link header, returning the EtherType and the network-layer
/// bytes.
fn strip_link(link: LinkType, frame: &[u8]) -> Result<(u16, &[u8]), DecodeSkip> {
    let (mut ethertype, mut rest) = match link {
        LinkType::Ethernet => {
            let et = be16(frame, 12).ok_or(DecodeSkip::Malformed)?;
            (et, &frame[14..])
        }
        LinkType::LinuxSll => {
            let et = be16(frame, 14).ok_or(DecodeSkip::Malformed)?;
            (et, &frame[16..])
        }
        LinkType::LinuxSll2 => {
            let et = be16(frame, 0).ok_or(DecodeSkip::Malformed)?;
            if frame.len() < 20 {
                return Err(DecodeSkip::Malformed);
            }
            (et, &frame[20..])
        }
        LinkType::RawIp => match frame.first().map(|b| b >> 4) {
            Some(4) => (ETHERTYPE_IPV4, frame),
            Some(6) => (ETHERTYPE_IPV6, frame),
            Some(_) => return Err(DecodeSkip::NonIp),
            None => return Err(DecodeSkip::Malformed),
        },
    };
    while ethertype == ETHERTYPE_VLAN || ethertype == ETHERTYPE_QINQ {
        ethertype = be16(rest, 2).ok_or(DecodeSkip::Malformed)?;
        rest = &rest[4..];
    }
    Ok((ethertype, rest))
}

/// Decodes one link-layer frame. `orig_len` is the on-wire length, used to
/// detect snap-length truncation.
pub fn decode_frame(
    link: LinkType,
    timestamp: Timestamp,
    frame: &[u8],
    orig_len: u32,
) -> Result<PacketRecord, DecodeSkip> {
    let (ethertype, net) = strip_link(link, frame)?;
    let cut = (frame.len() as u64) < u64::from(orig_len);
    match ethertype {
        ETHERTYPE_IPV4 => decode_ipv4(timestamp, net, cut),
        ETHERTYPE_IPV6 => decode_ipv6(timestamp, net, cut),
        _ => Err(DecodeSkip::NonIp),
    }
}

fn decode_ipv4(timestamp: Timestamp, b: &[u8], cut: bool) -> Result<PacketRecord, DecodeSkip> {
    if b.len() < 20 || b[0] >> 4 != 4 {
        return Err(DecodeSkip::Malformed);
    }
    let ihl = usize::from(b[0] & 0x0f) * 4;
    let total = be16(b, 2).ok_or(DecodeSkip::Malformed)?;
    if ihl < 20 || usize::from(total) < ihl || b.len() < ihl {
        return Err(DecodeSkip::Malformed);
    }
    let frag = be16(b, 6).ok_or(DecodeSkip::Malformed)?;
    if frag & 0x1fff != 0 {
        return Err(DecodeSkip::NonTransport);
    }
    let src = IpAddr::V4(Ipv4Addr::new(b[12], b[13], b[14], b[15]));
    let dst = IpAddr::V4(Ipv4Addr::new(b[16], b[17], b[18], b[19]));
    let ecn = EcnCodepoint::from_bits(b[1]);
    let transport_len = u32::from(total) - ihl as u32;
    let avail = &b[ihl..b.len().min(usize::from(total))];
    decode_transport(
        timestamp,
        b[9],
        src,
        dst,
        ecn,
        u32::from(total),
        transport_len,
        avail,
        cut || b.len() < usize::from(total),
    )
}

fn decode_ipv6(timestamp: Timestamp, b: &[u8], cut: bool) -> Result<PacketRecord, DecodeSkip> {
    if b.len() < 40 || b[0] >> 4 != 6 {
        return Err(DecodeSkip::Malformed);
    }
    let tclass = ((b[0] & 0x0f) << 4) | (b[1] >> 4);
    let payload_len = u32::from(be16(b, 4).ok_or(DecodeSkip::Malformed)?);
    let mut next = b[6];
    let mut addr = [0u8; 16];
    addr.copy_from_slice(&b[8..24]);
    let src = IpAddr::V6(Ipv6Addr::from(addr));
    addr.copy_from_slice(&b[24..40]);
    let dst = IpAddr::V6(Ipv6Addr::from(addr));
    let end = b.len().min(40 + payload_len as usize);
    let mut off = 40usize;
    // Walk extension headers until TCP/UDP.
    loop {
        match next {
            0 | 43 | 60 => {
                let hdr_next = *b.get(off).ok_or(DecodeSkip::Malformed)?;
                let len = (usize::from(*b.get(off + 1).ok_or(DecodeSkip::Malformed)?) + 1) * 8;
                next = hdr_next;
                off += len;
            }
            44 => {
                let hdr_next = *b.get(off).ok_or(DecodeSkip::Malformed)?;
                let frag = be16(b, off + 2).ok_or(DecodeSkip::Malformed)?;
                if frag & 0xfff8 != 0 {
                    return Err(DecodeSkip::NonTransport);
                }
                next = hdr_next;
                off += 8;
            }
            IPPROTO_TCP | IPPROTO_UDP => break,
            _ => return Err(DecodeSkip::NonTransport),
        }
        if off > 40 + payload_len as usize {
            return Err(DecodeSkip::Malformed);
        }
    }
    let transport_len = (40 + payload_len)
        .checked_sub(off as u32)
        .ok_or(DecodeSkip::Malformed)?;
    let avail = if off <= end { &b[off..end] } else { &[][..] };
    decode_transport(
        timestamp,
        next,
        src,
        dst,
        EcnCodepoint::from_bits(tclass),
        payload_len + 40,
        transport_len,
        avail,
        cut || b.len() < 40 + payload_len as usize,
    )
}

#[allow(clippy::too_many_arguments)]
fn decode_transport(
    timestamp: Timestamp,
    proto: u8,
    src: IpAddr,
    dst: IpAddr,
    ecn: EcnCodepoint,
    ip_total_length: u32,
    transport_len: u32,
    b: &[u8],
    cut: bool,
) -> Result<PacketRecord, DecodeSkip> {
    match proto {
        IPPROTO_TCP => {
            let sport = be16(b, 0).ok_or(DecodeSkip::Malformed)?;
            let dport = be16(b, 2).ok_or(DecodeSkip::Malformed)?;
            let seq = be32(b, 4).ok_or(DecodeSkip::Malformed)?;
            let ack = be32(b, 8).ok_or(DecodeSkip::Malformed)?;
            let data_off = usize::from(*b.get(12).ok_or(DecodeSkip::Malformed)? >> 4) * 4;
            let flags = TcpFlags::from_bits_retain(*b.get(13).ok_or(DecodeSkip::Malformed)?);
            let window = be16(b, 14).ok_or(DecodeSkip::Malformed)?;
            if data_off < 20 || data_off as u32 > transport_len {
                return Err(DecodeSkip::Malformed);
            }
            let opt_end = b.len().min(data_off);
            let options = if opt_end > 20 {
                parse_tcp_options(&b[20..opt_end])
            } else {
                TcpOptions::default()
            };
            Ok(PacketRecord {
                timestamp,
                ip_total_length,
                ecn,
                transport: Transport::Tcp,
                src: SocketAddr::new(src, sport),
                dst: SocketAddr::new(dst, dport),
                tcp: Some(TcpSegment {
                    seq,
                    ack,
                    flags,
                    window,
                    payload_len: transport_len - data_off as u32,
                    options,
                }),
                truncated: cut,
            })
        }
        IPPROTO_UDP => {
            let sport = be16(b, 0).ok_or(DecodeSkip::Malformed)?;
            let dport = be16(b, 2).ok_or(DecodeSkip::Malformed)?;
            if transport_len < 8 {
                return Err(DecodeSkip::Malformed);
            }
            Ok(PacketRecord {
                timestamp,
                ip_total_length,
                ecn,
                transport: Transport::Udp,
                src: SocketAddr::new(src, sport),
                dst: SocketAddr::new(dst, dport),
                tcp: None,
                truncated: cut,
            })
        }
        _ => Err(DecodeSkip::NonTransport),
    }
}

/// Parses the TCP option area. Unknown kinds are skipped; a malformed length
/// ends parsing with whatever was decoded so far.
pub fn parse_tcp_options(mut rest: &[u8]) -> TcpOptions {
    let mut opts = TcpOptions::default();
    while let Some(&kind) = rest.first() {
        match kind {
            0 => break,
            1 => {
                rest = &rest[1..];
                continue;
            }
            _ => {}
        }
        let Some(&len) = rest.get(1) else { break };
        let len = usize::from(len);
        if len < 2 || len > rest.len() {
            break;
        }
        let body = &rest[2..len];
        match (kind, body.len()) {
            (2, 2) => opts.mss = Some(u16::from_be_bytes([body[0], body[1]])),
            (3, 1) => opts.window_scale = Some(body[0].min(MAX_WINDOW_SHIFT)),
            (4, 0) => opts.sack_permitted = true,
            (5, n) if n % 8 == 0 => {
                for chunk in body.chunks_exact(8) {
                    let left = u32::from_be_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
                    let right = u32::from_be_bytes([chunk[4], chunk[5], chunk[6], chunk[7]]);
                    // Keep only well-formed blocks (left strictly before right).
                    if (right.wrapping_sub(left) as i32) > 0 {
                        opts.sack_blocks.push(SackBlock { left, right });
                    }
                }
            }
            (8, 8) => {
                opts.timestamp = Some(TcpTimestamp {
                    val: u32::from_be_bytes([body[0], body[1], body[2], body[3]]),
                    ecr: u32::from_be_bytes([body[4], body[5], body[6], body[7]]),
                })
            }
            _ => {}
        }
        rest = &rest[len..];
    }
    opts
}
