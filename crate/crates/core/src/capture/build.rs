//! Serialises TCP/UDP packets to wire format. Used by the SYN prober and by
//! the test corpora, which script captures packet by packet.

use std::net::{IpAddr, SocketAddr};

use super::packet::{EcnCodepoint, SackBlock, TcpFlags, TcpTimestamp, IPPROTO_TCP, IPPROTO_UDP};

/// Options to emit in a TCP header, in a fixed, kernel-like layout.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TcpOptionSpec {
    pub mss: Option<u16>,
    pub sack_permitted: bool,
    pub timestamp: Option<TcpTimestamp>,
    pub window_scale: Option<u8>,
    pub sack_blocks: Vec<SackBlock>,
}

impl TcpOptionSpec {
    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(40);
        if let Some(mss) = self.mss {
            out.extend_from_slice(&[2, 4]);
            out.extend_from_slice(&mss.to_be_bytes());
        }
        match (self.sack_permitted, self.timestamp) {
            (true, Some(ts)) => {
                out.extend_from_slice(&[4, 2, 8, 10]);
                out.extend_from_slice(&ts.val.to_be_bytes());
                out.extend_from_slice(&ts.ecr.to_be_bytes());
            }
            (true, None) => out.extend_from_slice(&[1, 1, 4, 2]),
            (false, Some(ts)) => {
                out.extend_from_slice(&[1, 1, 8, 10]);
                out.extend_from_slice(&ts.val.to_be_bytes());
                out.extend_from_slice(&ts.ecr.to_be_bytes());
            }
            (false, None) => {}
        }
        if let Some(ws) = self.window_scale {
            out.extend_from_slice(&[1, 3, 3, ws]);
        }
        if !self.sack_blocks.is_empty() {
            out.extend_from_slice(&[1, 1, 5, 2 + 8 * self.sack_blocks.len() as u8]);
            for b in &self.sack_blocks {
                out.extend_from_slice(&b.left.to_be_bytes());
                out.extend_from_slice(&b.right.to_be_bytes());
            }
        }
        while out.len() % 4 != 0 {
            out.push(0);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TcpPacketSpec {
    pub src: SocketAddr,
    pub dst: SocketAddr,
    pub seq: u32,
    pub ack: u32,
    pub flags: TcpFlags,
    pub window: u16,
    pub options: TcpOptionSpec,
    pub payload_len: usize,
    pub ecn: EcnCodepoint,
}

impl TcpPacketSpec {
    pub fn new(src: SocketAddr, dst: SocketAddr, flags: TcpFlags) -> Self {
        TcpPacketSpec {
            src,
            dst,
            seq: 0,
            ack: 0,
            flags,
            window: 65535,
            options: TcpOptionSpec::default(),
            payload_len: 0,
            ecn: EcnCodepoint::NotEct,
        }
    }

    /// The TCP header plus zero-filled payload, with checksum.
    pub fn tcp_bytes(&self) -> Vec<u8> {
        let opts = self.options.encode();
        let hlen = 20 + opts.len();
        let mut seg = vec![0u8; hlen + self.payload_len];
        seg[0..2].copy_from_slice(&self.src.port().to_be_bytes());
        seg[2..4].copy_from_slice(&self.dst.port().to_be_bytes());
        seg[4..8].copy_from_slice(&self.seq.to_be_bytes());
        seg[8..12].copy_from_slice(&self.ack.to_be_bytes());
        seg[12] = ((hlen / 4) as u8) << 4;
        seg[13] = self.flags.bits();
        seg[14..16].copy_from_slice(&self.window.to_be_bytes());
        seg[20..hlen].copy_from_slice(&opts);
        let csum = transport_checksum(self.src.ip(), self.dst.ip(), IPPROTO_TCP, &seg);
        seg[16..18].copy_from_slice(&csum.to_be_bytes());
        seg
    }

    /// Complete IP packet.
    pub fn to_ip_bytes(&self) -> Vec<u8> {
        let seg = self.tcp_bytes();
        ip_wrap(self.src.ip(), self.dst.ip(), IPPROTO_TCP, self.ecn, &seg)
    }
}

/// Complete IP packet carrying a UDP datagram with a zero-filled payload.
pub fn udp_packet(src: SocketAddr, dst: SocketAddr, payload_len: usize) -> Vec<u8> {
    let len = 8 + payload_len;
    let mut dgram = vec![0u8; len];
    dgram[0..2].copy_from_slice(&src.port().to_be_bytes());
    dgram[2..4].copy_from_slice(&dst.port().to_be_bytes());
    dgram[4..6].copy_from_slice(&(len as u16).to_be_bytes());
    let csum = transport_checksum(src.ip(), dst.ip(), IPPROTO_UDP, &dgram);
    dgram[6..8].copy_from_slice(&csum.to_be_bytes());
    ip_wrap(
        src.ip(),
        dst.ip(),
        IPPROTO_UDP,
        EcnCodepoint::NotEct,
        &dgram,
    )
}

fn ip_wrap(src: IpAddr, dst: IpAddr, proto: u8, ecn: EcnCodepoint, body: &[u8]) -> Vec<u8> {
    match (src, dst) {
        (IpAddr::V4(s), IpAddr::V4(d)) => {
            let total = 20 + body.len();
            let mut p = vec![0u8; total];
            p[0] = 0x45;
            p[1] = ecn.bits();
            p[2..4].copy_from_slice(&(total as u16).to_be_bytes());
            p[6] = 0x40; // DF
            p[8] = 64;
            p[9] = proto;
            p[12..16].copy_from_slice(&s.octets());
            p[16..20].copy_from_slice(&d.octets());
            let csum = fold(sum_words(&p[..20], 0));
            p[10..12].copy_from_slice(&csum.to_be_bytes());
            p[20..].copy_from_slice(body);
            p
        }
        (IpAddr::V6(s), IpAddr::V6(d)) => {
            let mut p = vec![0u8; 40 + body.len()];
            p[0] = 0x60 | (ecn.bits() >> 4);
            p[1] = ecn.bits() << 4;
            p[4..6].copy_from_slice(&(body.len() as u16).to_be_bytes());
            p[6] = proto;
            p[7] = 64;
            p[8..24].copy_from_slice(&s.octets());
            p[24..40].copy_from_slice(&d.octets());
            p[40..].copy_from_slice(body);
            p
        }
        _ => panic!("mixed address families: {src} -> {dst}"),
    }
}

fn sum_words(b: &[u8], mut acc: u32) -> u32 {
    let mut chunks = b.chunks_exact(2);
    for c in &mut chunks {
        acc = acc.wrapping_add(u32::from(u16::from_be_bytes([c[0], c[1]])));
    }
    if let [last] = chunks.remainder() {
        acc = acc.wrapping_add(u32::from(*last) << 8);
    }
    acc
}

fn fold(mut acc: u32) -> u16 {
    while acc > 0xffff {
        acc = (acc & 0xffff) + (acc >> 16);
    }
    !(acc as u16)
}

/// Internet checksum over the pseudo-header and transport segment.
pub fn transport_checksum(src: IpAddr, dst: IpAddr, proto: u8, seg: &[u8]) -> u16 {
    let mut acc = 0u32;
    match (src, dst) {
        (IpAddr::V4(s), IpAddr::V4(d)) => {
            acc = sum_words(&s.octets(), acc);
            acc = sum_words(&d.octets(), acc);
            acc = acc.wrapping_add(u32::from(proto));
            acc = acc.wrapping_add(seg.len() as u32);
        }
        (IpAddr::V6(s), IpAddr::V6(d)) => {
            acc = sum_words(&s.octets(), acc);
            acc = sum_words(&d.octets(), acc);
            acc = acc.wrapping_add(seg.len() as u32);
            acc = acc.wrapping_add(u32::from(proto));
        }
        _ => panic!("mixed address families: {src} -> {dst}"),
    }
    fold(sum_words(seg, acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::packet::{decode_frame, Transport};
    use crate::capture::pcap::LinkType;
    use crate::Timestamp;

    #[test]
    fn ipv4_header_checksum_verifies() {
        let spec = TcpPacketSpec::new(
            "10.0.0.1:1000".parse().unwrap(),
            "10.0.0.2:443".parse().unwrap(),
            TcpFlags::SYN,
        );
        let p = spec.to_ip_bytes();
        assert_eq!(fold(sum_words(&p[..20], 0)), 0);
        let seg = &p[20..];
        assert_eq!(
            transport_checksum(spec.src.ip(), spec.dst.ip(), IPPROTO_TCP, seg),
            0
        );
    }

    #[test]
    fn built_packet_decodes_back() {
        let mut spec = TcpPacketSpec::new(
            "[2001:db8::1]:1000".parse().unwrap(),
            "[2001:db8::2]:443".parse().unwrap(),
            TcpFlags::ACK | TcpFlags::ECE,
        );
        spec.seq = 77;
        spec.payload_len = 100;
        spec.ecn = EcnCodepoint::Ce;
        spec.options.sack_blocks = vec![SackBlock { left: 1, right: 9 }];
        let bytes = spec.to_ip_bytes();
        let rec = decode_frame(
            LinkType::RawIp,
            Timestamp::from_micros(5),
            &bytes,
            bytes.len() as u32,
        )
        .unwrap();
        assert_eq!(rec.transport, Transport::Tcp);
        assert_eq!(rec.ecn, EcnCodepoint::Ce);
        assert_eq!(rec.ip_total_length as usize, bytes.len());
        let tcp = rec.tcp.unwrap();
        assert_eq!(tcp.seq, 77);
        assert_eq!(tcp.payload_len, 100);
        assert_eq!(tcp.options.sack_blocks.len(), 1);
    }
}
