//! Synthetic flow generator and a brute-force reference for the metrics.
//!
//! The reference works straight from the generated packet specs (never from
//! parsed records) and recomputes every quantity from its definition by
//! scanning the packet list, quadratic where that is simplest.
#![allow(dead_code)]

use std::net::{IpAddr, Ipv4Addr, Ipv6Addr, SocketAddr};

use optperf_core::capture::build::{udp_packet, TcpOptionSpec, TcpPacketSpec};
use optperf_core::capture::{EcnCodepoint, LinkType, PcapWriter, TcpFlags, TcpTimestamp};
use optperf_core::Timestamp;
use rand::rngs::StdRng;
use rand::Rng;

#[derive(Debug, Clone)]
pub enum Spec {
    Tcp(TcpPacketSpec),
    Udp {
        src: SocketAddr,
        dst: SocketAddr,
        len: usize,
    },
}

impl Spec {
    pub fn bytes(&self) -> Vec<u8> {
        match self {
            Spec::Tcp(t) => t.to_ip_bytes(),
            Spec::Udp { src, dst, len } => udp_packet(*src, *dst, *len),
        }
    }

    pub fn src(&self) -> SocketAddr {
        match self {
            Spec::Tcp(t) => t.src,
            Spec::Udp { src, .. } => *src,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthPacket {
    pub t_us: i64,
    pub spec: Spec,
}

#[derive(Debug, Clone)]
pub struct SynthFlow {
    pub client: SocketAddr,
    pub server: SocketAddr,
    pub packets: Vec<SynthPacket>,
}

fn client_addr(rng: &mut StdRng, id: u32, v6: bool) -> SocketAddr {
    let port = 20000 + (id % 40000) as u16;
    if v6 {
        let mut seg = [0u16; 8];
        seg[0] = 0x2001;
        seg[1] = 0xdb8;
        seg[6] = (id >> 16) as u16;
        seg[7] = id as u16;
        seg[5] = rng.gen();
        SocketAddr::new(IpAddr::V6(Ipv6Addr::from(seg)), port)
    } else {
        let b = id.to_be_bytes();
        SocketAddr::new(IpAddr::V4(Ipv4Addr::new(10, b[1], b[2], b[3])), port)
    }
}

fn server_addr(v6: bool) -> SocketAddr {
    if v6 {
        "[2001:db8:ffff::1]:443".parse().unwrap()
    } else {
        "192.0.2.80:443".parse().unwrap()
    }
}

fn near_wrap(rng: &mut StdRng) -> u32 {
    if rng.gen_bool(0.3) {
        u32::MAX - rng.gen_range(0..200_000)
    } else {
        rng.gen()
    }
}

/// Scripted TCP download: handshake, server data with resends, duplicate
/// ACK bursts, keep-alives and occasional client data. Timestamps strictly
/// increase. `id` must be unique within one capture.
pub fn tcp_flow(rng: &mut StdRng, id: u32, with_ts: bool) -> SynthFlow {
    let v6 = rng.gen_bool(0.2);
    let c = client_addr(rng, id, v6);
    let s = server_addr(v6);
    let isn_c = near_wrap(rng);
    let isn_s = near_wrap(rng);
    let clock_c = near_wrap(rng);
    let clock_s = near_wrap(rng);
    let mut t: i64 = 1_700_000_000_000_000 + rng.gen_range(0..1_000_000_000);
    let t0 = t;
    let mut out: Vec<SynthPacket> = Vec::new();
    // Last TSval seen from each side, for echoes.
    let mut last_val_c: u32 = 0;
    let mut last_val_s: u32 = 0;

    let emit = |out: &mut Vec<SynthPacket>,
                t: i64,
                from_client: bool,
                flags: TcpFlags,
                seq: u32,
                ack: u32,
                len: usize,
                window: u16,
                last_val_c: &mut u32,
                last_val_s: &mut u32| {
        let (src, dst) = if from_client { (c, s) } else { (s, c) };
        let mut p = TcpPacketSpec::new(src, dst, flags);
        p.seq = seq;
        p.ack = ack;
        p.payload_len = len;
        p.window = window;
        if with_ts {
            let ms = ((t - t0) / 1000) as u32;
            let (val, ecr) = if from_client {
                (clock_c.wrapping_add(ms), *last_val_s)
            } else {
                (clock_s.wrapping_add(ms), *last_val_c)
            };
            let ecr = if flags.contains(TcpFlags::ACK) {
                ecr
            } else {
                0
            };
            p.options.timestamp = Some(TcpTimestamp { val, ecr });
            if from_client {
                *last_val_c = val;
            } else {
                *last_val_s = val;
            }
        }
        if flags.contains(TcpFlags::SYN) {
            p.options.mss = Some(1460);
            p.options.sack_permitted = true;
            p.options.window_scale = Some(7);
        }
        out.push(SynthPacket {
            t_us: t,
            spec: Spec::Tcp(p),
        });
    };

    let ack_f = TcpFlags::ACK;
    emit(
        &mut out,
        t,
        true,
        TcpFlags::SYN,
        isn_c,
        0,
        0,
        64240,
        &mut last_val_c,
        &mut last_val_s,
    );
    t += rng.gen_range(1_000..60_000);
    emit(
        &mut out,
        t,
        false,
        TcpFlags::SYN | ack_f,
        isn_s,
        isn_c.wrapping_add(1),
        0,
        65160,
        &mut last_val_c,
        &mut last_val_s,
    );
    t += rng.gen_range(1_000..60_000);
    emit(
        &mut out,
        t,
        true,
        ack_f,
        isn_c.wrapping_add(1),
        isn_s.wrapping_add(1),
        0,
        502,
        &mut last_val_c,
        &mut last_val_s,
    );

    // Relative sequence state (data starts at 1).
    let mut c_next: u32 = 1;
    let mut s_next: u32 = 1;
    let mut acked: u32 = 1;
    let mut segments: Vec<(u32, u32)> = Vec::new();
    let mut window: u16 = 502;

    let events = rng.gen_range(10..90);
    for _ in 0..events {
        t += if rng.gen_bool(0.05) {
            rng.gen_range(100_000..700_000)
        } else {
            rng.gen_range(1..6_000)
        };
        let roll: f64 = rng.gen();
        if roll < 0.50 {
            let len = rng.gen_range(1..=1448u32);
            emit(
                &mut out,
                t,
                false,
                ack_f | TcpFlags::PSH,
                isn_s.wrapping_add(s_next),
                isn_c.wrapping_add(c_next),
                len as usize,
                509,
                &mut last_val_c,
                &mut last_val_s,
            );
            segments.push((s_next, len));
            s_next += len;
        } else if roll < 0.68 {
            if s_next > acked {
                acked = rng.gen_range(acked + 1..=s_next);
            }
            if rng.gen_bool(0.2) {
                window = rng.gen_range(0..1024);
            }
            emit(
                &mut out,
                t,
                true,
                ack_f,
                isn_c.wrapping_add(c_next),
                isn_s.wrapping_add(acked),
                0,
                window,
                &mut last_val_c,
                &mut last_val_s,
            );
        } else if roll < 0.80 {
            let n = rng.gen_range(1..=4);
            for _ in 0..n {
                emit(
                    &mut out,
                    t,
                    true,
                    ack_f,
                    isn_c.wrapping_add(c_next),
                    isn_s.wrapping_add(acked),
                    0,
                    window,
                    &mut last_val_c,
                    &mut last_val_s,
                );
                t += rng.gen_range(1..3_000);
            }
            if let Some(&(seq, len)) = segments.iter().find(|(sq, _)| *sq == acked) {
                if rng.gen_bool(0.7) {
                    t += rng.gen_range(0..30_000);
                    emit(
                        &mut out,
                        t,
                        false,
                        ack_f,
                        isn_s.wrapping_add(seq),
                        isn_c.wrapping_add(c_next),
                        len as usize,
                        509,
                        &mut last_val_c,
                        &mut last_val_s,
                    );
                }
            }
        } else if roll < 0.92 {
            if !segments.is_empty() {
                let (seq, len) = segments[rng.gen_range(0..segments.len())];
                emit(
                    &mut out,
                    t,
                    false,
                    ack_f,
                    isn_s.wrapping_add(seq),
                    isn_c.wrapping_add(c_next),
                    len as usize,
                    509,
                    &mut last_val_c,
                    &mut last_val_s,
                );
            }
        } else if roll < 0.96 {
            if s_next > 1 {
                emit(
                    &mut out,
                    t,
                    false,
                    ack_f,
                    isn_s.wrapping_add(s_next - 1),
                    isn_c.wrapping_add(c_next),
                    1,
                    509,
                    &mut last_val_c,
                    &mut last_val_s,
                );
            }
        } else {
            let len = rng.gen_range(1..400u32);
            emit(
                &mut out,
                t,
                true,
                ack_f | TcpFlags::PSH,
                isn_c.wrapping_add(c_next),
                isn_s.wrapping_add(acked),
                len as usize,
                window,
                &mut last_val_c,
                &mut last_val_s,
            );
            c_next += len;
        }
    }
    if rng.gen_bool(0.5) {
        t += rng.gen_range(1..5_000);
        emit(
            &mut out,
            t,
            false,
            ack_f | TcpFlags::FIN,
            isn_s.wrapping_add(s_next),
            isn_c.wrapping_add(c_next),
            0,
            509,
            &mut last_val_c,
            &mut last_val_s,
        );
    }
    SynthFlow {
        client: c,
        server: s,
        packets: out,
    }
}

/// Random UDP exchange; sometimes a single datagram.
pub fn udp_flow(rng: &mut StdRng, id: u32) -> SynthFlow {
    let v6 = rng.gen_bool(0.2);
    let c = client_addr(rng, id, v6);
    let s = server_addr(v6);
    let n = if rng.gen_bool(0.1) {
        1
    } else {
        rng.gen_range(2..150)
    };
    let mut t: i64 = 1_700_000_000_000_000 + rng.gen_range(0..1_000_000_000);
    let mut packets = Vec::with_capacity(n);
    for i in 0..n {
        let up = i == 0 || rng.gen_bool(0.2);
        let (src, dst) = if up { (c, s) } else { (s, c) };
        packets.push(SynthPacket {
            t_us: t,
            spec: Spec::Udp {
                src,
                dst,
                len: rng.gen_range(20..1350),
            },
        });
        t += rng.gen_range(1..20_000);
    }
    SynthFlow {
        client: c,
        server: s,
        packets,
    }
}

/// One raw-IP pcap holding every packet of every flow, in time order.
pub fn to_pcap(flows: &[SynthFlow]) -> Vec<u8> {
    let mut all: Vec<&SynthPacket> = flows.iter().flat_map(|f| &f.packets).collect();
    all.sort_by_key(|p| p.t_us);
    let mut w = PcapWriter::new(Vec::new(), LinkType::RawIp, 65535).unwrap();
    for p in all {
        w.write_frame(Timestamp::from_micros(p.t_us), &p.spec.bytes())
            .unwrap();
    }
    w.into_inner()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    None,
    Retransmission,
    Fast,
    Spurious,
}

impl Label {
    pub fn is_retx(self) -> bool {
        self != Label::None
    }
}

/// Brute-force reference results for one flow.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub ip_bytes: u64,
    pub span_us: i64,
    /// `None` entries are packets without payload.
    pub labels: Vec<Option<Label>>,
    pub retx_payload: u64,
    pub total_payload: u64,
    pub retx_ip_bytes: u64,
    pub rtt_ms: Vec<f64>,
}

fn bps(bytes: u64, span_us: i64) -> f64 {
    (bytes * 8) as f64 * 1e6 / span_us as f64
}

impl Reference {
    /// `None` when fewer than two packets or a zero span.
    pub fn throughput(&self) -> Option<f64> {
        (self.span_us > 0 && self.labels.len() >= 2).then(|| bps(self.ip_bytes, self.span_us))
    }

    pub fn goodput(&self) -> Option<f64> {
        (self.span_us > 0 && self.labels.len() >= 2)
            .then(|| bps(self.ip_bytes - self.retx_ip_bytes, self.span_us))
    }

    pub fn retransmission_rate(&self) -> f64 {
        if self.total_payload == 0 {
            0.0
        } else {
            self.retx_payload as f64 / self.total_payload as f64
        }
    }

    pub fn mean_rtt_ms(&self) -> Option<f64> {
        (!self.rtt_ms.is_empty())
            .then(|| self.rtt_ms.iter().sum::<f64>() / self.rtt_ms.len() as f64)
    }
}

const FAST_WINDOW_US: i64 = 20_000;

fn tcp(p: &SynthPacket) -> Option<&TcpPacketSpec> {
    match &p.spec {
        Spec::Tcp(t) => Some(t),
        Spec::Udp { .. } => None,
    }
}

fn control(t: &TcpPacketSpec) -> bool {
    t.flags
        .intersects(TcpFlags::SYN | TcpFlags::FIN | TcpFlags::RST)
}

fn seq_space(t: &TcpPacketSpec) -> i64 {
    t.payload_len as i64
        + i64::from(t.flags.contains(TcpFlags::SYN))
        + i64::from(t.flags.contains(TcpFlags::FIN))
}

/// Reference computation, straight from the definitions.
pub fn reference(flow: &SynthFlow) -> Reference {
    let pk = &flow.packets;
    let ip_bytes: u64 = pk.iter().map(|p| p.spec.bytes().len() as u64).sum();
    let span_us = pk.last().unwrap().t_us - pk.first().unwrap().t_us;

    // Sequence numbers relative to each sender's SYN.
    let isn = |sender: SocketAddr| -> u32 {
        pk.iter()
            .filter_map(tcp)
            .find(|t| t.src == sender && t.flags.contains(TcpFlags::SYN))
            .map_or(0, |t| t.seq)
    };
    let rel = |base: u32, x: u32| -> i64 { i64::from(x.wrapping_sub(base)) };

    let mut labels = Vec::with_capacity(pk.len());
    for (i, p) in pk.iter().enumerate() {
        let Some(t) = tcp(p) else {
            labels.push(None);
            continue;
        };
        if t.payload_len == 0 {
            labels.push(None);
            continue;
        }
        let base = isn(t.src);
        let seq = rel(base, t.seq);
        let end = seq + t.payload_len as i64;
        let mine: Vec<&TcpPacketSpec> = pk[..i]
            .iter()
            .filter_map(tcp)
            .filter(|q| q.src == t.src)
            .collect();
        let acks: Vec<(i64, &SynthPacket)> = pk[..i]
            .iter()
            .filter(|q| tcp(q).is_some_and(|q| q.src != t.src && q.flags.contains(TcpFlags::ACK)))
            .map(|q| (rel(base, tcp(q).unwrap().ack), q))
            .collect();

        let highest_sent = mine.iter().map(|q| rel(base, q.seq) + seq_space(q)).max();
        let keepalive = t.payload_len <= 1 && !control(t) && highest_sent == Some(seq + 1);
        let max_ack = acks.iter().map(|(a, _)| *a).max();

        let fast = max_ack.is_some_and(|m| {
            if seq != m {
                return false;
            }
            let first = acks.iter().position(|(a, _)| *a == m).unwrap();
            let dups: Vec<i64> = (first + 1..acks.len())
                .filter(|&k| {
                    let q = tcp(acks[k].1).unwrap();
                    let prev = tcp(acks[k - 1].1).unwrap();
                    acks[k].0 == m
                        && q.payload_len == 0
                        && !control(q)
                        && q.window != 0
                        && q.window == prev.window
                })
                .map(|k| acks[k].1.t_us)
                .collect();
            dups.len() >= 2 && p.t_us - dups.last().unwrap() <= FAST_WINDOW_US
        });
        let overlap = mine.iter().any(|q| {
            let s = rel(base, q.seq);
            q.payload_len > 0 && s < end && seq < s + q.payload_len as i64
        });

        let label = if keepalive {
            Label::None
        } else if max_ack.is_some_and(|m| end <= m) {
            Label::Spurious
        } else if fast {
            Label::Fast
        } else if overlap {
            Label::Retransmission
        } else {
            Label::None
        };
        labels.push(Some(label));
    }

    let mut retx_payload = 0;
    let mut total_payload = 0;
    let mut retx_ip_bytes = 0;
    for (p, l) in pk.iter().zip(&labels) {
        let Some(t) = tcp(p) else { continue };
        total_payload += t.payload_len as u64;
        if l.is_some_and(Label::is_retx) {
            retx_payload += t.payload_len as u64;
            retx_ip_bytes += p.spec.bytes().len() as u64;
        }
    }

    // RTT: every echo consumes the earliest unmatched packet from the other
    // side whose TSval equals the echoed value.
    let mut used = vec![false; pk.len()];
    let mut rtt_ms = Vec::new();
    for (j, q) in pk.iter().enumerate() {
        let Some(qt) = tcp(q) else { continue };
        let Some(qts) = qt.options.timestamp else {
            continue;
        };
        if !qt.flags.contains(TcpFlags::ACK) {
            continue;
        }
        let hit = (0..j).find(|&i| {
            !used[i]
                && tcp(&pk[i]).is_some_and(|pt| {
                    pt.src != qt.src && pt.options.timestamp.is_some_and(|ts| ts.val == qts.ecr)
                })
        });
        if let Some(i) = hit {
            if q.t_us > pk[i].t_us {
                used[i] = true;
                rtt_ms.push((q.t_us - pk[i].t_us) as f64 / 1000.0);
            }
        }
    }

    Reference {
        ip_bytes,
        span_us,
        labels,
        retx_payload,
        total_payload,
        retx_ip_bytes,
        rtt_ms,
    }
}

/// Tiny helper for hand-built specs in tests.
pub fn seg(
    src: &str,
    dst: &str,
    flags: TcpFlags,
    seq: u32,
    ack: u32,
    len: usize,
    ts: Option<(u32, u32)>,
) -> Spec {
    let mut p = TcpPacketSpec::new(src.parse().unwrap(), dst.parse().unwrap(), flags);
    p.seq = seq;
    p.ack = ack;
    p.payload_len = len;
    p.options = TcpOptionSpec {
        timestamp: ts.map(|(val, ecr)| TcpTimestamp { val, ecr }),
        ..TcpOptionSpec::default()
    };
    p.ecn = EcnCodepoint::NotEct;
    Spec::Tcp(p)
}
