//! Retransmission taxonomy for data-bearing TCP segments.
//!
//! Precedence per segment: spurious, then fast retransmission, then plain
//! retransmission, else none. Keep-alive probes are never counted.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::capture::{Direction, Flow, TcpFlags};
use crate::Timestamp;

/// Maximum gap between the last duplicate ACK and a fast retransmission.
pub const FAST_RETX_WINDOW_US: i64 = 20_000;
/// Duplicate ACKs that must precede a fast retransmission.
pub const FAST_RETX_MIN_DUP_ACKS: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RetransmissionClass {
    None,
    Retransmission,
    FastRetransmission,
    Spurious,
}

impl RetransmissionClass {
    pub fn is_retransmission(self) -> bool {
        self != RetransmissionClass::None
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Classification {
    /// One entry per packet of the flow; `None` for packets without payload.
    pub labels: Vec<Option<RetransmissionClass>>,
    /// False when the flow had no SYN, so sequence state starts mid-stream.
    pub handshake_seen: bool,
    pub keepalives: usize,
}

impl Classification {
    pub fn count(&self, class: RetransmissionClass) -> usize {
        self.labels.iter().filter(|l| **l == Some(class)).count()
    }
}

/// Maps 32-bit sequence numbers onto a monotone 64-bit line.
#[derive(Debug, Default)]
struct SeqLine {
    last: Option<(u32, i64)>,
}

impl SeqLine {
    fn map(&mut self, v: u32) -> i64 {
        let u = match self.last {
            Some((raw, u)) => u + i64::from(v.wrapping_sub(raw) as i32),
            None => i64::from(v),
        };
        self.last = Some((v, u));
        u
    }
}

/// Disjoint half-open ranges keyed by start.
#[derive(Debug, Default)]
struct Coverage {
    ranges: BTreeMap<i64, i64>,
}

impl Coverage {
    fn overlaps(&self, start: i64, end: i64) -> bool {
        // Only the last range starting before `end` can overlap, since ranges
        // are disjoint and merged.
        self.ranges
            .range(..end)
            .next_back()
            .is_some_and(|(_, &e)| e > start)
    }

    fn insert(&mut self, mut start: i64, mut end: i64) {
        let touching: Vec<(i64, i64)> = self
            .ranges
            .range(..=end)
            .rev()
            .take_while(|(_, &e)| e >= start)
            .map(|(&s, &e)| (s, e))
            .collect();
        for (s, e) in touching {
            self.ranges.remove(&s);
            start = start.min(s);
            end = end.max(e);
        }
        self.ranges.insert(start, end);
    }
}

/// Per-direction sequence state plus what the opposite side has ACKed.
#[derive(Debug, Default)]
struct SenderState {
    line: SeqLine,
    next_seq: Option<i64>,
    sent: Coverage,
    /// Highest cumulative ACK from the receiver, in this sender's space.
    max_ack: Option<i64>,
    last_ack: Option<i64>,
    last_window: u16,
    dup_acks: u32,
    last_dup_at: Option<Timestamp>,
}

fn idx(d: Direction) -> usize {
    match d {
        Direction::FromInitiator => 0,
        Direction::FromResponder => 1,
    }
}

pub fn classify_retransmissions(flow: &Flow) -> Classification {
    let mut state = [SenderState::default(), SenderState::default()];
    let mut labels = Vec::with_capacity(flow.packets.len());
    let mut keepalives = 0;

    for p in &flow.packets {
        let Some(tcp) = &p.tcp else {
            labels.push(None);
            continue;
        };
        let dir = flow.direction(p);
        let me = idx(dir);
        let peer = idx(dir.reverse());
        let seq = state[me].line.map(tcp.seq);
        let len = i64::from(tcp.payload_len);
        let end = seq + len;

        let label = if len == 0 {
            None
        } else {
            let s = &state[me];
            let control = tcp
                .flags
                .intersects(TcpFlags::SYN | TcpFlags::FIN | TcpFlags::RST);
            let keepalive = len <= 1 && !control && s.next_seq.is_some_and(|n| seq == n - 1);
            if keepalive {
                keepalives += 1;
                Some(RetransmissionClass::None)
            } else if s.max_ack.is_some_and(|a| end <= a) {
                Some(RetransmissionClass::Spurious)
            } else if s.dup_acks >= FAST_RETX_MIN_DUP_ACKS
                && s.last_ack == Some(seq)
                && s.last_dup_at
                    .is_some_and(|t| p.timestamp.micros_since(t) <= FAST_RETX_WINDOW_US)
            {
                Some(RetransmissionClass::FastRetransmission)
            } else if s.sent.overlaps(seq, end) {
                Some(RetransmissionClass::Retransmission)
            } else {
                Some(RetransmissionClass::None)
            }
        };
        labels.push(label);

        // Sender-side bookkeeping.
        let s = &mut state[me];
        if len > 0 {
            s.sent.insert(seq, end);
        }
        let consumed = seq + i64::from(tcp.seq_len());
        s.next_seq = Some(s.next_seq.map_or(consumed, |n| n.max(consumed)));

        // Receiver-side bookkeeping for the opposite direction.
        if tcp.flags.contains(TcpFlags::ACK) {
            let r = &mut state[peer];
            let ack = r.line.map(tcp.ack);
            let pure = len == 0
                && !tcp
                    .flags
                    .intersects(TcpFlags::SYN | TcpFlags::FIN | TcpFlags::RST);
            match r.last_ack {
                Some(prev) if ack > prev => {
                    r.last_ack = Some(ack);
                    r.dup_acks = 0;
                    r.last_dup_at = None;
                }
                Some(prev)
                    if ack == prev
                        && pure
                        && tcp.window == r.last_window
                        && tcp.window != 0
                        && r.next_seq.is_some() =>
                {
                    r.dup_acks += 1;
                    r.last_dup_at = Some(p.timestamp);
                }
                Some(_) => {}
                None => r.last_ack = Some(ack),
            }
            r.last_window = tcp.window;
            r.max_ack = Some(r.max_ack.map_or(ack, |m| m.max(ack)));
        }
    }

    Classification {
        labels,
        handshake_seen: flow.syn_seen,
        keepalives,
    }
}

/// Retransmitted payload bytes over all payload bytes; 0 without data.
pub fn retransmission_rate(flow: &Flow, classes: &Classification) -> f64 {
    let (retx, total) = retransmitted_bytes(flow, classes);
    if total == 0 {
        0.0
    } else {
        retx as f64 / total as f64
    }
}

/// `(retransmitted payload bytes, total payload bytes)`.
pub fn retransmitted_bytes(flow: &Flow, classes: &Classification) -> (u64, u64) {
    let mut retx = 0u64;
    let mut total = 0u64;
    for (p, l) in flow.packets.iter().zip(&classes.labels) {
        let n = u64::from(p.tcp_payload_len());
        total += n;
        if l.is_some_and(RetransmissionClass::is_retransmission) {
            retx += n;
        }
    }
    (retx, total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::build::TcpPacketSpec;
    use crate::capture::packet::decode_frame;
    use crate::capture::{demux_flows, LinkType, PacketRecord};

    const C: &str = "10.0.0.1:40000";
    const S: &str = "10.0.0.2:443";

    fn seg(t_ms: f64, src: &str, dst: &str, seq: u32, ack: u32, len: usize) -> PacketRecord {
        let mut spec =
            TcpPacketSpec::new(src.parse().unwrap(), dst.parse().unwrap(), TcpFlags::ACK);
        spec.seq = seq;
        spec.ack = ack;
        spec.payload_len = len;
        let b = spec.to_ip_bytes();
        decode_frame(
            LinkType::RawIp,
            Timestamp::from_micros((t_ms * 1000.0) as i64),
            &b,
            b.len() as u32,
        )
        .unwrap()
    }

    fn data_labels(c: &Classification) -> Vec<RetransmissionClass> {
        c.labels.iter().flatten().copied().collect()
    }

    #[test]
    fn increasing_sequence_is_clean() {
        let flow = &demux_flows(
            (0..5)
                .map(|i| seg(i as f64, S, C, 1000 + i * 1000, 1, 1000))
                .collect(),
        )[0];
        let c = classify_retransmissions(flow);
        assert!(data_labels(&c)
            .iter()
            .all(|l| *l == RetransmissionClass::None));
        assert_eq!(retransmission_rate(flow, &c), 0.0);
    }

    #[test]
    fn resent_segment_below_highest_ack_is_retransmission() {
        let flow = &demux_flows(vec![
            seg(0.0, S, C, 1000, 1, 1000),
            seg(10.0, C, S, 1, 1000, 0),
            seg(300.0, S, C, 1000, 1, 1000),
        ])[0];
        let c = classify_retransmissions(flow);
        assert_eq!(
            data_labels(&c),
            vec![
                RetransmissionClass::None,
                RetransmissionClass::Retransmission
            ]
        );
    }

    fn dup_ack_trace(retx_at_ms: f64) -> Vec<PacketRecord> {
        vec![
            seg(0.0, S, C, 1000, 1, 1000),
            seg(0.1, S, C, 2000, 1, 1000),
            seg(0.2, S, C, 3000, 1, 1000),
            seg(0.3, S, C, 4000, 1, 1000),
            seg(50.0, C, S, 1, 1000, 0),
            seg(50.1, C, S, 1, 1000, 0),
            seg(50.2, C, S, 1, 1000, 0),
            seg(50.3, C, S, 1, 1000, 0),
            seg(50.3 + retx_at_ms, S, C, 1000, 1, 1000),
        ]
    }

    #[test]
    fn fast_retransmit_within_window() {
        let flow = &demux_flows(dup_ack_trace(5.0))[0];
        let c = classify_retransmissions(flow);
        assert_eq!(
            *data_labels(&c).last().unwrap(),
            RetransmissionClass::FastRetransmission
        );
    }

    #[test]
    fn late_resend_after_dup_acks_is_plain_retransmission() {
        let flow = &demux_flows(dup_ack_trace(500.0))[0];
        let c = classify_retransmissions(flow);
        assert_eq!(
            *data_labels(&c).last().unwrap(),
            RetransmissionClass::Retransmission
        );
    }

    #[test]
    fn resend_below_ack_point_is_spurious() {
        let flow = &demux_flows(vec![
            seg(0.0, S, C, 1000, 1, 1000),
            seg(0.1, S, C, 2000, 1, 1000),
            seg(50.0, C, S, 1, 3000, 0),
            seg(60.0, S, C, 1000, 1, 1000),
        ])[0];
        let c = classify_retransmissions(flow);
        assert_eq!(
            *data_labels(&c).last().unwrap(),
            RetransmissionClass::Spurious
        );
    }

    #[test]
    fn keepalive_probe_not_counted() {
        let flow = &demux_flows(vec![
            seg(0.0, S, C, 1000, 1, 1000),
            seg(50.0, C, S, 1, 2000, 0),
            seg(5000.0, S, C, 1999, 1, 1),
        ])[0];
        let c = classify_retransmissions(flow);
        assert_eq!(c.keepalives, 1);
        assert_eq!(
            data_labels(&c),
            vec![RetransmissionClass::None, RetransmissionClass::None]
        );
    }

    #[test]
    fn rate_counts_bytes_of_copies() {
        // Two distinct 1000-byte segments plus one resend: 1000 / 3000.
        let flow = &demux_flows(vec![
            seg(0.0, S, C, 1000, 1, 1000),
            seg(1.0, S, C, 2000, 1, 1000),
            seg(300.0, S, C, 1000, 1, 1000),
        ])[0];
        let c = classify_retransmissions(flow);
        assert_eq!(retransmitted_bytes(flow, &c), (1000, 3000));
        assert!((retransmission_rate(flow, &c) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn n_copies_rate_is_n_minus_one_over_n() {
        for n in 1..8u32 {
            let pkts = (0..n)
                .map(|i| seg(f64::from(i) * 300.0, S, C, 5000, 1, 500))
                .collect();
            let flow = &demux_flows(pkts)[0];
            let c = classify_retransmissions(flow);
            let rate = retransmission_rate(flow, &c);
            assert_eq!(rate, f64::from(n - 1) / f64::from(n));
        }
    }

    #[test]
    fn sequence_wrap_is_followed() {
        let flow = &demux_flows(vec![
            seg(0.0, S, C, u32::MAX - 499, 1, 1000),
            seg(1.0, S, C, 500, 1, 1000),
        ])[0];
        let c = classify_retransmissions(flow);
        assert_eq!(
            data_labels(&c),
            vec![RetransmissionClass::None, RetransmissionClass::None]
        );
    }

    #[test]
    fn coverage_merges_and_detects_overlap() {
        let mut cov = Coverage::default();
        cov.insert(0, 10);
        cov.insert(20, 30);
        cov.insert(10, 20);
        assert_eq!(cov.ranges.len(), 1);
        assert!(cov.overlaps(29, 31));
        assert!(!cov.overlaps(30, 40));
        assert!(!cov.overlaps(-5, 0));
    }
}
