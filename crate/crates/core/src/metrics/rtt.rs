//! Passive RTT sampling from TCP timestamp echoes.
//!
//! A packet from X carrying TSval=v is answered by the first later ACK from
//! the peer whose TSecr is v. Several packets may share one TSval (the clock
//! ticks in milliseconds); an echo then consumes the earliest unmatched one.
//! TSval/TSecr are unwrapped with 32-bit serial arithmetic so that a value
//! reused after a wrap is a different key.

use std::collections::{HashMap, VecDeque};

use crate::capture::{Direction, Flow, TcpFlags};
use crate::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RttSample {
    pub rtt_ms: f64,
    /// Direction of the packet whose TSval was echoed.
    pub direction: Direction,
    /// Time of the echoing packet.
    pub at: Timestamp,
}

#[derive(Debug, Default)]
struct Unwrap {
    last: Option<(u32, i64)>,
}

impl Unwrap {
    fn advance(&mut self, v: u32) -> i64 {
        let u = self.peek(v).unwrap_or(i64::from(v));
        match self.last {
            Some((_, lu)) if u <= lu => {}
            _ => self.last = Some((v, u)),
        }
        u
    }

    fn peek(&self, v: u32) -> Option<i64> {
        self.last
            .map(|(raw, u)| u + i64::from(v.wrapping_sub(raw) as i32))
    }
}

#[derive(Default)]
struct Side {
    clock: Unwrap,
    pending: HashMap<i64, VecDeque<Timestamp>>,
}

fn side_index(d: Direction) -> usize {
    match d {
        Direction::FromInitiator => 0,
        Direction::FromResponder => 1,
    }
}

pub fn rtt_samples(flow: &Flow) -> Vec<RttSample> {
    let mut sides = [Side::default(), Side::default()];
    let mut out = Vec::new();
    for p in &flow.packets {
        let Some(tcp) = &p.tcp else { continue };
        let Some(ts) = tcp.options.timestamp else {
            continue;
        };
        let dir = flow.direction(p);
        let me = side_index(dir);
        let peer = side_index(dir.reverse());
        if tcp.flags.contains(TcpFlags::ACK) {
            if let Some(echo) = sides[peer].clock.peek(ts.ecr) {
                if let Some(queue) = sides[peer].pending.get_mut(&echo) {
                    if let Some(&sent) = queue.front() {
                        let us = p.timestamp.micros_since(sent);
                        if us > 0 {
                            queue.pop_front();
                            out.push(RttSample {
                                rtt_ms: us as f64 / 1000.0,
                                direction: dir.reverse(),
                                at: p.timestamp,
                            });
                        }
                    }
                }
            }
        }
        let val = sides[me].clock.advance(ts.val);
        sides[me]
            .pending
            .entry(val)
            .or_default()
            .push_back(p.timestamp);
    }
    out
}

/// Samples whose echoed packet was sent by the connection initiator. With
/// the capture at the client these span the full network round trip; the
/// opposite direction only measures the client's own ACK turnaround.
pub fn vantage_samples(samples: &[RttSample]) -> Vec<RttSample> {
    samples
        .iter()
        .filter(|s| s.direction == Direction::FromInitiator)
        .copied()
        .collect()
}

/// Arithmetic mean of the samples, `None` when empty.
pub fn mean_rtt_ms(samples: &[RttSample]) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    Some(samples.iter().map(|s| s.rtt_ms).sum::<f64>() / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::build::{TcpOptionSpec, TcpPacketSpec};
    use crate::capture::packet::decode_frame;
    use crate::capture::{demux_flows, LinkType, TcpTimestamp};

    const C: &str = "10.0.0.1:40000";
    const S: &str = "10.0.0.2:443";

    fn p(
        t_us: i64,
        src: &str,
        dst: &str,
        flags: TcpFlags,
        ts: Option<(u32, u32)>,
        len: usize,
    ) -> crate::capture::PacketRecord {
        let mut spec = TcpPacketSpec::new(src.parse().unwrap(), dst.parse().unwrap(), flags);
        spec.payload_len = len;
        spec.options = TcpOptionSpec {
            timestamp: ts.map(|(val, ecr)| TcpTimestamp { val, ecr }),
            ..Default::default()
        };
        let b = spec.to_ip_bytes();
        decode_frame(
            LinkType::RawIp,
            Timestamp::from_micros(t_us),
            &b,
            b.len() as u32,
        )
        .unwrap()
    }

    #[test]
    fn single_pair_gives_one_sample() {
        let flow = &demux_flows(vec![
            p(0, S, C, TcpFlags::ACK, Some((100, 1)), 1000),
            p(50_000, C, S, TcpFlags::ACK, Some((2, 100)), 0),
        ])[0];
        let s = rtt_samples(flow);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].rtt_ms, 50.0);
    }

    #[test]
    fn shared_tsval_matches_earliest_only() {
        let flow = &demux_flows(vec![
            p(0, S, C, TcpFlags::ACK, Some((100, 1)), 1000),
            p(10_000, S, C, TcpFlags::ACK, Some((100, 1)), 1000),
            p(50_000, C, S, TcpFlags::ACK, Some((2, 100)), 0),
        ])[0];
        let s = rtt_samples(flow);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].rtt_ms, 50.0);
    }

    #[test]
    fn no_timestamp_option_no_samples() {
        let flow = &demux_flows(vec![
            p(0, S, C, TcpFlags::ACK, None, 1000),
            p(50_000, C, S, TcpFlags::ACK, None, 0),
        ])[0];
        assert!(rtt_samples(flow).is_empty());
        assert_eq!(mean_rtt_ms(&[]), None);
    }

    #[test]
    fn echo_without_ack_flag_is_ignored() {
        let flow = &demux_flows(vec![
            p(0, C, S, TcpFlags::SYN, Some((5, 0)), 0),
            p(20_000, S, C, TcpFlags::SYN, Some((9, 5)), 0),
        ])[0];
        assert!(rtt_samples(flow).is_empty());
    }

    #[test]
    fn tsval_wrap_is_disambiguated() {
        // The responder clock wraps: u32::MAX then 3. An echo of 3 must pair
        // with the post-wrap packet, not be confused with an old value.
        let flow = &demux_flows(vec![
            p(0, S, C, TcpFlags::ACK, Some((u32::MAX, 1)), 100),
            p(1_000, S, C, TcpFlags::ACK, Some((3, 1)), 100),
            p(30_000, C, S, TcpFlags::ACK, Some((2, u32::MAX)), 0),
            p(31_000, C, S, TcpFlags::ACK, Some((2, 3)), 0),
        ])[0];
        let s = rtt_samples(flow);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].rtt_ms, 30.0);
        assert_eq!(s[1].rtt_ms, 30.0);
    }

    #[test]
    fn both_directions_are_sampled() {
        let flow = &demux_flows(vec![
            p(0, C, S, TcpFlags::SYN, Some((10, 0)), 0),
            p(
                40_000,
                S,
                C,
                TcpFlags::SYN | TcpFlags::ACK,
                Some((500, 10)),
                0,
            ),
            p(80_000, C, S, TcpFlags::ACK, Some((11, 500)), 0),
        ])[0];
        let s = rtt_samples(flow);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].direction, Direction::FromInitiator);
        assert_eq!(s[1].direction, Direction::FromResponder);
        assert_eq!(mean_rtt_ms(&s), Some(40.0));
        let v = vantage_samples(&s);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].direction, Direction::FromInitiator);
    }
}
