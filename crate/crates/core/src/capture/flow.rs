//! Per-connection demultiplexing and handshake option state.

use std::collections::HashMap;
use std::net::SocketAddr;

use super::packet::{PacketRecord, TcpFlags, Transport};

/// Direction-agnostic connection identifier: endpoints are stored sorted so
/// that both directions of a connection map to the same key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FlowKey {
    pub transport: Transport,
    pub lo: SocketAddr,
    pub hi: SocketAddr,
}

impl FlowKey {
    pub fn new(transport: Transport, a: SocketAddr, b: SocketAddr) -> FlowKey {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        FlowKey { transport, lo, hi }
    }

    pub fn of(p: &PacketRecord) -> FlowKey {
        FlowKey::new(p.transport, p.src, p.dst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    FromInitiator,
    FromResponder,
}

impl Direction {
    pub fn reverse(self) -> Direction {
        match self {
            Direction::FromInitiator => Direction::FromResponder,
            Direction::FromResponder => Direction::FromInitiator,
        }
    }
}

/// Options one side advertised in its SYN or SYN-ACK.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SideOptions {
    pub window_scale: Option<u8>,
    pub sack_permitted: bool,
    pub timestamps: bool,
    /// SYN carried ECE+CWR (initiator) or SYN-ACK carried ECE without CWR
    /// (responder).
    pub ecn_setup: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Negotiated {
    pub initiator: SideOptions,
    pub responder: SideOptions,
}

impl Negotiated {
    /// Window scaling is in effect only when both sides sent the option.
    pub fn window_scaling(&self) -> bool {
        self.initiator.window_scale.is_some() && self.responder.window_scale.is_some()
    }

    pub fn sack(&self) -> bool {
        self.initiator.sack_permitted && self.responder.sack_permitted
    }

    pub fn timestamps(&self) -> bool {
        self.initiator.timestamps && self.responder.timestamps
    }

    pub fn ecn(&self) -> bool {
        self.initiator.ecn_setup && self.responder.ecn_setup
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Flow {
    pub key: FlowKey,
    /// Sender of the first SYN, or of the first packet when no SYN was seen.
    pub initiator: SocketAddr,
    pub packets: Vec<PacketRecord>,
    pub negotiated: Negotiated,
    pub syn_seen: bool,
    pub syn_ack_seen: bool,
    closed: bool,
}

impl Flow {
    fn open(first: &PacketRecord) -> Flow {
        Flow {
            key: FlowKey::of(first),
            initiator: first.src,
            packets: Vec::new(),
            negotiated: Negotiated::default(),
            syn_seen: false,
            syn_ack_seen: false,
            closed: false,
        }
    }

    pub fn transport(&self) -> Transport {
        self.key.transport
    }

    pub fn responder(&self) -> SocketAddr {
        if self.key.lo == self.initiator {
            self.key.hi
        } else {
            self.key.lo
        }
    }

    pub fn direction(&self, p: &PacketRecord) -> Direction {
        if p.src == self.initiator {
            Direction::FromInitiator
        } else {
            Direction::FromResponder
        }
    }

    /// True when no SYN was observed, so handshake-derived state is absent.
    pub fn handshake_absent(&self) -> bool {
        self.transport() == Transport::Tcp && !self.syn_seen
    }

    fn push(&mut self, p: PacketRecord) {
        if let Some(tcp) = &p.tcp {
            let syn = tcp.flags.contains(TcpFlags::SYN);
            let ack = tcp.flags.contains(TcpFlags::ACK);
            if syn && !ack {
                if !self.syn_seen {
                    self.syn_seen = true;
                    self.initiator = p.src;
                    // A SYN arriving after packets from the other side flips
                    // the initiator; handshake state is taken from the SYN.
                }
                if p.src == self.initiator {
                    self.negotiated.initiator = SideOptions {
                        window_scale: tcp.options.window_scale,
                        sack_permitted: tcp.options.sack_permitted,
                        timestamps: tcp.options.timestamp.is_some(),
                        ecn_setup: tcp.flags.contains(TcpFlags::ECE | TcpFlags::CWR),
                    };
                }
            } else if syn && ack && p.src != self.initiator {
                self.syn_ack_seen = true;
                self.negotiated.responder = SideOptions {
                    window_scale: tcp.options.window_scale,
                    sack_permitted: tcp.options.sack_permitted,
                    timestamps: tcp.options.timestamp.is_some(),
                    ecn_setup: tcp.flags.contains(TcpFlags::ECE)
                        && !tcp.flags.contains(TcpFlags::CWR),
                };
            }
            if tcp.flags.intersects(TcpFlags::FIN | TcpFlags::RST) {
                self.closed = true;
            }
        }
        self.packets.push(p);
    }

    pub fn first_timestamp(&self) -> Option<crate::Timestamp> {
        self.packets.first().map(|p| p.timestamp)
    }

    pub fn last_timestamp(&self) -> Option<crate::Timestamp> {
        self.packets.last().map(|p| p.timestamp)
    }

    /// Sum of IP total lengths over all packets.
    pub fn ip_bytes(&self) -> u64 {
        self.packets
            .iter()
            .map(|p| u64::from(p.ip_total_length))
            .sum()
    }
}

/// Splits packets into flows. Input is sorted by timestamp first (stable, so
/// equal timestamps keep capture order). A SYN on a key whose flow has seen
/// FIN or RST starts a new flow. Output is ordered by first packet.
pub fn demux_flows(mut packets: Vec<PacketRecord>) -> Vec<Flow> {
    packets.sort_by_key(|p| p.timestamp);
    let mut flows: Vec<Flow> = Vec::new();
    let mut open: HashMap<FlowKey, usize> = HashMap::new();
    for p in packets {
        let key = FlowKey::of(&p);
        let fresh_syn = p
            .tcp
            .as_ref()
            .is_some_and(|t| t.flags.contains(TcpFlags::SYN) && !t.flags.contains(TcpFlags::ACK));
        let idx = match open.get(&key) {
            Some(&i) if !(fresh_syn && flows[i].closed) => i,
            _ => {
                flows.push(Flow::open(&p));
                open.insert(key, flows.len() - 1);
                flows.len() - 1
            }
        };
        flows[idx].push(p);
    }
    flows
}
