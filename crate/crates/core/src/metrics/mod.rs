//! Per-download performance indicators computed from one [`Flow`].

pub mod retx;
pub mod rtt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture::{Direction, EcnCodepoint, Flow, TcpFlags, Transport};

pub use retx::{
    classify_retransmissions, retransmission_rate, retransmitted_bytes, Classification,
    RetransmissionClass,
};
pub use rtt::{mean_rtt_ms, rtt_samples, vantage_samples, RttSample};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("throughput undefined: {packets} packet(s) spanning {span_us} us")]
    UndefinedThroughput { packets: usize, span_us: i64 },
    #[error("expected a {expected:?} flow, got {actual:?}")]
    WrongTransport {
        expected: Transport,
        actual: Transport,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EcnUsage {
    pub ece_flags: u64,
    pub cwr_flags: u64,
    pub ect0: u64,
    pub ect1: u64,
    pub ce: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SackUsage {
    pub packets_with_sack_blocks: u64,
    pub total_sack_blocks: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfIndicators {
    /// bits/s over IP bytes of both directions.
    pub mean_throughput: f64,
    /// bits/s over responder-to-initiator IP bytes only.
    pub downstream_throughput: f64,
    /// bits/s; absent for UDP flows.
    pub goodput: Option<f64>,
    pub mean_rtt_ms: Option<f64>,
    pub rtt_sample_count: usize,
    pub retransmission_rate: Option<f64>,
    pub bytes_total: u64,
    pub bytes_retransmitted: u64,
    pub duration_s: f64,
    pub ecn_usage: EcnUsage,
    pub sack_usage: SackUsage,
}

/// First-to-last packet span in microseconds, erroring when it cannot carry a
/// rate.
fn span_us(flow: &Flow) -> Result<i64, MetricsError> {
    let n = flow.packets.len();
    let span = match (flow.first_timestamp(), flow.last_timestamp()) {
        (Some(a), Some(b)) => b.micros_since(a),
        _ => 0,
    };
    if n < 2 || span <= 0 {
        return Err(MetricsError::UndefinedThroughput {
            packets: n,
            span_us: span,
        });
    }
    Ok(span)
}

/// `8 * bytes / (span_us / 1e6)`, evaluated in a fixed order so that
/// independent computations agree bit for bit.
pub fn bits_per_second(bytes: u64, span_us: i64) -> f64 {
    (8 * bytes) as f64 * 1e6 / span_us as f64
}

pub fn mean_throughput(flow: &Flow) -> Result<f64, MetricsError> {
    let span = span_us(flow)?;
    Ok(bits_per_second(flow.ip_bytes(), span))
}

/// Throughput counting only packets sent by the responder (server→client).
pub fn downstream_throughput(flow: &Flow) -> Result<f64, MetricsError> {
    let span = span_us(flow)?;
    let bytes = flow
        .packets
        .iter()
        .filter(|p| flow.direction(p) == Direction::FromResponder)
        .map(|p| u64::from(p.ip_total_length))
        .sum();
    Ok(bits_per_second(bytes, span))
}

/// Throughput over packets not classed as any kind of retransmission.
pub fn goodput(flow: &Flow, classes: &Classification) -> Result<f64, MetricsError> {
    let span = span_us(flow)?;
    let bytes = flow
        .packets
        .iter()
        .zip(&classes.labels)
        .filter(|(_, l)| !l.is_some_and(RetransmissionClass::is_retransmission))
        .map(|(p, _)| u64::from(p.ip_total_length))
        .sum();
    Ok(bits_per_second(bytes, span))
}

pub fn quic_throughput(flow: &Flow) -> Result<f64, MetricsError> {
    if flow.transport() != Transport::Udp {
        return Err(MetricsError::WrongTransport {
            expected: Transport::Udp,
            actual: flow.transport(),
        });
    }
    mean_throughput(flow)
}

pub fn option_usage(flow: &Flow) -> (EcnUsage, SackUsage) {
    let mut ecn = EcnUsage::default();
    let mut sack = SackUsage::default();
    for p in &flow.packets {
        match p.ecn {
            EcnCodepoint::Ect0 => ecn.ect0 += 1,
            EcnCodepoint::Ect1 => ecn.ect1 += 1,
            EcnCodepoint::Ce => ecn.ce += 1,
            EcnCodepoint::NotEct => {}
        }
        if let Some(tcp) = &p.tcp {
            if tcp.flags.contains(TcpFlags::ECE) {
                ecn.ece_flags += 1;
            }
            if tcp.flags.contains(TcpFlags::CWR) {
                ecn.cwr_flags += 1;
            }
            let blocks = tcp.options.sack_blocks.len() as u64;
            if blocks > 0 {
                sack.packets_with_sack_blocks += 1;
                sack.total_sack_blocks += blocks;
            }
        }
    }
    (ecn, sack)
}

/// All indicators for a flow. TCP flows get the full set; UDP (QUIC) flows
/// only throughput.
pub fn analyze_flow(flow: &Flow) -> Result<PerfIndicators, MetricsError> {
    let span = span_us(flow)?;
    let mean = mean_throughput(flow)?;
    let down = downstream_throughput(flow)?;
    let (ecn_usage, sack_usage) = option_usage(flow);
    let mut out = PerfIndicators {
        mean_throughput: mean,
        downstream_throughput: down,
        goodput: None,
        mean_rtt_ms: None,
        rtt_sample_count: 0,
        retransmission_rate: None,
        bytes_total: flow.ip_bytes(),
        bytes_retransmitted: 0,
        duration_s: span as f64 / 1e6,
        ecn_usage,
        sack_usage,
    };
    if flow.transport() == Transport::Tcp {
        let classes = classify_retransmissions(flow);
        let samples = vantage_samples(&rtt_samples(flow));
        out.goodput = Some(goodput(flow, &classes)?);
        out.retransmission_rate = Some(retransmission_rate(flow, &classes));
        out.bytes_retransmitted = flow
            .packets
            .iter()
            .zip(&classes.labels)
            .filter(|(_, l)| l.is_some_and(RetransmissionClass::is_retransmission))
            .map(|(p, _)| u64::from(p.ip_total_length))
            .sum();
        out.mean_rtt_ms = mean_rtt_ms(&samples);
        out.rtt_sample_count = samples.len();
    }
    Ok(out)
}
