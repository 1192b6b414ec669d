//! Flat per-download records and run manifests exchanged between stages.

use std::io::{Read, Write};
use std::net::IpAddr;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::matrix::{ConfigName, OptionConfig};
use crate::metrics::PerfIndicators;
use crate::Timestamp;

/// One analysed download. Field order is the CSV column order; the first
/// eighteen columns are the fixed interface, the trailing ones auxiliary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorRecord {
    pub config: ConfigName,
    pub domain: String,
    pub target_ip: Option<IpAddr>,
    pub vantage_point: String,
    pub bytes_total: u64,
    pub duration_s: f64,
    pub mean_throughput_bps: f64,
    pub goodput_bps: Option<f64>,
    pub mean_rtt_ms: Option<f64>,
    pub rtt_samples: usize,
    pub retx_rate: Option<f64>,
    pub ece_flags: u64,
    pub cwr_flags: u64,
    pub ect0: u64,
    pub ect1: u64,
    pub ce: u64,
    pub sack_packets: u64,
    pub sack_blocks: u64,
    pub downstream_throughput_bps: f64,
    pub run_id: String,
}

pub const INDICATOR_COLUMNS: [&str; 20] = [
    "config",
    "domain",
    "target_ip",
    "vantage_point",
    "bytes_total",
    "duration_s",
    "mean_throughput_bps",
    "goodput_bps",
    "mean_rtt_ms",
    "rtt_samples",
    "retx_rate",
    "ece_flags",
    "cwr_flags",
    "ect0",
    "ect1",
    "ce",
    "sack_packets",
    "sack_blocks",
    "downstream_throughput_bps",
    "run_id",
];

impl IndicatorRecord {
    pub fn new(
        run_id: &str,
        config: ConfigName,
        domain: &str,
        target_ip: Option<IpAddr>,
        vantage_point: &str,
        ind: &PerfIndicators,
    ) -> IndicatorRecord {
        IndicatorRecord {
            config,
            domain: domain.to_string(),
            target_ip,
            vantage_point: vantage_point.to_string(),
            bytes_total: ind.bytes_total,
            duration_s: ind.duration_s,
            mean_throughput_bps: ind.mean_throughput,
            goodput_bps: ind.goodput,
            mean_rtt_ms: ind.mean_rtt_ms,
            rtt_samples: ind.rtt_sample_count,
            retx_rate: ind.retransmission_rate,
            ece_flags: ind.ecn_usage.ece_flags,
            cwr_flags: ind.ecn_usage.cwr_flags,
            ect0: ind.ecn_usage.ect0,
            ect1: ind.ecn_usage.ect1,
            ce: ind.ecn_usage.ce,
            sack_packets: ind.sack_usage.packets_with_sack_blocks,
            sack_blocks: ind.sack_usage.total_sack_blocks,
            downstream_throughput_bps: ind.downstream_throughput,
            run_id: run_id.to_string(),
        }
    }
}

/// A download that produced no indicator row, and why.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub run_id: String,
    pub domain: String,
    pub vantage_point: String,
    pub config: ConfigName,
    pub target_ip: Option<IpAddr>,
    pub outcome: Outcome,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    #[serde(rename = "OK")]
    Ok,
    #[serde(rename = "DNSFail")]
    DnsFail,
    ConnectFail,
    Incomplete,
    Blocked,
    /// Download succeeded but the capture yielded no usable flow.
    AnalysisFail,
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Outcome::Ok => "OK",
            Outcome::DnsFail => "DNSFail",
            Outcome::ConnectFail => "ConnectFail",
            Outcome::Incomplete => "Incomplete",
            Outcome::Blocked => "Blocked",
            Outcome::AnalysisFail => "AnalysisFail",
        })
    }
}

/// One matrix cell as executed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub config: OptionConfig,
    pub resolved_ip: Option<IpAddr>,
    pub resolved_at: Option<Timestamp>,
    pub capture: Option<PathBuf>,
    pub start: Timestamp,
    pub end: Timestamp,
    pub outcome: Outcome,
    pub bytes_received: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub http_status: Option<u16>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

/// All downloads for one domain, back to back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRun {
    pub run_id: String,
    pub domain: String,
    pub url: String,
    pub vantage_point: String,
    pub entries: Vec<RunEntry>,
}

impl MeasurementRun {
    /// WARMUP first, TCP before QUIC, entries non-overlapping in time.
    pub fn check_invariants(&self) -> Result<(), String> {
        let names: Vec<_> = self.entries.iter().map(|e| e.config.clone()).collect();
        crate::matrix::validate_matrix(&names).map_err(|e| e.to_string())?;
        for pair in self.entries.windows(2) {
            if pair[1].start < pair[0].end {
                return Err(format!(
                    "{} starts before {} ended",
                    pair[1].config.name, pair[0].config.name
                ));
            }
            if let (Some(r), e) = (pair[1].resolved_at, pair[0].end) {
                if r < e {
                    return Err(format!(
                        "{} resolved before the previous download ended",
                        pair[1].config.name
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Run manifest file: every run of one download stage invocation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub vantage_point: String,
    pub runs: Vec<MeasurementRun>,
}

pub fn write_csv<T: Serialize, W: Write>(out: W, rows: &[T], header: &[&str]) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>, R: Read>(input: R) -> csv::Result<Vec<T>> {
    csv::Reader::from_reader(input).deserialize().collect()
}

pub const FAILURE_COLUMNS: [&str; 7] = [
    "run_id",
    "domain",
    "vantage_point",
    "config",
    "target_ip",
    "outcome",
    "reason",
];
