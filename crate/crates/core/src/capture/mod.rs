//! Capture decoding: pcap container, header parsing and flow demultiplexing.

pub mod build;
pub mod flow;
pub mod packet;
pub mod pcap;

use thiserror::Error;

pub use flow::{demux_flows, Direction, Flow, FlowKey, Negotiated, SideOptions};
pub use packet::{
    DecodeSkip, EcnCodepoint, PacketRecord, SackBlock, TcpFlags, TcpOptions, TcpSegment,
    TcpTimestamp, Transport,
};
pub use pcap::{LinkType, PcapReader, PcapWriter};

#[derive(Debug, Error)]
pub enum CaptureError {
    #[error("capture shorter than the 24-byte pcap global header ({0} bytes)")]
    TruncatedGlobalHeader(usize),
    #[error("not a pcap capture (magic {0:#010x})")]
    BadMagic(u32),
    #[error(
        "unsupported link type {0}; expected Ethernet, 802.1Q, Linux cooked (v1/v2) or raw IP"
    )]
    UnsupportedLinkType(u32),
    #[error("reading capture: {0}")]
    Io(#[from] std::io::Error),
}

/// Result of decoding a whole capture.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedCapture {
    pub packets: Vec<PacketRecord>,
    /// Frames that did not yield a record, for any reason.
    pub skipped: usize,
    pub non_ip: usize,
    pub non_transport: usize,
    pub malformed: usize,
    /// Records decoded from frames cut at the snap length.
    pub truncated: usize,
}

/// Decodes every IPv4/IPv6 TCP or UDP packet in a pcap byte stream.
pub fn parse_capture(bytes: &[u8]) -> Result<ParsedCapture, CaptureError> {
    let mut reader = PcapReader::new(bytes)?;
    let link = reader.header().link_type;
    let mut out = ParsedCapture::default();
    for rec in &mut reader {
        match packet::decode_frame(link, rec.timestamp, rec.data, rec.orig_len) {
            Ok(p) => {
                if p.truncated {
                    out.truncated += 1;
                }
                out.packets.push(p);
            }
            Err(reason) => {
                out.skipped += 1;
                match reason {
                    DecodeSkip::NonIp => out.non_ip += 1,
                    DecodeSkip::NonTransport => out.non_transport += 1,
                    DecodeSkip::Malformed => out.malformed += 1,
                }
            }
        }
    }
    if reader.cut_short {
        out.skipped += 1;
        out.malformed += 1;
    }
    Ok(out)
}

/// Reads and decodes a capture file from disk.
pub fn parse_capture_file(path: &std::path::Path) -> Result<ParsedCapture, CaptureError> {
    let bytes = std::fs::read(path)?;
    parse_capture(&bytes)
}
