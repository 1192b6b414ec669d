//! Network-facing stages of the measurement pipeline: option scanning,
//! target discovery, option-controlled downloads and QUIC adapters.

pub mod crawl;
pub mod download;
pub mod http;
pub mod orchestrate;
pub mod quic;
pub mod ratelimit;
pub mod resolve;
pub mod scan;
pub mod tls;
