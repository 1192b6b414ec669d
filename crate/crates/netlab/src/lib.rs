//! Local measurement lab: network namespaces, a delay/rate link between
//! two of them, packet capture and TCP sysctl control.
//!
//! Everything here needs root (CAP_SYS_ADMIN and CAP_NET_ADMIN/RAW).

pub mod capture;
pub mod iface;
pub mod link;
pub mod netns;
pub mod sysctl;

pub use capture::{CaptureFilter, CaptureStats, PacketCapture};
pub use link::{EmulatedLink, LinkConfig, CLIENT_ADDR, SERVER_ADDR};
pub use netns::{lab_supported, NetNs};
