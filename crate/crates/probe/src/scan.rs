//! Handshake-only option scanner. A crafted SYN requests window scaling,
//! SACK and ECN; the SYN-ACK tells which of them the server accepts. No
//! payload is ever sent.

use std::collections::BTreeMap;
use std::io;
use std::mem::MaybeUninit;
use std::net::{IpAddr, SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use optperf_core::capture::build::{TcpOptionSpec, TcpPacketSpec};
use optperf_core::capture::packet::parse_tcp_options;
use optperf_core::capture::{TcpFlags, TcpOptions, TcpTimestamp};
use serde::{Deserialize, Serialize};
use socket2::{Domain, Protocol, SockAddr, Socket, Type};
use thiserror::Error;

use crate::ratelimit::TokenBucket;
use crate::resolve::Resolver;

pub const SCAN_WS_SHIFT: u8 = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProbeStatus {
    #[serde(rename = "OK")]
    Ok,
    NoAnswer,
    Refused,
    ResolveFailed,
}

/// Scanner result for one domain. Option fields are meaningful only when
/// `status` is `Ok`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptionSupport {
    pub domain: String,
    pub ip: Option<IpAddr>,
    pub status: ProbeStatus,
    pub ws: bool,
    pub ws_shift: Option<u8>,
    pub sack: bool,
    pub ecn: bool,
}

pub const SCAN_COLUMNS: [&str; 7] = ["domain", "ip", "status", "ws", "ws_shift", "sack", "ecn"];

impl OptionSupport {
    fn failed(domain: &str, ip: Option<IpAddr>, status: ProbeStatus) -> OptionSupport {
        OptionSupport {
            domain: domain.to_string(),
            ip,
            status,
            ws: false,
            ws_shift: None,
            sack: false,
            ecn: false,
        }
    }
}

/// What a SYN-ACK says about the server's support. ECN counts only for the
/// ECE-without-CWR reply; ECE together with CWR is not an ECN agreement.
pub fn support_from_synack(flags: TcpFlags, opts: &TcpOptions) -> (Option<u8>, bool, bool) {
    let ecn = flags.contains(TcpFlags::ECE) && !flags.contains(TcpFlags::CWR);
    (opts.window_scale, opts.sack_permitted, ecn)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Termination {
    Rst,
    Fin,
}

#[derive(Debug, Clone)]
pub struct ScanSettings {
    pub port: u16,
    pub timeout: Duration,
    /// Extra attempts after a timeout.
    pub retries: u32,
    pub termination: Termination,
    pub rate_per_s: f64,
    pub in_flight: usize,
}

impl Default for ScanSettings {
    fn default() -> Self {
        ScanSettings {
            port: 443,
            timeout: Duration::from_secs(3),
            retries: 1,
            termination: Termination::Rst,
            rate_per_s: 100.0,
            in_flight: 32,
        }
    }
}

/// Reply to one SYN.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SynReply {
    SynAck {
        flags: TcpFlags,
        options: TcpOptions,
    },
    Reset,
    Timeout,
}

/// The SYN this scanner sends.
pub fn scan_syn(src: SocketAddr, dst: SocketAddr, isn: u32, tsval: u32) -> TcpPacketSpec {
    let mut p = TcpPacketSpec::new(src, dst, TcpFlags::SYN | TcpFlags::ECE | TcpFlags::CWR);
    p.seq = isn;
    p.window = 64240;
    p.options = TcpOptionSpec {
        mss: Some(1460),
        sack_permitted: true,
        timestamp: Some(TcpTimestamp { val: tsval, ecr: 0 }),
        window_scale: Some(SCAN_WS_SHIFT),
        sack_blocks: Vec::new(),
    };
    p
}

fn source_addr_for(dst: SocketAddr) -> io::Result<IpAddr> {
    let any: SocketAddr = match dst {
        SocketAddr::V4(_) => "0.0.0.0:0".parse().unwrap(),
        SocketAddr::V6(_) => "[::]:0".parse().unwrap(),
    };
    let u = UdpSocket::bind(any)?;
    u.connect(dst)?;
    Ok(u.local_addr()?.ip())
}

struct Header {
    src_port: u16,
    dst_port: u16,
    seq: u32,
    ack: u32,
    flags: TcpFlags,
    options: TcpOptions,
}

fn parse_tcp(seg: &[u8]) -> Option<Header> {
    if seg.len() < 20 {
        return None;
    }
    let off = usize::from(seg[12] >> 4) * 4;
    if off < 20 || seg.len() < off {
        return None;
    }
    Some(Header {
        src_port: u16::from_be_bytes([seg[0], seg[1]]),
        dst_port: u16::from_be_bytes([seg[2], seg[3]]),
        seq: u32::from_be_bytes(seg[4..8].try_into().unwrap()),
        ack: u32::from_be_bytes(seg[8..12].try_into().unwrap()),
        flags: TcpFlags::from_bits_truncate(seg[13]),
        options: parse_tcp_options(&seg[20..off]),
    })
}

fn recv_raw(sock: &Socket, buf: &mut [u8]) -> io::Result<Option<(usize, IpAddr)>> {
    // SAFETY: u8 and MaybeUninit<u8> share a layout; recv_from only writes.
    let ubuf = unsafe { &mut *(buf as *mut [u8] as *mut [MaybeUninit<u8>]) };
    match sock.recv_from(ubuf) {
        Ok((n, from)) => Ok(from.as_socket().map(|s| (n, s.ip()))),
        Err(e)
            if matches!(
                e.kind(),
                io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
            ) =>
        {
            Ok(None)
        }
        Err(e) if e.kind() == io::ErrorKind::Interrupted => Ok(None),
        Err(e) => Err(e),
    }
}

/// Sends one SYN to `dst` and waits for the answer, then tears the
/// half-open connection down without sending data.
pub fn probe_addr(dst: SocketAddr, timeout: Duration, term: Termination) -> io::Result<SynReply> {
    let src_ip = source_addr_for(dst)?;
    // Holding a bound socket keeps the port out of the ephemeral pool.
    let domain = if dst.is_ipv4() {
        Domain::IPV4
    } else {
        Domain::IPV6
    };
    let reserve = Socket::new(domain, Type::STREAM, Some(Protocol::TCP))?;
    reserve.bind(&SocketAddr::new(src_ip, 0).into())?;
    let src = reserve
        .local_addr()?
        .as_socket()
        .ok_or_else(|| io::Error::other("no local address"))?;
    let sock = Socket::new(domain, Type::RAW, Some(Protocol::TCP))?;
    let isn: u32 = rand::random();
    let tsval: u32 = rand::random();
    let syn = scan_syn(src, dst, isn, tsval);
    let to = SockAddr::from(SocketAddr::new(dst.ip(), 0));
    sock.send_to(&syn.tcp_bytes(), &to)?;
    let deadline = Instant::now() + timeout;
    let mut buf = vec![0u8; 65536];
    loop {
        let left = deadline.saturating_duration_since(Instant::now());
        if left.is_zero() {
            return Ok(SynReply::Timeout);
        }
        sock.set_read_timeout(Some(left.min(Duration::from_millis(200))))?;
        let Some((n, from)) = recv_raw(&sock, &mut buf)? else {
            continue;
        };
        if from != dst.ip() {
            continue;
        }
        let seg = if dst.is_ipv4() {
            let ihl = usize::from(buf[0] & 0x0f) * 4;
            if n < ihl {
                continue;
            }
            &buf[ihl..n]
        } else {
            &buf[..n]
        };
        let Some(h) = parse_tcp(seg) else { continue };
        if h.src_port != dst.port() || h.dst_port != src.port() {
            continue;
        }
        if h.flags.contains(TcpFlags::RST) {
            if h.ack == isn.wrapping_add(1) || h.flags.contains(TcpFlags::ACK) {
                return Ok(SynReply::Reset);
            }
            continue;
        }
        if h.flags.contains(TcpFlags::SYN | TcpFlags::ACK) && h.ack == isn.wrapping_add(1) {
            teardown(&sock, &to, src, dst, isn, &h, term)?;
            return Ok(SynReply::SynAck {
                flags: h.flags,
                options: h.options,
            });
        }
    }
}

fn teardown(
    sock: &Socket,
    to: &SockAddr,
    src: SocketAddr,
    dst: SocketAddr,
    isn: u32,
    synack: &Header,
    term: Termination,
) -> io::Result<()> {
    let seq = isn.wrapping_add(1);
    let ack = synack.seq.wrapping_add(1);
    let flags = match term {
        Termination::Rst => TcpFlags::RST,
        Termination::Fin => TcpFlags::FIN | TcpFlags::ACK,
    };
    let mut p = TcpPacketSpec::new(src, dst, flags);
    p.seq = seq;
    p.ack = if term == Termination::Fin { ack } else { 0 };
    p.window = 0;
    sock.send_to(&p.tcp_bytes(), to).map(drop)
}

pub fn support_from_reply(domain: &str, ip: IpAddr, reply: &SynReply) -> OptionSupport {
    match reply {
        SynReply::SynAck { flags, options } => {
            let (ws, sack, ecn) = support_from_synack(*flags, options);
            OptionSupport {
                domain: domain.to_string(),
                ip: Some(ip),
                status: ProbeStatus::Ok,
                ws: ws.is_some(),
                ws_shift: ws,
                sack,
                ecn,
            }
        }
        SynReply::Reset => OptionSupport::failed(domain, Some(ip), ProbeStatus::Refused),
        SynReply::Timeout => OptionSupport::failed(domain, Some(ip), ProbeStatus::NoAnswer),
    }
}

/// Resolves `domain`, probes its first address (IPv4 preferred) and retries
/// on timeout.
pub fn probe_domain(
    domain: &str,
    resolver: &Resolver,
    settings: &ScanSettings,
    bucket: Option<&TokenBucket>,
) -> io::Result<OptionSupport> {
    let ip = match resolver.resolve_one(domain) {
        Ok((ip, _)) => ip,
        Err(e) => {
            log::info!("{domain}: resolution failed: {e}");
            return Ok(OptionSupport::failed(
                domain,
                None,
                ProbeStatus::ResolveFailed,
            ));
        }
    };
    let dst = SocketAddr::new(ip, settings.port);
    let mut reply = SynReply::Timeout;
    for _ in 0..=settings.retries {
        if let Some(b) = bucket {
            b.acquire();
        }
        reply = probe_addr(dst, settings.timeout, settings.termination)?;
        if reply != SynReply::Timeout {
            break;
        }
    }
    Ok(support_from_reply(domain, ip, &reply))
}

/// Probes every domain with at most `in_flight` probes outstanding and the
/// shared rate limit. Results come back in input order.
pub fn scan_domains(
    domains: &[String],
    resolver: &Resolver,
    settings: &ScanSettings,
) -> io::Result<Vec<OptionSupport>> {
    let bucket = TokenBucket::new(settings.rate_per_s, 1);
    let next = AtomicUsize::new(0);
    let out: Mutex<Vec<Option<OptionSupport>>> = Mutex::new(vec![None; domains.len()]);
    let first_err: Mutex<Option<io::Error>> = Mutex::new(None);
    let workers = settings.in_flight.clamp(1, domains.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= domains.len() || first_err.lock().unwrap().is_some() {
                    return;
                }
                match probe_domain(&domains[i], resolver, settings, Some(&bucket)) {
                    Ok(r) => out.lock().unwrap()[i] = Some(r),
                    Err(e) => {
                        first_err.lock().unwrap().get_or_insert(e);
                        return;
                    }
                }
            });
        }
    });
    if let Some(e) = first_err.into_inner().unwrap() {
        return Err(e);
    }
    Ok(out.into_inner().unwrap().into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentStats {
    pub total: usize,
    pub ok: usize,
    pub status_counts: BTreeMap<String, usize>,
    pub share_none: f64,
    pub share_all: f64,
    pub share_ws: f64,
    pub share_sack: f64,
    pub share_ecn: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AggregateError {
    #[error("no successful probes")]
    NoSuccessfulProbes,
}

/// Shares over the `Ok` probes; status counts over all of them.
pub fn aggregate_deployment(results: &[OptionSupport]) -> Result<DeploymentStats, AggregateError> {
    let mut status_counts = BTreeMap::new();
    let (mut ok, mut none, mut all, mut ws, mut sack, mut ecn) = (0usize, 0, 0, 0, 0, 0);
    for r in results {
        let name = serde_plain_status(r.status);
        *status_counts.entry(name.to_string()).or_insert(0) += 1;
        if r.status != ProbeStatus::Ok {
            continue;
        }
        ok += 1;
        let n = usize::from(r.ws) + usize::from(r.sack) + usize::from(r.ecn);
        none += usize::from(n == 0);
        all += usize::from(n == 3);
        ws += usize::from(r.ws);
        sack += usize::from(r.sack);
        ecn += usize::from(r.ecn);
    }
    if ok == 0 {
        return Err(AggregateError::NoSuccessfulProbes);
    }
    let share = |k: usize| k as f64 / ok as f64;
    Ok(DeploymentStats {
        total: results.len(),
        ok,
        status_counts,
        share_none: share(none),
        share_all: share(all),
        share_ws: share(ws),
        share_sack: share(sack),
        share_ecn: share(ecn),
    })
}

fn serde_plain_status(s: ProbeStatus) -> &'static str {
    match s {
        ProbeStatus::Ok => "OK",
        ProbeStatus::NoAnswer => "NoAnswer",
        ProbeStatus::Refused => "Refused",
        ProbeStatus::ResolveFailed => "ResolveFailed",
    }
}

impl std::fmt::Display for ProbeStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(serde_plain_status(*self))
    }
}
