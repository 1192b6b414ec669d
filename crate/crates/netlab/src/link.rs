//! Two namespaces joined by a userspace forwarder that adds one-way delay
//! and an optional serialization rate. The queue is unbounded, so the link
//! never drops.

use std::fs::File;
use std::io::{self, Read, Write};
use std::net::Ipv4Addr;
use std::os::fd::AsRawFd;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::iface;
use crate::netns::NetNs;

pub const CLIENT_ADDR: Ipv4Addr = Ipv4Addr::new(10, 77, 0, 1);
pub const SERVER_ADDR: Ipv4Addr = Ipv4Addr::new(10, 77, 0, 2);
pub const IFACE: &str = "lab0";
const PREFIX: u8 = 24;
const POLL_MS: libc::c_int = 50;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkConfig {
    pub delay_to_server: Duration,
    pub delay_to_client: Duration,
    /// Bottleneck rate in bits per second, both directions.
    pub rate_bps: Option<u64>,
    pub mtu: u32,
}

impl LinkConfig {
    /// Symmetric delay of half the RTT each way.
    pub fn with_rtt(rtt: Duration, rate_bps: Option<u64>) -> LinkConfig {
        LinkConfig {
            delay_to_server: rtt / 2,
            delay_to_client: rtt / 2,
            rate_bps,
            mtu: 1500,
        }
    }
}

#[derive(Debug, Default)]
pub struct LinkStats {
    pub to_server_packets: AtomicU64,
    pub to_client_packets: AtomicU64,
    pub to_server_bytes: AtomicU64,
    pub to_client_bytes: AtomicU64,
}

pub struct EmulatedLink {
    client: NetNs,
    server: NetNs,
    config: LinkConfig,
    stop: Arc<AtomicBool>,
    stats: Arc<LinkStats>,
    threads: Vec<JoinHandle<()>>,
}

fn setup_side(ns: &NetNs, addr: Ipv4Addr, mtu: u32) -> io::Result<File> {
    ns.run(move || {
        let tun = iface::create_tun(IFACE)?;
        iface::set_ipv4(IFACE, addr, PREFIX)?;
        iface::set_mtu(IFACE, mtu)?;
        iface::set_txqueuelen(IFACE, 20_000)?;
        iface::set_up(IFACE)?;
        Ok(tun)
    })
}

fn wait_readable(f: &File) -> io::Result<bool> {
    let mut p = libc::pollfd {
        fd: f.as_raw_fd(),
        events: libc::POLLIN,
        revents: 0,
    };
    // SAFETY: one valid pollfd.
    let r = unsafe { libc::poll(&mut p, 1, POLL_MS) };
    if r < 0 {
        let e = io::Error::last_os_error();
        if e.kind() == io::ErrorKind::Interrupted {
            return Ok(false);
        }
        return Err(e);
    }
    Ok(r > 0)
}

fn tight_timer() {
    // SAFETY: prctl on the calling thread only.
    unsafe {
        libc::prctl(libc::PR_SET_TIMERSLACK, 1 as libc::c_ulong);
    }
}

struct Direction {
    from: File,
    to: File,
    delay: Duration,
    rate_bps: Option<u64>,
    packets: fn(&LinkStats) -> &AtomicU64,
    bytes: fn(&LinkStats) -> &AtomicU64,
}

fn spawn_direction(
    name: &str,
    d: Direction,
    stop: Arc<AtomicBool>,
    stats: Arc<LinkStats>,
) -> io::Result<[JoinHandle<()>; 2]> {
    let (tx, rx) = mpsc::channel::<(Instant, Vec<u8>)>();
    let Direction {
        mut from,
        mut to,
        delay,
        rate_bps,
        packets,
        bytes,
    } = d;
    let stop_r = stop.clone();
    let reader = std::thread::Builder::new()
        .name(format!("{name}-rx"))
        .spawn(move || {
            let mut buf = vec![0u8; 65536];
            let mut line_free = Instant::now();
            while !stop_r.load(Ordering::Relaxed) {
                match wait_readable(&from) {
                    Ok(true) => {}
                    Ok(false) => continue,
                    Err(e) => {
                        log::error!("link poll: {e}");
                        return;
                    }
                }
                let n = match from.read(&mut buf) {
                    Ok(n) => n,
                    Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                    Err(e) => {
                        log::error!("link read: {e}");
                        return;
                    }
                };
                let now = Instant::now();
                let departs = match rate_bps {
                    Some(r) if r > 0 => {
                        let tx_time = Duration::from_nanos((n as u64 * 8 * 1_000_000_000) / r);
                        line_free = line_free.max(now) + tx_time;
                        line_free
                    }
                    _ => now,
                };
                if tx.send((departs + delay, buf[..n].to_vec())).is_err() {
                    return;
                }
            }
        })?;
    let writer = std::thread::Builder::new()
        .name(format!("{name}-tx"))
        .spawn(move || {
            tight_timer();
            loop {
                let (due, pkt) = match rx.recv_timeout(Duration::from_millis(POLL_MS as u64)) {
                    Ok(x) => x,
                    Err(mpsc::RecvTimeoutError::Timeout) => {
                        if stop.load(Ordering::Relaxed) {
                            return;
                        }
                        continue;
                    }
                    Err(mpsc::RecvTimeoutError::Disconnected) => return,
                };
                let now = Instant::now();
                if due > now {
                    std::thread::sleep(due - now);
                }
                if let Err(e) = to.write_all(&pkt) {
                    log::warn!("link write: {e}");
                    continue;
                }
                packets(&stats).fetch_add(1, Ordering::Relaxed);
                bytes(&stats).fetch_add(pkt.len() as u64, Ordering::Relaxed);
            }
        })?;
    Ok([reader, writer])
}

impl EmulatedLink {
    pub fn new(config: LinkConfig) -> io::Result<EmulatedLink> {
        let client = NetNs::new()?;
        let server = NetNs::new()?;
        let c_tun = setup_side(&client, CLIENT_ADDR, config.mtu)?;
        let s_tun = setup_side(&server, SERVER_ADDR, config.mtu)?;
        let stop = Arc::new(AtomicBool::new(false));
        let stats = Arc::new(LinkStats::default());
        let mut threads = Vec::new();
        threads.extend(spawn_direction(
            "up",
            Direction {
                from: c_tun.try_clone()?,
                to: s_tun.try_clone()?,
                delay: config.delay_to_server,
                rate_bps: config.rate_bps,
                packets: |s| &s.to_server_packets,
                bytes: |s| &s.to_server_bytes,
            },
            stop.clone(),
            stats.clone(),
        )?);
        threads.extend(spawn_direction(
            "down",
            Direction {
                from: s_tun,
                to: c_tun,
                delay: config.delay_to_client,
                rate_bps: config.rate_bps,
                packets: |s| &s.to_client_packets,
                bytes: |s| &s.to_client_bytes,
            },
            stop.clone(),
            stats.clone(),
        )?);
        Ok(EmulatedLink {
            client,
            server,
            config,
            stop,
            stats,
            threads,
        })
    }

    pub fn client(&self) -> &NetNs {
        &self.client
    }

    pub fn server(&self) -> &NetNs {
        &self.server
    }

    pub fn config(&self) -> LinkConfig {
        self.config
    }

    pub fn stats(&self) -> &LinkStats {
        &self.stats
    }
}

impl Drop for EmulatedLink {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}
