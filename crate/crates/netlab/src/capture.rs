//! AF_PACKET capture to a Linux-cooked pcap file, with a host/port filter
//! applied in userspace.

use std::fs::File;
use std::io::{self, BufWriter};
use std::mem;
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};
use std::os::fd::{AsRawFd, FromRawFd, OwnedFd};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::thread::JoinHandle;

use optperf_core::capture::{LinkType, PcapWriter};
use optperf_core::Timestamp;

use crate::iface;
use crate::netns::NetNs;

const ETH_P_ALL: u16 = 0x0003;
const SLL_HEADER: usize = 16;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CaptureFilter {
    /// Keep packets with this address as source or destination.
    pub host: Option<IpAddr>,
    /// Keep TCP/UDP packets with this source or destination port.
    pub port: Option<u16>,
    /// Capture on one interface only.
    pub iface: Option<String>,
    pub snaplen: Option<u32>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CaptureStats {
    pub written: u64,
    pub seen: u64,
    pub kernel_drops: u64,
}

pub struct PacketCapture {
    path: PathBuf,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<io::Result<CaptureStats>>>,
}

fn cvt(r: libc::c_int) -> io::Result<libc::c_int> {
    if r < 0 {
        Err(io::Error::last_os_error())
    } else {
        Ok(r)
    }
}

fn setopt<T>(fd: &OwnedFd, level: libc::c_int, name: libc::c_int, v: &T) -> io::Result<()> {
    // SAFETY: v is a valid T for the option.
    cvt(unsafe {
        libc::setsockopt(
            fd.as_raw_fd(),
            level,
            name,
            v as *const T as *const libc::c_void,
            mem::size_of::<T>() as libc::socklen_t,
        )
    })
    .map(drop)
}

fn open_socket(filter: &CaptureFilter) -> io::Result<OwnedFd> {
    // SAFETY: plain socket(2).
    let raw = cvt(unsafe {
        libc::socket(
            libc::AF_PACKET,
            libc::SOCK_DGRAM | libc::SOCK_CLOEXEC,
            i32::from(ETH_P_ALL.to_be()),
        )
    })?;
    let fd = unsafe { OwnedFd::from_raw_fd(raw) };
    let bufsize: libc::c_int = 64 << 20;
    if setopt(&fd, libc::SOL_SOCKET, libc::SO_RCVBUFFORCE, &bufsize).is_err() {
        setopt(&fd, libc::SOL_SOCKET, libc::SO_RCVBUF, &bufsize)?;
    }
    setopt(
        &fd,
        libc::SOL_SOCKET,
        libc::SO_TIMESTAMPNS,
        &1 as &libc::c_int,
    )?;
    let tv = libc::timeval {
        tv_sec: 0,
        tv_usec: 50_000,
    };
    setopt(&fd, libc::SOL_SOCKET, libc::SO_RCVTIMEO, &tv)?;
    if let Some(name) = &filter.iface {
        let mut sll: libc::sockaddr_ll = unsafe { mem::zeroed() };
        sll.sll_family = libc::AF_PACKET as u16;
        sll.sll_protocol = ETH_P_ALL.to_be();
        sll.sll_ifindex = iface::index(name)? as i32;
        // SAFETY: sll is a valid sockaddr_ll.
        cvt(unsafe {
            libc::bind(
                fd.as_raw_fd(),
                &sll as *const _ as *const libc::sockaddr,
                mem::size_of::<libc::sockaddr_ll>() as libc::socklen_t,
            )
        })?;
    }
    Ok(fd)
}

type Ports = Option<(u16, u16)>;

/// Addresses and ports of an IP packet, if it parses that far.
fn endpoints(pkt: &[u8]) -> Option<(IpAddr, IpAddr, Ports)> {
    let (src, dst, proto, l4) = match pkt.first()? >> 4 {
        4 if pkt.len() >= 20 => {
            let ihl = usize::from(pkt[0] & 0x0f) * 4;
            let s: [u8; 4] = pkt[12..16].try_into().ok()?;
            let d: [u8; 4] = pkt[16..20].try_into().ok()?;
            (
                IpAddr::V4(Ipv4Addr::from(s)),
                IpAddr::V4(Ipv4Addr::from(d)),
                pkt[9],
                pkt.get(ihl..),
            )
        }
        6 if pkt.len() >= 40 => {
            let s: [u8; 16] = pkt[8..24].try_into().ok()?;
            let d: [u8; 16] = pkt[24..40].try_into().ok()?;
            (
                IpAddr::V6(Ipv6Addr::from(s)),
                IpAddr::V6(Ipv6Addr::from(d)),
                pkt[6],
                pkt.get(40..),
            )
        }
        _ => return None,
    };
    let ports = match (proto, l4) {
        (6 | 17, Some(l4)) if l4.len() >= 4 => Some((
            u16::from_be_bytes([l4[0], l4[1]]),
            u16::from_be_bytes([l4[2], l4[3]]),
        )),
        _ => None,
    };
    Some((src, dst, ports))
}

fn keep(f: &CaptureFilter, pkt: &[u8]) -> bool {
    let Some((s, d, ports)) = endpoints(pkt) else {
        return f.host.is_none() && f.port.is_none();
    };
    if let Some(h) = f.host {
        if s != h && d != h {
            return false;
        }
    }
    if let Some(p) = f.port {
        match ports {
            Some((a, b)) if a == p || b == p => {}
            _ => return false,
        }
    }
    true
}

fn capture_loop(
    fd: OwnedFd,
    filter: CaptureFilter,
    out: File,
    stop: Arc<AtomicBool>,
) -> io::Result<CaptureStats> {
    let snaplen = filter.snaplen.unwrap_or(65535).max(64) as usize;
    let mut w = PcapWriter::new(BufWriter::new(out), LinkType::LinuxSll, snaplen as u32)?;
    let mut stats = CaptureStats::default();
    let mut buf = vec![0u8; 65536 + SLL_HEADER];
    let mut frame = Vec::with_capacity(SLL_HEADER + 65536);
    let mut cbuf = [0u64; 16];
    loop {
        let mut from: libc::sockaddr_ll = unsafe { mem::zeroed() };
        let mut iov = libc::iovec {
            iov_base: buf.as_mut_ptr() as *mut libc::c_void,
            iov_len: buf.len(),
        };
        let mut msg: libc::msghdr = unsafe { mem::zeroed() };
        msg.msg_name = &mut from as *mut _ as *mut libc::c_void;
        msg.msg_namelen = mem::size_of::<libc::sockaddr_ll>() as libc::socklen_t;
        msg.msg_iov = &mut iov;
        msg.msg_iovlen = 1;
        msg.msg_control = cbuf.as_mut_ptr() as *mut libc::c_void;
        msg.msg_controllen = mem::size_of_val(&cbuf) as _;
        // SAFETY: all pointers in msg reference live buffers.
        let n = unsafe { libc::recvmsg(fd.as_raw_fd(), &mut msg, libc::MSG_TRUNC) };
        if n < 0 {
            let e = io::Error::last_os_error();
            match e.kind() {
                io::ErrorKind::WouldBlock
                | io::ErrorKind::TimedOut
                | io::ErrorKind::Interrupted => {
                    if stop.load(Ordering::Relaxed) {
                        break;
                    }
                    continue;
                }
                _ => return Err(e),
            }
        }
        let orig_len = n as usize;
        let got = orig_len.min(buf.len());
        stats.seen += 1;
        if !keep(&filter, &buf[..got]) {
            continue;
        }
        let ts = timestamp_of(&msg).unwrap_or_else(Timestamp::now);
        frame.clear();
        frame.extend_from_slice(&u16::from(from.sll_pkttype).to_be_bytes());
        frame.extend_from_slice(&from.sll_hatype.to_be_bytes());
        frame.extend_from_slice(&u16::from(from.sll_halen.min(8)).to_be_bytes());
        frame.extend_from_slice(&from.sll_addr);
        frame.extend_from_slice(&from.sll_protocol.to_ne_bytes());
        frame.extend_from_slice(&buf[..got.min(snaplen.saturating_sub(SLL_HEADER))]);
        w.write_frame_with_len(ts, &frame, (SLL_HEADER + orig_len) as u32)?;
        stats.written += 1;
    }
    w.flush()?;
    stats.kernel_drops = kernel_drops(&fd);
    Ok(stats)
}

fn timestamp_of(msg: &libc::msghdr) -> Option<Timestamp> {
    // SAFETY: iterating control messages of a msghdr filled by recvmsg.
    unsafe {
        let mut c = libc::CMSG_FIRSTHDR(msg);
        while !c.is_null() {
            if (*c).cmsg_level == libc::SOL_SOCKET && (*c).cmsg_type == libc::SCM_TIMESTAMPNS {
                let ts = std::ptr::read_unaligned(libc::CMSG_DATA(c) as *const libc::timespec);
                return Some(Timestamp::from_micros(
                    ts.tv_sec as i64 * 1_000_000 + ts.tv_nsec as i64 / 1000,
                ));
            }
            c = libc::CMSG_NXTHDR(msg, c);
        }
    }
    None
}

fn kernel_drops(fd: &OwnedFd) -> u64 {
    let mut st = libc::tpacket_stats {
        tp_packets: 0,
        tp_drops: 0,
    };
    let mut len = mem::size_of::<libc::tpacket_stats>() as libc::socklen_t;
    // SAFETY: st and len are valid for PACKET_STATISTICS.
    let r = unsafe {
        libc::getsockopt(
            fd.as_raw_fd(),
            libc::SOL_PACKET,
            libc::PACKET_STATISTICS,
            &mut st as *mut _ as *mut libc::c_void,
            &mut len,
        )
    };
    if r < 0 {
        0
    } else {
        u64::from(st.tp_drops)
    }
}

impl PacketCapture {
    /// Starts capturing in `ns` (or the current namespace). Returns once the
    /// socket is open, so nothing sent afterwards is missed.
    pub fn start(
        ns: Option<&NetNs>,
        filter: CaptureFilter,
        path: &Path,
    ) -> io::Result<PacketCapture> {
        let out = File::create(path)?;
        let stop = Arc::new(AtomicBool::new(false));
        let (ready_tx, ready_rx) = mpsc::channel::<io::Result<()>>();
        let stop2 = stop.clone();
        let body = move || -> io::Result<CaptureStats> {
            let fd = match open_socket(&filter) {
                Ok(fd) => {
                    let _ = ready_tx.send(Ok(()));
                    fd
                }
                Err(e) => {
                    let _ = ready_tx.send(Err(io::Error::new(e.kind(), e.to_string())));
                    return Err(e);
                }
            };
            capture_loop(fd, filter, out, stop2)
        };
        let handle = match ns {
            Some(ns) => ns.spawn("capture", body)?,
            None => std::thread::Builder::new()
                .name("capture".into())
                .spawn(body)?,
        };
        match ready_rx.recv() {
            Ok(Ok(())) => Ok(PacketCapture {
                path: path.to_path_buf(),
                stop,
                handle: Some(handle),
            }),
            Ok(Err(e)) => {
                let _ = handle.join();
                Err(e)
            }
            Err(_) => match handle.join() {
                Ok(Err(e)) => Err(e),
                _ => Err(io::Error::other("capture thread exited early")),
            },
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Stops after draining what the socket already holds.
    pub fn stop(mut self) -> io::Result<CaptureStats> {
        self.finish()
    }

    fn finish(&mut self) -> io::Result<CaptureStats> {
        self.stop.store(true, Ordering::Relaxed);
        match self.handle.take() {
            Some(h) => h
                .join()
                .map_err(|_| io::Error::other("capture thread panicked"))?,
            None => Ok(CaptureStats::default()),
        }
    }
}

impl Drop for PacketCapture {
    fn drop(&mut self) {
        let _ = self.finish();
    }
}
