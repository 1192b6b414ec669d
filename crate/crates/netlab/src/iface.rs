//! Interface configuration through ioctls, for the calling thread's
//! namespace. Avoids any dependency on `ip(8)`.

use std::fs::{File, OpenOptions};
use std::io;
use std::net::Ipv4Addr;
use std::os::fd::{AsRawFd, FromRawFd, OwnedFd};

const IFNAMSIZ: usize = 16;
const TUNSETIFF: libc::c_ulong = 0x4004_54ca;
const IFF_TUN: libc::c_short = 0x0001;
const IFF_NO_PI: libc::c_short = 0x1000;

#[repr(C)]
struct IfReq {
    name: [libc::c_char; IFNAMSIZ],
    data: [u8; 24],
}

impl IfReq {
    fn new(name: &str) -> io::Result<IfReq> {
        if name.is_empty() || name.len() >= IFNAMSIZ {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("bad interface name {name:?}"),
            ));
        }
        let mut r = IfReq {
            name: [0; IFNAMSIZ],
            data: [0; 24],
        };
        for (d, s) in r.name.iter_mut().zip(name.bytes()) {
            *d = s as libc::c_char;
        }
        Ok(r)
    }

    fn set_int(&mut self, v: libc::c_int) {
        self.data[..4].copy_from_slice(&v.to_ne_bytes());
    }

    fn int(&self) -> libc::c_int {
        libc::c_int::from_ne_bytes(self.data[..4].try_into().unwrap())
    }

    fn set_short(&mut self, v: libc::c_short) {
        self.data[..2].copy_from_slice(&v.to_ne_bytes());
    }

    fn short(&self) -> libc::c_short {
        libc::c_short::from_ne_bytes(self.data[..2].try_into().unwrap())
    }

    fn set_sockaddr_in(&mut self, a: Ipv4Addr) {
        self.data = [0; 24];
        self.data[..2].copy_from_slice(&(libc::AF_INET as u16).to_ne_bytes());
        self.data[4..8].copy_from_slice(&a.octets());
    }
}

fn ctl_socket() -> io::Result<OwnedFd> {
    // SAFETY: plain socket(2); the descriptor is owned on success.
    let fd = unsafe { libc::socket(libc::AF_INET, libc::SOCK_DGRAM | libc::SOCK_CLOEXEC, 0) };
    if fd < 0 {
        return Err(io::Error::last_os_error());
    }
    Ok(unsafe { OwnedFd::from_raw_fd(fd) })
}

fn ioctl(fd: &impl AsRawFd, req: libc::c_ulong, r: &mut IfReq) -> io::Result<()> {
    // SAFETY: r points to a properly sized ifreq.
    if unsafe { libc::ioctl(fd.as_raw_fd(), req as _, r as *mut IfReq) } < 0 {
        Err(io::Error::last_os_error())
    } else {
        Ok(())
    }
}

fn with_req(name: &str, req: libc::c_ulong, fill: impl FnOnce(&mut IfReq)) -> io::Result<IfReq> {
    let s = ctl_socket()?;
    let mut r = IfReq::new(name)?;
    fill(&mut r);
    ioctl(&s, req, &mut r)?;
    Ok(r)
}

pub fn set_up(name: &str) -> io::Result<()> {
    let flags = with_req(name, libc::SIOCGIFFLAGS, |_| {})?.short();
    let up = flags | libc::IFF_UP as libc::c_short | libc::IFF_RUNNING as libc::c_short;
    with_req(name, libc::SIOCSIFFLAGS, |r| r.set_short(up)).map(drop)
}

pub fn set_ipv4(name: &str, addr: Ipv4Addr, prefix: u8) -> io::Result<()> {
    with_req(name, libc::SIOCSIFADDR, |r| r.set_sockaddr_in(addr))?;
    let mask = if prefix == 0 {
        0
    } else {
        u32::MAX << (32 - u32::from(prefix.min(32)))
    };
    with_req(name, libc::SIOCSIFNETMASK, |r| {
        r.set_sockaddr_in(Ipv4Addr::from(mask))
    })
    .map(drop)
}

pub fn set_mtu(name: &str, mtu: u32) -> io::Result<()> {
    with_req(name, libc::SIOCSIFMTU, |r| r.set_int(mtu as libc::c_int)).map(drop)
}

pub fn set_txqueuelen(name: &str, len: u32) -> io::Result<()> {
    with_req(name, libc::SIOCSIFTXQLEN, |r| r.set_int(len as libc::c_int)).map(drop)
}

pub fn index(name: &str) -> io::Result<u32> {
    Ok(with_req(name, libc::SIOCGIFINDEX, |_| {})?.int() as u32)
}

/// Creates a TUN interface (no packet-info header) in the calling thread's
/// namespace. The device lives as long as the returned file.
pub fn create_tun(name: &str) -> io::Result<File> {
    let f = OpenOptions::new()
        .read(true)
        .write(true)
        .open("/dev/net/tun")?;
    let mut r = IfReq::new(name)?;
    r.set_short(IFF_TUN | IFF_NO_PI);
    ioctl(&f, TUNSETIFF, &mut r)?;
    Ok(f)
}
