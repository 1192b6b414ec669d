//! Network namespaces addressed by file descriptor.
//!
//! Namespace membership is per thread, and sockets keep the namespace of the
//! thread that created them. Work that must happen inside a namespace runs
//! on a dedicated thread that joins it first; threads spawned from there
//! inherit it.

use std::fs::File;
use std::io;
use std::os::fd::{AsRawFd, OwnedFd};
use std::thread::{self, JoinHandle};

use crate::iface;

#[derive(Debug)]
pub struct NetNs {
    fd: OwnedFd,
}

fn cvt(r: libc::c_int) -> io::Result<()> {
    if r < 0 {
        Err(io::Error::last_os_error())
    } else {
        Ok(())
    }
}

fn open_self() -> io::Result<OwnedFd> {
    Ok(File::open("/proc/thread-self/ns/net")?.into())
}

impl NetNs {
    /// Creates an empty namespace with `lo` up. Needs CAP_SYS_ADMIN.
    pub fn new() -> io::Result<NetNs> {
        thread::Builder::new()
            .name("netns-create".into())
            .spawn(|| {
                // SAFETY: plain syscall on the calling thread.
                cvt(unsafe { libc::unshare(libc::CLONE_NEWNET) })?;
                iface::set_up("lo")?;
                Ok(NetNs { fd: open_self()? })
            })?
            .join()
            .map_err(|_| io::Error::other("namespace setup thread panicked"))?
    }

    /// The namespace of the calling thread.
    pub fn current() -> io::Result<NetNs> {
        Ok(NetNs { fd: open_self()? })
    }

    /// Moves the calling thread into this namespace.
    pub fn enter(&self) -> io::Result<()> {
        // SAFETY: fd is a valid namespace descriptor owned by self.
        cvt(unsafe { libc::setns(self.fd.as_raw_fd(), libc::CLONE_NEWNET) })
    }

    pub fn try_clone(&self) -> io::Result<NetNs> {
        Ok(NetNs {
            fd: self.fd.try_clone()?,
        })
    }

    /// Spawns a named thread that runs `f` inside this namespace.
    pub fn spawn<F, T>(&self, name: &str, f: F) -> io::Result<JoinHandle<io::Result<T>>>
    where
        F: FnOnce() -> io::Result<T> + Send + 'static,
        T: Send + 'static,
    {
        let ns = self.try_clone()?;
        thread::Builder::new().name(name.into()).spawn(move || {
            ns.enter()?;
            f()
        })
    }

    /// Runs `f` inside this namespace and waits for it. Panics propagate.
    pub fn run<F, T>(&self, f: F) -> io::Result<T>
    where
        F: FnOnce() -> io::Result<T> + Send + 'static,
        T: Send + 'static,
    {
        match self.spawn("netns-run", f)?.join() {
            Ok(r) => r,
            Err(p) => std::panic::resume_unwind(p),
        }
    }
}

/// True when this process may create namespaces and TUN devices.
pub fn lab_supported() -> bool {
    NetNs::new().is_ok() && std::path::Path::new("/dev/net/tun").exists()
}
