//! Reading and writing `/proc/sys` for the calling thread's namespace, and
//! the TCP option knobs that the download matrix toggles.

use std::fs;
use std::io;
use std::path::PathBuf;

pub const TCP_ECN: &str = "net.ipv4.tcp_ecn";
pub const TCP_SACK: &str = "net.ipv4.tcp_sack";
pub const TCP_WINDOW_SCALING: &str = "net.ipv4.tcp_window_scaling";
pub const TCP_TIMESTAMPS: &str = "net.ipv4.tcp_timestamps";
pub const TCP_RMEM: &str = "net.ipv4.tcp_rmem";

/// Every knob [`apply`] may touch.
pub const OPTION_KNOBS: [&str; 5] = [
    TCP_ECN,
    TCP_SACK,
    TCP_WINDOW_SCALING,
    TCP_TIMESTAMPS,
    TCP_RMEM,
];

/// Receive-buffer ceiling at which Linux advertises the maximum shift, 14.
pub const RMEM_FOR_MAX_SHIFT: u64 = 1 << 29;

fn path(name: &str) -> PathBuf {
    PathBuf::from("/proc/sys").join(name.replace('.', "/"))
}

pub fn read(name: &str) -> io::Result<String> {
    fs::read_to_string(path(name))
        .map(|s| s.trim().to_string())
        .map_err(|e| io::Error::new(e.kind(), format!("reading {name}: {e}")))
}

pub fn write(name: &str, value: &str) -> io::Result<()> {
    fs::write(path(name), value)
        .map_err(|e| io::Error::new(e.kind(), format!("writing {name}={value}: {e}")))
}

/// Values of a set of knobs at one point in time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Snapshot(pub Vec<(String, String)>);

impl Snapshot {
    pub fn take(names: &[&str]) -> io::Result<Snapshot> {
        names
            .iter()
            .map(|n| Ok((n.to_string(), read(n)?)))
            .collect::<io::Result<_>>()
            .map(Snapshot)
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.0
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_str())
    }

    pub fn restore(&self) -> io::Result<()> {
        let mut first_err = None;
        for (n, v) in &self.0 {
            if let Err(e) = write(n, v) {
                log::error!("restoring {n}: {e}");
                first_err.get_or_insert(e);
            }
        }
        first_err.map_or(Ok(()), Err)
    }
}

/// Restores a snapshot when dropped. Must be dropped on a thread in the
/// namespace it was taken in.
#[derive(Debug)]
pub struct SysctlGuard {
    snapshot: Option<Snapshot>,
}

impl SysctlGuard {
    pub fn new(names: &[&str]) -> io::Result<SysctlGuard> {
        Ok(SysctlGuard {
            snapshot: Some(Snapshot::take(names)?),
        })
    }

    pub fn snapshot(&self) -> &Snapshot {
        self.snapshot.as_ref().expect("present until drop")
    }

    pub fn restore(mut self) -> io::Result<()> {
        self.snapshot.take().map_or(Ok(()), |s| s.restore())
    }
}

impl Drop for SysctlGuard {
    fn drop(&mut self) {
        if let Some(s) = self.snapshot.take() {
            let _ = s.restore();
        }
    }
}

/// Client-side option switches for one download.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TcpOptionSettings {
    /// 1 requests ECN on outgoing connections; 0 disables it.
    pub ecn: u8,
    pub sack: bool,
    pub window_scaling: bool,
    /// Raise the tcp_rmem ceiling so the advertised shift is 14.
    pub force_max_shift: bool,
}

/// Writes the settings. `baseline` supplies tcp_rmem when no override
/// applies, so a previous override never leaks into the next download.
pub fn apply(s: &TcpOptionSettings, baseline: &Snapshot) -> io::Result<()> {
    write(TCP_ECN, &s.ecn.to_string())?;
    write(TCP_SACK, if s.sack { "1" } else { "0" })?;
    write(TCP_WINDOW_SCALING, if s.window_scaling { "1" } else { "0" })?;
    write(TCP_TIMESTAMPS, "1")?;
    let base = baseline
        .get(TCP_RMEM)
        .map(str::to_string)
        .map_or_else(|| read(TCP_RMEM), Ok)?;
    let rmem = if s.window_scaling && s.force_max_shift {
        let mut parts: Vec<u64> = base
            .split_whitespace()
            .filter_map(|x| x.parse().ok())
            .collect();
        if parts.len() != 3 {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("unexpected tcp_rmem {base:?}"),
            ));
        }
        parts[2] = parts[2].max(RMEM_FOR_MAX_SHIFT);
        format!("{} {} {}", parts[0], parts[1], parts[2])
    } else {
        base
    };
    write(TCP_RMEM, &rmem)
}
