//! Name resolution without caching, plus static overrides for lab setups.

use std::collections::HashMap;
use std::io;
use std::net::{IpAddr, ToSocketAddrs};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use optperf_core::Timestamp;

#[derive(Debug, Clone, Default)]
pub struct Resolver {
    overrides: HashMap<String, Vec<IpAddr>>,
}

/// One resolution and when it happened.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Resolution {
    pub addrs: Vec<IpAddr>,
    pub at: Timestamp,
}

impl Resolver {
    pub fn new() -> Resolver {
        Resolver::default()
    }

    /// Answers for `host` come from `addrs` instead of the system resolver.
    pub fn with_override(mut self, host: &str, addrs: Vec<IpAddr>) -> Resolver {
        self.overrides.insert(host.to_ascii_lowercase(), addrs);
        self
    }

    pub fn add_override(&mut self, host: &str, addrs: Vec<IpAddr>) {
        self.overrides.insert(host.to_ascii_lowercase(), addrs);
    }

    /// Resolves afresh through the system resolver (or an override). IPv4
    /// addresses are listed first, otherwise the resolver's order is kept.
    pub fn resolve(&self, host: &str) -> io::Result<Resolution> {
        let at = Timestamp::now();
        let host_lc = host.trim_end_matches('.').to_ascii_lowercase();
        let mut addrs = if let Some(a) = self.overrides.get(&host_lc) {
            a.clone()
        } else if let Ok(ip) = host_lc.parse::<IpAddr>() {
            vec![ip]
        } else {
            let mut seen = Vec::new();
            for sa in (host_lc.as_str(), 0).to_socket_addrs()? {
                if !seen.contains(&sa.ip()) {
                    seen.push(sa.ip());
                }
            }
            seen
        };
        if addrs.is_empty() {
            return Err(io::Error::new(
                io::ErrorKind::NotFound,
                format!("{host}: no addresses"),
            ));
        }
        addrs.sort_by_key(|a| a.is_ipv6());
        Ok(Resolution { addrs, at })
    }

    /// First address of the preferred family (IPv4 when available).
    pub fn resolve_one(&self, host: &str) -> io::Result<(IpAddr, Timestamp)> {
        let r = self.resolve(host)?;
        Ok((r.addrs[0], r.at))
    }
}

/// Resolver wrapper that reuses answers for a fixed time.
#[derive(Debug)]
pub struct CachingResolver {
    inner: Resolver,
    ttl: Duration,
    cache: Mutex<HashMap<String, (Instant, Vec<IpAddr>)>>,
}

impl CachingResolver {
    pub fn new(inner: Resolver, ttl: Duration) -> CachingResolver {
        CachingResolver {
            inner,
            ttl,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn resolve(&self, host: &str) -> io::Result<Vec<IpAddr>> {
        let key = host.to_ascii_lowercase();
        if let Some((at, a)) = self.cache.lock().unwrap().get(&key) {
            if at.elapsed() < self.ttl {
                return Ok(a.clone());
            }
        }
        let r = self.inner.resolve(host)?;
        self.cache
            .lock()
            .unwrap()
            .insert(key, (Instant::now(), r.addrs.clone()));
        Ok(r.addrs)
    }
}
