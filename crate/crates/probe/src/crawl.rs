//! Breadth-first discovery of one large file per domain.

use std::collections::{HashSet, VecDeque};
use std::net::IpAddr;
use std::ops::ControlFlow;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use texting_robots::Robot;
use thiserror::Error;
use url::Url;

use crate::http::{HttpClient, HttpError, Method, Response};
use crate::resolve::CachingResolver;

#[derive(Debug, Clone)]
pub struct CrawlSettings {
    pub max_depth: u32,
    pub max_pages: usize,
    pub min_size: u64,
    /// Bytes the fallback probe may read past `min_size`.
    pub slack: u64,
    pub max_redirects: u32,
    pub port: u16,
    /// Largest HTML page parsed for links.
    pub max_page_bytes: usize,
    /// Pause between requests to one domain, raised by robots Crawl-delay.
    pub request_gap: Duration,
    /// Token matched against robots.txt user-agent lines.
    pub robots_agent: String,
}

impl Default for CrawlSettings {
    fn default() -> Self {
        CrawlSettings {
            max_depth: 3,
            max_pages: 200,
            min_size: 1_000_000,
            slack: 256 * 1024,
            max_redirects: 5,
            port: 443,
            max_page_bytes: 4 << 20,
            request_gap: Duration::ZERO,
            robots_agent: "optperf".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SizeSource {
    ContentLength,
    PartialDownload,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrawlTarget {
    pub domain: String,
    pub file_url: String,
    pub size_estimate: u64,
    pub size_source: SizeSource,
    pub resolved_ip: IpAddr,
}

pub const TARGET_COLUMNS: [&str; 5] = [
    "domain",
    "file_url",
    "size_estimate",
    "size_source",
    "resolved_ip",
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CrawlError {
    #[error("no file of at least the minimum size within limits ({pages} pages visited)")]
    NotFound { pages: usize },
    #[error("resolution failed: {0}")]
    Resolve(String),
    #[error("index unreachable: {0}")]
    Unreachable(String),
}

/// Row of the crawl failure report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrawlFailure {
    pub domain: String,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FallbackResult {
    Qualified { bytes: u64 },
    NotQualified { bytes: u64 },
}

/// Declared body length from a HEAD request.
pub fn head_content_length(
    client: &HttpClient,
    url: &Url,
    ip: IpAddr,
) -> Result<Option<u64>, HttpError> {
    let r = client.request(Method::Head, url, ip, &mut |_| ControlFlow::Continue(()))?;
    if r.status >= 400 {
        return Err(HttpError::Protocol(format!("HTTP {}", r.status)));
    }
    Ok(r.content_length())
}

/// Streams the body and hangs up once `min_size` bytes have arrived.
pub fn fallback_size_probe(
    client: &HttpClient,
    url: &Url,
    ip: IpAddr,
    min_size: u64,
) -> Result<FallbackResult, HttpError> {
    let mut probe = client.clone();
    probe.recv_buffer = Some(32 * 1024);
    let mut seen = 0u64;
    let r = probe.request(Method::Get, url, ip, &mut |b| {
        seen += b.len() as u64;
        if seen >= min_size {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    });
    match r {
        Ok(resp) if resp.status >= 400 => Err(HttpError::Protocol(format!("HTTP {}", resp.status))),
        Ok(_) | Err(HttpError::Io(_)) | Err(HttpError::Timeout) => Ok(if seen >= min_size {
            FallbackResult::Qualified { bytes: seen }
        } else {
            FallbackResult::NotQualified { bytes: seen }
        }),
        Err(e) => Err(e),
    }
}

fn href_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#"(?is)<a\s[^>]*?\bhref\s*=\s*(?:"([^"]*)"|'([^']*)'|([^\s"'>]+))"#).unwrap()
    })
}

/// Absolute http(s) URLs from anchor hrefs, fragments removed.
pub fn extract_links(base: &Url, html: &str) -> Vec<Url> {
    let mut out = Vec::new();
    for c in href_regex().captures_iter(html) {
        let raw = c
            .get(1)
            .or(c.get(2))
            .or(c.get(3))
            .map_or("", |m| m.as_str());
        let raw = raw.trim().replace("&amp;", "&");
        let Ok(mut u) = base.join(&raw) else { continue };
        if !matches!(u.scheme(), "http" | "https") {
            continue;
        }
        u.set_fragment(None);
        if !out.contains(&u) {
            out.push(u);
        }
    }
    out
}

enum Robots {
    AllowAll,
    DisallowAll,
    Rules(Robot),
}

impl Robots {
    fn allowed(&self, url: &Url) -> bool {
        match self {
            Robots::AllowAll => true,
            Robots::DisallowAll => false,
            Robots::Rules(r) => r.allowed(url.as_str()),
        }
    }

    fn delay(&self) -> Option<Duration> {
        match self {
            Robots::Rules(r) => r.delay.map(|d| Duration::from_secs_f32(d.max(0.0))),
            _ => None,
        }
    }
}

pub struct Crawler<'a> {
    pub client: &'a HttpClient,
    pub resolver: &'a CachingResolver,
    pub settings: CrawlSettings,
}

struct DomainCrawl<'c, 'a> {
    c: &'c Crawler<'a>,
    domain: String,
    ip: IpAddr,
    robots: Robots,
    gap: Duration,
    last: Option<Instant>,
}

impl DomainCrawl<'_, '_> {
    fn pace(&mut self) {
        if let Some(t) = self.last {
            let since = t.elapsed();
            if since < self.gap {
                std::thread::sleep(self.gap - since);
            }
        }
        self.last = Some(Instant::now());
    }

    fn same_origin(&self, u: &Url) -> bool {
        u.scheme() == "https"
            && u.host_str()
                .is_some_and(|h| h.eq_ignore_ascii_case(&self.domain))
            && u.port_or_known_default() == Some(self.c.settings.port)
    }

    /// Same domain, allowed by robots.txt, and still resolving to the
    /// address the crawl started with.
    fn may_fetch(&self, u: &Url) -> bool {
        if !self.same_origin(u) || !self.robots.allowed(u) {
            return false;
        }
        match self.c.resolver.resolve(&self.domain) {
            Ok(addrs) => addrs.first() == Some(&self.ip),
            Err(_) => false,
        }
    }

    /// Issues `method`, following same-domain redirects. Returns the final
    /// URL, the response and up to `limit` body bytes.
    fn follow(
        &mut self,
        method: Method,
        url: &Url,
        limit: usize,
    ) -> Result<Option<(Url, Response, Vec<u8>)>, HttpError> {
        let mut cur = url.clone();
        for _ in 0..=self.c.settings.max_redirects {
            self.pace();
            let (resp, body) = self.c.client.fetch(method, &cur, self.ip, limit)?;
            if !(300..400).contains(&resp.status) {
                return Ok(Some((cur, resp, body)));
            }
            let Some(next) = resp.header("location").and_then(|l| cur.join(l).ok()) else {
                return Ok(Some((cur, resp, body)));
            };
            if !self.may_fetch(&next) {
                log::debug!("{}: not following redirect to {next}", self.domain);
                return Ok(None);
            }
            cur = next;
        }
        Ok(None)
    }
}

impl<'a> Crawler<'a> {
    pub fn new(
        client: &'a HttpClient,
        resolver: &'a CachingResolver,
        settings: CrawlSettings,
    ) -> Self {
        Crawler {
            client,
            resolver,
            settings,
        }
    }

    fn index_url(&self, domain: &str) -> Result<Url, CrawlError> {
        let s = if self.settings.port == 443 {
            format!("https://{domain}/")
        } else {
            format!("https://{domain}:{}/", self.settings.port)
        };
        Url::parse(&s).map_err(|e| CrawlError::Resolve(format!("{domain}: {e}")))
    }

    fn fetch_robots(&self, index: &Url, ip: IpAddr) -> Result<Robots, HttpError> {
        let url = index.join("/robots.txt").expect("static path");
        let (resp, body) = self.client.fetch(Method::Get, &url, ip, 512 * 1024)?;
        Ok(match resp.status {
            200..=299 => match Robot::new(&self.settings.robots_agent, &body) {
                Ok(r) => Robots::Rules(r),
                Err(e) => {
                    log::warn!("{url}: unparseable robots.txt ({e}); treating as allow-all");
                    Robots::AllowAll
                }
            },
            400..=499 => Robots::AllowAll,
            _ => Robots::DisallowAll,
        })
    }

    pub fn crawl_domain(&self, domain: &str) -> Result<CrawlTarget, CrawlError> {
        let s = &self.settings;
        let ip = *self
            .resolver
            .resolve(domain)
            .map_err(|e| CrawlError::Resolve(e.to_string()))?
            .first()
            .ok_or_else(|| CrawlError::Resolve("no addresses".into()))?;
        let index = self.index_url(domain)?;
        let robots = self
            .fetch_robots(&index, ip)
            .map_err(|e| CrawlError::Unreachable(e.to_string()))?;
        let gap = robots.delay().unwrap_or_default().max(s.request_gap);
        let mut d = DomainCrawl {
            c: self,
            domain: domain.to_ascii_lowercase(),
            ip,
            robots,
            gap,
            last: Some(Instant::now()),
        };
        let mut queue = VecDeque::from([(index.clone(), 0u32)]);
        let mut seen = HashSet::from([index.clone()]);
        let mut pages = 0usize;
        while let Some((url, depth)) = queue.pop_front() {
            if pages >= s.max_pages {
                break;
            }
            if !d.may_fetch(&url) {
                continue;
            }
            pages += 1;
            let head = d.follow(Method::Head, &url, 0);
            let (final_url, resp) = match head {
                Ok(Some((u, r, _))) => (u, r),
                Ok(None) => continue,
                Err(e) if depth == 0 => return Err(CrawlError::Unreachable(e.to_string())),
                Err(e) => {
                    log::debug!("{url}: {e}");
                    continue;
                }
            };
            if resp.status >= 400 {
                continue;
            }
            if resp.is_html() {
                if depth >= s.max_depth {
                    continue;
                }
                let Ok(Some((page_url, page, body))) =
                    d.follow(Method::Get, &final_url, s.max_page_bytes)
                else {
                    continue;
                };
                if page.status >= 400 {
                    continue;
                }
                for link in extract_links(&page_url, &String::from_utf8_lossy(&body)) {
                    if d.same_origin(&link) && seen.insert(link.clone()) {
                        queue.push_back((link, depth + 1));
                    }
                }
                continue;
            }
            let target = |size, source| CrawlTarget {
                domain: domain.to_string(),
                file_url: final_url.to_string(),
                size_estimate: size,
                size_source: source,
                resolved_ip: ip,
            };
            match resp.content_length() {
                Some(n) if n >= s.min_size => return Ok(target(n, SizeSource::ContentLength)),
                Some(_) => continue,
                None => {
                    d.pace();
                    match fallback_size_probe(self.client, &final_url, ip, s.min_size) {
                        Ok(FallbackResult::Qualified { bytes }) => {
                            return Ok(target(bytes, SizeSource::PartialDownload))
                        }
                        Ok(FallbackResult::NotQualified { bytes }) => {
                            log::debug!("{final_url}: only {bytes} bytes");
                        }
                        Err(e) => log::debug!("{final_url}: {e}"),
                    }
                }
            }
        }
        Err(CrawlError::NotFound { pages })
    }

    /// Crawls domains concurrently, one request in flight per domain.
    pub fn crawl_all(
        &self,
        domains: &[String],
        workers: usize,
    ) -> Vec<(String, Result<CrawlTarget, CrawlError>)> {
        let next = AtomicUsize::new(0);
        let out = Mutex::new(vec![None; domains.len()]);
        std::thread::scope(|sc| {
            for _ in 0..workers.clamp(1, domains.len().max(1)) {
                sc.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(dom) = domains.get(i) else { return };
                    let r = self.crawl_domain(dom);
                    out.lock().unwrap()[i] = Some((dom.clone(), r));
                });
            }
        });
        out.into_inner().unwrap().into_iter().flatten().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn links_resolve_against_base() {
        let base = Url::parse("https://a.test/dir/page.html").unwrap();
        let html = r#"<p><a href="big.bin">x</a> <A class=k HREF='/abs#frag'>y</A>
            <a href=https://b.test/z>z</a> <a href="mailto:x@y">m</a>
            <a href="?q=1&amp;r=2">q</a> <link href="/style.css"></p>"#;
        let got: Vec<String> = extract_links(&base, html)
            .iter()
            .map(|u| u.to_string())
            .collect();
        assert_eq!(
            got,
            [
                "https://a.test/dir/big.bin",
                "https://a.test/abs",
                "https://b.test/z",
                "https://a.test/dir/page.html?q=1&r=2"
            ]
        );
    }
}
