//! One HTTPS download to a chosen address, mapped to a run outcome.

use std::net::IpAddr;
use std::ops::ControlFlow;

use optperf_core::record::Outcome;
use url::Url;

use crate::http::{HttpClient, HttpError, Method};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DownloadResult {
    pub outcome: Outcome,
    pub status: Option<u16>,
    pub bytes: u64,
    pub detail: String,
}

/// Content types that mark a challenge or error page rather than a file.
fn looks_like_page(content_type: Option<&str>) -> bool {
    match content_type {
        None => true,
        Some(t) => {
            t.starts_with("text/") || t == "application/xhtml+xml" || t == "application/json"
        }
    }
}

/// GETs `url` from `ip`, presenting the URL host for SNI and certificate
/// checks, and consumes the whole body. Redirects are not followed: the
/// crawler already settled on the final URL.
pub fn forced_ip_download(client: &HttpClient, url: &Url, ip: IpAddr) -> DownloadResult {
    let mut bytes = 0u64;
    let r = client.request(Method::Get, url, ip, &mut |b| {
        bytes += b.len() as u64;
        ControlFlow::Continue(())
    });
    let resp = match r {
        Ok(resp) => resp,
        Err(e) => {
            let outcome = match e {
                HttpError::Connect { .. }
                | HttpError::Certificate(_)
                | HttpError::Tls(_)
                | HttpError::BadUrl(_) => Outcome::ConnectFail,
                HttpError::Timeout | HttpError::Protocol(_) | HttpError::Io(_) => {
                    Outcome::Incomplete
                }
            };
            return DownloadResult {
                outcome,
                status: None,
                bytes,
                detail: e.to_string(),
            };
        }
    };
    let ct = resp.content_type();
    let outcome = match resp.status {
        403 | 503 if looks_like_page(ct.as_deref()) => Outcome::Blocked,
        200..=299 if resp.complete => Outcome::Ok,
        _ => Outcome::Incomplete,
    };
    let detail = match outcome {
        Outcome::Ok => String::new(),
        Outcome::Incomplete if resp.status < 300 => {
            format!("body ended after {} bytes", resp.body_bytes)
        }
        _ => format!("HTTP {}", resp.status),
    };
    DownloadResult {
        outcome,
        status: Some(resp.status),
        bytes,
        detail,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn page_types() {
        assert!(looks_like_page(Some("text/html")));
        assert!(looks_like_page(None));
        assert!(!looks_like_page(Some("application/octet-stream")));
        assert!(!looks_like_page(Some("video/mp4")));
    }
}
