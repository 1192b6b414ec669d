//! QUIC downloads. Clients are external commands described by templates;
//! the bundled HTTP/3 client (quinn + h3) is one such command.

use std::collections::BTreeMap;
use std::io::Read;
use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use bytes::Buf;
use optperf_core::record::Outcome;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

use crate::download::DownloadResult;

/// Exit status the bundled client uses for an HTTP error response.
pub const EXIT_HTTP_ERROR: i32 = 4;
/// Exit status for handshake or connection failure.
pub const EXIT_CONNECT: i32 = 3;

/// An external QUIC client. Each element of `command` may contain the
/// placeholders `{url}`, `{ip}`, `{host}`, `{port}`, `{path}`, plus any key
/// of the caller's extra variables (e.g. `{exe}`, `{ca}`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuicAdapter {
    pub id: String,
    pub command: Vec<String>,
}

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("adapter {0:?} has an empty command")]
    Empty(String),
    #[error("adapter {id:?}: unknown placeholder {{{name}}}")]
    UnknownPlaceholder { id: String, name: String },
}

fn substitute(s: &str, vars: &BTreeMap<&str, String>, id: &str) -> Result<String, AdapterError> {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let Some(close) = rest[open..].find('}') else {
            out.push_str(&rest[open..]);
            return Ok(out);
        };
        let name = &rest[open + 1..open + close];
        match vars.get(name) {
            Some(v) => out.push_str(v),
            None => {
                return Err(AdapterError::UnknownPlaceholder {
                    id: id.to_string(),
                    name: name.to_string(),
                })
            }
        }
        rest = &rest[open + close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

impl QuicAdapter {
    /// The argument vector for one download.
    pub fn expand(
        &self,
        url: &Url,
        ip: IpAddr,
        extra: &BTreeMap<String, String>,
    ) -> Result<Vec<String>, AdapterError> {
        if self.command.is_empty() {
            return Err(AdapterError::Empty(self.id.clone()));
        }
        let mut vars: BTreeMap<&str, String> = BTreeMap::new();
        vars.insert("url", url.to_string());
        vars.insert("ip", ip.to_string());
        vars.insert("host", url.host_str().unwrap_or_default().to_string());
        vars.insert(
            "port",
            url.port_or_known_default().unwrap_or(443).to_string(),
        );
        vars.insert("path", url.path().to_string());
        for (k, v) in extra {
            vars.insert(k.as_str(), v.clone());
        }
        self.command
            .iter()
            .map(|c| substitute(c, &vars, &self.id))
            .collect()
    }
}

/// Runs the adapter and maps its exit status. A `bytes=N` line on stdout
/// is taken as the body size.
pub fn run_adapter(argv: &[String], timeout: Duration) -> DownloadResult {
    let fail = |outcome, detail: String| DownloadResult {
        outcome,
        status: None,
        bytes: 0,
        detail,
    };
    let mut child = match Command::new(&argv[0])
        .args(&argv[1..])
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
    {
        Ok(c) => c,
        Err(e) => {
            return fail(
                Outcome::ConnectFail,
                format!("cannot start {}: {e}", argv[0]),
            )
        }
    };
    let drain = |r: Option<Box<dyn Read + Send>>| {
        std::thread::spawn(move || {
            let mut buf = Vec::new();
            if let Some(mut r) = r {
                let _ = r.read_to_end(&mut buf);
            }
            // Keep the tail; adapters may print bodies.
            let cut = buf.len().saturating_sub(64 * 1024);
            String::from_utf8_lossy(&buf[cut..]).into_owned()
        })
    };
    let out_t = drain(
        child
            .stdout
            .take()
            .map(|o| Box::new(o) as Box<dyn Read + Send>),
    );
    let err_t = drain(
        child
            .stderr
            .take()
            .map(|e| Box::new(e) as Box<dyn Read + Send>),
    );
    let until = Instant::now() + timeout;
    let status = loop {
        match child.try_wait() {
            Ok(Some(s)) => break Some(s),
            Ok(None) if Instant::now() >= until => {
                let _ = child.kill();
                let _ = child.wait();
                break None;
            }
            Ok(None) => std::thread::sleep(Duration::from_millis(20)),
            Err(e) => {
                let _ = child.kill();
                return fail(Outcome::ConnectFail, e.to_string());
            }
        }
    };
    let stdout = out_t.join().unwrap_or_default();
    let stderr = err_t.join().unwrap_or_default();
    let bytes = stdout
        .lines()
        .filter_map(|l| l.trim().strip_prefix("bytes="))
        .filter_map(|v| v.parse().ok())
        .next_back()
        .unwrap_or(0);
    let http = stdout
        .lines()
        .filter_map(|l| l.trim().strip_prefix("status="))
        .filter_map(|v| v.parse().ok())
        .next_back();
    let detail = stderr.lines().last().unwrap_or("").to_string();
    let outcome = match status.map(|s| s.code()) {
        None => Outcome::Incomplete,
        Some(Some(0)) => Outcome::Ok,
        Some(Some(EXIT_HTTP_ERROR)) => Outcome::Incomplete,
        Some(_) => Outcome::ConnectFail,
    };
    DownloadResult {
        outcome,
        status: http,
        bytes,
        detail: if status.is_none() {
            "timed out".into()
        } else {
            detail
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Congestion {
    Cubic,
    NewReno,
    Bbr,
}

impl std::str::FromStr for Congestion {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "cubic" => Ok(Congestion::Cubic),
            "newreno" | "new_reno" | "reno" => Ok(Congestion::NewReno),
            "bbr" => Ok(Congestion::Bbr),
            _ => Err(format!("unknown congestion controller {s:?}")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct H3Fetch {
    pub url: Url,
    pub ip: IpAddr,
    pub ca_files: Vec<PathBuf>,
    pub congestion: Congestion,
    pub user_agent: String,
    pub timeout: Duration,
}

#[derive(Debug, Error)]
pub enum QuicError {
    #[error("setup: {0}")]
    Setup(String),
    #[error("connect: {0}")]
    Connect(String),
    #[error("HTTP/3: {0}")]
    Http(String),
    #[error("timed out")]
    Timeout,
}

fn setup<E: std::fmt::Display>(e: E) -> QuicError {
    QuicError::Setup(e.to_string())
}

/// GETs the URL over HTTP/3 from the given address. Returns the status and
/// body size.
pub fn h3_fetch(f: &H3Fetch) -> Result<(u16, u64), QuicError> {
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .map_err(setup)?;
    rt.block_on(async {
        match tokio::time::timeout(f.timeout, h3_fetch_inner(f)).await {
            Ok(r) => r,
            Err(_) => Err(QuicError::Timeout),
        }
    })
}

async fn h3_fetch_inner(f: &H3Fetch) -> Result<(u16, u64), QuicError> {
    let host = f
        .url
        .host_str()
        .ok_or_else(|| QuicError::Setup("URL without host".into()))?
        .trim_start_matches('[')
        .trim_end_matches(']')
        .to_string();
    let port = f.url.port_or_known_default().unwrap_or(443);
    let crypto = crate::tls::client_config(&f.ca_files, &[b"h3"]).map_err(setup)?;
    let qc = quinn::crypto::rustls::QuicClientConfig::try_from(crypto).map_err(setup)?;
    let mut cc = quinn::ClientConfig::new(Arc::new(qc));
    let mut tc = quinn::TransportConfig::default();
    match f.congestion {
        Congestion::Cubic => {
            tc.congestion_controller_factory(Arc::new(quinn::congestion::CubicConfig::default()))
        }
        Congestion::NewReno => {
            tc.congestion_controller_factory(Arc::new(quinn::congestion::NewRenoConfig::default()))
        }
        Congestion::Bbr => {
            tc.congestion_controller_factory(Arc::new(quinn::congestion::BbrConfig::default()))
        }
    };
    cc.transport_config(Arc::new(tc));
    let bind: SocketAddr = if f.ip.is_ipv4() {
        "0.0.0.0:0".parse().unwrap()
    } else {
        "[::]:0".parse().unwrap()
    };
    let mut ep = quinn::Endpoint::client(bind).map_err(setup)?;
    ep.set_default_client_config(cc);
    let conn = ep
        .connect(SocketAddr::new(f.ip, port), &host)
        .map_err(|e| QuicError::Connect(e.to_string()))?
        .await
        .map_err(|e| QuicError::Connect(e.to_string()))?;
    let (mut driver, mut send) = h3::client::new(h3_quinn::Connection::new(conn))
        .await
        .map_err(|e| QuicError::Connect(e.to_string()))?;
    let drive = tokio::spawn(async move {
        std::future::poll_fn(|cx| driver.poll_close(cx)).await;
    });
    let req = http::Request::get(f.url.as_str())
        .header("user-agent", &f.user_agent)
        .body(())
        .map_err(setup)?;
    let http = |e: h3::error::StreamError| QuicError::Http(e.to_string());
    let mut stream = send.send_request(req).await.map_err(http)?;
    stream.finish().await.map_err(http)?;
    let resp = stream.recv_response().await.map_err(http)?;
    let mut bytes = 0u64;
    while let Some(chunk) = stream.recv_data().await.map_err(http)? {
        bytes += chunk.remaining() as u64;
    }
    drop(stream);
    drop(send);
    ep.close(0u32.into(), b"done");
    drive.abort();
    ep.wait_idle().await;
    Ok((resp.status().as_u16(), bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_expansion() {
        let a = QuicAdapter {
            id: "x".into(),
            command: vec![
                "{exe}".into(),
                "quic-fetch".into(),
                "--url={url}".into(),
                "{ip}:{port}{path}".into(),
            ],
        };
        let url = Url::parse("https://h.test:8443/f/big.bin").unwrap();
        let extra = BTreeMap::from([("exe".to_string(), "/bin/opt".to_string())]);
        let argv = a.expand(&url, "10.0.0.2".parse().unwrap(), &extra).unwrap();
        assert_eq!(
            argv,
            [
                "/bin/opt",
                "quic-fetch",
                "--url=https://h.test:8443/f/big.bin",
                "10.0.0.2:8443/f/big.bin"
            ]
        );
        let bad = QuicAdapter {
            id: "y".into(),
            command: vec!["{nope}".into()],
        };
        assert!(matches!(
            bad.expand(&url, "10.0.0.2".parse().unwrap(), &extra),
            Err(AdapterError::UnknownPlaceholder { .. })
        ));
    }

    #[test]
    fn adapter_exit_status_mapping() {
        let sh = |script: &str| vec!["sh".to_string(), "-c".to_string(), script.to_string()];
        let ok = run_adapter(
            &sh("echo status=200; echo bytes=42"),
            Duration::from_secs(5),
        );
        assert_eq!(
            (ok.outcome, ok.bytes, ok.status),
            (Outcome::Ok, 42, Some(200))
        );
        let http = run_adapter(&sh("exit 4"), Duration::from_secs(5));
        assert_eq!(http.outcome, Outcome::Incomplete);
        let conn = run_adapter(&sh("echo no handshake >&2; exit 3"), Duration::from_secs(5));
        assert_eq!(conn.outcome, Outcome::ConnectFail);
        assert_eq!(conn.detail, "no handshake");
        let slow = run_adapter(&sh("sleep 5"), Duration::from_millis(100));
        assert_eq!(slow.outcome, Outcome::Incomplete);
        let missing = run_adapter(&["/nonexistent/quic".to_string()], Duration::from_secs(1));
        assert_eq!(missing.outcome, Outcome::ConnectFail);
    }
}
