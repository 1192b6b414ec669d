//! Minimal blocking HTTP/1.1 client over TCP or TLS. The caller chooses the
//! address to connect to; the URL's host is used for SNI, certificate
//! validation and the Host header.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{IpAddr, SocketAddr, TcpStream};
use std::ops::ControlFlow;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rustls::pki_types::ServerName;
use rustls::{ClientConfig, ClientConnection, StreamOwned};
use socket2::{Domain, Protocol, Socket, Type};
use thiserror::Error;
use url::Url;

const MAX_HEADER_BYTES: usize = 64 * 1024;

#[derive(Debug, Error)]
pub enum HttpError {
    #[error("unsupported URL {0}")]
    BadUrl(String),
    #[error("connect to {addr}: {source}")]
    Connect { addr: SocketAddr, source: io::Error },
    #[error("certificate rejected: {0}")]
    Certificate(String),
    #[error("TLS: {0}")]
    Tls(String),
    #[error("timed out")]
    Timeout,
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("I/O: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Get,
    Head,
}

impl Method {
    fn as_str(self) -> &'static str {
        match self {
            Method::Get => "GET",
            Method::Head => "HEAD",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    /// Body bytes handed to the sink.
    pub body_bytes: u64,
    /// The body ended where its framing said it would.
    pub complete: bool,
    /// The sink asked to stop before the end of the body.
    pub stopped: bool,
}

impl Response {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    /// Declared Content-Length, `None` when absent or not a number.
    pub fn content_length(&self) -> Option<u64> {
        self.header("content-length")?.trim().parse().ok()
    }

    /// Media type without parameters, lower-cased.
    pub fn content_type(&self) -> Option<String> {
        self.header("content-type").map(|v| {
            v.split(';')
                .next()
                .unwrap_or("")
                .trim()
                .to_ascii_lowercase()
        })
    }

    pub fn is_html(&self) -> bool {
        self.content_type()
            .is_some_and(|t| t == "text/html" || t == "application/xhtml+xml")
    }

    fn chunked(&self) -> bool {
        self.header("transfer-encoding")
            .is_some_and(|v| v.to_ascii_lowercase().contains("chunked"))
    }
}

#[derive(Clone)]
pub struct HttpClient {
    tls: Arc<ClientConfig>,
    pub user_agent: String,
    pub connect_timeout: Duration,
    /// Budget for one whole request, body included.
    pub timeout: Duration,
    /// SO_RCVBUF set before connecting; bounds how far the server can run
    /// ahead of the reader.
    pub recv_buffer: Option<usize>,
}

enum Conn {
    Plain(TcpStream),
    Tls(Box<StreamOwned<ClientConnection, TcpStream>>),
}

impl Conn {
    fn tcp(&self) -> &TcpStream {
        match self {
            Conn::Plain(s) => s,
            Conn::Tls(s) => &s.sock,
        }
    }
}

impl Read for Conn {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        match self {
            Conn::Plain(s) => s.read(buf),
            Conn::Tls(s) => s.read(buf),
        }
    }
}

impl Write for Conn {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        match self {
            Conn::Plain(s) => s.write(buf),
            Conn::Tls(s) => s.write(buf),
        }
    }

    fn flush(&mut self) -> io::Result<()> {
        match self {
            Conn::Plain(s) => s.flush(),
            Conn::Tls(s) => s.flush(),
        }
    }
}

/// Reads with a socket timeout that never exceeds the remaining budget.
struct Deadline {
    conn: Conn,
    until: Instant,
}

impl Read for Deadline {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let left = self.until.saturating_duration_since(Instant::now());
        if left.is_zero() {
            return Err(io::Error::new(io::ErrorKind::TimedOut, "deadline"));
        }
        self.conn.tcp().set_read_timeout(Some(left))?;
        match self.conn.read(buf) {
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                Err(io::Error::new(io::ErrorKind::TimedOut, "deadline"))
            }
            // Servers often close without close_notify; treat it as EOF.
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => Ok(0),
            r => r,
        }
    }
}

fn map_io(e: io::Error) -> HttpError {
    if e.kind() == io::ErrorKind::TimedOut {
        return HttpError::Timeout;
    }
    if let Some(inner) = e.get_ref().and_then(|i| i.downcast_ref::<rustls::Error>()) {
        return match inner {
            rustls::Error::InvalidCertificate(c) => HttpError::Certificate(format!("{c:?}")),
            other => HttpError::Tls(other.to_string()),
        };
    }
    HttpError::Io(e)
}

pub fn default_port(url: &Url) -> Option<u16> {
    url.port_or_known_default()
}

fn request_target(url: &Url) -> String {
    let mut t = url.path().to_string();
    if let Some(q) = url.query() {
        t.push('?');
        t.push_str(q);
    }
    t
}

fn host_header(url: &Url) -> Option<String> {
    let host = url.host_str()?;
    Some(match url.port() {
        Some(p) => format!("{host}:{p}"),
        None => host.to_string(),
    })
}

impl HttpClient {
    pub fn new(tls: Arc<ClientConfig>, user_agent: &str, timeout: Duration) -> HttpClient {
        HttpClient {
            tls,
            user_agent: user_agent.to_string(),
            connect_timeout: Duration::from_secs(10).min(timeout),
            timeout,
            recv_buffer: None,
        }
    }

    fn tcp_connect(&self, addr: SocketAddr) -> io::Result<TcpStream> {
        let s = Socket::new(Domain::for_address(addr), Type::STREAM, Some(Protocol::TCP))?;
        if let Some(n) = self.recv_buffer {
            s.set_recv_buffer_size(n)?;
        }
        s.connect_timeout(&addr.into(), self.connect_timeout)?;
        Ok(s.into())
    }

    fn connect(&self, url: &Url, ip: IpAddr) -> Result<Conn, HttpError> {
        let port = default_port(url).ok_or_else(|| HttpError::BadUrl(url.to_string()))?;
        let addr = SocketAddr::new(ip, port);
        let tcp = self
            .tcp_connect(addr)
            .map_err(|source| HttpError::Connect { addr, source })?;
        tcp.set_nodelay(true)?;
        match url.scheme() {
            "http" => Ok(Conn::Plain(tcp)),
            "https" => {
                let host = url
                    .host_str()
                    .ok_or_else(|| HttpError::BadUrl(url.to_string()))?;
                let host = host.trim_start_matches('[').trim_end_matches(']');
                let name = ServerName::try_from(host.to_string())
                    .map_err(|_| HttpError::BadUrl(url.to_string()))?;
                let conn = ClientConnection::new(self.tls.clone(), name)
                    .map_err(|e| HttpError::Tls(e.to_string()))?;
                Ok(Conn::Tls(Box::new(StreamOwned::new(conn, tcp))))
            }
            _ => Err(HttpError::BadUrl(url.to_string())),
        }
    }

    /// Sends one request on a fresh connection to `ip` and streams the body
    /// into `sink`. The sink may end the transfer early with
    /// `ControlFlow::Break`; the connection is then dropped.
    pub fn request(
        &self,
        method: Method,
        url: &Url,
        ip: IpAddr,
        sink: &mut dyn FnMut(&[u8]) -> ControlFlow<()>,
    ) -> Result<Response, HttpError> {
        let until = Instant::now() + self.timeout;
        let host = host_header(url).ok_or_else(|| HttpError::BadUrl(url.to_string()))?;
        let mut conn = self.connect(url, ip)?;
        conn.tcp().set_write_timeout(Some(self.timeout))?;
        let req = format!(
            "{} {} HTTP/1.1\r\nHost: {host}\r\nUser-Agent: {}\r\nAccept: */*\r\nAccept-Encoding: identity\r\nConnection: close\r\n\r\n",
            method.as_str(),
            request_target(url),
            self.user_agent
        );
        conn.write_all(req.as_bytes()).map_err(map_io)?;
        conn.flush().map_err(map_io)?;
        let mut r = BufReader::with_capacity(64 * 1024, Deadline { conn, until });
        let mut resp = read_head(&mut r)?;
        let no_body = method == Method::Head
            || resp.status / 100 == 1
            || resp.status == 204
            || resp.status == 304;
        if no_body {
            resp.complete = true;
            return Ok(resp);
        }
        if resp.chunked() {
            read_chunked(&mut r, &mut resp, sink)?;
        } else if let Some(n) = resp.content_length() {
            read_sized(&mut r, &mut resp, Some(n), sink)?;
        } else {
            read_sized(&mut r, &mut resp, None, sink)?;
        }
        Ok(resp)
    }

    /// Convenience wrapper that collects at most `limit` body bytes.
    pub fn fetch(
        &self,
        method: Method,
        url: &Url,
        ip: IpAddr,
        limit: usize,
    ) -> Result<(Response, Vec<u8>), HttpError> {
        let mut body = Vec::new();
        let resp = self.request(method, url, ip, &mut |b| {
            let take = b.len().min(limit - body.len());
            body.extend_from_slice(&b[..take]);
            if body.len() >= limit {
                ControlFlow::Break(())
            } else {
                ControlFlow::Continue(())
            }
        })?;
        Ok((resp, body))
    }
}

fn read_head(r: &mut impl BufRead) -> Result<Response, HttpError> {
    let mut raw = Vec::new();
    loop {
        let n = r.read_until(b'\n', &mut raw).map_err(map_io)?;
        if n == 0 {
            return Err(HttpError::Protocol(
                "connection closed before headers".into(),
            ));
        }
        if raw.len() > MAX_HEADER_BYTES {
            return Err(HttpError::Protocol("header section too large".into()));
        }
        if raw.ends_with(b"\r\n\r\n") || raw.ends_with(b"\n\n") {
            break;
        }
    }
    let mut headers = [httparse::EMPTY_HEADER; 128];
    let mut parsed = httparse::Response::new(&mut headers);
    match parsed.parse(&raw) {
        Ok(httparse::Status::Complete(_)) => {}
        Ok(httparse::Status::Partial) => return Err(HttpError::Protocol("partial header".into())),
        Err(e) => return Err(HttpError::Protocol(e.to_string())),
    }
    Ok(Response {
        status: parsed.code.unwrap_or(0),
        headers: parsed
            .headers
            .iter()
            .map(|h| {
                (
                    h.name.to_string(),
                    String::from_utf8_lossy(h.value).into_owned(),
                )
            })
            .collect(),
        body_bytes: 0,
        complete: false,
        stopped: false,
    })
}

fn read_sized(
    r: &mut impl BufRead,
    resp: &mut Response,
    len: Option<u64>,
    sink: &mut dyn FnMut(&[u8]) -> ControlFlow<()>,
) -> Result<(), HttpError> {
    loop {
        if len.is_some_and(|n| resp.body_bytes >= n) {
            resp.complete = true;
            return Ok(());
        }
        let buf = match r.fill_buf() {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::TimedOut => return Err(HttpError::Timeout),
            Err(e) => {
                log::debug!("body read: {e}");
                return Ok(());
            }
        };
        if buf.is_empty() {
            resp.complete = len.is_none();
            return Ok(());
        }
        let want = len.map_or(buf.len() as u64, |n| {
            (n - resp.body_bytes).min(buf.len() as u64)
        });
        let chunk = &buf[..want as usize];
        resp.body_bytes += want;
        let flow = sink(chunk);
        r.consume(want as usize);
        if flow.is_break() {
            resp.stopped = true;
            return Ok(());
        }
    }
}

fn read_line(r: &mut impl BufRead) -> Result<Vec<u8>, HttpError> {
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line).map_err(map_io)?;
    if !line.ends_with(b"\n") {
        return Err(HttpError::Protocol("truncated chunk framing".into()));
    }
    Ok(line)
}

fn read_chunked(
    r: &mut impl BufRead,
    resp: &mut Response,
    sink: &mut dyn FnMut(&[u8]) -> ControlFlow<()>,
) -> Result<(), HttpError> {
    loop {
        let line = match read_line(r) {
            Ok(l) => l,
            Err(HttpError::Protocol(_)) => return Ok(()),
            Err(e) => return Err(e),
        };
        let size = match httparse::parse_chunk_size(&line) {
            Ok(httparse::Status::Complete((_, n))) => n,
            _ => return Err(HttpError::Protocol("bad chunk size".into())),
        };
        if size == 0 {
            loop {
                match read_line(r) {
                    Ok(l) if l == b"\r\n" || l == b"\n" => break,
                    Ok(_) => continue,
                    Err(_) => break,
                }
            }
            resp.complete = true;
            return Ok(());
        }
        let mut left = size;
        while left > 0 {
            let buf = match r.fill_buf() {
                Ok(b) if !b.is_empty() => b,
                Ok(_) => return Ok(()),
                Err(e) if e.kind() == io::ErrorKind::TimedOut => return Err(HttpError::Timeout),
                Err(_) => return Ok(()),
            };
            let take = (buf.len() as u64).min(left) as usize;
            resp.body_bytes += take as u64;
            let flow = sink(&buf[..take]);
            r.consume(take);
            left -= take as u64;
            if flow.is_break() {
                resp.stopped = true;
                return Ok(());
            }
        }
        let crlf = read_line(r)?;
        if crlf != b"\r\n" && crlf != b"\n" {
            return Err(HttpError::Protocol("missing CRLF after chunk".into()));
        }
    }
}
