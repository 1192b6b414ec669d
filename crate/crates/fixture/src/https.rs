//! Thread-per-connection HTTPS/1.1 server. One request per connection.

use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use rustls::{ServerConfig, ServerConnection, StreamOwned};

use crate::site::{fill, Resource, Sites};

const WRITE_CHUNK: usize = 16 * 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub method: String,
    pub host: String,
    pub path: String,
    pub user_agent: String,
    pub status: u16,
    /// Body bytes handed to the socket.
    pub body_bytes: u64,
}

#[derive(Debug, Clone, Default)]
pub struct HttpsOptions {
    /// SO_SNDBUF for accepted connections.
    pub send_buffer: Option<usize>,
}

pub struct HttpsFixture {
    addr: SocketAddr,
    log: Arc<Mutex<Vec<LogEntry>>>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl HttpsFixture {
    /// Binds on the calling thread (and so in its network namespace) and
    /// serves until dropped.
    pub fn start(
        bind: SocketAddr,
        tls: Arc<ServerConfig>,
        sites: Arc<Sites>,
        opts: HttpsOptions,
    ) -> io::Result<HttpsFixture> {
        let listener = TcpListener::bind(bind)?;
        let addr = listener.local_addr()?;
        let log = Arc::new(Mutex::new(Vec::new()));
        let stop = Arc::new(AtomicBool::new(false));
        let (log2, stop2) = (log.clone(), stop.clone());
        listener.set_nonblocking(true)?;
        let handle = std::thread::Builder::new()
            .name("https-fixture".into())
            .spawn(move || {
                while !stop2.load(Ordering::Relaxed) {
                    let s = match listener.accept() {
                        Ok((s, _)) => s,
                        Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                            std::thread::sleep(Duration::from_millis(5));
                            continue;
                        }
                        Err(_) => continue,
                    };
                    if s.set_nonblocking(false).is_err() {
                        continue;
                    }
                    let (tls, sites, log, opts) =
                        (tls.clone(), sites.clone(), log2.clone(), opts.clone());
                    std::thread::spawn(move || {
                        if let Err(e) = serve(s, tls, &sites, &log, &opts) {
                            log::debug!("fixture connection: {e}");
                        }
                    });
                }
            })?;
        Ok(HttpsFixture {
            addr,
            log,
            stop,
            handle: Some(handle),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn access_log(&self) -> Vec<LogEntry> {
        self.log.lock().unwrap().clone()
    }

    /// Entries are logged when a response ends, which for an aborted
    /// transfer can be after the client has returned. Polls until `pred`
    /// matches an entry or `timeout` passes, then returns the log.
    pub fn wait_for_entry(
        &self,
        pred: impl Fn(&LogEntry) -> bool,
        timeout: Duration,
    ) -> Vec<LogEntry> {
        let deadline = std::time::Instant::now() + timeout;
        loop {
            let log = self.access_log();
            if log.iter().any(&pred) || std::time::Instant::now() >= deadline {
                return log;
            }
            std::thread::sleep(Duration::from_millis(10));
        }
    }

    pub fn clear_log(&self) {
        self.log.lock().unwrap().clear();
    }
}

impl Drop for HttpsFixture {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

struct Request {
    method: String,
    path: String,
    host: String,
    user_agent: String,
}

fn read_request(r: &mut impl BufRead) -> io::Result<Option<Request>> {
    let mut raw = Vec::new();
    loop {
        let n = r.read_until(b'\n', &mut raw)?;
        if n == 0 {
            return Ok(None);
        }
        if raw.ends_with(b"\r\n\r\n") || raw.ends_with(b"\n\n") {
            break;
        }
        if raw.len() > 64 * 1024 {
            return Ok(None);
        }
    }
    let mut headers = [httparse::EMPTY_HEADER; 64];
    let mut req = httparse::Request::new(&mut headers);
    if !matches!(req.parse(&raw), Ok(httparse::Status::Complete(_))) {
        return Ok(None);
    }
    let header = |name: &str| {
        req.headers
            .iter()
            .find(|h| h.name.eq_ignore_ascii_case(name))
            .map(|h| String::from_utf8_lossy(h.value).into_owned())
            .unwrap_or_default()
    };
    Ok(Some(Request {
        method: req.method.unwrap_or("").to_string(),
        path: req.path.unwrap_or("/").to_string(),
        host: header("host"),
        user_agent: header("user-agent"),
    }))
}

fn status_text(code: u16) -> &'static str {
    match code {
        200 => "OK",
        301 => "Moved Permanently",
        302 => "Found",
        403 => "Forbidden",
        404 => "Not Found",
        503 => "Service Unavailable",
        _ => "Status",
    }
}

fn serve(
    tcp: TcpStream,
    tls: Arc<ServerConfig>,
    sites: &Sites,
    log: &Mutex<Vec<LogEntry>>,
    opts: &HttpsOptions,
) -> io::Result<()> {
    if let Some(n) = opts.send_buffer {
        socket2::SockRef::from(&tcp).set_send_buffer_size(n)?;
    }
    tcp.set_read_timeout(Some(Duration::from_secs(30)))?;
    let conn = ServerConnection::new(tls).map_err(io::Error::other)?;
    let stream = StreamOwned::new(conn, tcp);
    let mut r = BufReader::new(stream);
    let Some(req) = read_request(&mut r)? else {
        return Ok(());
    };
    let mut s = r.into_inner();
    let head_only = req.method == "HEAD";
    let mut entry = LogEntry {
        method: req.method.clone(),
        host: req.host.clone(),
        path: req.path.clone(),
        user_agent: req.user_agent.clone(),
        status: 404,
        body_bytes: 0,
    };
    let res = sites
        .get(&req.host, &req.path)
        .cloned()
        .unwrap_or(Resource::Status {
            code: 404,
            content_type: "text/html".into(),
            body: "<html><body>not found</body></html>".into(),
        });
    let result = respond(&mut s, &res, head_only, &mut entry);
    log.lock().unwrap().push(entry);
    result?;
    s.conn.send_close_notify();
    let _ = s.flush();
    Ok(())
}

fn respond(
    s: &mut StreamOwned<ServerConnection, TcpStream>,
    res: &Resource,
    head_only: bool,
    entry: &mut LogEntry,
) -> io::Result<()> {
    let simple = |code: u16, ctype: &str, body: &str, extra: &str| {
        (
            code,
            format!(
                "HTTP/1.1 {code} {}\r\nContent-Type: {ctype}\r\nContent-Length: {}\r\n{extra}Connection: close\r\n\r\n",
                status_text(code),
                body.len()
            ),
            body.to_string(),
        )
    };
    let (code, head, body) = match res {
        Resource::Html(b) => simple(200, "text/html; charset=utf-8", b, ""),
        Resource::Text(b) => simple(200, "text/plain", b, ""),
        Resource::Status {
            code,
            content_type,
            body,
        } => simple(*code, content_type, body, ""),
        Resource::Redirect(to) => simple(302, "text/html", "", &format!("Location: {to}\r\n")),
        Resource::File {
            len,
            content_length,
            chunked,
        } => {
            entry.status = 200;
            let framing = if *content_length {
                format!("Content-Length: {len}\r\n")
            } else if *chunked {
                "Transfer-Encoding: chunked\r\n".to_string()
            } else {
                String::new()
            };
            let head = format!(
                "HTTP/1.1 200 OK\r\nContent-Type: application/octet-stream\r\n{framing}Connection: close\r\n\r\n"
            );
            s.write_all(head.as_bytes())?;
            s.flush()?;
            if head_only {
                return Ok(());
            }
            let use_chunks = !*content_length && *chunked;
            let mut buf = vec![0u8; WRITE_CHUNK];
            let mut sent = 0u64;
            while sent < *len {
                let n = (*len - sent).min(WRITE_CHUNK as u64) as usize;
                fill(&mut buf[..n], sent);
                if use_chunks {
                    s.write_all(format!("{n:x}\r\n").as_bytes())?;
                }
                s.write_all(&buf[..n])?;
                if use_chunks {
                    s.write_all(b"\r\n")?;
                }
                s.flush()?;
                sent += n as u64;
                entry.body_bytes = sent;
            }
            if use_chunks {
                s.write_all(b"0\r\n\r\n")?;
            }
            return s.flush();
        }
    };
    entry.status = code;
    s.write_all(head.as_bytes())?;
    if !head_only {
        s.write_all(body.as_bytes())?;
        entry.body_bytes = body.len() as u64;
    }
    s.flush()
}
