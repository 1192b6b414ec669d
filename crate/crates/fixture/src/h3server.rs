//! HTTP/3 server on quinn, serving the same sites as the HTTPS fixture.

use std::io;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use bytes::Bytes;
use quinn::crypto::rustls::QuicServerConfig;
use tokio::sync::oneshot;

use crate::pki::TestPki;
use crate::site::{fill, Resource, Sites};

const DATA_CHUNK: usize = 64 * 1024;

pub struct H3Fixture {
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    handle: Option<JoinHandle<()>>,
}

fn other<E: std::fmt::Display>(e: E) -> io::Error {
    io::Error::other(e.to_string())
}

impl H3Fixture {
    /// Binds a UDP socket on the calling thread's namespace and serves
    /// until dropped.
    pub fn start(bind: SocketAddr, pki: &TestPki, sites: Arc<Sites>) -> io::Result<H3Fixture> {
        let tls = pki.server_config(&[b"h3"], true)?;
        let crypto = QuicServerConfig::try_from(tls).map_err(other)?;
        let cfg = quinn::ServerConfig::with_crypto(Arc::new(crypto));
        let socket = std::net::UdpSocket::bind(bind)?;
        let addr = socket.local_addr()?;
        let (stop_tx, stop_rx) = oneshot::channel();
        let (ready_tx, ready_rx) = std::sync::mpsc::channel::<io::Result<()>>();
        let handle = std::thread::Builder::new()
            .name("h3-fixture".into())
            .spawn(move || {
                let rt = match tokio::runtime::Builder::new_current_thread()
                    .enable_all()
                    .build()
                {
                    Ok(rt) => rt,
                    Err(e) => {
                        let _ = ready_tx.send(Err(e));
                        return;
                    }
                };
                rt.block_on(async move {
                    let ep = match quinn::Endpoint::new(
                        quinn::EndpointConfig::default(),
                        Some(cfg),
                        socket,
                        Arc::new(quinn::TokioRuntime),
                    ) {
                        Ok(ep) => {
                            let _ = ready_tx.send(Ok(()));
                            ep
                        }
                        Err(e) => {
                            let _ = ready_tx.send(Err(e));
                            return;
                        }
                    };
                    let accept = async {
                        while let Some(inc) = ep.accept().await {
                            let sites = sites.clone();
                            tokio::spawn(async move {
                                if let Err(e) = serve(inc, sites).await {
                                    log::debug!("h3 fixture: {e}");
                                }
                            });
                        }
                    };
                    tokio::select! {
                        _ = accept => {}
                        _ = stop_rx => {}
                    }
                    ep.close(0u32.into(), b"shutdown");
                });
            })?;
        ready_rx.recv().map_err(other)??;
        Ok(H3Fixture {
            addr,
            stop: Some(stop_tx),
            handle: Some(handle),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }
}

impl Drop for H3Fixture {
    fn drop(&mut self) {
        if let Some(s) = self.stop.take() {
            let _ = s.send(());
        }
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

async fn serve(
    inc: quinn::Incoming,
    sites: Arc<Sites>,
) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    let conn = inc.await?;
    let mut h3c: h3::server::Connection<h3_quinn::Connection, Bytes> =
        h3::server::Connection::new(h3_quinn::Connection::new(conn)).await?;
    while let Some(resolver) = h3c.accept().await? {
        let (req, mut stream) = resolver.resolve_request().await?;
        let host = req
            .uri()
            .authority()
            .map(|a| a.host().to_string())
            .unwrap_or_default();
        let res = sites.get(&host, req.uri().path()).cloned();
        match res {
            Some(Resource::File { len, .. }) => {
                let resp = http::Response::builder()
                    .status(200)
                    .header("content-type", "application/octet-stream")
                    .header("content-length", len)
                    .body(())?;
                stream.send_response(resp).await?;
                let mut sent = 0u64;
                let mut buf = vec![0u8; DATA_CHUNK];
                while sent < len {
                    let n = (len - sent).min(DATA_CHUNK as u64) as usize;
                    fill(&mut buf[..n], sent);
                    stream.send_data(Bytes::copy_from_slice(&buf[..n])).await?;
                    sent += n as u64;
                }
            }
            Some(Resource::Html(b)) | Some(Resource::Text(b)) => {
                let resp = http::Response::builder().status(200).body(())?;
                stream.send_response(resp).await?;
                stream.send_data(Bytes::from(b)).await?;
            }
            _ => {
                let resp = http::Response::builder().status(404).body(())?;
                stream.send_response(resp).await?;
            }
        }
        stream.finish().await?;
    }
    Ok(())
}
