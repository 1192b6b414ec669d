#![allow(dead_code)]

use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use optperf_fixture::{HttpsFixture, HttpsOptions, Sites, TestPki};
use optperf_probe::http::HttpClient;
use optperf_probe::tls;

pub const UA: &str = "optperf-test/1.0 (+https://research.example/optperf)";

pub struct Env {
    pub pki: TestPki,
    pub ca: PathBuf,
    pub server: HttpsFixture,
    pub client: HttpClient,
    _dir: tempfile::TempDir,
}

impl Env {
    pub fn ip(&self) -> IpAddr {
        self.server.addr().ip()
    }

    pub fn port(&self) -> u16 {
        self.server.addr().port()
    }

    pub fn url(&self, host: &str, path: &str) -> url::Url {
        url::Url::parse(&format!("https://{host}:{}{path}", self.port())).unwrap()
    }
}

/// HTTPS fixture on a loopback address with certificates for `names`.
pub fn env(bind: &str, names: &[&str], sites: Sites, opts: HttpsOptions) -> Env {
    let pki = TestPki::new(names).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ca = dir.path().join("ca.pem");
    pki.write_ca(&ca).unwrap();
    let server = HttpsFixture::start(
        bind.parse::<SocketAddr>().unwrap(),
        pki.server_config(&[b"http/1.1"], false).unwrap(),
        Arc::new(sites),
        opts,
    )
    .unwrap();
    let client = HttpClient::new(
        tls::client_config(&[&ca], &[b"http/1.1"]).unwrap(),
        UA,
        Duration::from_secs(20),
    );
    Env {
        pki,
        ca,
        server,
        client,
        _dir: dir,
    }
}
