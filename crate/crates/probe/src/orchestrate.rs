//! Runs the download matrix for one target: per configuration a fresh
//! resolution, the client option settings, a capture and one download.

use std::collections::BTreeMap;
use std::io;
use std::net::IpAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use optperf_core::matrix::OptionConfig;
use optperf_core::record::{MeasurementRun, Outcome, RunEntry};
use optperf_core::Timestamp;
use optperf_netlab::sysctl::{self, Snapshot, SysctlGuard, TcpOptionSettings};
use optperf_netlab::{CaptureFilter, PacketCapture};
use thiserror::Error;
use url::Url;

use crate::crawl::CrawlTarget;
use crate::download::{forced_ip_download, DownloadResult};
use crate::http::HttpClient;
use crate::quic::{run_adapter, QuicAdapter};
use crate::resolve::Resolver;

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("cannot change TCP settings ({0}); run as root or with CAP_NET_ADMIN in this network namespace")]
    Privilege(io::Error),
    #[error("settings did not take effect: {0}")]
    NotApplied(String),
    #[error("capture unavailable: {0}")]
    Capture(io::Error),
    #[error("no QUIC adapter registered for {0:?}")]
    UnknownAdapter(String),
    #[error("bad target URL {0}")]
    BadUrl(String),
    #[error("I/O: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone)]
pub struct OrchestratorSettings {
    pub vantage_point: String,
    pub capture_dir: PathBuf,
    /// Pause between two downloads.
    pub gap: Duration,
    pub timeout: Duration,
    /// How long the capture keeps running after a download returns, to
    /// catch the teardown.
    pub linger: Duration,
    pub capture_iface: Option<String>,
    pub snaplen: Option<u32>,
    pub quic_adapters: Vec<QuicAdapter>,
    /// Extra template variables for the adapters.
    pub adapter_vars: BTreeMap<String, String>,
}

impl Default for OrchestratorSettings {
    fn default() -> Self {
        OrchestratorSettings {
            vantage_point: "local".into(),
            capture_dir: PathBuf::from("captures"),
            gap: Duration::from_secs(1),
            timeout: Duration::from_secs(300),
            linger: Duration::from_millis(200),
            capture_iface: None,
            snaplen: Some(256),
            quic_adapters: Vec::new(),
            adapter_vars: BTreeMap::new(),
        }
    }
}

/// Client settings for a configuration. Disabled ECN is 0 rather than the
/// kernel's passive default, so a disabled client never requests it.
pub fn tcp_settings(cfg: &OptionConfig) -> TcpOptionSettings {
    TcpOptionSettings {
        ecn: u8::from(cfg.ecn),
        sack: cfg.sack,
        window_scaling: cfg.ws,
        force_max_shift: cfg.ws && cfg.ws_shift == optperf_core::matrix::CLIENT_WS_SHIFT,
    }
}

/// Settings in force until dropped, when the prior values come back.
pub struct AppliedOptions {
    _guard: SysctlGuard,
}

/// Applies `cfg` on top of `baseline` and reads the values back.
pub fn configure_options(
    cfg: &OptionConfig,
    baseline: &Snapshot,
) -> Result<AppliedOptions, OrchestratorError> {
    let guard = SysctlGuard::new(&sysctl::OPTION_KNOBS).map_err(OrchestratorError::Privilege)?;
    apply_checked(cfg, baseline)?;
    Ok(AppliedOptions { _guard: guard })
}

fn apply_checked(cfg: &OptionConfig, baseline: &Snapshot) -> Result<(), OrchestratorError> {
    let s = tcp_settings(cfg);
    sysctl::apply(&s, baseline).map_err(|e| {
        if e.kind() == io::ErrorKind::PermissionDenied {
            OrchestratorError::Privilege(e)
        } else {
            OrchestratorError::Io(e)
        }
    })?;
    let want = [
        (sysctl::TCP_ECN, s.ecn.to_string()),
        (sysctl::TCP_SACK, u8::from(s.sack).to_string()),
        (
            sysctl::TCP_WINDOW_SCALING,
            u8::from(s.window_scaling).to_string(),
        ),
        (sysctl::TCP_TIMESTAMPS, "1".to_string()),
    ];
    for (k, v) in want {
        let got = sysctl::read(k)?;
        if got != v {
            return Err(OrchestratorError::NotApplied(format!(
                "{k}={got}, want {v}"
            )));
        }
    }
    if s.force_max_shift {
        let max: u64 = sysctl::read(sysctl::TCP_RMEM)?
            .split_whitespace()
            .nth(2)
            .and_then(|v| v.parse().ok())
            .unwrap_or(0);
        if max < sysctl::RMEM_FOR_MAX_SHIFT {
            return Err(OrchestratorError::NotApplied(format!("tcp_rmem max {max}")));
        }
    }
    Ok(())
}

pub struct Orchestrator<'a> {
    pub settings: OrchestratorSettings,
    pub resolver: &'a Resolver,
    pub http: &'a HttpClient,
}

fn capture_name(run_id: &str, idx: usize, cfg: &OptionConfig) -> String {
    let clean = |s: &str| {
        s.chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                    c
                } else {
                    '_'
                }
            })
            .collect::<String>()
    };
    format!(
        "{}_{idx:02}_{}.pcap",
        clean(run_id),
        clean(&cfg.name.to_string())
    )
}

impl<'a> Orchestrator<'a> {
    pub fn new(
        settings: OrchestratorSettings,
        resolver: &'a Resolver,
        http: &'a HttpClient,
    ) -> Orchestrator<'a> {
        Orchestrator {
            settings,
            resolver,
            http,
        }
    }

    fn adapter(&self, id: &str) -> Result<&QuicAdapter, OrchestratorError> {
        self.settings
            .quic_adapters
            .iter()
            .find(|a| a.id == id)
            .ok_or_else(|| OrchestratorError::UnknownAdapter(id.to_string()))
    }

    /// Checks that every QUIC configuration has an adapter.
    pub fn check_matrix(&self, matrix: &[OptionConfig]) -> Result<(), OrchestratorError> {
        for c in matrix {
            if let optperf_core::matrix::ConfigName::Quic(id) = &c.name {
                self.adapter(id)?;
            }
        }
        Ok(())
    }

    fn capture(
        &self,
        path: &Path,
        ip: IpAddr,
        port: u16,
    ) -> Result<PacketCapture, OrchestratorError> {
        PacketCapture::start(
            None,
            CaptureFilter {
                host: Some(ip),
                port: Some(port),
                iface: self.settings.capture_iface.clone(),
                snaplen: self.settings.snaplen,
            },
            path,
        )
        .map_err(OrchestratorError::Capture)
    }

    /// Downloads `target` once per matrix entry, in order. Per-entry
    /// failures are recorded; only missing privileges or capture support
    /// abort the run. TCP settings are restored before returning.
    pub fn run_measurement(
        &self,
        run_id: &str,
        target: &CrawlTarget,
        matrix: &[OptionConfig],
    ) -> Result<MeasurementRun, OrchestratorError> {
        self.check_matrix(matrix)?;
        let url = Url::parse(&target.file_url)
            .map_err(|_| OrchestratorError::BadUrl(target.file_url.clone()))?;
        let host = url
            .host_str()
            .ok_or_else(|| OrchestratorError::BadUrl(target.file_url.clone()))?
            .to_string();
        let port = url
            .port_or_known_default()
            .ok_or_else(|| OrchestratorError::BadUrl(target.file_url.clone()))?;
        std::fs::create_dir_all(&self.settings.capture_dir)?;
        let guard =
            SysctlGuard::new(&sysctl::OPTION_KNOBS).map_err(OrchestratorError::Privilege)?;
        let baseline = guard.snapshot().clone();
        let mut entries = Vec::with_capacity(matrix.len());
        for (idx, cfg) in matrix.iter().enumerate() {
            if idx > 0 {
                std::thread::sleep(self.settings.gap);
            }
            let start = Timestamp::now();
            let (ip, resolved_at) = match self.resolver.resolve_one(&host) {
                Ok(r) => r,
                Err(e) => {
                    entries.push(RunEntry {
                        config: cfg.clone(),
                        resolved_ip: None,
                        resolved_at: None,
                        capture: None,
                        start,
                        end: Timestamp::now(),
                        outcome: Outcome::DnsFail,
                        bytes_received: 0,
                        http_status: None,
                        detail: e.to_string(),
                    });
                    continue;
                }
            };
            if cfg.is_quic() {
                baseline.restore()?;
            } else {
                apply_checked(cfg, &baseline)?;
            }
            let path = self
                .settings
                .capture_dir
                .join(capture_name(run_id, idx, cfg));
            let cap = self.capture(&path, ip, port)?;
            let res = match &cfg.name {
                optperf_core::matrix::ConfigName::Quic(id) => {
                    match self
                        .adapter(id)?
                        .expand(&url, ip, &self.settings.adapter_vars)
                    {
                        Ok(argv) => run_adapter(&argv, self.settings.timeout),
                        Err(e) => DownloadResult {
                            outcome: Outcome::ConnectFail,
                            status: None,
                            bytes: 0,
                            detail: e.to_string(),
                        },
                    }
                }
                _ => {
                    let mut client = self.http.clone();
                    client.timeout = self.settings.timeout;
                    forced_ip_download(&client, &url, ip)
                }
            };
            std::thread::sleep(self.settings.linger);
            let stats = cap.stop().map_err(OrchestratorError::Capture)?;
            if stats.kernel_drops > 0 {
                log::warn!(
                    "{}: capture dropped {} packets",
                    path.display(),
                    stats.kernel_drops
                );
            }
            log::info!(
                "{run_id} {}: {} ({} bytes) {}",
                cfg.name,
                res.outcome,
                res.bytes,
                res.detail
            );
            entries.push(RunEntry {
                config: cfg.clone(),
                resolved_ip: Some(ip),
                resolved_at: Some(resolved_at),
                capture: Some(path),
                start,
                end: Timestamp::now(),
                outcome: res.outcome,
                bytes_received: res.bytes,
                http_status: res.status,
                detail: res.detail,
            });
        }
        guard.restore()?;
        Ok(MeasurementRun {
            run_id: run_id.to_string(),
            domain: target.domain.clone(),
            url: target.file_url.clone(),
            vantage_point: self.settings.vantage_point.clone(),
            entries,
        })
    }
}
