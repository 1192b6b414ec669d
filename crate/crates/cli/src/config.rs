//! Pipeline configuration: a TOML file, overridden by flags.

use std::collections::BTreeMap;
use std::net::IpAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use optperf_core::matrix::{default_matrix, matrix_from_names, ConfigName, OptionConfig};
use optperf_probe::crawl::CrawlSettings;
use optperf_probe::orchestrate::OrchestratorSettings;
use optperf_probe::quic::QuicAdapter;
use optperf_probe::scan::{ScanSettings, Termination};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const DEFAULT_USER_AGENT: &str =
    "optperf/0.1 (TCP option performance measurement; see https://optperf.invalid/about)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Label written into every record.
    pub vantage_point: String,
    pub user_agent: String,
    /// Every stage reads and writes its files here.
    pub output_dir: PathBuf,
    /// Domain list: one per line, or `rank,domain` rows.
    pub targets: Option<PathBuf>,
    /// prefix2as text or MRT RIB dump.
    pub prefix_table: Option<PathBuf>,
    /// CSV `asn,org_id,org_name`.
    pub as_orgs: Option<PathBuf>,
    /// CSV `org_id,group`.
    pub org_groups: Option<PathBuf>,
    /// Acknowledges that the targets may be probed. Required for any stage
    /// that sends traffic.
    pub authorized: bool,
    /// PEM files trusted in addition to the built-in roots.
    pub extra_ca_files: Vec<PathBuf>,
    /// Static name → address overrides consulted before DNS.
    pub hosts: BTreeMap<String, Vec<IpAddr>>,
    pub scan: ScanConfig,
    pub crawl: CrawlConfig,
    pub download: DownloadConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum TerminationMode {
    Rst,
    Fin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct ScanConfig {
    pub port: u16,
    pub timeout_ms: u64,
    pub retries: u32,
    /// Probes per second across all workers.
    pub rate_per_s: f64,
    pub in_flight: usize,
    pub termination: TerminationMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct CrawlConfig {
    pub max_depth: u32,
    pub max_pages: usize,
    /// Smallest qualifying file, bytes.
    pub min_size: u64,
    pub slack_bytes: u64,
    pub max_redirects: u32,
    pub port: u16,
    /// Domains crawled in parallel.
    pub workers: usize,
    /// Minimum pause between requests to one domain.
    pub request_gap_ms: u64,
    pub robots_agent: String,
    pub timeout_s: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub id: String,
    /// Argument vector; `{url}`, `{ip}`, `{host}`, `{port}`, `{path}`,
    /// `{exe}`, `{ca}`, `{ua}`, `{timeout_s}` and `adapter_vars` keys are
    /// substituted.
    pub command: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct DownloadConfig {
    /// Configuration names in execution order. Defaults to WARMUP, BL, ECN,
    /// SACK, WS, ALL and one QUIC entry per adapter.
    pub matrix: Option<Vec<String>>,
    pub runs_per_domain: u32,
    pub gap_ms: u64,
    pub timeout_s: u64,
    pub linger_ms: u64,
    pub capture_iface: Option<String>,
    pub snaplen: Option<u32>,
    /// Defaults to the built-in HTTP/3 client with CUBIC and NewReno.
    pub quic_adapters: Option<Vec<AdapterConfig>>,
    pub adapter_vars: BTreeMap<String, String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            vantage_point: "local".into(),
            user_agent: DEFAULT_USER_AGENT.into(),
            output_dir: PathBuf::from("optperf-out"),
            targets: None,
            prefix_table: None,
            as_orgs: None,
            org_groups: None,
            authorized: false,
            extra_ca_files: Vec::new(),
            hosts: BTreeMap::new(),
            scan: ScanConfig::default(),
            crawl: CrawlConfig::default(),
            download: DownloadConfig::default(),
        }
    }
}

impl Default for ScanConfig {
    fn default() -> Self {
        let s = ScanSettings::default();
        ScanConfig {
            port: s.port,
            timeout_ms: s.timeout.as_millis() as u64,
            retries: s.retries,
            rate_per_s: s.rate_per_s,
            in_flight: s.in_flight,
            termination: TerminationMode::Rst,
        }
    }
}

impl Default for CrawlConfig {
    fn default() -> Self {
        let s = CrawlSettings::default();
        CrawlConfig {
            max_depth: s.max_depth,
            max_pages: s.max_pages,
            min_size: s.min_size,
            slack_bytes: s.slack,
            max_redirects: s.max_redirects,
            port: s.port,
            workers: 8,
            request_gap_ms: s.request_gap.as_millis() as u64,
            robots_agent: s.robots_agent,
            timeout_s: 30,
        }
    }
}

impl Default for DownloadConfig {
    fn default() -> Self {
        let s = OrchestratorSettings::default();
        DownloadConfig {
            matrix: None,
            runs_per_domain: 1,
            gap_ms: s.gap.as_millis() as u64,
            timeout_s: s.timeout.as_secs(),
            linger_ms: s.linger.as_millis() as u64,
            capture_iface: s.capture_iface,
            snaplen: s.snaplen,
            quic_adapters: None,
            adapter_vars: BTreeMap::new(),
        }
    }
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<PipelineConfig, CliError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| bad(format!("{}: {e}", path.display())))
    }

    pub fn schema() -> String {
        let schema = schemars::schema_for!(PipelineConfig);
        serde_json::to_string_pretty(&schema).expect("schema serializes")
    }

    pub fn scan_settings(&self) -> ScanSettings {
        ScanSettings {
            port: self.scan.port,
            timeout: Duration::from_millis(self.scan.timeout_ms),
            retries: self.scan.retries,
            termination: match self.scan.termination {
                TerminationMode::Rst => Termination::Rst,
                TerminationMode::Fin => Termination::Fin,
            },
            rate_per_s: self.scan.rate_per_s,
            in_flight: self.scan.in_flight,
        }
    }

    pub fn crawl_settings(&self) -> CrawlSettings {
        CrawlSettings {
            max_depth: self.crawl.max_depth,
            max_pages: self.crawl.max_pages,
            min_size: self.crawl.min_size,
            slack: self.crawl.slack_bytes,
            max_redirects: self.crawl.max_redirects,
            port: self.crawl.port,
            request_gap: Duration::from_millis(self.crawl.request_gap_ms),
            robots_agent: self.crawl.robots_agent.clone(),
            ..CrawlSettings::default()
        }
    }

    /// Configured adapters, or the two built-in HTTP/3 clients.
    pub fn adapters(&self) -> Vec<QuicAdapter> {
        if let Some(list) = &self.download.quic_adapters {
            return list
                .iter()
                .map(|a| QuicAdapter {
                    id: a.id.clone(),
                    command: a.command.clone(),
                })
                .collect();
        }
        [("quinn-cubic", "cubic"), ("quinn-newreno", "newreno")]
            .into_iter()
            .map(|(id, cc)| {
                let mut command: Vec<String> = [
                    "{exe}",
                    "quic-fetch",
                    "--url",
                    "{url}",
                    "--ip",
                    "{ip}",
                    "--cc",
                    cc,
                    "--user-agent",
                    "{ua}",
                    "--timeout-s",
                    "{timeout_s}",
                ]
                .iter()
                .map(|s| s.to_string())
                .collect();
                if !self.extra_ca_files.is_empty() {
                    command.extend(["--ca".to_string(), "{ca}".to_string()]);
                }
                QuicAdapter {
                    id: id.into(),
                    command,
                }
            })
            .collect()
    }

    /// Template variables shared by every adapter.
    pub fn adapter_vars(&self) -> BTreeMap<String, String> {
        let mut vars = BTreeMap::new();
        let exe = std::env::current_exe()
            .map(|p| p.display().to_string())
            .unwrap_or_else(|_| "optperf".into());
        vars.insert("exe".into(), exe);
        let ca: Vec<String> = self
            .extra_ca_files
            .iter()
            .map(|p| absolute(p).display().to_string())
            .collect();
        vars.insert("ca".into(), ca.join(","));
        vars.insert("ua".into(), self.user_agent.clone());
        vars.insert("timeout_s".into(), self.download.timeout_s.to_string());
        vars.extend(self.download.adapter_vars.clone());
        vars
    }

    pub fn matrix(&self) -> Result<Vec<OptionConfig>, CliError> {
        let ids: Vec<String> = self.adapters().into_iter().map(|a| a.id).collect();
        let m = match &self.download.matrix {
            Some(names) => {
                matrix_from_names(names).map_err(|e| bad(format!("download.matrix: {e}")))?
            }
            None => default_matrix(&ids),
        };
        for c in &m {
            if let ConfigName::Quic(id) = &c.name {
                if !ids.contains(id) {
                    return Err(bad(format!(
                        "download.matrix: no QUIC adapter with id {id:?}"
                    )));
                }
            }
        }
        Ok(m)
    }

    pub fn orchestrator_settings(&self) -> OrchestratorSettings {
        OrchestratorSettings {
            vantage_point: self.vantage_point.clone(),
            capture_dir: self.output_dir.join(crate::stages::CAPTURE_DIR),
            gap: Duration::from_millis(self.download.gap_ms),
            timeout: Duration::from_secs(self.download.timeout_s),
            linger: Duration::from_millis(self.download.linger_ms),
            capture_iface: self.download.capture_iface.clone(),
            snaplen: self.download.snaplen,
            quic_adapters: self.adapters(),
            adapter_vars: self.adapter_vars(),
        }
    }

    /// Checks everything that does not depend on the stage being run.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.vantage_point.trim().is_empty() {
            return Err(bad("vantage_point must not be empty"));
        }
        if self.user_agent.trim().is_empty() {
            return Err(bad("user_agent must not be empty"));
        }
        let inputs = [
            ("targets", &self.targets),
            ("prefix_table", &self.prefix_table),
            ("as_orgs", &self.as_orgs),
            ("org_groups", &self.org_groups),
        ];
        for (name, p) in inputs {
            if let Some(p) = p {
                if !p.is_file() {
                    return Err(bad(format!("{name}: {} does not exist", p.display())));
                }
            }
        }
        for p in &self.extra_ca_files {
            if !p.is_file() {
                return Err(bad(format!(
                    "extra_ca_files: {} does not exist",
                    p.display()
                )));
            }
        }
        if self.scan.rate_per_s.is_nan() || self.scan.rate_per_s <= 0.0 {
            return Err(bad("scan.rate_per_s must be positive"));
        }
        if self.scan.in_flight == 0 || self.crawl.workers == 0 {
            return Err(bad("scan.in_flight and crawl.workers must be at least 1"));
        }
        if self.download.runs_per_domain == 0 {
            return Err(bad("download.runs_per_domain must be at least 1"));
        }
        let mut ids = std::collections::BTreeSet::new();
        for a in self.adapters() {
            if a.command.is_empty() {
                return Err(bad(format!("adapter {:?} has an empty command", a.id)));
            }
            if !ids.insert(a.id.clone()) {
                return Err(bad(format!("duplicate adapter id {:?}", a.id)));
            }
        }
        self.matrix()?;
        check_writable(&self.output_dir)
    }

    pub fn require(&self, name: &str, p: &Option<PathBuf>) -> Result<PathBuf, CliError> {
        p.clone().ok_or_else(|| {
            bad(format!(
                "{name} is required for this stage (config key or flag)"
            ))
        })
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn check_writable(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| bad(format!("output_dir {}: {e}", dir.display())))?;
    let probe = dir.join(".optperf-write-test");
    std::fs::write(&probe, b"")
        .and_then(|_| std::fs::remove_file(&probe))
        .map_err(|e| bad(format!("output_dir {} is not writable: {e}", dir.display())))
}
