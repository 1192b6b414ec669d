//! The pipeline stages. Each reads the files of the stage before it from
//! the output directory and writes only its own.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::IpAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use optperf_core::attribution::{classify_domain, CdnGroup, OrgMap, PrefixTable};
use optperf_core::capture::{demux_flows, parse_capture_file, Flow, Transport};
use optperf_core::matrix::{ConfigName, OptionConfig};
use optperf_core::metrics::analyze_flow;
use optperf_core::record::{
    read_csv, write_csv, FailureRecord, IndicatorRecord, Outcome, RunManifest, FAILURE_COLUMNS,
    INDICATOR_COLUMNS,
};
use optperf_core::report::{build_report, default_pairs, write_report};
use optperf_probe::crawl::{CrawlFailure, CrawlTarget, Crawler, TARGET_COLUMNS};
use optperf_probe::http::HttpClient;
use optperf_probe::orchestrate::{tcp_settings, Orchestrator, OrchestratorError};
use optperf_probe::resolve::{CachingResolver, Resolver};
use optperf_probe::scan::{aggregate_deployment, scan_domains, OptionSupport, SCAN_COLUMNS};
use optperf_probe::tls;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::CliError;

pub const SCAN_CSV: &str = "scan.csv";
pub const SCAN_SUMMARY: &str = "scan_summary.json";
pub const TARGETS_CSV: &str = "targets.csv";
pub const CRAWL_FAILURES_CSV: &str = "crawl_failures.csv";
pub const MANIFEST: &str = "manifest.json";
pub const CAPTURE_DIR: &str = "captures";
pub const METRICS_CSV: &str = "metrics.csv";
pub const FAILURES_CSV: &str = "failures.csv";
pub const ATTRIBUTION_CSV: &str = "attribution.csv";
pub const REPORT_DIR: &str = "report";

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Stage(format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| io_err(path, e))
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<(), CliError> {
    let mut out = create(path)?;
    write_csv(&mut out, rows, header).map_err(|e| io_err(path, e))?;
    out.flush().map_err(|e| io_err(path, e))
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    read_csv(f).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), CliError> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, v).map_err(|e| io_err(path, e))?;
    out.write_all(b"\n").map_err(|e| io_err(path, e))?;
    out.flush().map_err(|e| io_err(path, e))
}

/// Domains from a list file: one per line or `rank,domain` rows. Blank
/// lines and `#` comments are skipped; duplicates keep the first position.
pub fn read_domains(path: &Path) -> Result<Vec<String>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        let d = line
            .rsplit(',')
            .next()
            .unwrap_or("")
            .trim()
            .trim_end_matches('.');
        if d.is_empty() {
            continue;
        }
        let d = d.to_ascii_lowercase();
        if seen.insert(d.clone()) {
            out.push(d);
        }
    }
    Ok(out)
}

pub fn resolver(cfg: &PipelineConfig) -> Resolver {
    let mut r = Resolver::new();
    for (host, addrs) in &cfg.hosts {
        r.add_override(host, addrs.clone());
    }
    r
}

pub fn http_client(cfg: &PipelineConfig, timeout: Duration) -> Result<HttpClient, CliError> {
    let tls = tls::client_config(&cfg.extra_ca_files, &[b"http/1.1"])
        .map_err(|e| CliError::Config(format!("extra_ca_files: {e}")))?;
    Ok(HttpClient::new(tls, &cfg.user_agent, timeout))
}

fn targets_list(cfg: &PipelineConfig) -> Result<Vec<String>, CliError> {
    let path = cfg.require("targets", &cfg.targets)?;
    read_domains(&path)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageSummary {
    pub lines: Vec<String>,
    pub written: Vec<PathBuf>,
}

impl StageSummary {
    fn note(&mut self, s: impl Into<String>) {
        self.lines.push(s.into());
    }
}

pub fn scan(cfg: &PipelineConfig) -> Result<StageSummary, CliError> {
    let domains = targets_list(cfg)?;
    let results = scan_domains(&domains, &resolver(cfg), &cfg.scan_settings()).map_err(|e| {
        CliError::Stage(format!("scan: {e} (raw sockets need root or CAP_NET_RAW)"))
    })?;
    let mut s = StageSummary::default();
    let csv = cfg.output_dir.join(SCAN_CSV);
    write_rows(&csv, &results, &SCAN_COLUMNS)?;
    let summary = cfg.output_dir.join(SCAN_SUMMARY);
    let json = match aggregate_deployment(&results) {
        Ok(stats) => serde_json::to_value(&stats).expect("plain data"),
        Err(e) => serde_json::json!({ "total": results.len(), "ok": 0, "error": e.to_string() }),
    };
    write_json(&summary, &json)?;
    let ok = results
        .iter()
        .filter(|r| r.ip.is_some() && r.status == optperf_probe::scan::ProbeStatus::Ok)
        .count();
    s.note(format!("scan: {ok} of {} domains answered", results.len()));
    s.written = vec![csv, summary];
    Ok(s)
}

pub fn read_scan(path: &Path) -> Result<Vec<OptionSupport>, CliError> {
    read_rows(path)
}

pub fn crawl(cfg: &PipelineConfig) -> Result<StageSummary, CliError> {
    let domains = targets_list(cfg)?;
    let client = http_client(cfg, Duration::from_secs(cfg.crawl.timeout_s))?;
    let res = CachingResolver::new(resolver(cfg), Duration::from_secs(300));
    let crawler = Crawler::new(&client, &res, cfg.crawl_settings());
    let mut targets = Vec::new();
    let mut failures = Vec::new();
    for (domain, r) in crawler.crawl_all(&domains, cfg.crawl.workers) {
        match r {
            Ok(t) => targets.push(t),
            Err(e) => failures.push(CrawlFailure {
                domain,
                reason: e.to_string(),
            }),
        }
    }
    let t = cfg.output_dir.join(TARGETS_CSV);
    let f = cfg.output_dir.join(CRAWL_FAILURES_CSV);
    write_rows(&t, &targets, &TARGET_COLUMNS)?;
    write_rows(&f, &failures, &["domain", "reason"])?;
    Ok(StageSummary {
        lines: vec![format!(
            "crawl: {} targets found, {} domains without a qualifying file",
            targets.len(),
            failures.len()
        )],
        written: vec![t, f],
    })
}

pub fn read_targets(path: &Path) -> Result<Vec<CrawlTarget>, CliError> {
    read_rows(path)
}

fn relative_to(p: &Path, base: &Path) -> PathBuf {
    p.strip_prefix(base)
        .map(Path::to_path_buf)
        .unwrap_or_else(|_| p.to_path_buf())
}

pub fn download(cfg: &PipelineConfig) -> Result<StageSummary, CliError> {
    let targets = read_targets(&cfg.output_dir.join(TARGETS_CSV))?;
    let matrix = cfg.matrix()?;
    let client = http_client(cfg, Duration::from_secs(cfg.download.timeout_s))?;
    let res = resolver(cfg);
    let orch = Orchestrator::new(cfg.orchestrator_settings(), &res, &client);
    let mut manifest = RunManifest {
        vantage_point: cfg.vantage_point.clone(),
        runs: Vec::new(),
    };
    let path = cfg.output_dir.join(MANIFEST);
    for t in &targets {
        for k in 0..cfg.download.runs_per_domain {
            let run_id = format!("{}:{}:{k}", cfg.vantage_point, t.domain);
            let mut run = orch
                .run_measurement(&run_id, t, &matrix)
                .map_err(|e| match e {
                    OrchestratorError::UnknownAdapter(_) | OrchestratorError::BadUrl(_) => {
                        CliError::Config(e.to_string())
                    }
                    _ => CliError::Stage(format!("download: {e}")),
                })?;
            for e in &mut run.entries {
                if let Some(c) = &mut e.capture {
                    *c = relative_to(c, &cfg.output_dir);
                }
            }
            manifest.runs.push(run);
            // Rewritten after every run so an interrupted stage keeps its
            // finished runs.
            write_json(&path, &manifest)?;
        }
    }
    write_json(&path, &manifest)?;
    let ok = manifest
        .runs
        .iter()
        .flat_map(|r| &r.entries)
        .filter(|e| e.outcome == Outcome::Ok)
        .count();
    let total: usize = manifest.runs.iter().map(|r| r.entries.len()).sum();
    Ok(StageSummary {
        lines: vec![format!(
            "download: {} runs, {ok} of {total} downloads completed",
            manifest.runs.len()
        )],
        written: vec![path, cfg.output_dir.join(CAPTURE_DIR)],
    })
}

pub fn read_manifest(path: &Path) -> Result<RunManifest, CliError> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    serde_json::from_reader(std::io::BufReader::new(f)).map_err(|e| io_err(path, e))
}

/// The measured connection: the largest flow of the right transport that
/// involves `target` (when known).
pub fn select_flow(flows: &[Flow], target: Option<(IpAddr, u16)>, quic: bool) -> Option<&Flow> {
    let want = if quic { Transport::Udp } else { Transport::Tcp };
    flows
        .iter()
        .filter(|f| f.transport() == want)
        .filter(|f| {
            target.is_none_or(|(ip, port)| {
                let r = f.responder();
                let i = f.initiator;
                (r.ip() == ip && r.port() == port) || (i.ip() == ip && i.port() == port)
            })
        })
        .max_by_key(|f| (f.syn_seen, f.ip_bytes()))
}

/// Indicators of the measured connection in one capture file.
pub fn analyze_capture(
    path: &Path,
    target: Option<(IpAddr, u16)>,
    quic: bool,
) -> Result<optperf_core::metrics::PerfIndicators, String> {
    let parsed = parse_capture_file(path).map_err(|e| e.to_string())?;
    let flows = demux_flows(parsed.packets);
    let flow = select_flow(&flows, target, quic)
        .ok_or_else(|| "no matching flow in capture".to_string())?;
    analyze_flow(flow).map_err(|e| e.to_string())
}

fn url_port(url: &str) -> u16 {
    url::Url::parse(url)
        .ok()
        .and_then(|u| u.port_or_known_default())
        .unwrap_or(443)
}

/// Every manifest entry becomes one indicator row or one failure row.
pub fn analyze_manifest(
    manifest: &RunManifest,
    base: &Path,
) -> (Vec<IndicatorRecord>, Vec<FailureRecord>) {
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for run in &manifest.runs {
        let port = url_port(&run.url);
        for e in &run.entries {
            let fail = |outcome, reason: String| FailureRecord {
                run_id: run.run_id.clone(),
                domain: run.domain.clone(),
                vantage_point: run.vantage_point.clone(),
                config: e.config.name.clone(),
                target_ip: e.resolved_ip,
                outcome,
                reason,
            };
            if e.outcome != Outcome::Ok {
                failures.push(fail(e.outcome, e.detail.clone()));
                continue;
            }
            let Some(cap) = &e.capture else {
                failures.push(fail(Outcome::AnalysisFail, "no capture recorded".into()));
                continue;
            };
            let path = base.join(cap);
            let target = e.resolved_ip.map(|ip| (ip, port));
            match analyze_capture(&path, target, e.config.is_quic()) {
                Ok(ind) => rows.push(IndicatorRecord::new(
                    &run.run_id,
                    e.config.name.clone(),
                    &run.domain,
                    e.resolved_ip,
                    &run.vantage_point,
                    &ind,
                )),
                Err(reason) => failures.push(fail(
                    Outcome::AnalysisFail,
                    format!("{}: {reason}", cap.display()),
                )),
            }
        }
    }
    (rows, failures)
}

/// Configuration encoded in a capture file name (`..._<idx>_<CONFIG>.pcap`).
pub fn config_from_file_name(path: &Path) -> Option<ConfigName> {
    let stem = path.file_stem()?.to_str()?;
    if let Some(i) = stem.rfind("_QUIC_") {
        return Some(ConfigName::Quic(stem[i + 6..].to_string()));
    }
    stem.rsplit('_').next()?.parse().ok()
}

/// Analyses every `.pcap` in `dir`, one row per capture, sorted by name.
/// Run and domain come from the file name.
pub fn analyze_directory(
    dir: &Path,
    vantage_point: &str,
) -> Result<(Vec<IndicatorRecord>, Vec<FailureRecord>), CliError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pcap" || x == "cap"))
        .collect();
    files.sort();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for p in files {
        let name = p
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("capture")
            .to_string();
        let config = config_from_file_name(&p).unwrap_or(ConfigName::Bl);
        match analyze_capture(&p, None, config.is_quic()) {
            Ok(ind) => rows.push(IndicatorRecord::new(
                &name,
                config,
                &name,
                None,
                vantage_point,
                &ind,
            )),
            Err(reason) => failures.push(FailureRecord {
                run_id: name.clone(),
                domain: name,
                vantage_point: vantage_point.to_string(),
                config,
                target_ip: None,
                outcome: Outcome::AnalysisFail,
                reason,
            }),
        }
    }
    Ok((rows, failures))
}

pub fn analyze(cfg: &PipelineConfig, captures: Option<&Path>) -> Result<StageSummary, CliError> {
    let (rows, failures) = match captures {
        Some(dir) => analyze_directory(dir, &cfg.vantage_point)?,
        None => {
            let path = cfg.output_dir.join(MANIFEST);
            let m = read_manifest(&path)?;
            analyze_manifest(&m, &cfg.output_dir)
        }
    };
    let mp = cfg.output_dir.join(METRICS_CSV);
    let fp = cfg.output_dir.join(FAILURES_CSV);
    write_rows(&mp, &rows, &INDICATOR_COLUMNS)?;
    write_rows(&fp, &failures, &FAILURE_COLUMNS)?;
    Ok(StageSummary {
        lines: vec![format!(
            "analyze: {} indicator rows, {} failures",
            rows.len(),
            failures.len()
        )],
        written: vec![mp, fp],
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributionRow {
    pub domain: String,
    pub group: CdnGroup,
    pub ambiguous: bool,
    pub mapped: usize,
    pub unmapped: usize,
    /// Origin ASNs separated by spaces.
    pub asns: String,
}

pub const ATTRIBUTION_COLUMNS: [&str; 6] =
    ["domain", "group", "ambiguous", "mapped", "unmapped", "asns"];

/// Addresses seen per domain in the manifest, else in the target list.
fn domain_addresses(cfg: &PipelineConfig) -> Result<BTreeMap<String, BTreeSet<IpAddr>>, CliError> {
    let mut out: BTreeMap<String, BTreeSet<IpAddr>> = BTreeMap::new();
    let mp = cfg.output_dir.join(MANIFEST);
    if mp.exists() {
        for run in read_manifest(&mp)?.runs {
            let set = out.entry(run.domain.clone()).or_default();
            set.extend(run.entries.iter().filter_map(|e| e.resolved_ip));
        }
    }
    let tp = cfg.output_dir.join(TARGETS_CSV);
    if tp.exists() {
        for t in read_targets(&tp)? {
            out.entry(t.domain).or_default().insert(t.resolved_ip);
        }
    }
    if out.is_empty() {
        return Err(CliError::Stage(format!(
            "attribute: neither {} nor {} found in {}",
            MANIFEST,
            TARGETS_CSV,
            cfg.output_dir.display()
        )));
    }
    Ok(out)
}

pub fn load_org_map(as_orgs: &Path, groups: &Path) -> Result<OrgMap, CliError> {
    let mut orgs = OrgMap::new();
    let f = File::open(as_orgs).map_err(|e| io_err(as_orgs, e))?;
    orgs.read_as_orgs(f).map_err(|e| io_err(as_orgs, e))?;
    let f = File::open(groups).map_err(|e| io_err(groups, e))?;
    orgs.read_groups(f).map_err(|e| io_err(groups, e))?;
    Ok(orgs)
}

pub fn attribute(cfg: &PipelineConfig) -> Result<StageSummary, CliError> {
    let table_path = cfg.require("prefix_table", &cfg.prefix_table)?;
    let orgs_path = cfg.require("as_orgs", &cfg.as_orgs)?;
    let groups_path = cfg.require("org_groups", &cfg.org_groups)?;
    let (table, stats) = PrefixTable::load(&table_path).map_err(|e| io_err(&table_path, e))?;
    let orgs = load_org_map(&orgs_path, &groups_path)?;
    let mut rows = Vec::new();
    let mut skipped = 0;
    for (domain, addrs) in domain_addresses(cfg)? {
        let addrs: Vec<IpAddr> = addrs.into_iter().collect();
        match classify_domain(&domain, &addrs, &table, &orgs) {
            Ok(a) => rows.push(AttributionRow {
                domain: a.domain,
                group: a.group,
                ambiguous: a.ambiguous,
                mapped: a.mapped,
                unmapped: a.unmapped,
                asns: a
                    .asns
                    .iter()
                    .map(u32::to_string)
                    .collect::<Vec<_>>()
                    .join(" "),
            }),
            Err(e) => {
                log::warn!("{domain}: {e}");
                skipped += 1;
            }
        }
    }
    let path = cfg.output_dir.join(ATTRIBUTION_CSV);
    write_rows(&path, &rows, &ATTRIBUTION_COLUMNS)?;
    let mut s = StageSummary::default();
    s.note(format!(
        "attribute: {} domains classified ({} prefixes loaded, {:?}), {skipped} skipped",
        rows.len(),
        table.len(),
        stats
    ));
    s.written.push(path);
    Ok(s)
}

pub fn read_groups(path: &Path) -> Result<HashMap<String, CdnGroup>, CliError> {
    let rows: Vec<AttributionRow> = read_rows(path)?;
    Ok(rows.into_iter().map(|r| (r.domain, r.group)).collect())
}

pub fn report(cfg: &PipelineConfig, metrics: Option<&Path>) -> Result<StageSummary, CliError> {
    let mp = metrics.map_or_else(|| cfg.output_dir.join(METRICS_CSV), Path::to_path_buf);
    let records: Vec<IndicatorRecord> = read_rows(&mp)?;
    let ap = cfg.output_dir.join(ATTRIBUTION_CSV);
    let groups = if ap.exists() {
        read_groups(&ap)?
    } else {
        log::info!("{} not found; every domain counts as Others", ap.display());
        HashMap::new()
    };
    let quic: BTreeSet<String> = records
        .iter()
        .filter_map(|r| match &r.config {
            ConfigName::Quic(id) => Some(id.clone()),
            _ => None,
        })
        .collect();
    // QUIC clients in matrix order when the configuration names them.
    let order: Vec<String> = cfg
        .matrix()
        .map(|m| {
            m.iter()
                .filter_map(|c| match &c.name {
                    ConfigName::Quic(id) if quic.contains(id) => Some(id.clone()),
                    _ => None,
                })
                .collect()
        })
        .unwrap_or_default();
    let mut ids = order.clone();
    ids.extend(quic.into_iter().filter(|q| !order.contains(q)));
    let r = build_report(&records, &groups, &default_pairs(&ids));
    let dir = cfg.output_dir.join(REPORT_DIR);
    let written = write_report(&dir, &r).map_err(|e| io_err(&dir, e))?;
    Ok(StageSummary {
        lines: vec![format!(
            "report: {} records, {} bucket rows, {} speed-ups skipped",
            r.records,
            r.buckets.len(),
            r.skipped_speedups
        )],
        written,
    })
}

/// Human-readable plan of the network actions of `stage`; sends nothing.
pub fn plan(cfg: &PipelineConfig, stage: &str) -> Result<Vec<String>, CliError> {
    let mut out = Vec::new();
    match stage {
        "scan" => {
            let domains = targets_list(cfg)?;
            let s = cfg.scan_settings();
            out.push(format!(
                "scan: resolve {} domains and send one SYN (ECN, SACK-permitted, timestamps, WS 14) to port {} of each, at most {}/s, {} in flight, up to {} retries after {:?}; replies answered with {:?}; no payload is sent",
                domains.len(), s.port, s.rate_per_s, s.in_flight, s.retries, s.timeout, s.termination
            ));
            out.extend(domains.iter().map(|d| format!("  {d}")));
        }
        "crawl" => {
            let domains = targets_list(cfg)?;
            let s = cfg.crawl_settings();
            out.push(format!(
                "crawl: fetch robots.txt and crawl https://<domain>:{}/ for {} domains ({} workers), depth ≤ {}, ≤ {} pages per domain, looking for a file ≥ {} bytes; user agent {:?}",
                s.port, domains.len(), cfg.crawl.workers, s.max_depth, s.max_pages, s.min_size, cfg.user_agent
            ));
            out.extend(domains.iter().map(|d| format!("  {d}")));
        }
        "download" => {
            let matrix = cfg.matrix()?;
            let tp = cfg.output_dir.join(TARGETS_CSV);
            let targets = if tp.exists() {
                read_targets(&tp)?
            } else {
                Vec::new()
            };
            out.push(format!(
                "download: {} targets from {} × {} runs × {} configurations, {} ms apart, each captured to {}",
                targets.len(),
                tp.display(),
                cfg.download.runs_per_domain,
                matrix.len(),
                cfg.download.gap_ms,
                cfg.output_dir.join(CAPTURE_DIR).display()
            ));
            for c in &matrix {
                out.push(format!("  {}", plan_config(cfg, c)));
            }
            out.extend(
                targets
                    .iter()
                    .map(|t| format!("  {} {}", t.domain, t.file_url)),
            );
        }
        _ => {}
    }
    Ok(out)
}

fn plan_config(cfg: &PipelineConfig, c: &OptionConfig) -> String {
    match &c.name {
        ConfigName::Quic(id) => {
            let cmd = cfg
                .adapters()
                .into_iter()
                .find(|a| &a.id == id)
                .map(|a| a.command.join(" "))
                .unwrap_or_default();
            format!("{}: run `{cmd}` with TCP settings restored", c.name)
        }
        _ => {
            let t = tcp_settings(c);
            format!(
                "{}: net.ipv4.tcp_ecn={} tcp_sack={} tcp_window_scaling={}{}",
                c.name,
                t.ecn,
                u8::from(t.sack),
                u8::from(t.window_scaling),
                if t.force_max_shift {
                    " (tcp_rmem max raised for shift 14)"
                } else {
                    ""
                }
            )
        }
    }
}
