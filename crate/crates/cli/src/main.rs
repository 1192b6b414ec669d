use std::net::IpAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use optperf_cli::config::{PipelineConfig, TerminationMode};
use optperf_cli::stages::{self, StageSummary};
use optperf_cli::{touches_network, CliError};
use optperf_probe::quic::{
    h3_fetch, Congestion, H3Fetch, QuicError, EXIT_CONNECT, EXIT_HTTP_ERROR,
};

/// Measures how TCP options (ECN, SACK, window scaling) and QUIC affect
/// download performance.
#[derive(Parser, Debug)]
#[command(name = "optperf", version, about, propagate_version = true)]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(short, long, global = true, env = "OPTPERF_CONFIG")]
    config: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
    /// Print the JSON schema of the configuration file and exit.
    #[arg(long)]
    config_schema: bool,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args, Debug, Default)]
struct Common {
    #[arg(long, global = true, env = "OPTPERF_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true, env = "OPTPERF_VANTAGE_POINT")]
    vantage_point: Option<String>,
    #[arg(long, global = true, env = "OPTPERF_USER_AGENT")]
    user_agent: Option<String>,
    /// Domain list (one per line or rank,domain).
    #[arg(long, global = true)]
    targets: Option<PathBuf>,
    #[arg(long, global = true)]
    prefix_table: Option<PathBuf>,
    #[arg(long, global = true)]
    as_orgs: Option<PathBuf>,
    #[arg(long, global = true)]
    org_groups: Option<PathBuf>,
    /// Extra trusted CA (PEM); repeatable.
    #[arg(long = "ca-file", global = true)]
    ca_files: Vec<PathBuf>,
    /// Address override NAME=IP[,IP...]; repeatable.
    #[arg(long = "host", global = true, value_parser = parse_host)]
    hosts: Vec<(String, Vec<IpAddr>)>,
    /// Confirms permission to send traffic to the targets.
    #[arg(long, global = true)]
    i_have_authorization: bool,
    /// Print the planned network actions and exit without sending packets.
    #[arg(long, global = true)]
    dry_run: bool,
}

fn parse_host(s: &str) -> Result<(String, Vec<IpAddr>), String> {
    let (name, ips) = s.split_once('=').ok_or("expected NAME=IP[,IP...]")?;
    let ips = ips
        .split(',')
        .map(|i| i.trim().parse::<IpAddr>().map_err(|e| format!("{i}: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((name.trim().to_ascii_lowercase(), ips))
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Probe each target's SYN-ACK for WS, SACK and ECN support.
    Scan(ScanArgs),
    /// Find a large downloadable file per domain.
    Crawl(CrawlArgs),
    /// Download every target once per option configuration, capturing packets.
    Download(DownloadArgs),
    /// Compute performance indicators from the captures.
    Analyze(AnalyzeArgs),
    /// Map targets to CDN groups.
    Attribute,
    /// Speed-up buckets, CDFs and counts.
    Report(ReportArgs),
    /// Run every stage in order.
    Pipeline(PipelineArgs),
    /// Built-in HTTP/3 client used as a QUIC adapter.
    #[command(hide = true)]
    QuicFetch(QuicFetchArgs),
}

#[derive(Args, Debug, Default)]
struct ScanArgs {
    #[arg(long)]
    port: Option<u16>,
    /// Probes per second.
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long)]
    in_flight: Option<usize>,
    #[arg(long)]
    timeout_ms: Option<u64>,
    #[arg(long)]
    retries: Option<u32>,
    #[arg(long, value_parser = ["rst", "fin"])]
    termination: Option<String>,
}

#[derive(Args, Debug, Default)]
struct CrawlArgs {
    #[arg(long)]
    max_depth: Option<u32>,
    #[arg(long)]
    max_pages: Option<usize>,
    #[arg(long)]
    min_size: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    crawl_port: Option<u16>,
}

#[derive(Args, Debug, Default)]
struct DownloadArgs {
    /// Comma-separated configuration names, e.g. WARMUP,BL,WS,QUIC:quinn-cubic.
    #[arg(long, value_delimiter = ',')]
    matrix: Option<Vec<String>>,
    #[arg(long)]
    runs: Option<u32>,
    #[arg(long)]
    gap_ms: Option<u64>,
    #[arg(long)]
    timeout_s: Option<u64>,
    #[arg(long)]
    capture_iface: Option<String>,
}

#[derive(Args, Debug, Default)]
struct AnalyzeArgs {
    /// Analyse every pcap in this directory instead of the manifest.
    #[arg(long)]
    captures: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct ReportArgs {
    /// Metrics CSV to read instead of <output_dir>/metrics.csv.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct PipelineArgs {
    #[command(flatten)]
    scan: ScanArgs,
    #[command(flatten)]
    crawl: CrawlArgs,
    #[command(flatten)]
    download: DownloadArgs,
    /// Skip the scan stage.
    #[arg(long)]
    skip_scan: bool,
}

#[derive(Args, Debug)]
struct QuicFetchArgs {
    #[arg(long)]
    url: url::Url,
    #[arg(long)]
    ip: IpAddr,
    /// Comma-separated PEM files.
    #[arg(long, value_delimiter = ',')]
    ca: Vec<PathBuf>,
    #[arg(long, default_value = "cubic")]
    cc: Congestion,
    #[arg(long, default_value = optperf_cli::config::DEFAULT_USER_AGENT)]
    user_agent: String,
    #[arg(long, default_value_t = 300)]
    timeout_s: u64,
}

fn apply_common(cfg: &mut PipelineConfig, c: &Common) {
    if let Some(v) = &c.output_dir {
        cfg.output_dir = v.clone();
    }
    if let Some(v) = &c.vantage_point {
        cfg.vantage_point = v.clone();
    }
    if let Some(v) = &c.user_agent {
        cfg.user_agent = v.clone();
    }
    for (slot, v) in [
        (&mut cfg.targets, &c.targets),
        (&mut cfg.prefix_table, &c.prefix_table),
        (&mut cfg.as_orgs, &c.as_orgs),
        (&mut cfg.org_groups, &c.org_groups),
    ] {
        if v.is_some() {
            *slot = v.clone();
        }
    }
    cfg.extra_ca_files.extend(c.ca_files.iter().cloned());
    for (h, ips) in &c.hosts {
        cfg.hosts.insert(h.clone(), ips.clone());
    }
    cfg.authorized |= c.i_have_authorization;
}

fn apply_scan(cfg: &mut PipelineConfig, a: &ScanArgs) {
    let s = &mut cfg.scan;
    s.port = a.port.unwrap_or(s.port);
    s.rate_per_s = a.rate.unwrap_or(s.rate_per_s);
    s.in_flight = a.in_flight.unwrap_or(s.in_flight);
    s.timeout_ms = a.timeout_ms.unwrap_or(s.timeout_ms);
    s.retries = a.retries.unwrap_or(s.retries);
    match a.termination.as_deref() {
        Some("fin") => s.termination = TerminationMode::Fin,
        Some("rst") => s.termination = TerminationMode::Rst,
        _ => {}
    }
}

fn apply_crawl(cfg: &mut PipelineConfig, a: &CrawlArgs) {
    let c = &mut cfg.crawl;
    c.max_depth = a.max_depth.unwrap_or(c.max_depth);
    c.max_pages = a.max_pages.unwrap_or(c.max_pages);
    c.min_size = a.min_size.unwrap_or(c.min_size);
    c.workers = a.workers.unwrap_or(c.workers);
    c.port = a.crawl_port.unwrap_or(c.port);
}

fn apply_download(cfg: &mut PipelineConfig, a: &DownloadArgs) {
    let d = &mut cfg.download;
    if a.matrix.is_some() {
        d.matrix = a.matrix.clone();
    }
    d.runs_per_domain = a.runs.unwrap_or(d.runs_per_domain);
    d.gap_ms = a.gap_ms.unwrap_or(d.gap_ms);
    d.timeout_s = a.timeout_s.unwrap_or(d.timeout_s);
    if a.capture_iface.is_some() {
        d.capture_iface = a.capture_iface.clone();
    }
}

fn quic_fetch(a: QuicFetchArgs) -> ExitCode {
    let f = H3Fetch {
        url: a.url,
        ip: a.ip,
        ca_files: a.ca,
        congestion: a.cc,
        user_agent: a.user_agent,
        timeout: Duration::from_secs(a.timeout_s),
    };
    match h3_fetch(&f) {
        Ok((status, bytes)) => {
            println!("status={status}");
            println!("bytes={bytes}");
            if status < 400 {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_HTTP_ERROR as u8)
            }
        }
        Err(e) => {
            eprintln!("quic-fetch: {e}");
            let code = match e {
                QuicError::Setup(_) | QuicError::Connect(_) => EXIT_CONNECT,
                QuicError::Http(_) | QuicError::Timeout => EXIT_HTTP_ERROR,
            };
            ExitCode::from(code as u8)
        }
    }
}

fn run_stage(
    name: &str,
    f: impl FnOnce() -> Result<StageSummary, CliError>,
) -> Result<(), CliError> {
    log::info!("stage {name}");
    let s = f()?;
    for l in &s.lines {
        println!("{l}");
    }
    for p in &s.written {
        log::debug!("wrote {}", p.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.config_schema {
        println!("{}", PipelineConfig::schema());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(CliError::Config("no subcommand given; see --help".into()));
    };
    if let Command::QuicFetch(_) = command {
        unreachable!("handled in main");
    }
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    apply_common(&mut cfg, &cli.common);
    let stage = match &command {
        Command::Scan(a) => {
            apply_scan(&mut cfg, a);
            "scan"
        }
        Command::Crawl(a) => {
            apply_crawl(&mut cfg, a);
            "crawl"
        }
        Command::Download(a) => {
            apply_download(&mut cfg, a);
            "download"
        }
        Command::Analyze(_) => "analyze",
        Command::Attribute => "attribute",
        Command::Report(_) => "report",
        Command::Pipeline(a) => {
            apply_scan(&mut cfg, &a.scan);
            apply_crawl(&mut cfg, &a.crawl);
            apply_download(&mut cfg, &a.download);
            "pipeline"
        }
        Command::QuicFetch(_) => unreachable!(),
    };
    cfg.validate()?;
    if cli.common.dry_run {
        let stages: &[&str] = if stage == "pipeline" {
            &["scan", "crawl", "download"]
        } else {
            &[stage]
        };
        for s in stages {
            if *s == "scan" && matches!(&command, Command::Pipeline(a) if a.skip_scan) {
                continue;
            }
            for line in stages::plan(&cfg, s)? {
                println!("{line}");
            }
        }
        println!("dry run: nothing sent");
        return Ok(());
    }
    if touches_network(stage) && !cfg.authorized {
        return Err(CliError::Config(format!(
            "`{stage}` sends traffic to third-party hosts; confirm you are authorised with --i-have-authorization or `authorized = true`"
        )));
    }
    match command {
        Command::Scan(_) => run_stage("scan", || stages::scan(&cfg)),
        Command::Crawl(_) => run_stage("crawl", || stages::crawl(&cfg)),
        Command::Download(_) => run_stage("download", || stages::download(&cfg)),
        Command::Analyze(a) => {
            run_stage("analyze", || stages::analyze(&cfg, a.captures.as_deref()))
        }
        Command::Attribute => run_stage("attribute", || stages::attribute(&cfg)),
        Command::Report(a) => run_stage("report", || stages::report(&cfg, a.metrics.as_deref())),
        Command::Pipeline(a) => {
            if !a.skip_scan {
                run_stage("scan", || stages::scan(&cfg))?;
            }
            run_stage("crawl", || stages::crawl(&cfg))?;
            run_stage("download", || stages::download(&cfg))?;
            run_stage("analyze", || stages::analyze(&cfg, None))?;
            if cfg.prefix_table.is_some() && cfg.as_orgs.is_some() && cfg.org_groups.is_some() {
                run_stage("attribute", || stages::attribute(&cfg))?;
            } else {
                log::warn!("attribution inputs not configured; every domain reported as Others");
            }
            run_stage("report", || stages::report(&cfg, None))
        }
        Command::QuicFetch(_) => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(Command::QuicFetch(a)) = cli.command {
        return quic_fetch(a);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("optperf: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
