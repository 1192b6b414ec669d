#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::path::Path;
use std::process::{Command, Output};

use optperf_core::record::{read_csv, IndicatorRecord, INDICATOR_COLUMNS};
use rand::rngs::StdRng;
use rand::SeedableRng;

fn optperf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_optperf"))
        .args(args)
        .env_remove("OPTPERF_OUTPUT_DIR")
        .env_remove("OPTPERF_CONFIG")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn text(o: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn version_and_schema() {
    let v = optperf(&["--version"]);
    assert_eq!(code(&v), 0);
    assert!(text(&v).starts_with("optperf "));
    let sc = optperf(&["--config-schema"]);
    assert_eq!(code(&sc), 0);
    let schema: serde_json::Value = serde_json::from_slice(&sc.stdout).unwrap();
    assert!(schema["properties"]["vantage_point"].is_object());
}

#[test]
fn invalid_configuration_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "vantagepoint = \"typo\"\n").unwrap();
    let o = optperf(&["-c", s(&cfg), "report"]);
    assert_eq!(code(&o), 2, "{}", text(&o));

    let out = dir.path().join("out");
    let o = optperf(&[
        "--output-dir",
        s(&out),
        "--targets",
        "/nonexistent/list.txt",
        "report",
    ]);
    assert_eq!(code(&o), 2, "{}", text(&o));
    let o = optperf(&[
        "--output-dir",
        s(&out),
        "download",
        "--matrix",
        "BL,WARMUP",
        "--dry-run",
    ]);
    assert_eq!(code(&o), 2, "{}", text(&o));
    let o = optperf(&["--output-dir", s(&out)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn network_stages_need_acknowledgement() {
    let dir = tempfile::tempdir().unwrap();
    let list = dir.path().join("domains.txt");
    std::fs::write(&list, "# test list\n1,a.test\n2,b.test\n\n").unwrap();
    let out = dir.path().join("out");
    for stage in ["scan", "crawl", "download", "pipeline"] {
        let o = optperf(&["--output-dir", s(&out), "--targets", s(&list), stage]);
        assert_eq!(code(&o), 2, "{stage}: {}", text(&o));
        assert!(text(&o).contains("--i-have-authorization"));
    }
    let o = optperf(&[
        "--output-dir",
        s(&out),
        "--targets",
        s(&list),
        "pipeline",
        "--dry-run",
    ]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let t = text(&o);
    assert!(t.contains("a.test") && t.contains("b.test") && t.contains("dry run: nothing sent"));
    assert!(
        t.contains("tcp_window_scaling=1 (tcp_rmem max raised for shift 14)"),
        "{t}"
    );
    assert!(!out.join("scan.csv").exists());
}

#[test]
fn report_on_empty_metrics_writes_headers_only() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join("metrics.csv"), INDICATOR_COLUMNS.join(",") + "\n").unwrap();
    let o = optperf(&["--output-dir", s(&out), "report"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    for f in ["buckets.csv", "counts.csv", "cdf_all.csv"] {
        let body = std::fs::read_to_string(out.join("report").join(f)).unwrap();
        assert_eq!(body.lines().count(), 1, "{f}: {body}");
    }
    assert!(out.join("report/report.txt").exists());
}

#[test]
fn missing_stage_input_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = optperf(&["--output-dir", s(dir.path()), "report"]);
    assert_eq!(code(&o), 1, "{}", text(&o));
    let o = optperf(&["--output-dir", s(dir.path()), "analyze"]);
    assert_eq!(code(&o), 1, "{}", text(&o));
}

fn write_fixture_captures(dir: &Path) -> Vec<support::Reference> {
    std::fs::create_dir_all(dir).unwrap();
    let mut rng = StdRng::seed_from_u64(7);
    let names = [
        "r0_01_BL",
        "r0_02_ECN",
        "r0_03_WS",
        "r0_04_QUIC_quinn-cubic",
        "r1_01_ALL",
    ];
    let mut refs = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let flow = if name.contains("QUIC") {
            support::udp_flow(&mut rng, i as u32 + 1)
        } else {
            support::tcp_flow(&mut rng, i as u32 + 1, true)
        };
        refs.push(support::reference(&flow));
        std::fs::write(dir.join(format!("{name}.pcap")), support::to_pcap(&[flow])).unwrap();
    }
    refs
}

#[test]
fn analyze_capture_directory_one_row_per_capture() {
    let dir = tempfile::tempdir().unwrap();
    let caps = dir.path().join("caps");
    let refs = write_fixture_captures(&caps);
    let out = dir.path().join("out");
    let o = optperf(&["--output-dir", s(&out), "analyze", "--captures", s(&caps)]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let rows: Vec<IndicatorRecord> =
        read_csv(std::fs::File::open(out.join("metrics.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 5);
    let configs: Vec<String> = rows.iter().map(|r| r.config.to_string()).collect();
    assert_eq!(configs, ["BL", "ECN", "WS", "QUIC:quinn-cubic", "ALL"]);
    for (r, want) in rows.iter().zip(&refs) {
        assert_eq!(r.bytes_total, want.ip_bytes);
        let tp = want.throughput().unwrap();
        assert!(
            (r.mean_throughput_bps - tp).abs() <= tp * 1e-12,
            "{} vs {tp}",
            r.mean_throughput_bps
        );
    }
    assert!(rows[3].goodput_bps.is_none());
    let fails = std::fs::read_to_string(out.join("failures.csv")).unwrap();
    assert_eq!(fails.lines().count(), 1);
}

const PREFIXES: &str = "198.51.100.0\t24\t13335\n203.0.113.0\t24\t15169\n192.0.2.0\t24\t64500\n";
const AS_ORGS: &str = "asn,org_id,org_name\n13335,CLOUD-1,Cloudflare Inc\n15169,GOOG-1,Google LLC\n64500,SMALL-1,Small Hoster\n";
const GROUPS: &str = "org_id,group\nCLOUD-1,Cloudflare\nGOOG-1,Google\n";

#[test]
fn stages_rerun_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let caps = dir.path().join("caps");
    write_fixture_captures(&caps);
    let out = dir.path().join("out");
    std::fs::create_dir_all(&out).unwrap();
    let put = |n: &str, body: &str| {
        let p = dir.path().join(n);
        std::fs::write(&p, body).unwrap();
        p
    };
    let table = put("prefixes.txt", PREFIXES);
    let orgs = put("orgs.csv", AS_ORGS);
    let groups = put("groups.csv", GROUPS);
    std::fs::write(
        out.join("targets.csv"),
        "domain,file_url,size_estimate,size_source,resolved_ip\n\
         cf.test,https://cf.test/f,2000000,ContentLength,198.51.100.7\n\
         g.test,https://g.test/f,2000000,ContentLength,203.0.113.9\n\
         small.test,https://small.test/f,1000000,PartialDownload,192.0.2.1\n\
         dark.test,https://dark.test/f,1000000,PartialDownload,10.9.9.9\n",
    )
    .unwrap();
    let common = [
        "--output-dir",
        s(&out),
        "--prefix-table",
        s(&table),
        "--as-orgs",
        s(&orgs),
        "--org-groups",
        s(&groups),
    ];
    let mut snapshots = Vec::new();
    for _ in 0..2 {
        for stage in [
            vec!["analyze", "--captures", s(&caps)],
            vec!["attribute"],
            vec!["report"],
        ] {
            let mut args: Vec<&str> = common.to_vec();
            args.extend(stage);
            let o = optperf(&args);
            assert_eq!(code(&o), 0, "{}", text(&o));
        }
        let mut files: Vec<(String, Vec<u8>)> = walk(&out)
            .into_iter()
            .map(|p| (p.display().to_string(), std::fs::read(&p).unwrap()))
            .collect();
        files.sort();
        snapshots.push(files);
    }
    assert_eq!(snapshots[0], snapshots[1]);
    let attr = std::fs::read_to_string(out.join("attribution.csv")).unwrap();
    assert!(
        attr.contains("cf.test,Cloudflare,false,1,0,13335"),
        "{attr}"
    );
    assert!(attr.contains("g.test,Google,false,1,0,15169"), "{attr}");
    assert!(attr.contains("small.test,Others,false,1,0,64500"), "{attr}");
    assert!(attr.contains("dark.test,Others,false,0,1,"), "{attr}");
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}
