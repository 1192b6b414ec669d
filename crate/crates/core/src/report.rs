//! Speed-ups, bucket tables, CDF series and per-group download counts.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io;
use std::path::Path;

use serde::Serialize;

use crate::attribution::CdnGroup;
use crate::matrix::ConfigName;
use crate::record::IndicatorRecord;

/// Throughput ratio of two downloads from the same run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeedUp {
    pub domain: String,
    pub run_id: String,
    pub vantage_point: String,
    pub config: ConfigName,
    pub vs: ConfigName,
    pub ratio: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SpeedUps {
    pub values: Vec<SpeedUp>,
    /// Pairs where one side had no successful download.
    pub skipped: usize,
}

/// WARMUP/ECN/SACK/WS/ALL against BL, then for QUIC: every later client
/// against the first, and every client against BL and ALL.
pub fn default_pairs<S: AsRef<str>>(quic_clients: &[S]) -> Vec<(ConfigName, ConfigName)> {
    use ConfigName::*;
    let mut pairs = vec![(Warmup, Bl), (Ecn, Bl), (Sack, Bl), (Ws, Bl), (All, Bl)];
    let quic: Vec<ConfigName> = quic_clients
        .iter()
        .map(|c| Quic(c.as_ref().to_string()))
        .collect();
    if let Some((first, rest)) = quic.split_first() {
        for q in rest {
            pairs.push((q.clone(), first.clone()));
        }
    }
    for q in &quic {
        pairs.push((q.clone(), Bl));
        pairs.push((q.clone(), All));
    }
    pairs
}

type RunKey<'a> = (&'a str, &'a str, &'a str);

/// One speed-up per (run, pair) where both downloads produced a record with
/// positive throughput.
pub fn speedups(records: &[IndicatorRecord], pairs: &[(ConfigName, ConfigName)]) -> SpeedUps {
    let mut runs: BTreeMap<RunKey<'_>, HashMap<&ConfigName, f64>> = BTreeMap::new();
    for r in records {
        runs.entry((
            r.run_id.as_str(),
            r.domain.as_str(),
            r.vantage_point.as_str(),
        ))
        .or_default()
        .insert(&r.config, r.mean_throughput_bps);
    }
    let mut out = SpeedUps::default();
    for ((run_id, domain, vp), tp) in &runs {
        for (config, vs) in pairs {
            match (tp.get(config), tp.get(vs)) {
                (Some(&a), Some(&b)) if a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite() => {
                    out.values.push(SpeedUp {
                        domain: domain.to_string(),
                        run_id: run_id.to_string(),
                        vantage_point: vp.to_string(),
                        config: config.clone(),
                        vs: vs.clone(),
                        ratio: a / b,
                    })
                }
                _ => out.skipped += 1,
            }
        }
    }
    out
}

/// Lower edges of the buckets after `<0.7`.
pub const BUCKET_EDGES: [f64; 9] = [0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3, 1.5, 2.0];

pub const BUCKET_LABELS: [&str; 10] = [
    "<0.7", "0.7-0.8", "0.8-0.9", "0.9-1.0", "1.0-1.1", "1.1-1.2", "1.2-1.3", "1.3-1.5", "1.5-2",
    ">2",
];

/// Bucket index of a ratio: lower-inclusive, upper-exclusive.
pub fn bucket_of(ratio: f64) -> usize {
    BUCKET_EDGES.iter().take_while(|&&e| ratio >= e).count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketRow {
    pub config: ConfigName,
    pub vs: ConfigName,
    pub samples: usize,
    /// Ratios strictly above 1.0.
    pub plus: usize,
    pub counts: [usize; 10],
}

impl BucketRow {
    fn pct(&self, n: usize) -> Option<f64> {
        (self.samples > 0).then(|| 100.0 * n as f64 / self.samples as f64)
    }

    pub fn plus_share(&self) -> Option<f64> {
        self.pct(self.plus)
    }

    pub fn minus_share(&self) -> Option<f64> {
        self.pct(self.samples - self.plus)
    }

    pub fn shares(&self) -> Option<[f64; 10]> {
        (self.samples > 0).then(|| self.counts.map(|c| 100.0 * c as f64 / self.samples as f64))
    }

    /// plus, minus, then the ten buckets; `None` when there are no samples.
    pub fn numeric_fields(&self) -> [Option<f64>; 12] {
        let mut f = [None; 12];
        f[0] = self.plus_share();
        f[1] = self.minus_share();
        if let Some(s) = self.shares() {
            for (slot, v) in f[2..].iter_mut().zip(s) {
                *slot = Some(v);
            }
        }
        f
    }
}

pub fn bucketize(config: ConfigName, vs: ConfigName, ratios: &[f64]) -> BucketRow {
    let mut row = BucketRow {
        config,
        vs,
        samples: ratios.len(),
        plus: 0,
        counts: [0; 10],
    };
    for &r in ratios {
        row.counts[bucket_of(r)] += 1;
        if r > 1.0 {
            row.plus += 1;
        }
    }
    row
}

/// One bucket row per pair, in pair order.
pub fn bucket_table(s: &SpeedUps, pairs: &[(ConfigName, ConfigName)]) -> Vec<BucketRow> {
    pairs
        .iter()
        .map(|(c, v)| {
            let ratios: Vec<f64> = s
                .values
                .iter()
                .filter(|x| &x.config == c && &x.vs == v)
                .map(|x| x.ratio)
                .collect();
            bucketize(c.clone(), v.clone(), &ratios)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CdfPoint {
    pub x: f64,
    pub y: f64,
}

/// Empirical CDF. Equal values collapse into one point carrying the highest
/// rank. Non-finite values are dropped.
pub fn cdf_series(values: &[f64]) -> Vec<CdfPoint> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut out: Vec<CdfPoint> = Vec::new();
    for (i, &x) in v.iter().enumerate() {
        let y = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(p) if p.x == x => p.y = y,
            _ => out.push(CdfPoint { x, y }),
        }
    }
    if let Some(p) = out.last_mut() {
        p.y = 1.0;
    }
    out
}

/// Table-1 style row: domains with at least one successful download of the
/// protocol, split by CDN group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountRow {
    pub protocol: Protocol,
    pub vantage_point: String,
    pub total: usize,
    pub per_group: [usize; 6],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Protocol {
    Tcp,
    Quic,
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Protocol::Tcp => "TCP",
            Protocol::Quic => "QUIC",
        })
    }
}

fn group_index(g: CdnGroup) -> usize {
    CdnGroup::ALL.iter().position(|&x| x == g).unwrap_or(5)
}

/// Domains missing from `groups` count as Others.
pub fn count_rows(
    records: &[IndicatorRecord],
    groups: &HashMap<String, CdnGroup>,
) -> Vec<CountRow> {
    let mut seen: BTreeMap<(Protocol, &str), BTreeSet<&str>> = BTreeMap::new();
    for r in records {
        let proto = if r.config.is_quic() {
            Protocol::Quic
        } else {
            Protocol::Tcp
        };
        seen.entry((proto, r.vantage_point.as_str()))
            .or_default()
            .insert(r.domain.as_str());
    }
    seen.into_iter()
        .map(|((protocol, vp), domains)| {
            let mut per_group = [0; 6];
            for d in &domains {
                let g = groups.get(*d).copied().unwrap_or(CdnGroup::Others);
                per_group[group_index(g)] += 1;
            }
            CountRow {
                protocol,
                vantage_point: vp.to_string(),
                total: domains.len(),
                per_group,
            }
        })
        .collect()
}

/// Throughput CDFs per configuration; key is the series name.
pub type CdfGroup = BTreeMap<String, Vec<CdfPoint>>;

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub buckets: Vec<BucketRow>,
    pub skipped_speedups: usize,
    /// Keyed by file suffix: `all` plus one entry per CDN group with data.
    pub cdfs: BTreeMap<String, CdfGroup>,
    pub counts: Vec<CountRow>,
    pub records: usize,
}

/// Builds every table. Pairs with no record on either side are dropped.
pub fn build_report(
    records: &[IndicatorRecord],
    groups: &HashMap<String, CdnGroup>,
    pairs: &[(ConfigName, ConfigName)],
) -> Report {
    let present: BTreeSet<&ConfigName> = records.iter().map(|r| &r.config).collect();
    let pairs: Vec<_> = pairs
        .iter()
        .filter(|(c, v)| present.contains(c) || present.contains(v))
        .cloned()
        .collect();
    let s = speedups(records, &pairs);
    let mut cdfs: BTreeMap<String, CdfGroup> = BTreeMap::new();
    let mut raw: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.config != ConfigName::Warmup) {
        let g = groups.get(&r.domain).copied().unwrap_or(CdnGroup::Others);
        for key in ["all".to_string(), g.to_string().to_ascii_lowercase()] {
            raw.entry(key)
                .or_default()
                .entry(r.config.to_string())
                .or_default()
                .push(r.mean_throughput_bps);
        }
    }
    for (k, series) in raw {
        let g = cdfs.entry(k).or_default();
        for (name, vals) in series {
            let pts = cdf_series(&vals);
            if pts.is_empty() {
                log::warn!("empty CDF series {name}");
            } else {
                g.insert(name, pts);
            }
        }
    }
    Report {
        buckets: bucket_table(&s, &pairs),
        skipped_speedups: s.skipped,
        cdfs,
        counts: count_rows(records, groups),
        records: records.len(),
    }
}

pub const BUCKET_CSV_HEADER: [&str; 14] = [
    "config", "vs", "plus", "minus", "<0.7", "0.7-0.8", "0.8-0.9", "0.9-1.0", "1.0-1.1", "1.1-1.2",
    "1.2-1.3", "1.3-1.5", "1.5-2", ">2",
];

pub const COUNTS_CSV_HEADER: [&str; 9] = [
    "protocol",
    "vantage_point",
    "total",
    "Akamai",
    "Amazon",
    "Cloudflare",
    "Google",
    "Microsoft",
    "Others",
];

pub const CDF_CSV_HEADER: [&str; 3] = ["series", "x", "y"];

fn fmt_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.1}"))
}

pub fn buckets_csv(rows: &[BucketRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(BUCKET_CSV_HEADER).expect("in-memory write");
    for r in rows {
        let mut rec = vec![r.config.to_string(), r.vs.to_string()];
        rec.extend(r.numeric_fields().into_iter().map(fmt_pct));
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

pub fn counts_csv(rows: &[CountRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COUNTS_CSV_HEADER).expect("in-memory write");
    for r in rows {
        let mut rec = vec![
            r.protocol.to_string(),
            r.vantage_point.clone(),
            r.total.to_string(),
        ];
        rec.extend(r.per_group.iter().map(|n| n.to_string()));
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

pub fn cdf_csv(group: &CdfGroup) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CDF_CSV_HEADER).expect("in-memory write");
    for (name, pts) in group {
        for p in pts {
            w.write_record([name.clone(), p.x.to_string(), p.y.to_string()])
                .expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

fn label(c: &ConfigName) -> String {
    match c {
        ConfigName::Quic(id) => id.clone(),
        ConfigName::Warmup => "Warm-up".into(),
        ConfigName::All => "All".into(),
        other => other.to_string(),
    }
}

fn vs_label(row: &BucketRow) -> String {
    if row.config.is_quic() && !row.vs.is_quic() {
        format!("TCP-{}", row.vs)
    } else {
        label(&row.vs)
    }
}

/// Aligned text in the layout of the published tables.
pub fn report_text(r: &Report) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Speed-up shares (%)");
    let mut head = format!("{:<10} {:<10} {:>8}", "Config", "vs.", "n");
    for h in ["+", "-"].iter().chain(BUCKET_LABELS.iter()) {
        let _ = write!(head, " {h:>8}");
    }
    let _ = writeln!(s, "{head}");
    for (title, quic) in [("TCP options", false), ("QUIC and TCP", true)] {
        let rows: Vec<_> = r
            .buckets
            .iter()
            .filter(|b| b.config.is_quic() == quic)
            .collect();
        if rows.is_empty() {
            continue;
        }
        let _ = writeln!(s, "-- {title}");
        for b in rows {
            let mut line = format!(
                "{:<10} {:<10} {:>8}",
                label(&b.config),
                vs_label(b),
                b.samples
            );
            for v in b.numeric_fields() {
                let _ = write!(line, " {:>8}", fmt_pct(v));
            }
            let _ = writeln!(s, "{line}");
        }
    }
    let _ = writeln!(
        s,
        "speed-up pairs without both downloads: {}",
        r.skipped_speedups
    );
    let _ = writeln!(s);
    let _ = writeln!(s, "Domains with successful downloads");
    let mut head = format!("{:<10} {:>7}", "Run", "Total");
    for g in CdnGroup::ALL {
        let _ = write!(head, " {:>10}", g.to_string());
    }
    let _ = writeln!(s, "{head}");
    for proto in [Protocol::Tcp, Protocol::Quic] {
        let rows: Vec<_> = r.counts.iter().filter(|c| c.protocol == proto).collect();
        if rows.is_empty() {
            continue;
        }
        let _ = writeln!(s, "-- {proto}");
        for c in rows {
            let mut line = format!("{:<10} {:>7}", c.vantage_point, c.total);
            for n in c.per_group {
                let _ = write!(line, " {n:>10}");
            }
            let _ = writeln!(s, "{line}");
        }
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "indicator records: {}", r.records);
    s
}

/// Writes buckets.csv, counts.csv, cdf_<group>.csv and report.txt.
pub fn write_report(dir: &Path, r: &Report) -> io::Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> io::Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, body)?;
        written.push(p);
        Ok(())
    };
    put("buckets.csv".into(), buckets_csv(&r.buckets))?;
    put("counts.csv".into(), counts_csv(&r.counts))?;
    if !r.cdfs.contains_key("all") {
        put("cdf_all.csv".into(), cdf_csv(&CdfGroup::new()))?;
    }
    for (g, series) in &r.cdfs {
        put(format!("cdf_{g}.csv"), cdf_csv(series))?;
    }
    put("report.txt".into(), report_text(r))?;
    Ok(written)
}
