mod common;

use std::time::{Duration, Instant};

use common::{env, Env};
use optperf_fixture::{HttpsOptions, Resource, Sites};
use optperf_probe::crawl::{
    fallback_size_probe, CrawlError, CrawlSettings, Crawler, FallbackResult, SizeSource,
};
use optperf_probe::resolve::{CachingResolver, Resolver};

const NAMES: &[&str] = &[
    "plain.test",
    "offsite.test",
    "cdn.other.test",
    "robots.test",
    "stream.test",
    "short.test",
    "chunky.test",
    "deep.test",
    "wide.test",
    "slow.test",
    "redir.test",
];

fn html(links: &[&str]) -> Resource {
    let body: String = links
        .iter()
        .map(|l| format!("<a href=\"{l}\">x</a>\n"))
        .collect();
    Resource::Html(format!("<html><body>{body}</body></html>"))
}

fn stream(len: u64, chunked: bool) -> Resource {
    Resource::File {
        len,
        content_length: false,
        chunked,
    }
}

fn sites(port: u16) -> Sites {
    let mut s = Sites::new()
        .add("plain.test", "/", html(&["/docs/", "/about.html"]))
        .add("plain.test", "/about.html", html(&[]))
        .add("plain.test", "/docs/", html(&["small.zip", "big.iso"]))
        .add("plain.test", "/docs/small.zip", Resource::file(50_000))
        .add("plain.test", "/docs/big.iso", Resource::file(2_000_000))
        .add(
            "offsite.test",
            "/",
            html(&[
                &format!("https://cdn.other.test:{port}/big.bin"),
                "/small.bin",
            ]),
        )
        .add("offsite.test", "/small.bin", Resource::file(10_000))
        .add("cdn.other.test", "/big.bin", Resource::file(5_000_000))
        .add(
            "robots.test",
            "/robots.txt",
            Resource::Text("User-agent: *\nDisallow: /private/\n".into()),
        )
        .add(
            "robots.test",
            "/",
            html(&["/private/big.bin", "/public.html"]),
        )
        .add("robots.test", "/public.html", html(&[]))
        .add("robots.test", "/private/big.bin", Resource::file(3_000_000))
        .add("stream.test", "/", html(&["/live.bin"]))
        .add("stream.test", "/live.bin", stream(1_500_000, false))
        .add("short.test", "/", html(&["/clip.bin"]))
        .add("short.test", "/clip.bin", stream(200_000, false))
        .add("chunky.test", "/", html(&["/exact.bin"]))
        .add("chunky.test", "/exact.bin", stream(1_000_000, true))
        .add("deep.test", "/", html(&["/1.html"]))
        .add("deep.test", "/1.html", html(&["/2.html"]))
        .add("deep.test", "/2.html", html(&["/3.html"]))
        .add("deep.test", "/3.html", html(&["/big.bin"]))
        .add("deep.test", "/big.bin", Resource::file(1_200_000))
        .add(
            "slow.test",
            "/robots.txt",
            Resource::Text("User-agent: optperf\nCrawl-delay: 1\n".into()),
        )
        .add("slow.test", "/", html(&["/a.html"]))
        .add("slow.test", "/a.html", html(&["/big.bin"]))
        .add("slow.test", "/big.bin", Resource::file(1_000_000))
        .add("redir.test", "/", html(&["/latest", "/away"]))
        .add(
            "redir.test",
            "/latest",
            Resource::Redirect("/releases/v2.tar".into()),
        )
        .add("redir.test", "/releases/v2.tar", Resource::file(1_100_000))
        .add(
            "redir.test",
            "/away",
            Resource::Redirect(format!("https://cdn.other.test:{port}/big.bin")),
        );
    let pages: Vec<String> = (0..40).map(|i| format!("/p{i}.html")).collect();
    let refs: Vec<&str> = pages.iter().map(String::as_str).collect();
    s.insert("wide.test", "/", html(&refs));
    for p in &pages {
        s.insert("wide.test", p, html(&[]));
    }
    s.insert("wide.test", "/zzz.bin", Resource::file(9_000_000));
    s
}

fn start(bind: &str) -> Env {
    // The port is only known after binding, so the off-site links are
    // patched in by restarting with the real port.
    let probe = env(bind, NAMES, Sites::new(), HttpsOptions::default());
    let port = probe.port();
    drop(probe);
    let addr = format!("{}:{port}", bind.split(':').next().unwrap());
    env(
        &addr,
        NAMES,
        sites(port),
        HttpsOptions {
            send_buffer: Some(16 * 1024),
        },
    )
}

fn resolver(e: &Env) -> CachingResolver {
    let mut r = Resolver::new();
    for n in NAMES {
        r.add_override(n, vec![e.ip()]);
    }
    CachingResolver::new(r, Duration::from_secs(300))
}

fn settings(e: &Env) -> CrawlSettings {
    CrawlSettings {
        port: e.port(),
        ..CrawlSettings::default()
    }
}

#[test]
fn crawler_examples() {
    let e = start("127.0.0.21:0");
    let res = resolver(&e);
    let crawler = Crawler::new(&e.client, &res, settings(&e));

    let t = crawler.crawl_domain("plain.test").unwrap();
    assert_eq!(t.size_source, SizeSource::ContentLength);
    assert_eq!(t.size_estimate, 2_000_000);
    assert!(t.file_url.ends_with("/docs/big.iso"), "{}", t.file_url);
    assert_eq!(t.resolved_ip, e.ip());

    assert!(matches!(
        crawler.crawl_domain("offsite.test"),
        Err(CrawlError::NotFound { .. })
    ));
    assert!(matches!(
        crawler.crawl_domain("robots.test"),
        Err(CrawlError::NotFound { .. })
    ));

    e.server.clear_log();
    let t = crawler.crawl_domain("stream.test").unwrap();
    assert_eq!(t.size_source, SizeSource::PartialDownload);
    assert!(t.size_estimate >= 1_000_000);
    let served: u64 = e
        .server
        .wait_for_entry(
            |l| l.path == "/live.bin" && l.method == "GET",
            Duration::from_secs(10),
        )
        .iter()
        .filter(|l| l.path == "/live.bin" && l.method == "GET")
        .map(|l| l.body_bytes)
        .sum();
    assert!(served > 0, "probe GET never logged");
    assert!(
        served <= 1_000_000 + 256 * 1024,
        "server sent {served} bytes for a 1,500,000 byte stream"
    );

    assert!(matches!(
        crawler.crawl_domain("short.test"),
        Err(CrawlError::NotFound { .. })
    ));
    let t = crawler.crawl_domain("chunky.test").unwrap();
    assert_eq!(t.size_source, SizeSource::PartialDownload);
    assert_eq!(t.size_estimate, 1_000_000);

    let t = crawler.crawl_domain("redir.test").unwrap();
    assert!(t.file_url.ends_with("/releases/v2.tar"), "{}", t.file_url);

    let log = e.server.access_log();
    assert!(log.iter().all(|l| !l.host.starts_with("cdn.other.test")));
    assert!(log.iter().all(|l| !l.path.starts_with("/private/")));
}

#[test]
fn depth_and_page_limits() {
    let e = start("127.0.0.22:0");
    let res = resolver(&e);
    let shallow = Crawler::new(&e.client, &res, settings(&e));
    assert!(matches!(
        shallow.crawl_domain("deep.test"),
        Err(CrawlError::NotFound { .. })
    ));
    let deeper = Crawler::new(
        &e.client,
        &res,
        CrawlSettings {
            max_depth: 4,
            ..settings(&e)
        },
    );
    assert_eq!(
        deeper.crawl_domain("deep.test").unwrap().size_estimate,
        1_200_000
    );

    e.server.clear_log();
    let capped = Crawler::new(
        &e.client,
        &res,
        CrawlSettings {
            max_pages: 10,
            ..settings(&e)
        },
    );
    match capped.crawl_domain("wide.test") {
        Err(CrawlError::NotFound { pages }) => assert_eq!(pages, 10),
        other => panic!("{other:?}"),
    }
    let heads = e
        .server
        .access_log()
        .iter()
        .filter(|l| l.method == "HEAD")
        .count();
    assert_eq!(heads, 10);
}

#[test]
fn crawl_delay_and_user_agent() {
    let e = start("127.0.0.23:0");
    let res = resolver(&e);
    let crawler = Crawler::new(&e.client, &res, settings(&e));
    let t0 = Instant::now();
    crawler.crawl_domain("slow.test").unwrap();
    let log = e.server.access_log();
    // robots, HEAD /, GET /, HEAD /a.html, GET /a.html, HEAD /big.bin
    assert_eq!(log.len(), 6);
    assert!(t0.elapsed() >= Duration::from_secs(5), "{:?}", t0.elapsed());
    assert!(log.iter().all(|l| l.user_agent == common::UA));
}

#[test]
fn crawl_all_reports_each_domain() {
    let e = start("127.0.0.24:0");
    let res = resolver(&e);
    let crawler = Crawler::new(&e.client, &res, settings(&e));
    let doms: Vec<String> = ["plain.test", "short.test", "unknown.invalid"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let out = crawler.crawl_all(&doms, 3);
    assert_eq!(out.len(), 3);
    assert!(out[0].1.is_ok());
    assert!(matches!(out[1].1, Err(CrawlError::NotFound { .. })));
    assert!(matches!(out[2].1, Err(CrawlError::Resolve(_))));
}

#[test]
fn fallback_probe_direct() {
    let e = start("127.0.0.25:0");
    let url = e.url("short.test", "/clip.bin");
    assert_eq!(
        fallback_size_probe(&e.client, &url, e.ip(), 1_000_000).unwrap(),
        FallbackResult::NotQualified { bytes: 200_000 }
    );
    let url = e.url("stream.test", "/live.bin");
    match fallback_size_probe(&e.client, &url, e.ip(), 1_000_000).unwrap() {
        FallbackResult::Qualified { bytes } => {
            assert!((1_000_000..=1_000_000 + 256 * 1024).contains(&bytes))
        }
        other => panic!("{other:?}"),
    }
}
