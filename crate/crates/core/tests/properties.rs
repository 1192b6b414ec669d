mod support;

use std::collections::{BTreeSet, HashMap};
use std::net::{IpAddr, Ipv4Addr, SocketAddr};

use ipnet::IpNet;
use optperf_core::attribution::{classify_domain, CdnGroup, OrgMap, PrefixTable};
use optperf_core::capture::{demux_flows, parse_capture, Flow, PcapReader, PcapWriter};
use optperf_core::matrix::ConfigName;
use optperf_core::metrics::{
    analyze_flow, classify_retransmissions, goodput, mean_throughput, quic_throughput,
    retransmission_rate, rtt_samples, RetransmissionClass,
};
use optperf_core::report::{bucket_of, bucketize, cdf_series, BUCKET_EDGES};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use support::{reference, tcp_flow, to_pcap, udp_flow, Label, Spec, SynthFlow};

fn flows_of(synth: &[SynthFlow]) -> Vec<Flow> {
    demux_flows(parse_capture(&to_pcap(synth)).unwrap().packets)
}

fn single(f: &SynthFlow) -> Flow {
    let mut v = flows_of(std::slice::from_ref(f));
    assert_eq!(v.len(), 1);
    v.pop().unwrap()
}

fn same_label(a: Option<RetransmissionClass>, b: Option<Label>) -> bool {
    matches!(
        (a, b),
        (None, None)
            | (Some(RetransmissionClass::None), Some(Label::None))
            | (
                Some(RetransmissionClass::Retransmission),
                Some(Label::Retransmission)
            )
            | (
                Some(RetransmissionClass::FastRetransmission),
                Some(Label::Fast)
            )
            | (Some(RetransmissionClass::Spurious), Some(Label::Spurious))
    )
}

#[test]
fn metrics_match_reference_on_random_flows() {
    let mut rng = StdRng::seed_from_u64(0x5eed);
    let synth: Vec<SynthFlow> = (0..200)
        .map(|i| {
            if i % 5 == 4 {
                udp_flow(&mut rng, i)
            } else {
                tcp_flow(&mut rng, i, i % 7 != 0)
            }
        })
        .collect();
    let flows = flows_of(&synth);
    assert_eq!(flows.len(), synth.len());
    let mut classes_seen = BTreeSet::new();
    for s in &synth {
        let f = flows
            .iter()
            .find(|f| f.initiator == s.client)
            .expect("flow present");
        let r = reference(s);
        assert_eq!(f.ip_bytes(), r.ip_bytes);
        let tp = mean_throughput(f).ok();
        assert_eq!(tp.map(f64::to_bits), r.throughput().map(f64::to_bits));
        if matches!(s.packets[0].spec, Spec::Udp { .. }) {
            assert_eq!(
                quic_throughput(f).ok().map(f64::to_bits),
                r.throughput().map(f64::to_bits)
            );
            continue;
        }
        let c = classify_retransmissions(f);
        for (i, (a, b)) in c.labels.iter().zip(&r.labels).enumerate() {
            assert!(same_label(*a, *b), "packet {i}: {a:?} vs {b:?}");
            classes_seen.insert(format!("{b:?}"));
        }
        assert_eq!(
            goodput(f, &c).ok().map(f64::to_bits),
            r.goodput().map(f64::to_bits)
        );
        assert_eq!(
            retransmission_rate(f, &c).to_bits(),
            r.retransmission_rate().to_bits()
        );
        let rtt: Vec<f64> = rtt_samples(f).iter().map(|s| s.rtt_ms).collect();
        assert_eq!(rtt, r.rtt_ms);
    }
    for l in [
        "Some(None)",
        "Some(Retransmission)",
        "Some(Fast)",
        "Some(Spurious)",
    ] {
        assert!(classes_seen.contains(l), "generator never produced {l}");
    }
}

fn relabel(flow: &SynthFlow) -> SynthFlow {
    let (a, b) = (flow.client, flow.server);
    let swap = |x: SocketAddr| -> SocketAddr {
        let ip = if x.ip() == a.ip() { b.ip() } else { a.ip() };
        let port = if x.port() == a.port() {
            b.port()
        } else {
            a.port()
        };
        SocketAddr::new(ip, port)
    };
    let packets = flow
        .packets
        .iter()
        .map(|p| {
            let mut p = p.clone();
            match &mut p.spec {
                Spec::Tcp(t) => {
                    t.src = swap(t.src);
                    t.dst = swap(t.dst);
                }
                Spec::Udp { src, dst, .. } => {
                    *src = swap(*src);
                    *dst = swap(*dst);
                }
            }
            p
        })
        .collect();
    SynthFlow {
        client: swap(a),
        server: swap(b),
        packets,
    }
}

fn synth_set(seed: u64, n: u32) -> Vec<SynthFlow> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            if rng.gen_bool(0.25) {
                udp_flow(&mut rng, i)
            } else {
                tcp_flow(&mut rng, i, true)
            }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn demux_partitions_packets(seed in any::<u64>(), n in 1u32..12) {
        let synth = synth_set(seed, n);
        let parsed = parse_capture(&to_pcap(&synth)).unwrap();
        let total = parsed.packets.len();
        let flows = demux_flows(parsed.packets);
        prop_assert_eq!(flows.iter().map(|f| f.packets.len()).sum::<usize>(), total);
        prop_assert_eq!(total, synth.iter().map(|f| f.packets.len()).sum::<usize>());
        for f in &flows {
            prop_assert!(f.packets.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
        }
    }

    #[test]
    fn demux_is_symmetric_under_relabelling(seed in any::<u64>()) {
        let synth = synth_set(seed, 1);
        let flipped: Vec<SynthFlow> = synth.iter().map(relabel).collect();
        let a = flows_of(&synth);
        let b = flows_of(&flipped);
        prop_assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(x.packets.len(), y.packets.len());
            prop_assert_eq!(x.ip_bytes(), y.ip_bytes());
            prop_assert_eq!(x.key.transport, y.key.transport);
            let xd: Vec<_> = x.packets.iter().map(|p| x.direction(p)).collect();
            let yd: Vec<_> = y.packets.iter().map(|p| y.direction(p)).collect();
            prop_assert_eq!(xd, yd);
        }
    }

    #[test]
    fn parsing_is_deterministic_and_round_trips(seed in any::<u64>(), n in 1u32..6) {
        let bytes = to_pcap(&synth_set(seed, n));
        let first = parse_capture(&bytes).unwrap();
        prop_assert_eq!(&first, &parse_capture(&bytes).unwrap());
        prop_assert_eq!(demux_flows(first.packets.clone()), demux_flows(first.packets.clone()));

        let reader = PcapReader::new(&bytes).unwrap();
        let link = reader.header().link_type;
        let mut w = PcapWriter::new(Vec::new(), link, 65535).unwrap();
        for rec in reader {
            w.write_frame(rec.timestamp, rec.data).unwrap();
        }
        let again = w.into_inner();
        prop_assert_eq!(&again, &bytes);
        prop_assert_eq!(parse_capture(&again).unwrap(), first);
    }

    #[test]
    fn metric_invariants(seed in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let s = tcp_flow(&mut rng, 1, true);
        let f = single(&s);
        let ind = analyze_flow(&f).unwrap();
        let gp = ind.goodput.unwrap();
        let rr = ind.retransmission_rate.unwrap();
        prop_assert!(gp <= ind.mean_throughput);
        prop_assert_eq!(gp == ind.mean_throughput, ind.bytes_retransmitted == 0);
        prop_assert!((0.0..=1.0).contains(&rr));
        if ind.rtt_sample_count > 0 {
            prop_assert!(ind.mean_rtt_ms.unwrap() > 0.0);
        }
        prop_assert!(rtt_samples(&f).iter().all(|x| x.rtt_ms > 0.0));
        let c = classify_retransmissions(&f);
        for (p, l) in f.packets.iter().zip(&c.labels) {
            prop_assert_eq!(p.is_data(), l.is_some());
        }
    }

    #[test]
    fn duplicating_a_data_packet_never_lowers_the_rate(seed in any::<u64>(), pick in any::<prop::sample::Index>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut s = tcp_flow(&mut rng, 1, false);
        let before = {
            let f = single(&s);
            retransmission_rate(&f, &classify_retransmissions(&f))
        };
        let data: Vec<usize> = s.packets.iter().enumerate()
            .filter(|(_, p)| matches!(&p.spec, Spec::Tcp(t) if t.payload_len > 1))
            .map(|(i, _)| i)
            .collect();
        prop_assume!(!data.is_empty());
        let mut copy = s.packets[data[pick.index(data.len())]].clone();
        copy.t_us = s.packets.last().unwrap().t_us + 1;
        s.packets.push(copy);
        let f = single(&s);
        let after = retransmission_rate(&f, &classify_retransmissions(&f));
        prop_assert!(after >= before, "{before} -> {after}");
    }

    #[test]
    fn no_timestamp_option_no_samples(seed in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let f = single(&tcp_flow(&mut rng, 1, false));
        prop_assert!(rtt_samples(&f).is_empty());
        prop_assert!(analyze_flow(&f).unwrap().mean_rtt_ms.is_none());
    }

    #[test]
    fn throughput_under_time_shift_and_stretch(seed in any::<u64>(), shift in -1_000_000i64..1_000_000, k in 2i64..6) {
        let mut rng = StdRng::seed_from_u64(seed);
        let s = tcp_flow(&mut rng, 1, false);
        let base = mean_throughput(&single(&s)).unwrap();
        let t0 = s.packets[0].t_us;
        let mut shifted = s.clone();
        let mut stretched = s.clone();
        for p in &mut shifted.packets {
            p.t_us += shift;
        }
        for p in &mut stretched.packets {
            p.t_us = t0 + (p.t_us - t0) * k;
        }
        prop_assert_eq!(mean_throughput(&single(&shifted)).unwrap().to_bits(), base.to_bits());
        let st = mean_throughput(&single(&stretched)).unwrap();
        prop_assert!((st * k as f64 - base).abs() <= base * 1e-12);
    }

    #[test]
    fn lpm_matches_linear_scan(seed in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut table = PrefixTable::new();
        let mut entries: Vec<(IpNet, u32)> = Vec::new();
        for _ in 0..300 {
            let len = rng.gen_range(8..=32u8);
            // Cluster prefixes so that nesting is common.
            let addr = Ipv4Addr::from(0x0a00_0000 | (rng.gen::<u32>() & 0x00ff_ffff));
            let net = IpNet::new(IpAddr::V4(addr), len).unwrap().trunc();
            let asn = rng.gen_range(1..100_000);
            table.insert(net, [asn]);
            entries.push((net, asn));
        }
        for _ in 0..200 {
            let ip = IpAddr::V4(Ipv4Addr::from(0x0a00_0000 | (rng.gen::<u32>() & 0x00ff_ffff)));
            let best = entries.iter().filter(|(n, _)| n.contains(&ip)).map(|(n, _)| n.prefix_len()).max();
            let expect: Option<BTreeSet<u32>> = best.map(|l| {
                entries.iter().filter(|(n, _)| n.prefix_len() == l && n.contains(&ip)).map(|(_, a)| *a).collect()
            });
            let got = table.lookup(ip).map(|(_, o)| o.clone());
            prop_assert_eq!(got, expect);
        }
    }

    #[test]
    fn classification_ignores_address_order(seed in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut table = PrefixTable::new();
        let mut orgs = OrgMap::new();
        let groups = [CdnGroup::Akamai, CdnGroup::Amazon, CdnGroup::Cloudflare, CdnGroup::Google, CdnGroup::Microsoft];
        for (i, g) in groups.iter().enumerate() {
            let net: IpNet = format!("10.{i}.0.0/16").parse().unwrap();
            table.insert(net, [i as u32 + 1]);
            orgs.add_asn(i as u32 + 1, &format!("ORG{i}")).unwrap();
            orgs.set_group(&format!("ORG{i}"), *g);
        }
        let mut addrs: Vec<IpAddr> = (0..rng.gen_range(1..9))
            .map(|_| format!("10.{}.1.1", rng.gen_range(0..7)).parse().unwrap())
            .collect();
        let a = classify_domain("d", &addrs, &table, &orgs).unwrap();
        addrs.reverse();
        let b = classify_domain("d", &addrs, &table, &orgs).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.mapped + a.unmapped, addrs.len());
    }

    #[test]
    fn buckets_match_histogram(ratios in prop::collection::vec(0.01f64..5.0, 1..400)) {
        let row = bucketize(ConfigName::Ws, ConfigName::Bl, &ratios);
        let mut hist = [0usize; 10];
        for &r in &ratios {
            let mut k = 0;
            while k < BUCKET_EDGES.len() && r >= BUCKET_EDGES[k] {
                k += 1;
            }
            hist[k] += 1;
        }
        prop_assert_eq!(row.counts, hist);
        prop_assert_eq!(row.plus, ratios.iter().filter(|&&r| r > 1.0).count());
        let shares = row.shares().unwrap();
        prop_assert!((shares.iter().sum::<f64>() - 100.0).abs() < 0.1);
        prop_assert_eq!(row.plus_share().unwrap() + row.minus_share().unwrap(), 100.0);
        prop_assert!(ratios.iter().all(|&r| bucket_of(r) == hist.len() - 1 || r < BUCKET_EDGES[bucket_of(r)]));
    }

    #[test]
    fn cdf_is_monotone(values in prop::collection::vec(0.001f64..1e9, 1..300)) {
        let c = cdf_series(&values);
        prop_assert!(c.windows(2).all(|w| w[0].x < w[1].x && w[0].y <= w[1].y));
        prop_assert_eq!(c.last().unwrap().y, 1.0);
        prop_assert_eq!(c.len(), values.iter().map(|v| v.to_bits()).collect::<BTreeSet<_>>().len());
    }
}

#[test]
fn counts_each_domain_once_per_protocol() {
    use optperf_core::metrics::PerfIndicators;
    use optperf_core::record::IndicatorRecord;
    use optperf_core::report::count_rows;
    let ind = PerfIndicators {
        mean_throughput: 1.0,
        downstream_throughput: 1.0,
        goodput: None,
        mean_rtt_ms: None,
        rtt_sample_count: 0,
        retransmission_rate: None,
        bytes_total: 1,
        bytes_retransmitted: 0,
        duration_s: 1.0,
        ecn_usage: Default::default(),
        sack_usage: Default::default(),
    };
    let rows: Vec<IndicatorRecord> = ["BL", "WS", "ALL"]
        .iter()
        .map(|c| IndicatorRecord::new("r", c.parse().unwrap(), "x", None, "vp", &ind))
        .collect();
    let counts = count_rows(&rows, &HashMap::new());
    assert_eq!(counts.len(), 1);
    assert_eq!(counts[0].total, 1);
}
