//! Minimal MRT `TABLE_DUMP_V2` reader: extracts (prefix, origin AS set) from
//! RIB records and ignores everything else.

use std::collections::BTreeSet;
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};

use ipnet::IpNet;

use super::AttributionError;

const TYPE_TABLE_DUMP_V2: u16 = 13;
const RIB_IPV4_UNICAST: u16 = 2;
const RIB_IPV6_UNICAST: u16 = 4;
const RIB_IPV4_UNICAST_ADDPATH: u16 = 8;
const RIB_IPV6_UNICAST_ADDPATH: u16 = 10;

const ATTR_AS_PATH: u8 = 2;
const ATTR_FLAG_EXTENDED: u8 = 0x10;
const AS_SET: u8 = 1;
const AS_SEQUENCE: u8 = 2;

/// True when the bytes start with an MRT common header of type TABLE_DUMP_V2.
pub fn looks_like_mrt(bytes: &[u8]) -> bool {
    bytes.len() >= 12 && u16::from_be_bytes([bytes[4], bytes[5]]) == TYPE_TABLE_DUMP_V2
}

#[derive(Debug, Default)]
pub struct MrtRoutes {
    pub routes: Vec<(IpNet, BTreeSet<u32>)>,
    /// RIB records or entries that could not be decoded.
    pub skipped: usize,
}

pub fn read_rib(bytes: &[u8]) -> Result<MrtRoutes, AttributionError> {
    let mut out = MrtRoutes::default();
    let mut rest = bytes;
    while !rest.is_empty() {
        if rest.len() < 12 {
            return Err(AttributionError::Mrt("truncated MRT header".into()));
        }
        let mtype = u16::from_be_bytes([rest[4], rest[5]]);
        let subtype = u16::from_be_bytes([rest[6], rest[7]]);
        let len = u32::from_be_bytes([rest[8], rest[9], rest[10], rest[11]]) as usize;
        if rest.len() < 12 + len {
            return Err(AttributionError::Mrt("truncated MRT record".into()));
        }
        let body = &rest[12..12 + len];
        rest = &rest[12 + len..];
        if mtype != TYPE_TABLE_DUMP_V2 {
            continue;
        }
        let (v6, addpath) = match subtype {
            RIB_IPV4_UNICAST => (false, false),
            RIB_IPV6_UNICAST => (true, false),
            RIB_IPV4_UNICAST_ADDPATH => (false, true),
            RIB_IPV6_UNICAST_ADDPATH => (true, true),
            _ => continue,
        };
        match rib_record(body, v6, addpath) {
            Some(route) => out.routes.push(route),
            None => out.skipped += 1,
        }
    }
    Ok(out)
}

fn rib_record(b: &[u8], v6: bool, addpath: bool) -> Option<(IpNet, BTreeSet<u32>)> {
    let plen = *b.get(4)?;
    let nbytes = usize::from(plen).div_ceil(8);
    let pfx = b.get(5..5 + nbytes)?;
    let net = if v6 {
        let mut a = [0u8; 16];
        a[..nbytes].copy_from_slice(pfx);
        IpNet::new(IpAddr::V6(Ipv6Addr::from(a)), plen).ok()?
    } else {
        let mut a = [0u8; 4];
        a.get_mut(..nbytes)?.copy_from_slice(pfx);
        IpNet::new(IpAddr::V4(Ipv4Addr::from(a)), plen).ok()?
    }
    .trunc();
    let mut at = 5 + nbytes;
    let count = u16::from_be_bytes([*b.get(at)?, *b.get(at + 1)?]);
    at += 2;
    let mut origins = BTreeSet::new();
    for _ in 0..count {
        at += 2 + 4; // peer index, originated time
        if addpath {
            at += 4;
        }
        let alen = usize::from(u16::from_be_bytes([*b.get(at)?, *b.get(at + 1)?]));
        at += 2;
        let attrs = b.get(at..at + alen)?;
        at += alen;
        origins.extend(origin_of(attrs)?);
    }
    Some((net, origins))
}

/// Origin AS(es) from an attribute block: the last ASN of a trailing
/// AS_SEQUENCE, or every member of a trailing AS_SET.
fn origin_of(mut attrs: &[u8]) -> Option<Vec<u32>> {
    while attrs.len() >= 3 {
        let flags = attrs[0];
        let code = attrs[1];
        let (len, hdr) = if flags & ATTR_FLAG_EXTENDED != 0 {
            (
                usize::from(u16::from_be_bytes([attrs[2], *attrs.get(3)?])),
                4,
            )
        } else {
            (usize::from(attrs[2]), 3)
        };
        let value = attrs.get(hdr..hdr + len)?;
        attrs = &attrs[hdr + len..];
        if code != ATTR_AS_PATH {
            continue;
        }
        let mut segs = value;
        let mut last: Option<(u8, Vec<u32>)> = None;
        while segs.len() >= 2 {
            let kind = segs[0];
            let n = usize::from(segs[1]);
            let asns = segs.get(2..2 + 4 * n)?;
            segs = &segs[2 + 4 * n..];
            if n > 0 {
                let list = asns
                    .chunks_exact(4)
                    .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                last = Some((kind, list));
            }
        }
        return match last {
            Some((AS_SEQUENCE, list)) => Some(list.last().copied().into_iter().collect()),
            Some((AS_SET, list)) => Some(list),
            Some(_) => Some(Vec::new()),
            None => Some(Vec::new()),
        };
    }
    Some(Vec::new())
}
