//! Address → origin AS → organisation → CDN group.

pub mod mrt;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::BufRead;
use std::net::IpAddr;
use std::path::Path;
use std::str::FromStr;

use ipnet::IpNet;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("prefix table is empty ({skipped} unparseable line(s))")]
    EmptyTable { skipped: usize },
    #[error("MRT: {0}")]
    Mrt(String),
    #[error("domain {0} has no resolved addresses")]
    NoAddresses(String),
    #[error("unknown CDN group {0:?}")]
    UnknownGroup(String),
    #[error("ASN {asn} mapped to both {first} and {second}")]
    ConflictingOrg {
        asn: u32,
        first: String,
        second: String,
    },
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Origin ASNs announcing a prefix; more than one on MOAS conflicts.
pub type Origins = BTreeSet<u32>;

/// Longest-prefix-match table for IPv4 and IPv6. One hash map per prefix
/// length; lookups probe lengths longest first.
#[derive(Debug, Default, Clone)]
pub struct PrefixTable {
    v4: BTreeMap<u8, HashMap<u32, Origins>>,
    v6: BTreeMap<u8, HashMap<u128, Origins>>,
    entries: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadStats {
    pub loaded: usize,
    pub skipped: usize,
}

fn mask4(a: u32, len: u8) -> u32 {
    if len == 0 {
        0
    } else {
        a & (u32::MAX << (32 - u32::from(len)))
    }
}

fn mask6(a: u128, len: u8) -> u128 {
    if len == 0 {
        0
    } else {
        a & (u128::MAX << (128 - u32::from(len)))
    }
}

impl PrefixTable {
    pub fn new() -> PrefixTable {
        PrefixTable::default()
    }

    pub fn len(&self) -> usize {
        self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries == 0
    }

    /// Adds origins for a prefix; repeated prefixes accumulate origins.
    pub fn insert(&mut self, net: IpNet, origins: impl IntoIterator<Item = u32>) {
        let len = net.prefix_len();
        let set = match net {
            IpNet::V4(n) => self
                .v4
                .entry(len)
                .or_default()
                .entry(mask4(u32::from(n.network()), len)),
            IpNet::V6(n) => {
                let slot = self
                    .v6
                    .entry(len)
                    .or_default()
                    .entry(mask6(u128::from(n.network()), len));
                if matches!(slot, std::collections::hash_map::Entry::Vacant(_)) {
                    self.entries += 1;
                }
                slot.or_default().extend(origins);
                return;
            }
        };
        if matches!(set, std::collections::hash_map::Entry::Vacant(_)) {
            self.entries += 1;
        }
        set.or_default().extend(origins);
    }

    /// Longest matching prefix and its origins.
    pub fn lookup(&self, addr: IpAddr) -> Option<(IpNet, &Origins)> {
        match addr {
            IpAddr::V4(a) => {
                let a = u32::from(a);
                self.v4.iter().rev().find_map(|(&len, map)| {
                    let key = mask4(a, len);
                    map.get(&key).map(|o| {
                        (
                            IpNet::new(IpAddr::V4(key.into()), len).expect("valid length"),
                            o,
                        )
                    })
                })
            }
            IpAddr::V6(a) => {
                let a = u128::from(a);
                self.v6.iter().rev().find_map(|(&len, map)| {
                    let key = mask6(a, len);
                    map.get(&key).map(|o| {
                        (
                            IpNet::new(IpAddr::V6(key.into()), len).expect("valid length"),
                            o,
                        )
                    })
                })
            }
        }
    }

    /// Reads the tab-separated `prefix<TAB>length<TAB>asn` text format. The
    /// ASN field may list several origins separated by `_` or `,`.
    pub fn from_prefix2as<R: BufRead>(
        input: R,
    ) -> Result<(PrefixTable, LoadStats), AttributionError> {
        let mut table = PrefixTable::new();
        let mut stats = LoadStats::default();
        for line in input.lines() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match parse_prefix2as_line(line) {
                Some((net, origins)) => {
                    table.insert(net, origins);
                    stats.loaded += 1;
                }
                None => stats.skipped += 1,
            }
        }
        if table.is_empty() {
            return Err(AttributionError::EmptyTable {
                skipped: stats.skipped,
            });
        }
        Ok((table, stats))
    }

    pub fn from_mrt(bytes: &[u8]) -> Result<(PrefixTable, LoadStats), AttributionError> {
        let rib = mrt::read_rib(bytes)?;
        let mut table = PrefixTable::new();
        let mut stats = LoadStats {
            loaded: 0,
            skipped: rib.skipped,
        };
        for (net, origins) in rib.routes {
            if origins.is_empty() {
                stats.skipped += 1;
                continue;
            }
            table.insert(net, origins);
            stats.loaded += 1;
        }
        if table.is_empty() {
            return Err(AttributionError::EmptyTable {
                skipped: stats.skipped,
            });
        }
        Ok((table, stats))
    }

    /// Loads either format, sniffing for an MRT header.
    pub fn load(path: &Path) -> Result<(PrefixTable, LoadStats), AttributionError> {
        let bytes = std::fs::read(path)?;
        if mrt::looks_like_mrt(&bytes) {
            PrefixTable::from_mrt(&bytes)
        } else {
            PrefixTable::from_prefix2as(bytes.as_slice())
        }
    }
}

fn parse_prefix2as_line(line: &str) -> Option<(IpNet, Vec<u32>)> {
    let mut parts = line.split_whitespace();
    let addr: IpAddr = parts.next()?.parse().ok()?;
    let len: u8 = parts.next()?.parse().ok()?;
    let asns = parts.next()?;
    if parts.next().is_some() {
        return None;
    }
    let net = IpNet::new(addr, len).ok()?.trunc();
    let origins = asns
        .split(['_', ','])
        .map(|a| a.parse::<u32>().ok())
        .collect::<Option<Vec<_>>>()?;
    if origins.is_empty() {
        return None;
    }
    Some((net, origins))
}

/// The five giant CDNs plus everything else. Declaration order is the
/// tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CdnGroup {
    Akamai,
    Amazon,
    Cloudflare,
    Google,
    Microsoft,
    Others,
}

impl CdnGroup {
    pub const ALL: [CdnGroup; 6] = [
        CdnGroup::Akamai,
        CdnGroup::Amazon,
        CdnGroup::Cloudflare,
        CdnGroup::Google,
        CdnGroup::Microsoft,
        CdnGroup::Others,
    ];
}

impl fmt::Display for CdnGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for CdnGroup {
    type Err = AttributionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CdnGroup::ALL
            .into_iter()
            .find(|g| g.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| AttributionError::UnknownGroup(s.to_string()))
    }
}

/// ASN → organisation, and organisation → giant-CDN group.
#[derive(Debug, Clone, Default)]
pub struct OrgMap {
    asn_org: HashMap<u32, String>,
    org_names: HashMap<String, String>,
    org_group: HashMap<String, CdnGroup>,
}

#[derive(Debug, Deserialize)]
struct AsOrgRow {
    asn: u32,
    org_id: String,
    #[serde(default)]
    org_name: String,
}

#[derive(Debug, Deserialize)]
struct GroupRow {
    org_id: String,
    group: String,
}

impl OrgMap {
    pub fn new() -> OrgMap {
        OrgMap::default()
    }

    pub fn add_asn(&mut self, asn: u32, org_id: &str) -> Result<(), AttributionError> {
        match self.asn_org.get(&asn) {
            Some(existing) if existing != org_id => Err(AttributionError::ConflictingOrg {
                asn,
                first: existing.clone(),
                second: org_id.to_string(),
            }),
            _ => {
                self.asn_org.insert(asn, org_id.to_string());
                Ok(())
            }
        }
    }

    pub fn set_group(&mut self, org_id: &str, group: CdnGroup) {
        self.org_group.insert(org_id.to_string(), group);
    }

    /// Reads `asn,org_id,org_name` rows (with header).
    pub fn read_as_orgs<R: std::io::Read>(&mut self, input: R) -> Result<(), AttributionError> {
        for row in csv::Reader::from_reader(input).deserialize::<AsOrgRow>() {
            let row = row?;
            self.add_asn(row.asn, &row.org_id)?;
            if !row.org_name.is_empty() {
                self.org_names.insert(row.org_id, row.org_name);
            }
        }
        Ok(())
    }

    /// Reads `org_id,group` rows (with header).
    pub fn read_groups<R: std::io::Read>(&mut self, input: R) -> Result<(), AttributionError> {
        for row in csv::Reader::from_reader(input).deserialize::<GroupRow>() {
            let row = row?;
            let group: CdnGroup = row.group.parse()?;
            self.set_group(&row.org_id, group);
        }
        Ok(())
    }

    pub fn org_of(&self, asn: u32) -> Option<&str> {
        self.asn_org.get(&asn).map(String::as_str)
    }

    pub fn org_name(&self, org_id: &str) -> Option<&str> {
        self.org_names.get(org_id).map(String::as_str)
    }

    /// Giant-CDN group of an ASN, `None` for everything else.
    pub fn group_of(&self, asn: u32) -> Option<CdnGroup> {
        self.org_of(asn)
            .and_then(|o| self.org_group.get(o))
            .copied()
            .filter(|g| *g != CdnGroup::Others)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainAttribution {
    pub domain: String,
    pub group: CdnGroup,
    /// Addresses pointed at more than one giant CDN.
    pub ambiguous: bool,
    pub mapped: usize,
    pub unmapped: usize,
    pub asns: Vec<u32>,
}

/// Assigns a domain to a CDN group by majority over its addresses.
pub fn classify_domain(
    domain: &str,
    addrs: &[IpAddr],
    table: &PrefixTable,
    orgs: &OrgMap,
) -> Result<DomainAttribution, AttributionError> {
    if addrs.is_empty() {
        return Err(AttributionError::NoAddresses(domain.to_string()));
    }
    let mut votes: BTreeMap<CdnGroup, usize> = BTreeMap::new();
    let mut distinct: BTreeSet<CdnGroup> = BTreeSet::new();
    let mut asns = BTreeSet::new();
    let mut mapped = 0;
    for &addr in addrs {
        let Some((_, origins)) = table.lookup(addr) else {
            continue;
        };
        mapped += 1;
        asns.extend(origins.iter().copied());
        let groups: BTreeSet<CdnGroup> = origins.iter().filter_map(|&a| orgs.group_of(a)).collect();
        distinct.extend(groups.iter().copied());
        if let Some(&g) = groups.first() {
            *votes.entry(g).or_default() += 1;
        }
    }
    // Highest vote count; BTreeMap order makes the earliest group win ties.
    let group = votes
        .iter()
        .fold(None::<(CdnGroup, usize)>, |best, (&g, &n)| match best {
            Some((_, bn)) if bn >= n => best,
            _ => Some((g, n)),
        })
        .map_or(CdnGroup::Others, |(g, _)| g);
    Ok(DomainAttribution {
        domain: domain.to_string(),
        group,
        ambiguous: distinct.len() > 1,
        mapped,
        unmapped: addrs.len() - mapped,
        asns: asns.into_iter().collect(),
    })
}
