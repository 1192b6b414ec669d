//! Client-side download configurations and the per-run matrix.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::capture::SideOptions;

/// Window-scale shift requested whenever WS is enabled.
pub const CLIENT_WS_SHIFT: u8 = 14;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ConfigName {
    Warmup,
    Bl,
    Ecn,
    Sack,
    Ws,
    All,
    Quic(String),
}

impl ConfigName {
    pub fn is_quic(&self) -> bool {
        matches!(self, ConfigName::Quic(_))
    }
}

impl fmt::Display for ConfigName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigName::Warmup => f.write_str("WARMUP"),
            ConfigName::Bl => f.write_str("BL"),
            ConfigName::Ecn => f.write_str("ECN"),
            ConfigName::Sack => f.write_str("SACK"),
            ConfigName::Ws => f.write_str("WS"),
            ConfigName::All => f.write_str("ALL"),
            ConfigName::Quic(id) => write!(f, "QUIC:{id}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MatrixError {
    #[error("unknown configuration name {0:?}")]
    UnknownName(String),
    #[error("empty QUIC client id")]
    EmptyQuicId,
    #[error("configuration {0} violates its option invariants")]
    BadOptions(String),
    #[error("matrix must start with WARMUP")]
    WarmupNotFirst,
    #[error("TCP configuration {0} follows a QUIC configuration")]
    TcpAfterQuic(String),
    #[error("configuration {0} listed twice")]
    Duplicate(String),
    #[error("window-scale shift {0} outside [0, 14]")]
    ShiftRange(u8),
}

impl FromStr for ConfigName {
    type Err = MatrixError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let upper = s.trim().to_ascii_uppercase();
        Ok(match upper.as_str() {
            "WARMUP" | "WARM-UP" => ConfigName::Warmup,
            "BL" => ConfigName::Bl,
            "ECN" => ConfigName::Ecn,
            "SACK" => ConfigName::Sack,
            "WS" => ConfigName::Ws,
            "ALL" => ConfigName::All,
            _ => {
                let Some(id) = s.trim().get(5..).filter(|_| upper.starts_with("QUIC:")) else {
                    return Err(MatrixError::UnknownName(s.to_string()));
                };
                if id.is_empty() {
                    return Err(MatrixError::EmptyQuicId);
                }
                ConfigName::Quic(id.to_string())
            }
        })
    }
}

impl Serialize for ConfigName {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ConfigName {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One cell of the download matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptionConfig {
    pub name: ConfigName,
    pub ecn: bool,
    pub sack: bool,
    pub ws: bool,
    /// Requested shift; meaningful only when `ws` is set.
    pub ws_shift: u8,
}

impl OptionConfig {
    /// The canonical option set for a name.
    pub fn named(name: ConfigName) -> OptionConfig {
        let (ecn, sack, ws) = match name {
            ConfigName::Warmup | ConfigName::Bl | ConfigName::Quic(_) => (false, false, false),
            ConfigName::Ecn => (true, false, false),
            ConfigName::Sack => (false, true, false),
            ConfigName::Ws => (false, false, true),
            ConfigName::All => (true, true, true),
        };
        OptionConfig {
            name,
            ecn,
            sack,
            ws,
            ws_shift: if ws { CLIENT_WS_SHIFT } else { 0 },
        }
    }

    pub fn is_quic(&self) -> bool {
        self.name.is_quic()
    }

    /// Compares the options of a client SYN with this configuration. The
    /// shift must match exactly when WS is enabled.
    pub fn check_syn(&self, syn: &SideOptions) -> Result<(), String> {
        let mut bad = Vec::new();
        if syn.ecn_setup != self.ecn {
            bad.push(format!("ECN setup {} (want {})", syn.ecn_setup, self.ecn));
        }
        if syn.sack_permitted != self.sack {
            bad.push(format!(
                "SACK-permitted {} (want {})",
                syn.sack_permitted, self.sack
            ));
        }
        let want_ws = self.ws.then_some(self.ws_shift);
        if syn.window_scale != want_ws {
            bad.push(format!(
                "window scale {:?} (want {want_ws:?})",
                syn.window_scale
            ));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(format!("{}: {}", self.name, bad.join(", ")))
        }
    }

    pub fn validate(&self) -> Result<(), MatrixError> {
        if self.ws_shift > CLIENT_WS_SHIFT {
            return Err(MatrixError::ShiftRange(self.ws_shift));
        }
        let canonical = OptionConfig::named(self.name.clone());
        let ok = match self.name {
            ConfigName::Warmup | ConfigName::Bl | ConfigName::All => {
                (self.ecn, self.sack, self.ws) == (canonical.ecn, canonical.sack, canonical.ws)
            }
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(MatrixError::BadOptions(self.name.to_string()))
        }
    }
}

/// TCP part of the default matrix, in execution order.
pub const DEFAULT_TCP_ORDER: [ConfigName; 6] = [
    ConfigName::Warmup,
    ConfigName::Bl,
    ConfigName::Ecn,
    ConfigName::Sack,
    ConfigName::Ws,
    ConfigName::All,
];

/// WARMUP, BL, ECN, SACK, WS, ALL, then one entry per QUIC client.
pub fn default_matrix<S: AsRef<str>>(quic_clients: &[S]) -> Vec<OptionConfig> {
    DEFAULT_TCP_ORDER
        .iter()
        .cloned()
        .chain(
            quic_clients
                .iter()
                .map(|c| ConfigName::Quic(c.as_ref().to_string())),
        )
        .map(OptionConfig::named)
        .collect()
}

/// Builds a matrix from names, using canonical option sets.
pub fn matrix_from_names<S: AsRef<str>>(names: &[S]) -> Result<Vec<OptionConfig>, MatrixError> {
    let m = names
        .iter()
        .map(|n| n.as_ref().parse().map(OptionConfig::named))
        .collect::<Result<Vec<_>, _>>()?;
    validate_matrix(&m)?;
    Ok(m)
}

/// WARMUP first, every TCP configuration before every QUIC one, no repeats.
pub fn validate_matrix(m: &[OptionConfig]) -> Result<(), MatrixError> {
    if m.first().map(|c| &c.name) != Some(&ConfigName::Warmup) {
        return Err(MatrixError::WarmupNotFirst);
    }
    let mut seen_quic = false;
    let mut names = std::collections::HashSet::new();
    for c in m {
        c.validate()?;
        if !names.insert(c.name.clone()) {
            return Err(MatrixError::Duplicate(c.name.to_string()));
        }
        if c.is_quic() {
            seen_quic = true;
        } else if seen_quic {
            return Err(MatrixError::TcpAfterQuic(c.name.to_string()));
        }
    }
    Ok(())
}
