//! Hourly VM cost model for completed training runs.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    /// One large multi-GPU node.
    SingleNode,
    /// One large primary node plus one small node per worker.
    ParameterServer { workers: usize },
}

impl Architecture {
    pub const PAPER_PSV: Architecture = Architecture::ParameterServer { workers: 4 };

    pub fn label(&self) -> &'static str {
        match self {
            Architecture::SingleNode => "sn",
            Architecture::ParameterServer { .. } => "psv",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Architecture::SingleNode => write!(f, "sn"),
            Architecture::ParameterServer { workers } => write!(f, "psv:{workers}"),
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;

    /// Accepts `sn`, `psv` (four workers) or `psv:<workers>`.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sn" => Ok(Architecture::SingleNode),
            "psv" => Ok(Architecture::PAPER_PSV),
            other => match other.strip_prefix("psv:").map(str::parse::<usize>) {
                Some(Ok(workers)) if workers >= 1 => Ok(Architecture::ParameterServer { workers }),
                _ => Err(Error::Config(format!("unknown architecture '{other}'"))),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostModel {
    /// $/hour of the node hosting the primary (or the whole single-node run).
    pub large_rate: f64,
    /// $/hour of each worker node.
    pub small_rate: f64,
}

impl CostModel {
    /// Promotional NC24 / NC6 pricing.
    pub const PROMO: CostModel = CostModel {
        large_rate: 1.584,
        small_rate: 0.396,
    };
    /// List NC24 / NC6 pricing.
    pub const FULL: CostModel = CostModel {
        large_rate: 3.60,
        small_rate: 0.90,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.large_rate > 0.0 && self.small_rate > 0.0) {
            return Err(Error::Config("node rates must be > 0".into()));
        }
        Ok(())
    }

    /// `(large nodes, small nodes)` used by an architecture.
    pub fn inventory(arch: Architecture) -> (usize, usize) {
        match arch {
            Architecture::SingleNode => (1, 0),
            Architecture::ParameterServer { workers } => (1, workers),
        }
    }

    pub fn hourly_rate(&self, arch: Architecture) -> f64 {
        let (large, small) = Self::inventory(arch);
        large as f64 * self.large_rate + small as f64 * self.small_rate
    }
}

/// Cost of keeping the architecture's nodes up for `wall_time_s` seconds.
pub fn estimate_cost(wall_time_s: f64, arch: Architecture, rates: &CostModel) -> Result<f64> {
    rates.validate()?;
    if !(wall_time_s > 0.0) {
        return Err(Error::Config(format!("wall time must be > 0, got {wall_time_s}")));
    }
    Ok(wall_time_s / 3600.0 * rates.hourly_rate(arch))
}

/// Parses `HH:MM:SS[.ffffff]` into seconds.
pub fn parse_hms(s: &str) -> Result<f64> {
    let parts: Vec<&str> = s.trim().split(':').collect();
    let bad = || Error::Config(format!("expected HH:MM:SS, got '{s}'"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let h: u64 = parts[0].parse().map_err(|_| bad())?;
    let m: u64 = parts[1].parse().map_err(|_| bad())?;
    let sec: f64 = parts[2].parse().map_err(|_| bad())?;
    if m >= 60 || !(0.0..60.0).contains(&sec) {
        return Err(bad());
    }
    Ok(h as f64 * 3600.0 + m as f64 * 60.0 + sec)
}

pub fn format_hms(seconds: f64) -> String {
    let whole = seconds.max(0.0);
    let h = (whole / 3600.0).floor();
    let m = ((whole - h * 3600.0) / 60.0).floor();
    let s = whole - h * 3600.0 - m * 60.0;
    format!("{:02}:{:02}:{:09.6}", h as u64, m as u64, s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_node_promo_row() {
        let t = parse_hms("06:24:47.519815").unwrap();
        let c = estimate_cost(t, Architecture::SingleNode, &CostModel::PROMO).unwrap();
        assert!((c - 10.16).abs() <= 0.01, "{c}");
    }

    #[test]
    fn psv_promo_row() {
        let t = parse_hms("22:10:41.253272").unwrap();
        let c = estimate_cost(t, Architecture::PAPER_PSV, &CostModel::PROMO).unwrap();
        assert!((c - 70.26).abs() <= 0.01, "{c}");
    }

    #[test]
    fn unit_rates_count_nodes() {
        let unit = CostModel {
            large_rate: 1.0,
            small_rate: 1.0,
        };
        assert_eq!(estimate_cost(3600.0, Architecture::SingleNode, &unit).unwrap(), 1.0);
        assert_eq!(estimate_cost(3600.0, Architecture::PAPER_PSV, &unit).unwrap(), 5.0);
    }

    #[test]
    fn linear_in_time() {
        let a = estimate_cost(1000.0, Architecture::PAPER_PSV, &CostModel::FULL).unwrap();
        let b = estimate_cost(3000.0, Architecture::PAPER_PSV, &CostModel::FULL).unwrap();
        assert!((b - 3.0 * a).abs() < 1e-12);
    }

    #[test]
    fn parsing() {
        assert!("gpu".parse::<Architecture>().is_err());
        assert_eq!("psv:2".parse::<Architecture>().unwrap(), Architecture::ParameterServer { workers: 2 });
        assert!(estimate_cost(0.0, Architecture::SingleNode, &CostModel::PROMO).is_err());
        assert!(parse_hms("1:70:00").is_err());
        let t = parse_hms("12:04:27.297251").unwrap();
        assert_eq!(format_hms(t), "12:04:27.297251");
    }
}
