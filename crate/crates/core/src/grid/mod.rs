//! Static network model: buses, generators, branches.
//!
//! Powers are kept in physical units (MW / MVAr) exactly as they appear in
//! the case data; the solver divides by `base_mva` at its boundary. Shunts,
//! impedances and voltages are per-unit, angles are radians.

mod matpower;
mod ybus;

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ybus::{build_ybus, AdmittanceMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    #[serde(rename = "PQ")]
    Pq,
    #[serde(rename = "PV")]
    Pv,
    Slack,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: i64,
    pub kind: BusKind,
    /// MW
    pub p_demand: f64,
    /// MVAr
    pub q_demand: f64,
    /// Shunt conductance, per-unit at 1 pu voltage.
    pub shunt_g: f64,
    /// Shunt susceptance, per-unit at 1 pu voltage.
    pub shunt_b: f64,
    pub v_mag_init: f64,
    /// Radians.
    pub v_ang_init: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gen {
    pub bus: i64,
    /// MW
    pub p_out: f64,
    /// MVAr
    pub q_out: f64,
    pub q_max: f64,
    pub q_min: f64,
    pub v_set: f64,
    pub status: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: i64,
    pub to: i64,
    pub r: f64,
    pub x: f64,
    pub b_charging: f64,
    /// Off-nominal turns ratio; 0 means a plain line.
    pub tap_ratio: f64,
    /// Radians.
    pub phase_shift: f64,
    pub status: bool,
}

impl Branch {
    pub fn has_transformer(&self) -> bool {
        (self.tap_ratio != 0.0 && self.tap_ratio != 1.0) || self.phase_shift != 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseFormat {
    /// MATPOWER `.m` case file (bus/gen/branch/baseMVA assignments only).
    Matpower,
    Json,
}

impl CaseFormat {
    /// Guess the format from a file extension.
    pub fn from_path(path: &std::path::Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "m" => Some(CaseFormat::Matpower),
            "json" => Some(CaseFormat::Json),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCase {
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub gens: Vec<Gen>,
    pub branches: Vec<Branch>,
}

pub fn parse_case(text: &str, format: CaseFormat) -> Result<GridCase> {
    let case = match format {
        CaseFormat::Matpower => matpower::parse(text)?,
        CaseFormat::Json => serde_json::from_str(text)?,
    };
    case.validate()?;
    Ok(case)
}

impl GridCase {
    pub fn from_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let format = CaseFormat::from_path(path).ok_or_else(|| {
            Error::Config(format!(
                "cannot infer case format of {} (expected .m or .json)",
                path.display()
            ))
        })?;
        parse_case(&std::fs::read_to_string(path)?, format)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("case serialization cannot fail")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_mva > 0.0) {
            return Err(Error::Validation(format!(
                "base_mva must be positive, got {}",
                self.base_mva
            )));
        }
        if self.buses.is_empty() {
            return Err(Error::Validation("case has no buses".into()));
        }
        let mut ids = HashSet::with_capacity(self.buses.len());
        for bus in &self.buses {
            if !ids.insert(bus.id) {
                return Err(Error::Validation(format!("duplicate bus id {}", bus.id)));
            }
            if !(bus.v_mag_init > 0.0) {
                return Err(Error::Validation(format!(
                    "bus {} has non-positive initial voltage",
                    bus.id
                )));
            }
        }
        let slacks = self
            .buses
            .iter()
            .filter(|b| b.kind == BusKind::Slack)
            .count();
        if slacks != 1 {
            return Err(Error::Validation(format!(
                "expected exactly one slack bus, found {slacks}"
            )));
        }
        for (k, br) in self.branches.iter().enumerate() {
            for end in [br.from, br.to] {
                if !ids.contains(&end) {
                    return Err(Error::Validation(format!(
                        "branch {} references missing bus {end}",
                        k + 1
                    )));
                }
            }
            if br.status && br.r == 0.0 && br.x == 0.0 {
                return Err(Error::Validation(format!(
                    "in-service branch {} ({}-{}) has zero impedance",
                    k + 1,
                    br.from,
                    br.to
                )));
            }
        }
        for (k, g) in self.gens.iter().enumerate() {
            if !ids.contains(&g.bus) {
                return Err(Error::Validation(format!(
                    "generator {} references missing bus {}",
                    k + 1,
                    g.bus
                )));
            }
            if g.q_min > g.q_max {
                return Err(Error::Validation(format!(
                    "generator {} has q_min > q_max",
                    k + 1
                )));
            }
            if !(g.v_set > 0.0) {
                return Err(Error::Validation(format!(
                    "generator {} has non-positive voltage set-point",
                    k + 1
                )));
            }
        }
        Ok(())
    }

    /// Bus id -> position in `buses`.
    pub fn index_map(&self) -> HashMap<i64, usize> {
        self.buses
            .iter()
            .enumerate()
            .map(|(i, b)| (b.id, i))
            .collect()
    }

    pub fn bus_position(&self, id: i64) -> Result<usize> {
        self.buses
            .iter()
            .position(|b| b.id == id)
            .ok_or(Error::UnknownBus(id))
    }

    pub fn slack_position(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.kind == BusKind::Slack)
            .expect("validated case has a slack bus")
    }

    pub fn total_p_demand(&self) -> f64 {
        self.buses.iter().map(|b| b.p_demand).sum()
    }

    /// PQ buses carrying a nonzero active demand, in case order.
    pub fn loaded_pq_buses(&self) -> Vec<i64> {
        self.buses
            .iter()
            .filter(|b| b.kind == BusKind::Pq && b.p_demand != 0.0)
            .map(|b| b.id)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::two_bus;

    #[test]
    fn rejects_empty_network() {
        let mut case = two_bus(0.1, 0.0);
        case.buses.clear();
        case.gens.clear();
        case.branches.clear();
        assert!(matches!(case.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn rejects_missing_slack_and_dangling_branch() {
        let mut case = two_bus(0.1, 0.0);
        case.buses[0].kind = BusKind::Pv;
        assert!(matches!(case.validate(), Err(Error::Validation(_))));

        let mut case = two_bus(0.1, 0.0);
        case.branches[0].to = 7;
        assert!(matches!(case.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn rejects_zero_impedance_in_service_branch() {
        let case = two_bus(0.0, 0.0);
        assert!(case.validate().is_err());
        let mut off = two_bus(0.0, 0.0);
        off.branches[0].status = false;
        assert!(off.validate().is_ok());
    }

    #[test]
    fn json_round_trip() {
        let case = two_bus(0.1, 0.2);
        let back = parse_case(&case.to_json(), CaseFormat::Json).unwrap();
        assert_eq!(case, back);
    }
}
