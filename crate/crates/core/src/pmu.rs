//! Synthetic PMU phasor streams: measurement vectors from power-flow
//! solutions, additive Gaussian noise, piecewise load schedules and
//! time-ordered measurement windows.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cpflow::PVCurve;
use crate::error::{Error, Result};
use crate::grid::{build_ybus, GridCase};
use crate::powerflow::{solve_newton, warm_start, PowerFlowSolution, SolverOptions};

/// Default PMU reporting interval (50 Hz).
pub const DEFAULT_DT: f64 = 1.0 / 50.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PmuPlacement {
    pub observed_buses: Vec<i64>,
}

impl PmuPlacement {
    pub fn new(observed_buses: Vec<i64>) -> Result<Self> {
        let p = PmuPlacement { observed_buses };
        if p.observed_buses.is_empty() {
            return Err(Error::Config("PMU placement is empty".into()));
        }
        let mut seen = HashSet::new();
        if let Some(d) = p.observed_buses.iter().find(|b| !seen.insert(**b)) {
            return Err(Error::Config(format!("bus {d} listed twice in PMU placement")));
        }
        Ok(p)
    }

    pub fn check(&self, case: &GridCase) -> Result<()> {
        for &b in &self.observed_buses {
            case.bus_position(b)?;
        }
        Ok(())
    }

    /// Measurement vector length: one magnitude and one angle per PMU.
    pub fn vector_len(&self) -> usize {
        2 * self.observed_buses.len()
    }

    /// Built-in placement for a named case (`case14`, `case57`, `case118`).
    pub fn preset(name: &str) -> Option<Self> {
        let buses: &[i64] = match name {
            "case14" => &[2, 4, 6, 7, 9],
            "case57" => &[
                1, 2, 6, 10, 12, 19, 22, 24, 25, 27, 32, 36, 38, 41, 45, 46, 48, 49, 52, 55, 57,
            ],
            "case118" => &[
                2, 4, 5, 9, 11, 12, 15, 17, 21, 24, 25, 28, 34, 37, 40, 45, 49, 52, 54, 56, 62, 63,
                66, 68, 73, 75, 77, 80, 82, 85, 86, 89, 90, 94, 101, 105, 107, 110, 114,
            ],
            _ => return None,
        };
        Some(PmuPlacement {
            observed_buses: buses.to_vec(),
        })
    }

    fn positions(&self, sol: &PowerFlowSolution) -> Result<Vec<usize>> {
        self.observed_buses
            .iter()
            .map(|b| {
                sol.bus_ids
                    .iter()
                    .position(|id| id == b)
                    .ok_or(Error::UnobservedBus(*b))
            })
            .collect()
    }
}

/// `[V_1..V_n, θ_1..θ_n]`: magnitudes (pu) then angles (rad), in placement order.
pub type PhasorVector = Vec<f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementWindow {
    pub t_start: usize,
    pub dt: f64,
    pub columns: Vec<PhasorVector>,
}

impl MeasurementWindow {
    /// CSV with header `t, <bus>_vm..., <bus>_va...`, one row per tick.
    pub fn write_csv<W: Write>(&self, placement: &PmuPlacement, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(measurement_header(placement))?;
        for (k, col) in self.columns.iter().enumerate() {
            let mut row = vec![(self.t_start + k).to_string()];
            row.extend(col.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a measurement CSV back, returning the placement named in its
    /// header together with the window.
    pub fn read_csv<R: Read>(input: R) -> Result<(PmuPlacement, MeasurementWindow)> {
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let header = r.headers()?.clone();
        let n = header.len().saturating_sub(1);
        if header.get(0) != Some("t") || n == 0 || n % 2 != 0 {
            return Err(Error::Parse {
                line: 1,
                msg: "expected header `t, <bus>_vm..., <bus>_va...`".into(),
            });
        }
        let mut buses = Vec::new();
        for (k, name) in header.iter().skip(1).enumerate() {
            let (suffix, half) = if k < n / 2 { ("_vm", k) } else { ("_va", k - n / 2) };
            let id = name
                .strip_suffix(suffix)
                .and_then(|s| s.parse::<i64>().ok())
                .ok_or_else(|| Error::Parse {
                    line: 1,
                    msg: format!("bad column name `{name}`"),
                })?;
            if k < n / 2 {
                buses.push(id);
            } else if buses[half] != id {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("angle column `{name}` out of order"),
                });
            }
        }
        let placement = PmuPlacement::new(buses)?;
        let mut columns = Vec::new();
        let mut t_start = None;
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let parse = |s: &str| {
                s.parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    msg: format!("not a number: `{s}`"),
                })
            };
            let t = rec[0].parse::<usize>().map_err(|_| Error::Parse {
                line,
                msg: format!("bad tick `{}`", &rec[0]),
            })?;
            let start = *t_start.get_or_insert(t);
            if t != start + columns.len() {
                return Err(Error::Parse {
                    line,
                    msg: "ticks must be consecutive".into(),
                });
            }
            columns.push(rec.iter().skip(1).map(parse).collect::<Result<Vec<_>>>()?);
        }
        Ok((
            placement,
            MeasurementWindow {
                t_start: t_start.unwrap_or(1),
                dt: DEFAULT_DT,
                columns,
            },
        ))
    }
}

pub fn measurement_header(placement: &PmuPlacement) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend(placement.observed_buses.iter().map(|b| format!("{b}_vm")));
    h.extend(placement.observed_buses.iter().map(|b| format!("{b}_va")));
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    pub sigma_mag: f64,
    pub sigma_ang: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            sigma_mag: 1e-3,
            sigma_ang: 1e-3,
            seed: 0,
        }
    }
}

impl NoiseModel {
    pub fn none() -> Self {
        NoiseModel {
            sigma_mag: 0.0,
            sigma_ang: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_mag >= 0.0 && self.sigma_ang >= 0.0) {
            return Err(Error::Config("noise sigmas must be non-negative".into()));
        }
        Ok(())
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// Measurement vector of `sol` at the placement's buses with independent
/// Gaussian noise on every entry.
pub fn sample_pmu<R: Rng + ?Sized>(
    sol: &PowerFlowSolution,
    placement: &PmuPlacement,
    noise: &NoiseModel,
    rng: &mut R,
) -> Result<PhasorVector> {
    noise.validate()?;
    let pos = placement.positions(sol)?;
    let mut v: Vec<f64> = pos
        .iter()
        .map(|&i| sol.v_mag[i])
        .chain(pos.iter().map(|&i| sol.v_ang[i]))
        .collect();
    let n = pos.len();
    if noise.sigma_mag > 0.0 {
        let d = Normal::new(0.0, noise.sigma_mag).expect("sigma checked");
        v[..n].iter_mut().for_each(|x| *x += d.sample(rng));
    }
    if noise.sigma_ang > 0.0 {
        let d = Normal::new(0.0, noise.sigma_ang).expect("sigma checked");
        v[n..].iter_mut().for_each(|x| *x += d.sample(rng));
    }
    Ok(v)
}

/// One measurement vector per curve point, in curve order, drawing noise
/// from a stream seeded by `noise.seed`.
pub fn curve_to_windows(
    curve: &PVCurve,
    placement: &PmuPlacement,
    noise: &NoiseModel,
) -> Result<Vec<PhasorVector>> {
    let mut rng = noise.rng();
    curve
        .points
        .iter()
        .map(|p| sample_pmu(&p.solution, placement, noise, &mut rng))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Bus(i64),
    Buses(Vec<i64>),
    /// The literal string `"all"`: every bus with nonzero base demand in
    /// the scheduled field.
    All(AllBuses),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllBuses {
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Field {
    P,
    Q,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    /// Absolute demand (MW or MVAr).
    Constant,
    /// Demand changes by `value` MW (MVAr) every tick.
    Ramp,
    /// Demand is `value` times the bus's base demand.
    Step,
    /// Demand changes by `value` times the base demand every tick.
    ScaleRamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub t_from: usize,
    pub t_to: usize,
    pub bus: Target,
    pub field: Field,
    pub kind: SegmentKind,
    pub value: f64,
}

/// Piecewise load schedule over ticks `1..=len()`. A (bus, field) level is
/// held between the segments that change it; before its first segment it
/// sits at the case's base demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LoadSchedule {
    pub segments: Vec<Segment>,
}

impl LoadSchedule {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn len(&self) -> usize {
        self.segments.iter().map(|s| s.t_to).max().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    fn targets(&self, seg: &Segment, case: &GridCase) -> Result<Vec<usize>> {
        match &seg.bus {
            Target::Bus(b) => Ok(vec![case.bus_position(*b)?]),
            Target::Buses(bs) => bs.iter().map(|b| case.bus_position(*b)).collect(),
            Target::All(_) => Ok(case
                .buses
                .iter()
                .enumerate()
                .filter(|(_, b)| match seg.field {
                    Field::P => b.p_demand != 0.0,
                    Field::Q => b.q_demand != 0.0,
                })
                .map(|(i, _)| i)
                .collect()),
        }
    }

    /// Segments cover `1..=len()` without gaps, and no two segments
    /// touching the same (bus, field) overlap in time.
    pub fn validate(&self, case: &GridCase) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::EmptyRequest("schedule has no segments".into()));
        }
        let mut covered = vec![false; self.len() + 1];
        let mut claimed: BTreeMap<(usize, Field), Vec<(usize, usize)>> = BTreeMap::new();
        for s in &self.segments {
            if s.t_from == 0 || s.t_from > s.t_to {
                return Err(Error::Config(format!(
                    "segment {}..{} is not a valid tick range (ticks start at 1)",
                    s.t_from, s.t_to
                )));
            }
            if !s.value.is_finite() {
                return Err(Error::Config("segment value must be finite".into()));
            }
            covered[s.t_from..=s.t_to].iter_mut().for_each(|c| *c = true);
            for i in self.targets(s, case)? {
                let ranges = claimed.entry((i, s.field)).or_default();
                if ranges.iter().any(|&(a, b)| s.t_from <= b && a <= s.t_to) {
                    return Err(Error::Config(format!(
                        "overlapping segments for bus {} at ticks {}..{}",
                        case.buses[i].id, s.t_from, s.t_to
                    )));
                }
                ranges.push((s.t_from, s.t_to));
            }
        }
        if let Some(t) = covered.iter().skip(1).position(|c| !c) {
            return Err(Error::Config(format!("schedule leaves tick {} uncovered", t + 1)));
        }
        Ok(())
    }

    /// Demand per tick: one case per tick `1..=len()`.
    pub fn cases(&self, case: &GridCase) -> Result<Vec<GridCase>> {
        self.validate(case)?;
        let mut resolved = Vec::with_capacity(self.segments.len());
        for s in &self.segments {
            resolved.push((s, self.targets(s, case)?));
        }
        let mut current = case.clone();
        let mut out = Vec::with_capacity(self.len());
        for t in 1..=self.len() {
            for (s, idx) in &resolved {
                if t < s.t_from || t > s.t_to {
                    continue;
                }
                for &i in idx {
                    let base = match s.field {
                        Field::P => case.buses[i].p_demand,
                        Field::Q => case.buses[i].q_demand,
                    };
                    let bus = &mut current.buses[i];
                    let level = match s.field {
                        Field::P => &mut bus.p_demand,
                        Field::Q => &mut bus.q_demand,
                    };
                    match s.kind {
                        SegmentKind::Constant => *level = s.value,
                        SegmentKind::Ramp => *level += s.value,
                        SegmentKind::Step => *level = s.value * base,
                        SegmentKind::ScaleRamp => *level += s.value * base,
                    }
                }
            }
            out.push(current.clone());
        }
        Ok(out)
    }
}

/// Active-power schedule of bus 9 used for the 57-bus monitoring scenario.
pub fn table1_schedule() -> LoadSchedule {
    let seg = |t_from, t_to, kind, value| Segment {
        t_from,
        t_to,
        bus: Target::Bus(9),
        field: Field::P,
        kind,
        value,
    };
    LoadSchedule {
        segments: vec![
            seg(1, 500, SegmentKind::Constant, 121.0),
            seg(501, 700, SegmentKind::Ramp, 1.0),
            seg(701, 900, SegmentKind::Constant, 321.0),
            seg(901, 1200, SegmentKind::Ramp, -1.0),
            seg(1201, 1500, SegmentKind::Constant, 121.0),
        ],
    }
}

/// Simultaneous active-power ramps of buses 11 and 14 used for the
/// 118-bus monitoring scenario.
pub fn table2_schedule() -> LoadSchedule {
    let seg = |t_from, t_to, bus, kind, value| Segment {
        t_from,
        t_to,
        bus: Target::Bus(bus),
        field: Field::P,
        kind,
        value,
    };
    LoadSchedule {
        segments: vec![
            seg(1, 500, 11, SegmentKind::Constant, 70.0),
            seg(501, 900, 11, SegmentKind::Ramp, 1.0),
            seg(901, 1500, 11, SegmentKind::Constant, 470.0),
            seg(1, 800, 14, SegmentKind::Constant, 10.0),
            seg(801, 900, 14, SegmentKind::Ramp, 1.0),
            seg(901, 1500, 14, SegmentKind::Constant, 110.0),
        ],
    }
}

/// Solve the schedule tick by tick, warm-starting each solve from the
/// previous tick, and sample one measurement vector per tick.
pub fn replay_schedule(
    case: &GridCase,
    schedule: &LoadSchedule,
    placement: &PmuPlacement,
    noise: &NoiseModel,
    solver: &SolverOptions,
) -> Result<MeasurementWindow> {
    placement.check(case)?;
    noise.validate()?;
    let y = build_ybus(case);
    let mut rng = noise.rng();
    let mut prev: Option<PowerFlowSolution> = None;
    let mut columns = Vec::with_capacity(schedule.len());
    for (k, tick_case) in schedule.cases(case)?.into_iter().enumerate() {
        let start = match &prev {
            Some(sol) => warm_start(&tick_case, sol),
            None => tick_case,
        };
        let sol = solve_newton(&start, &y, solver).map_err(|e| Error::InfeasibleAt {
            tick: k + 1,
            source: Box::new(e),
        })?;
        columns.push(sample_pmu(&sol, placement, noise, &mut rng)?);
        prev = Some(sol);
    }
    Ok(MeasurementWindow {
        t_start: 1,
        dt: DEFAULT_DT,
        columns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::powerflow::solve_newton;
    use crate::testutil::two_bus;

    fn flat_solution() -> PowerFlowSolution {
        let case = two_bus(0.1, 0.0);
        solve_newton(&case, &build_ybus(&case), &SolverOptions::default()).unwrap()
    }

    #[test]
    fn flat_two_bus_vector() {
        let p = PmuPlacement::new(vec![1, 2]).unwrap();
        let v = sample_pmu(&flat_solution(), &p, &NoiseModel::none(), &mut NoiseModel::none().rng())
            .unwrap();
        assert_eq!(v, vec![1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn unobserved_bus_is_reported() {
        let p = PmuPlacement::new(vec![1, 7]).unwrap();
        let err = sample_pmu(&flat_solution(), &p, &NoiseModel::none(), &mut NoiseModel::none().rng());
        assert!(matches!(err, Err(Error::UnobservedBus(7))));
    }

    #[test]
    fn placement_rejects_duplicates_and_empty() {
        assert!(PmuPlacement::new(vec![]).is_err());
        assert!(PmuPlacement::new(vec![3, 3]).is_err());
    }

    #[test]
    fn preset_sizes() {
        for (name, n) in [("case14", 10), ("case57", 42), ("case118", 78)] {
            assert_eq!(PmuPlacement::preset(name).unwrap().vector_len(), n);
        }
    }

    #[test]
    fn schedule_json_shape() {
        let text = r#"[
            {"t_from": 1, "t_to": 2, "bus": 2, "field": "p", "kind": "constant", "value": 5.0},
            {"t_from": 3, "t_to": 4, "bus": [2], "field": "p", "kind": "ramp", "value": 1.5},
            {"t_from": 1, "t_to": 4, "bus": "all", "field": "q", "kind": "step", "value": 2.0}
        ]"#;
        let s = LoadSchedule::from_json(text).unwrap();
        assert_eq!(s.segments[2].bus, Target::All(AllBuses::All));
        let mut case = two_bus(0.1, 0.0);
        case.buses[1].q_demand = 3.0;
        let ticks = s.cases(&case).unwrap();
        let p: Vec<f64> = ticks.iter().map(|c| c.buses[1].p_demand).collect();
        assert_eq!(p, vec![5.0, 5.0, 6.5, 8.0]);
        assert!(ticks.iter().all(|c| c.buses[1].q_demand == 6.0));
    }

    #[test]
    fn schedule_gaps_and_overlaps_are_rejected() {
        let case = two_bus(0.1, 0.0);
        let seg = |a, b| Segment {
            t_from: a,
            t_to: b,
            bus: Target::Bus(2),
            field: Field::P,
            kind: SegmentKind::Constant,
            value: 1.0,
        };
        let gap = LoadSchedule { segments: vec![seg(1, 3), seg(5, 6)] };
        assert!(matches!(gap.validate(&case), Err(Error::Config(_))));
        let overlap = LoadSchedule { segments: vec![seg(1, 3), seg(3, 6)] };
        assert!(matches!(overlap.validate(&case), Err(Error::Config(_))));
        let zero = LoadSchedule { segments: vec![seg(0, 3)] };
        assert!(zero.validate(&case).is_err());
        assert!(matches!(
            LoadSchedule { segments: vec![] }.validate(&case),
            Err(Error::EmptyRequest(_))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let p = PmuPlacement::new(vec![3, 1]).unwrap();
        let w = MeasurementWindow {
            t_start: 1,
            dt: DEFAULT_DT,
            columns: vec![vec![1.0, 0.99, -0.1, 0.0], vec![0.98, 0.97, -0.2, 0.1]],
        };
        let mut buf = Vec::new();
        w.write_csv(&p, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,3_vm,1_vm,3_va,1_va\n"));
        let (p2, w2) = MeasurementWindow::read_csv(buf.as_slice()).unwrap();
        assert_eq!(p2, p);
        assert_eq!(w2, w);
    }
}
