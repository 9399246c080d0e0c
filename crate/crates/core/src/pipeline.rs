//! Offline dataset generation, alignment-data assembly and VCP evaluation
//! over sets of load directions.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cpflow::{trace_pv_curve, ContinuationOptions, LoadDirection, PVCurve};
use crate::error::{Error, Result};
use crate::grid::GridCase;
use crate::pmu::{curve_to_windows, MeasurementWindow, NoiseModel, PhasorVector, PmuPlacement, DEFAULT_DT};
use crate::stability::{align, estimate_vcp, extract_feature, mape, tick_rng, AlignmentMap, TemperatureConfig};
use crate::vae::VaeModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetRecipe {
    pub curves: usize,
    pub min_nodes: usize,
    pub max_nodes: usize,
    /// Chance that a chosen bus grows its reactive demand too.
    pub reactive_share: f64,
    /// Failed traces tolerated before generation gives up.
    pub max_failures: usize,
    pub noise: NoiseModel,
    pub continuation: ContinuationOptions,
}

impl Default for DatasetRecipe {
    fn default() -> Self {
        DatasetRecipe {
            curves: 40,
            min_nodes: 1,
            max_nodes: 3,
            reactive_share: 0.5,
            max_failures: 20,
            noise: NoiseModel::default(),
            continuation: ContinuationOptions::default(),
        }
    }
}

impl DatasetRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.curves == 0 {
            return Err(Error::EmptyRequest("dataset needs at least one curve".into()));
        }
        if self.min_nodes == 0 || self.min_nodes > self.max_nodes {
            return Err(Error::Config(format!(
                "node range {}..={} is empty",
                self.min_nodes, self.max_nodes
            )));
        }
        if !(0.0..=1.0).contains(&self.reactive_share) {
            return Err(Error::Config("reactive_share must lie in [0, 1]".into()));
        }
        self.noise.validate()?;
        self.continuation.validate()
    }
}

/// Random training direction: `min..=max` loaded PQ buses picked at random,
/// each taking a random share of the growth. λ = 1 adds the case's total
/// active demand. With probability `reactive_share` a chosen bus also grows
/// its reactive demand at the same rate.
/// Directions that coincide with single- or equal-pair active-only growth
/// are redrawn so evaluation directions stay out of training.
pub fn random_direction<R: Rng + ?Sized>(
    case: &GridCase,
    min_nodes: usize,
    max_nodes: usize,
    reactive_share: f64,
    rng: &mut R,
) -> Result<LoadDirection> {
    if !(0.0..=1.0).contains(&reactive_share) {
        return Err(Error::Config(format!("reactive_share {reactive_share} outside [0, 1]")));
    }
    let pool = case.loaded_pq_buses();
    if pool.len() < min_nodes {
        return Err(Error::Config(format!(
            "case has {} loaded PQ buses, fewer than {min_nodes}",
            pool.len()
        )));
    }
    let total = case.total_p_demand();
    for _ in 0..MAX_DRAWS {
        let n = rng.random_range(min_nodes..=max_nodes.min(pool.len()));
        let chosen: Vec<i64> = pool.choose_multiple(rng, n).copied().collect();
        let shares: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let sum: f64 = shares.iter().sum();
        let mut dir = LoadDirection::default();
        for (b, s) in chosen.iter().zip(&shares) {
            let bus = &case.buses[case.bus_position(*b)?];
            let k = s / sum * total / bus.p_demand;
            dir.k_p.insert(*b, k);
            if bus.q_demand > 0.0 && rng.random_bool(reactive_share) {
                dir.k_q.insert(*b, k);
            }
        }
        if !is_evaluation_direction(case, &dir) {
            return Ok(dir);
        }
    }
    Err(Error::Config(
        "every drawn direction coincides with an evaluation direction; allow more nodes or reactive growth".into(),
    ))
}

const MAX_DRAWS: usize = 10_000;

fn is_evaluation_direction(case: &GridCase, dir: &LoadDirection) -> bool {
    if !dir.k_q.is_empty() || !dir.k_g.is_empty() {
        return false;
    }
    let buses: Vec<i64> = dir.k_p.keys().copied().collect();
    match buses.len() {
        1 => true,
        2 => LoadDirection::uniform_active(case, &buses, case.total_p_demand())
            .map(|u| u.k_p.iter().all(|(b, k)| (dir.k_p[b] - k).abs() <= 1e-12 * k.abs()))
            .unwrap_or(false),
        _ => false,
    }
}

/// One traced curve as used for training: measurements plus the
/// reference coordinates (λ, V at the curve's critical bus) of every point.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingCurve {
    pub measurements: Vec<PhasorVector>,
    pub targets: Vec<[f64; 2]>,
}

impl TrainingCurve {
    pub fn from_curve(curve: &PVCurve, placement: &PmuPlacement, noise: &NoiseModel) -> Result<Self> {
        let crit = curve.critical_bus();
        let targets = curve
            .points
            .iter()
            .map(|p| Ok([p.lambda, p.solution.voltage(crit)?.0]))
            .collect::<Result<_>>()?;
        Ok(TrainingCurve {
            measurements: curve_to_windows(curve, placement, noise)?,
            targets,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveEntry {
    pub direction: LoadDirection,
    pub noise_seed: u64,
    pub lambda_max: f64,
    pub critical_bus: i64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedCurve {
    pub direction: LoadDirection,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub placement: PmuPlacement,
    pub recipe: DatasetRecipe,
    pub curves: Vec<CurveEntry>,
    pub skipped: Vec<SkippedCurve>,
}

/// Trace `recipe.curves` random curves. Directions and noise seeds are drawn
/// from `seed` in order; failed traces are logged, skipped and replaced.
pub fn generate_dataset(
    case: &GridCase,
    placement: &PmuPlacement,
    recipe: &DatasetRecipe,
    seed: u64,
) -> Result<(Manifest, Vec<TrainingCurve>)> {
    recipe.validate()?;
    placement.check(case)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    let mut data = Vec::new();
    let mut skipped = Vec::new();

    while entries.len() < recipe.curves {
        let need = recipe.curves - entries.len();
        let batch: Vec<(LoadDirection, u64)> = (0..need)
            .map(|_| Ok((random_direction(case, recipe.min_nodes, recipe.max_nodes, recipe.reactive_share, &mut rng)?, rng.next_u64())))
            .collect::<Result<_>>()?;
        let traced: Vec<Result<(CurveEntry, TrainingCurve)>> = batch
            .par_iter()
            .map(|(dir, noise_seed)| {
                let curve = trace_pv_curve(case, dir, &recipe.continuation)?;
                let noise = NoiseModel {
                    seed: *noise_seed,
                    ..recipe.noise
                };
                let tc = TrainingCurve::from_curve(&curve, placement, &noise)?;
                Ok((
                    CurveEntry {
                        direction: dir.clone(),
                        noise_seed: *noise_seed,
                        lambda_max: curve.lambda_max(),
                        critical_bus: curve.critical_bus(),
                        points: curve.points.len(),
                    },
                    tc,
                ))
            })
            .collect();
        for ((dir, _), r) in batch.into_iter().zip(traced) {
            match r {
                Ok((e, tc)) => {
                    entries.push(e);
                    data.push(tc);
                }
                Err(e) => {
                    log::warn!("skipping curve: {e}");
                    skipped.push(SkippedCurve {
                        direction: dir,
                        error: e.to_string(),
                    });
                    if skipped.len() > recipe.max_failures {
                        return Err(e);
                    }
                }
            }
        }
    }
    let manifest = Manifest {
        seed,
        placement: placement.clone(),
        recipe: *recipe,
        curves: entries,
        skipped,
    };
    Ok((manifest, data))
}

/// Features and reference coordinates stacked row-wise over all curves.
/// Tick numbering restarts at 1 on every curve.
pub fn alignment_rows(
    model: &VaeModel,
    curves: &[TrainingCurve],
    temp: &TemperatureConfig,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, Vec<[f64; 2]>)> {
    let mut z = Vec::new();
    let mut c = Vec::new();
    for curve in curves {
        for (k, (x, target)) in curve.measurements.iter().zip(&curve.targets).enumerate() {
            z.push(extract_feature(model, x, temp, &mut tick_rng(seed, k + 1))?.z_hat);
            c.push(*target);
        }
    }
    Ok((z, c))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// One bus's active demand grows alone.
    Sli,
    /// Two buses' active demand grows together.
    Dli,
}

impl std::str::FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sli" => Ok(Scenario::Sli),
            "dli" => Ok(Scenario::Dli),
            _ => Err(Error::Config(format!("unknown scenario `{s}` (expected sli or dli)"))),
        }
    }
}

/// Evaluation directions: every loaded PQ bus alone, or every unordered pair
/// of them with equal rates. λ = 1 adds the case's total active demand.
pub fn evaluation_directions(case: &GridCase, scenario: Scenario) -> Result<Vec<(Vec<i64>, LoadDirection)>> {
    let pool = case.loaded_pq_buses();
    let total = case.total_p_demand();
    let groups: Vec<Vec<i64>> = match scenario {
        Scenario::Sli => pool.iter().map(|&b| vec![b]).collect(),
        Scenario::Dli => {
            let mut g = Vec::new();
            for i in 0..pool.len() {
                for j in i + 1..pool.len() {
                    g.push(vec![pool[i], pool[j]]);
                }
            }
            g
        }
    };
    if groups.is_empty() {
        return Err(Error::EmptyRequest("case has no qualifying load buses".into()));
    }
    groups
        .into_iter()
        .map(|g| {
            let d = LoadDirection::uniform_active(case, &g, total)?;
            Ok((g, d))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub temperature: TemperatureConfig,
    pub seed: u64,
    pub noise: NoiseModel,
    pub continuation: ContinuationOptions,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            temperature: TemperatureConfig { phi: 0.0 },
            seed: 0,
            noise: NoiseModel::none(),
            continuation: ContinuationOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCase {
    pub buses: Vec<i64>,
    pub lambda_real: f64,
    pub lambda_pre: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario: Scenario,
    pub seed: u64,
    pub phi: f64,
    pub cases: Vec<EvalCase>,
    /// Over the cases with an estimate.
    pub mape: Option<f64>,
    pub failed: usize,
}

/// Trace each direction, replay the whole curve through the model and read
/// the estimated collapse point off the aligned loading coordinate.
pub fn evaluate_vcp(
    case: &GridCase,
    model: &VaeModel,
    map: &AlignmentMap,
    placement: &PmuPlacement,
    scenario: Scenario,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    placement.check(case)?;
    cfg.temperature.validate()?;
    let dirs = evaluation_directions(case, scenario)?;
    let cases: Vec<EvalCase> = dirs
        .par_iter()
        .enumerate()
        .map(|(i, (buses, dir))| {
            let noise = NoiseModel {
                seed: cfg.noise.seed.wrapping_add(i as u64),
                ..cfg.noise
            };
            match replay_direction(case, model, map, placement, dir, &noise, cfg) {
                Ok((real, pre)) => EvalCase {
                    buses: buses.clone(),
                    lambda_real: real,
                    lambda_pre: pre.as_ref().ok().copied(),
                    error: pre.err().map(|e| e.to_string()),
                },
                Err(e) => EvalCase {
                    buses: buses.clone(),
                    lambda_real: f64::NAN,
                    lambda_pre: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let (pre, real): (Vec<f64>, Vec<f64>) = cases
        .iter()
        .filter_map(|c| c.lambda_pre.map(|p| (p, c.lambda_real)))
        .unzip();
    let failed = cases.len() - pre.len();
    Ok(EvalReport {
        scenario,
        seed: cfg.seed,
        phi: cfg.temperature.phi,
        mape: if pre.is_empty() { None } else { Some(mape(&pre, &real)?) },
        failed,
        cases,
    })
}

fn replay_direction(
    case: &GridCase,
    model: &VaeModel,
    map: &AlignmentMap,
    placement: &PmuPlacement,
    dir: &LoadDirection,
    noise: &NoiseModel,
    cfg: &EvalConfig,
) -> Result<(f64, Result<f64>)> {
    let curve = trace_pv_curve(case, dir, &cfg.continuation)?;
    let stream = curve_to_windows(&curve, placement, noise)?;
    let series = stream
        .iter()
        .enumerate()
        .map(|(k, x)| {
            let f = extract_feature(model, x, &cfg.temperature, &mut tick_rng(cfg.seed, k + 1))?;
            align(map, &f.z_hat)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((curve.lambda_max(), estimate_vcp(&series).map(|e| e.lambda_pre)))
}

/// Buses named by a direction, for reporting.
pub fn direction_buses(dir: &LoadDirection) -> Vec<i64> {
    let b: BTreeSet<i64> = dir.k_p.keys().chain(dir.k_q.keys()).copied().collect();
    b.into_iter().collect()
}

/// File names inside a dataset directory.
pub const MANIFEST_FILE: &str = "manifest.json";

fn curve_file(i: usize) -> String {
    format!("curve_{i:03}.csv")
}

fn target_file(i: usize) -> String {
    format!("curve_{i:03}_targets.csv")
}

/// Write the manifest plus one measurement CSV and one `lambda,v_critical`
/// CSV per curve.
pub fn write_dataset(dir: &Path, manifest: &Manifest, curves: &[TrainingCurve]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(manifest)?)?;
    for (i, c) in curves.iter().enumerate() {
        let window = MeasurementWindow {
            t_start: 1,
            dt: DEFAULT_DT,
            columns: c.measurements.clone(),
        };
        window.write_csv(&manifest.placement, std::fs::File::create(dir.join(curve_file(i)))?)?;
        let mut w = csv::Writer::from_path(dir.join(target_file(i)))?;
        w.write_record(["lambda", "v_critical"])?;
        for [l, v] in &c.targets {
            w.write_record([l.to_string(), v.to_string()])?;
        }
        w.flush()?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<TrainingCurve>)> {
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let mut curves = Vec::with_capacity(manifest.curves.len());
    for i in 0..manifest.curves.len() {
        let (placement, window) = MeasurementWindow::read_csv(std::fs::File::open(dir.join(curve_file(i)))?)?;
        if placement != manifest.placement {
            return Err(Error::Config(format!("{} does not match the manifest placement", curve_file(i))));
        }
        let mut r = csv::Reader::from_path(dir.join(target_file(i)))?;
        let targets = r
            .deserialize::<(f64, f64)>()
            .map(|row| row.map(|(l, v)| [l, v]).map_err(Error::from))
            .collect::<Result<Vec<_>>>()?;
        if targets.len() != window.columns.len() {
            return Err(Error::DimensionMismatch {
                expected: window.columns.len(),
                got: targets.len(),
            });
        }
        curves.push(TrainingCurve {
            measurements: window.columns,
            targets,
        });
    }
    Ok((manifest, curves))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridCase;

    fn case14() -> GridCase {
        GridCase::from_file(concat!(env!("CARGO_MANIFEST_DIR"), "/data/case14.m")).unwrap()
    }

    #[test]
    fn random_directions_add_total_demand_at_unit_lambda() {
        let case = case14();
        let total = case.total_p_demand();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let d = random_direction(&case, 1, 3, 0.5, &mut rng).unwrap();
            assert!((1..=3).contains(&d.k_p.len()));
            let added: f64 = d
                .k_p
                .iter()
                .map(|(b, k)| k * case.buses[case.bus_position(*b).unwrap()].p_demand)
                .sum();
            assert!((added - total).abs() < 1e-9 * total);
            assert!(!is_evaluation_direction(&case, &d));
        }
    }

    #[test]
    fn sli_enumerates_loaded_pq_buses() {
        let case = case14();
        let sli = evaluation_directions(&case, Scenario::Sli).unwrap();
        let buses: Vec<i64> = sli.iter().map(|(b, _)| b[0]).collect();
        assert_eq!(buses, vec![4, 5, 9, 10, 11, 12, 13, 14]);
        let dli = evaluation_directions(&case, Scenario::Dli).unwrap();
        assert_eq!(dli.len(), 28);
        for (_, d) in sli.iter().chain(&dli) {
            assert!(is_evaluation_direction(&case, d));
        }
    }

    #[test]
    fn zero_curves_is_an_empty_request() {
        let case = case14();
        let recipe = DatasetRecipe {
            curves: 0,
            ..Default::default()
        };
        let p = PmuPlacement::preset("case14").unwrap();
        assert!(matches!(generate_dataset(&case, &p, &recipe, 1), Err(Error::EmptyRequest(_))));
    }
}
